"""Differentiable search over per-layer mixer assignments.

Routing: each searchable layer (every layer except layer 0, which stays
FULL during search) carries a logit vector over the candidate set; the
temperature-scaled softmax of those logits weights a soft mixture of the
candidate outputs. The loss is a teacher KL term plus a relative-cost
term; only the logits are optimized, all model weights stay frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tape
from .model import (
    HybridArch,
    ModelSpec,
    OperatorKind,
    SoftArchPlan,
    SoftMixture,
    bind_params,
    model_forward,
    soft_mix,
)

__all__ = [
    "AMBIGUOUS_MARGIN",
    "ArchState",
    "FreezeViolation",
    "RoutingDiagnostics",
    "SearchConfig",
    "SearchResult",
    "anneal_schedule",
    "build_search_graph",
    "candidate_set",
    "cost_vector",
    "discretize",
    "expected_cost",
    "kl_distill_loss",
    "realized_budget",
    "routing_diagnostics",
    "routing_probs",
    "run_search",
    "search_micro_step",
    "soft_mix",
]

TRI_SPACE = (OperatorKind.FULL, OperatorKind.WINDOW, OperatorKind.LINEAR)
BINARY_SPACE = (OperatorKind.FULL, OperatorKind.LINEAR)

# Layers whose final top-1 margin falls below this are counted ambiguous.
AMBIGUOUS_MARGIN = 0.2


def candidate_set(space: str) -> tuple[OperatorKind, ...]:
    if space == "tri":
        return TRI_SPACE
    if space == "binary":
        return BINARY_SPACE
    raise ValueError(f"unknown candidate space {space!r}")


def cost_vector(candidates: tuple[OperatorKind, ...], window: int, seq_len: int) -> np.ndarray:
    """Relative attention cost per candidate: FULL=1, WINDOW=w/T, LINEAR=0."""
    costs = {
        OperatorKind.FULL: 1.0,
        OperatorKind.WINDOW: window / seq_len,
        OperatorKind.LINEAR: 0.0,
    }
    return np.array([costs[c] for c in candidates])


@dataclass
class SearchConfig:
    lam: float = 0.005
    tau: float = 1.0
    steps: int = 240
    grad_accum: int = 4
    micro_batch: int = 2
    seq_len: int = 128
    lr_alpha: float = 0.1
    t_arch_init: float = 1.0
    t_arch_final: float = 0.1
    anneal_steps: int | None = None
    anneal: bool = True
    space: str = "tri"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not self.t_arch_init >= self.t_arch_final > 0:
            raise ValueError("need t_arch_init >= t_arch_final > 0")
        candidate_set(self.space)


@dataclass
class ArchState:
    """Logits for layers 1..L-1 plus the current routing temperature."""

    alpha: np.ndarray
    candidates: tuple[OperatorKind, ...]
    t_arch: float
    n_layers: int

    @classmethod
    def fresh(cls, spec: ModelSpec, space: str, t_arch: float = 1.0) -> "ArchState":
        cands = candidate_set(space)
        return cls(
            alpha=np.zeros((spec.n_layers - 1, len(cands))),
            candidates=cands,
            t_arch=t_arch,
            n_layers=spec.n_layers,
        )

    def probs(self) -> np.ndarray:
        return np.stack([routing_probs(row, self.t_arch) for row in self.alpha])


def routing_probs(alpha_row: np.ndarray, t_arch: float) -> np.ndarray:
    """softmax(alpha / t_arch); temperature must be positive."""
    if t_arch <= 0:
        raise ValueError(f"t_arch must be > 0, got {t_arch}")
    z = np.asarray(alpha_row, dtype=np.float64) / t_arch
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def anneal_schedule(step: int, cfg: SearchConfig) -> float:
    """Geometric interpolation from t_arch_init down to t_arch_final."""
    if not cfg.anneal:
        return cfg.t_arch_init
    total = cfg.anneal_steps if cfg.anneal_steps is not None else cfg.steps
    if total <= 0 or step >= total:
        return cfg.t_arch_final
    frac = step / total
    return cfg.t_arch_init * (cfg.t_arch_final / cfg.t_arch_init) ** frac


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kl_distill_loss(tape: Tape, teacher_logits: np.ndarray, student_logits: int, tau: float) -> int:
    """Token-averaged, tau^2-scaled forward KL(teacher || student).

    The teacher distribution enters as a constant; gradients flow only
    into the student logits.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    z_s = tape.value(student_logits)
    if teacher_logits.shape != z_s.shape:
        raise ValueError(
            f"logit shapes differ: teacher {teacher_logits.shape}, student {z_s.shape}"
        )
    seq = teacher_logits.shape[0]
    p_t = _softmax_np(teacher_logits / tau)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p_t > 0, p_t * np.log(p_t), 0.0)
    entropy_term = float(plogp.sum()) * tau * tau / seq

    scaled = tape.apply("scale", student_logits, factor=1.0 / tau)
    log_q = tape.apply("log_softmax", scaled)
    cross = tape.apply("sum_all", tape.apply("mul", log_q, tape.constant(p_t)))
    loss = tape.apply("scale", cross, factor=-(tau * tau) / seq)
    return tape.apply("add", loss, tape.constant(np.asarray(entropy_term)))


def soft_arch_plan(tape: Tape, state: ArchState, trainable: bool = True):
    """Bind alpha on a tape and build the per-layer mixture plan.

    Layer 0 is held FULL and carries no logits. Returns the plan plus the
    alpha and probability node ids (one per searchable layer).
    """
    alpha_nodes: list[int] = []
    prob_nodes: list[int] = []
    layers: list = [OperatorKind.FULL]
    for row in state.alpha:
        a = tape.leaf(row, trainable=trainable)
        scaled = tape.apply("scale", a, factor=1.0 / state.t_arch)
        p = tape.apply("softmax", scaled)
        alpha_nodes.append(a)
        prob_nodes.append(p)
        layers.append(SoftMixture(probs=p, candidates=state.candidates))
    return SoftArchPlan(tuple(layers)), alpha_nodes, prob_nodes


def cost_loss_node(tape: Tape, prob_nodes: list[int], costs: np.ndarray) -> int:
    """Expected relative cost summed over searchable layers."""
    cost_const = tape.constant(costs)
    total = None
    for p in prob_nodes:
        term = tape.apply("sum_all", tape.apply("mul", p, cost_const))
        total = term if total is None else tape.apply("add", total, term)
    return total


def expected_cost(state: ArchState, costs: np.ndarray) -> float:
    return float((state.probs() * costs[None, :]).sum())


@dataclass
class SearchGraph:
    loss: int
    kl: int
    cost: int
    alpha_nodes: list[int]


def build_search_graph(
    tape: Tape,
    tokens: np.ndarray,
    teacher_logits: np.ndarray,
    params: dict[str, np.ndarray],
    state: ArchState,
    spec: ModelSpec,
    cfg: SearchConfig,
) -> SearchGraph:
    """One sequence's search loss: KL to the teacher plus lambda * cost."""
    bound = bind_params(tape, params, trainable=False)
    plan, alpha_nodes, prob_nodes = soft_arch_plan(tape, state)
    result = model_forward(tape, tokens, bound, spec, plan)
    kl = kl_distill_loss(tape, teacher_logits, result.logits, cfg.tau)
    costs = cost_vector(state.candidates, spec.window, cfg.seq_len)
    cost = cost_loss_node(tape, prob_nodes, costs)
    loss = tape.apply("add", kl, tape.apply("scale", cost, factor=cfg.lam))
    return SearchGraph(loss=loss, kl=kl, cost=cost, alpha_nodes=alpha_nodes)


class FreezeViolation(RuntimeError):
    """A non-architecture parameter received a gradient during search."""


def _teacher_logits(params: dict[str, np.ndarray], spec: ModelSpec, tokens: np.ndarray) -> np.ndarray:
    tape = Tape()
    bound = bind_params(tape, params, trainable=False)
    result = model_forward(tape, tokens, bound, spec, HybridArch.all_full(spec.n_layers))
    return tape.value(result.logits)


def search_micro_step(
    state: ArchState,
    tokens: np.ndarray,
    params: dict[str, np.ndarray],
    spec: ModelSpec,
    cfg: SearchConfig,
) -> tuple[np.ndarray, float, float]:
    """Gradient of the search loss w.r.t. alpha for one sequence.

    Returns (alpha gradient, kl value, cost value). Raises
    :class:`FreezeViolation` if anything but alpha shows up in the
    gradient map.
    """
    teacher = _teacher_logits(params, spec, tokens)
    tape = Tape()
    graph = build_search_graph(tape, tokens, teacher, params, state, spec, cfg)
    grads = tape.backward(graph.loss)
    alpha_set = set(graph.alpha_nodes)
    stray = [n for n, g in grads.items() if n not in alpha_set and np.any(g != 0.0)]
    if stray or set(grads) - alpha_set:
        raise FreezeViolation(
            f"{len(set(grads) - alpha_set)} non-alpha parameters appeared in the gradient map"
        )
    grad = np.stack([grads[n] for n in graph.alpha_nodes])
    return grad, float(tape.value(graph.kl)), float(tape.value(graph.cost))


@dataclass
class SearchResult:
    state: ArchState
    arch: HybridArch
    diagnostics: "RoutingDiagnostics"
    log: list[tuple[int, float, float, float, float]]  # step, kl, cost, loss, t_arch


def run_search(
    params: dict[str, np.ndarray],
    spec: ModelSpec,
    cfg: SearchConfig,
    train_tokens: np.ndarray,
    progress=None,
) -> SearchResult:
    """Full Stage-2 run: anneal, accumulate, update alpha only."""
    from .training import AdamW, sample_batch  # local import to avoid a cycle

    rng = np.random.default_rng(cfg.seed)
    state = ArchState.fresh(spec, cfg.space, t_arch=anneal_schedule(0, cfg))
    alpha_param = {"alpha": state.alpha}
    opt = AdamW(alpha_param, lr=cfg.lr_alpha, weight_decay=0.0)
    log: list[tuple[int, float, float, float, float]] = []
    accum = np.zeros_like(state.alpha)
    n_accum = 0
    for step in range(cfg.steps):
        state.t_arch = anneal_schedule(step, cfg)
        batch = sample_batch(train_tokens, cfg.micro_batch, cfg.seq_len, rng)
        kl_avg = 0.0
        cost_avg = 0.0
        for seq in batch:
            grad, kl, cost = search_micro_step(state, seq, params, spec, cfg)
            accum += grad / cfg.micro_batch
            kl_avg += kl / cfg.micro_batch
            cost_avg += cost / cfg.micro_batch
        n_accum += 1
        log.append((step, kl_avg, cost_avg, kl_avg + cfg.lam * cost_avg, state.t_arch))
        if n_accum == cfg.grad_accum or step == cfg.steps - 1:
            opt.step({"alpha": accum / n_accum})
            accum[:] = 0.0
            n_accum = 0
        if progress is not None:
            progress(step, log[-1])
    state.t_arch = anneal_schedule(cfg.steps, cfg)
    return SearchResult(
        state=state,
        arch=discretize(state),
        diagnostics=routing_diagnostics(state),
        log=log,
    )


# ---------------------------------------------------------------------------
# Discretization, budget, diagnostics
# ---------------------------------------------------------------------------


def discretize(state: ArchState) -> HybridArch:
    """Per-layer argmax of the final routing probabilities.

    Exact ties go to the cheaper operator; candidate tuples are declared
    in decreasing cost order, so that is the highest tied index. Layer 0
    is instantiated LINEAR in the final architecture.
    """
    ops = [OperatorKind.LINEAR]
    for row in state.probs():
        top = row.max()
        tied = np.flatnonzero(row == top)
        ops.append(state.candidates[int(tied[-1])])
    return HybridArch(tuple(ops))


def realized_budget(arch: HybridArch, window: int, seq_len: int) -> float:
    """n_FULL + (window / seq_len) * n_WINDOW for the instantiated model."""
    return arch.count(OperatorKind.FULL) + (window / seq_len) * arch.count(OperatorKind.WINDOW)


@dataclass
class RoutingDiagnostics:
    """Soft-to-hard conversion confidence, searchable layers only."""

    entropy: np.ndarray
    top1: np.ndarray
    margin: np.ndarray
    avg_entropy: float = field(init=False)
    avg_top1: float = field(init=False)
    avg_margin: float = field(init=False)
    ambiguous: int = field(init=False)

    def __post_init__(self) -> None:
        self.avg_entropy = float(self.entropy.mean())
        self.avg_top1 = float(self.top1.mean())
        self.avg_margin = float(self.margin.mean())
        self.ambiguous = int((self.margin < AMBIGUOUS_MARGIN).sum())


def routing_diagnostics(state: ArchState) -> RoutingDiagnostics:
    probs = state.probs()
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0, probs * np.log(probs), 0.0)
    entropy = -plogp.sum(axis=1)
    ordered = np.sort(probs, axis=1)[:, ::-1]
    return RoutingDiagnostics(
        entropy=entropy,
        top1=ordered[:, 0],
        margin=ordered[:, 0] - ordered[:, 1],
    )


def replace_lambda(cfg: SearchConfig, lam: float, seed: int | None = None) -> SearchConfig:
    """Convenience for sweep drivers."""
    if seed is None:
        return replace(cfg, lam=lam)
    return replace(cfg, lam=lam, seed=seed)
