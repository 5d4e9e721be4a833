"""Training loops: teacher pretraining, linear-candidate alignment, and
final distillation of a discrete hybrid student."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tape
from .model import (
    HybridArch,
    ModelSpec,
    bind_params,
    init_params,
    linear_param_names,
    model_forward,
    params_used_by,
)
from .search import kl_distill_loss

STAGES = ("teacher", "align", "distill")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; training is aborted with context."""


@dataclass
class TrainConfig:
    stage: str
    steps: int
    batch: int
    seq_len: int
    lr_main: float
    lr_attn_op: float = 1e-3
    weight_decay: float = 0.01
    schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        # steps == 0 is allowed and returns the initialization unchanged.
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr_main <= 0 or self.lr_attn_op <= 0:
            raise ValueError("learning rates must be > 0")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"schedule must be cosine or constant, got {self.schedule!r}")


WARMUP_FRACTION = 0.03


def lr_scale(step: int, total: int, schedule: str) -> float:
    """Cosine decay to ~0 or constant, both with a short linear warmup."""
    warmup = max(1, int(total * WARMUP_FRACTION))
    if step < warmup and total > warmup:
        return (step + 1) / warmup
    if schedule == "constant" or total <= 1:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * step / (total - 1)))


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay.

    ``lr`` is a float or a callable mapping parameter name to a rate,
    which is how the two stage-3 learning-rate groups are expressed.
    Updates mutate the parameter arrays in place.
    """

    def __init__(
        self,
        params: dict[str, np.ndarray],
        lr: float | Callable[[str], float],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ) -> None:
        self.params = params
        self._lr = lr if callable(lr) else (lambda name, _lr=lr: _lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {k: np.zeros_like(v) for k, v in params.items()}
        self._v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, g in grads.items():
            p = self.params[name]
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            lr = self._lr(name) * scale
            p -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay:
                p -= lr * self.weight_decay * p


def sample_batch(tokens: np.ndarray, n: int, seq_len: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n windows of seq_len + 1 tokens (inputs plus shifted targets)."""
    span = seq_len + 1
    if tokens.size < span:
        raise ValueError(f"corpus of {tokens.size} tokens too short for seq_len {seq_len}")
    starts = rng.integers(0, tokens.size - span, size=n)
    return np.stack([tokens[s : s + span] for s in starts])


def next_token_loss(tape: Tape, logits: int, targets: np.ndarray) -> int:
    """Mean cross-entropy of the shifted targets."""
    seq, vocab = tape.value(logits).shape
    onehot = np.zeros((seq, vocab))
    onehot[np.arange(seq), targets] = 1.0
    log_probs = tape.apply("log_softmax", logits)
    picked = tape.apply("sum_all", tape.apply("mul", log_probs, tape.constant(onehot)))
    return tape.apply("scale", picked, factor=-1.0 / seq)


def _teacher_pass(params, spec, tokens):
    """Frozen all-FULL forward; returns (logits, post-mixer states)."""
    tape = Tape()
    bound = bind_params(tape, params, trainable=False)
    result = model_forward(tape, tokens, bound, spec, HybridArch.all_full(spec.n_layers))
    return tape.value(result.logits), [tape.value(u) for u in result.post_mixer]


def _accumulate(grads_total: dict[str, np.ndarray], grads: dict[int, np.ndarray], names: dict[int, str], weight: float) -> None:
    for node, g in grads.items():
        name = names[node]
        if name in grads_total:
            grads_total[name] += weight * g
        else:
            grads_total[name] = weight * g


History = list[tuple[int, float, float]]  # (step, loss, lr)


def write_loss_csv(history: History, path) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss,lr\n")
        for step, loss, lr in history:
            fh.write(f"{step},{loss:.10g},{lr:.10g}\n")


def _check_finite(loss: float, stage: str, step: int) -> None:
    if not math.isfinite(loss):
        raise TrainingDiverged(f"{stage} loss became {loss} at step {step}")


def train_teacher(
    tokens: np.ndarray, spec: ModelSpec, cfg: TrainConfig
) -> tuple[dict[str, np.ndarray], History]:
    """Cross-entropy pretraining of the all-FULL teacher.

    Linear-candidate weights exist in the returned dict but are untouched
    here; stage 1 trains them later.
    """
    rng = np.random.default_rng(cfg.seed)
    params = init_params(spec, rng)
    arch = HybridArch.all_full(spec.n_layers)
    trainable = params_used_by(spec, arch)
    opt = AdamW(params, lr=cfg.lr_main, weight_decay=cfg.weight_decay)
    history: History = []
    for step in range(cfg.steps):
        scale = lr_scale(step, cfg.steps, cfg.schedule)
        batch = sample_batch(tokens, cfg.batch, cfg.seq_len, rng)
        grads_total: dict[str, np.ndarray] = {}
        loss_avg = 0.0
        for seq in batch:
            tape = Tape()
            bound = bind_params(tape, params, trainable=trainable)
            result = model_forward(tape, seq[:-1], bound, spec, arch)
            loss = next_token_loss(tape, result.logits, seq[1:])
            loss_avg += float(tape.value(loss)) / cfg.batch
            names = {node: name for name, node in bound.items()}
            _accumulate(grads_total, tape.backward(loss), names, 1.0 / cfg.batch)
        _check_finite(loss_avg, "teacher", step)
        opt.step(grads_total, scale=scale)
        history.append((step, loss_avg, cfg.lr_main * scale))
    return params, history


def align_loss_value(
    params: dict[str, np.ndarray], spec: ModelSpec, tokens: np.ndarray
) -> float:
    """Alignment objective evaluated without touching any weights."""
    tape, loss, _, _ = _align_graph(params, spec, tokens, trainable=frozenset())
    return float(tape.value(loss))


def _align_graph(params, spec, tokens, trainable):
    teacher_logits, teacher_post = _teacher_pass(params, spec, tokens)
    tape = Tape()
    bound = bind_params(tape, params, trainable=trainable)
    result = model_forward(tape, tokens, bound, spec, HybridArch.all_linear(spec.n_layers))
    seq = len(tokens)
    total = None
    for u_node, u_teacher in zip(result.post_mixer, teacher_post):
        diff = tape.apply("sub", tape.constant(u_teacher), u_node)
        term = tape.apply("scale", tape.apply("sq_frobenius", diff), factor=1.0 / seq)
        total = term if total is None else tape.apply("add", total, term)
    return tape, total, bound, teacher_logits


def stage1_align_step(
    batch: np.ndarray,
    params: dict[str, np.ndarray],
    spec: ModelSpec,
    opt: AdamW,
    scale: float = 1.0,
) -> float:
    """One alignment update: hidden-state match, linear weights only."""
    trainable = linear_param_names(spec)
    grads_total: dict[str, np.ndarray] = {}
    loss_avg = 0.0
    for seq in batch:
        tape, loss, bound, _ = _align_graph(params, spec, seq, trainable)
        loss_avg += float(tape.value(loss)) / len(batch)
        names = {node: name for name, node in bound.items()}
        _accumulate(grads_total, tape.backward(loss), names, 1.0 / len(batch))
    opt.step(grads_total, scale=scale)
    return loss_avg


def run_align(
    tokens: np.ndarray,
    teacher_params: dict[str, np.ndarray],
    spec: ModelSpec,
    cfg: TrainConfig,
) -> tuple[dict[str, np.ndarray], History]:
    """Stage 1: produce teacher-aligned linear candidates.

    Returns a copy of the teacher parameters in which only the linear
    modules have been trained.
    """
    rng = np.random.default_rng(cfg.seed)
    params = {k: v.copy() for k, v in teacher_params.items()}
    opt = AdamW(params, lr=cfg.lr_attn_op, weight_decay=cfg.weight_decay)
    history: History = []
    for step in range(cfg.steps):
        scale = lr_scale(step, cfg.steps, cfg.schedule)
        batch = sample_batch(tokens, cfg.batch, cfg.seq_len, rng)[:, :-1]
        loss = stage1_align_step(batch, params, spec, opt, scale=scale)
        _check_finite(loss, "align", step)
        history.append((step, loss, cfg.lr_attn_op * scale))
    return params, history


def stage3_distill_step(
    batch: np.ndarray,
    teacher_params: dict[str, np.ndarray],
    params: dict[str, np.ndarray],
    arch: HybridArch,
    spec: ModelSpec,
    opt: AdamW,
    tau: float = 1.0,
    scale: float = 1.0,
) -> float:
    """One distillation update on the discrete student.

    Every parameter the architecture actually uses is trained; passing a
    soft plan here is an error because stage 3 is discrete by contract.
    """
    if not isinstance(arch, HybridArch):
        raise TypeError("stage 3 requires a discrete HybridArch, not a soft plan")
    trainable = params_used_by(spec, arch)
    grads_total: dict[str, np.ndarray] = {}
    loss_avg = 0.0
    for seq in batch:
        teacher_logits, _ = _teacher_pass(teacher_params, spec, seq)
        tape = Tape()
        bound = bind_params(tape, params, trainable=trainable)
        result = model_forward(tape, seq, bound, spec, arch)
        loss = kl_distill_loss(tape, teacher_logits, result.logits, tau)
        loss_avg += float(tape.value(loss)) / len(batch)
        names = {node: name for name, node in bound.items()}
        _accumulate(grads_total, tape.backward(loss), names, 1.0 / len(batch))
    opt.step(grads_total, scale=scale)
    return loss_avg


def mixer_lr(cfg: TrainConfig) -> Callable[[str], float]:
    """Attention-operator parameters get their own rate; the rest lr_main."""

    def rate(name: str) -> float:
        return cfg.lr_attn_op if ".attn." in name or ".linear." in name else cfg.lr_main

    return rate


def run_distill(
    tokens: np.ndarray,
    teacher_params: dict[str, np.ndarray],
    base_params: dict[str, np.ndarray],
    arch: HybridArch,
    spec: ModelSpec,
    cfg: TrainConfig,
    tau: float = 1.0,
) -> tuple[dict[str, np.ndarray], History]:
    """Stage 3: distill the discrete student from the teacher."""
    rng = np.random.default_rng(cfg.seed)
    params = {k: v.copy() for k, v in base_params.items()}
    opt = AdamW(params, lr=mixer_lr(cfg), weight_decay=cfg.weight_decay)
    history: History = []
    for step in range(cfg.steps):
        scale = lr_scale(step, cfg.steps, cfg.schedule)
        batch = sample_batch(tokens, cfg.batch, cfg.seq_len, rng)[:, :-1]
        loss = stage3_distill_step(batch, teacher_params, params, arch, spec, opt, tau=tau, scale=scale)
        _check_finite(loss, "distill", step)
        history.append((step, loss, cfg.lr_main * scale))
    return params, history


def run_training(
    cfg: TrainConfig,
    spec: ModelSpec,
    tokens: np.ndarray,
    *,
    teacher_params: dict[str, np.ndarray] | None = None,
    base_params: dict[str, np.ndarray] | None = None,
    arch: HybridArch | None = None,
    tau: float = 1.0,
) -> tuple[dict[str, np.ndarray], History]:
    """Dispatch on cfg.stage; deterministic given cfg.seed."""
    if cfg.stage == "teacher":
        return train_teacher(tokens, spec, cfg)
    if cfg.stage == "align":
        if teacher_params is None:
            raise ValueError("align stage needs teacher_params")
        return run_align(tokens, teacher_params, spec, cfg)
    if teacher_params is None or base_params is None or arch is None:
        raise ValueError("distill stage needs teacher_params, base_params, and arch")
    return run_distill(tokens, teacher_params, base_params, arch, spec, cfg, tau=tau)
