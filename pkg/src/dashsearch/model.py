"""Tiny decoder-only transformer with swappable per-layer sequence mixers.

Three mixer candidates exist at every layer: full causal attention,
windowed causal attention (same projection weights as full, different
mask), and a gated-delta linear recurrence with its own weights. A layer
can also run a probability-weighted soft combination of the candidates,
which is what the architecture search differentiates through.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import MASK_BLOCK, Tape


class OperatorKind(enum.Enum):
    FULL = "F"
    WINDOW = "W"
    LINEAR = "L"

    @property
    def mnemonic(self) -> str:
        return self.value


_MNEMONICS = {k.value: k for k in OperatorKind}


class SequenceTooLong(ValueError):
    """Input longer than the model's maximum sequence length."""


class TokenOutOfRange(ValueError):
    """Token id outside the vocabulary."""


@dataclass(frozen=True)
class ModelSpec:
    """Static architecture dimensions shared by teacher and students."""

    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 2
    vocab: int = 64
    max_seq: int = 160
    window: int = 16
    ffn_mult: int = 2

    def __post_init__(self) -> None:
        if self.n_layers < 2:
            raise ValueError("need at least 2 layers")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if not 1 <= self.window <= self.max_seq:
            raise ValueError("window must be in [1, max_seq]")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class HybridArch:
    """A discrete per-layer operator assignment."""

    ops: tuple[OperatorKind, ...]

    @classmethod
    def all_full(cls, n_layers: int) -> "HybridArch":
        return cls(tuple([OperatorKind.FULL] * n_layers))

    @classmethod
    def all_linear(cls, n_layers: int) -> "HybridArch":
        return cls(tuple([OperatorKind.LINEAR] * n_layers))

    @classmethod
    def from_string(cls, text: str) -> "HybridArch":
        try:
            return cls(tuple(_MNEMONICS[tok] for tok in text.split()))
        except KeyError as exc:
            raise ValueError(f"unknown operator mnemonic {exc.args[0]!r}") from None

    def to_string(self) -> str:
        return " ".join(op.mnemonic for op in self.ops)

    def count(self, kind: OperatorKind) -> int:
        return sum(1 for op in self.ops if op is kind)

    def replace(self, layer: int, kind: OperatorKind) -> "HybridArch":
        ops = list(self.ops)
        ops[layer] = kind
        return HybridArch(tuple(ops))

    def __len__(self) -> int:
        return len(self.ops)


@dataclass(frozen=True)
class SoftMixture:
    """Handle for a soft mixer: a probability node over the candidates."""

    probs: int
    candidates: tuple[OperatorKind, ...]


@dataclass(frozen=True)
class SoftArchPlan:
    """Per-layer mixer plan used during search (discrete or soft per layer)."""

    layers: tuple


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

_ATTN = ("wq", "wk", "wv", "wo")
_LINEAR = ("wq", "wk", "wv", "wo", "gate", "write")
_NORMS = ("norm1_gain", "norm1_bias", "norm2_gain", "norm2_bias")


def param_names(spec: ModelSpec) -> list[str]:
    names = ["tok_emb", "pos_emb", "final_gain", "final_bias", "out_proj"]
    for layer in range(spec.n_layers):
        names.extend(f"layers.{layer}.{n}" for n in _NORMS)
        names.extend(f"layers.{layer}.attn.{n}" for n in _ATTN)
        names.extend(f"layers.{layer}.linear.{n}" for n in _LINEAR)
        names.append(f"layers.{layer}.ffn.w1")
        names.append(f"layers.{layer}.ffn.w2")
    return names


def sinusoidal_positions(max_seq: int, d_model: int, scale: float = 0.05) -> np.ndarray:
    """Classic sin/cos position table, scaled to the embedding magnitude.

    Used as the *initialization* of the learned position embeddings:
    offset-based attention patterns are then linearly expressible from
    step one, which makes induction-style circuits form much faster at
    toy scale than a random init does.
    """
    pos = np.arange(max_seq)[:, None]
    dim = np.arange(d_model // 2)[None, :]
    angles = pos / (10000.0 ** (2 * dim / d_model))
    table = np.zeros((max_seq, d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d_model - d_model // 2])
    return scale * table


def init_params(spec: ModelSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Seeded initialization for every candidate operator at every layer."""
    d = spec.d_model
    h = spec.ffn_mult * d

    def mat(rows, cols, scale):
        return rng.normal(0.0, scale, size=(rows, cols))

    params: dict[str, np.ndarray] = {
        "tok_emb": mat(spec.vocab, d, 0.02),
        "pos_emb": sinusoidal_positions(spec.max_seq, d),
        "final_gain": np.ones(d),
        "final_bias": np.zeros(d),
        "out_proj": mat(d, spec.vocab, 1.0 / math.sqrt(d)),
    }
    proj = 1.0 / math.sqrt(d)
    for layer in range(spec.n_layers):
        p = f"layers.{layer}."
        params[p + "norm1_gain"] = np.ones(d)
        params[p + "norm1_bias"] = np.zeros(d)
        params[p + "norm2_gain"] = np.ones(d)
        params[p + "norm2_bias"] = np.zeros(d)
        for n in _ATTN:
            params[p + "attn." + n] = mat(d, d, proj)
        for n in ("wq", "wk", "wv", "wo"):
            params[p + "linear." + n] = mat(d, d, proj)
        params[p + "linear.gate"] = mat(d, spec.n_heads, proj)
        params[p + "linear.write"] = mat(d, spec.n_heads, proj)
        params[p + "ffn.w1"] = mat(d, h, proj)
        params[p + "ffn.w2"] = mat(h, d, 1.0 / math.sqrt(h))
    return params


def linear_param_names(spec: ModelSpec) -> set[str]:
    return {n for n in param_names(spec) if ".linear." in n}


def mixer_param_names(spec: ModelSpec) -> set[str]:
    return {n for n in param_names(spec) if ".linear." in n or ".attn." in n}


def params_used_by(spec: ModelSpec, arch: HybridArch) -> set[str]:
    """Names that actually contribute to a forward pass under ``arch``."""
    used = set()
    for name in param_names(spec):
        if ".attn." in name:
            layer = int(name.split(".")[1])
            if arch.ops[layer] is OperatorKind.LINEAR:
                continue
        elif ".linear." in name:
            layer = int(name.split(".")[1])
            if arch.ops[layer] is not OperatorKind.LINEAR:
                continue
        used.add(name)
    return used


def bind_params(tape: Tape, params: dict[str, np.ndarray], trainable) -> dict[str, int]:
    """Register parameters on a tape.

    ``trainable`` is either a bool covering everything or a set of names;
    everything else becomes a constant, which is how freeze contracts are
    enforced structurally (constants can never receive gradients).
    """
    if isinstance(trainable, bool):
        pred = lambda name: trainable
    else:
        pred = lambda name: name in trainable
    return {name: tape.leaf(arr, trainable=pred(name)) for name, arr in params.items()}


# ---------------------------------------------------------------------------
# Attention masks
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def causal_mask(seq: int) -> np.ndarray:
    mask = np.where(np.arange(seq)[None, :] > np.arange(seq)[:, None], MASK_BLOCK, 0.0)
    mask.setflags(write=False)
    return mask


@lru_cache(maxsize=64)
def window_mask(seq: int, window: int) -> np.ndarray:
    """Token t sees positions max(0, t - window + 1) .. t."""
    rows = np.arange(seq)[:, None]
    cols = np.arange(seq)[None, :]
    allowed = (cols <= rows) & (cols >= rows - window + 1)
    mask = np.where(allowed, 0.0, MASK_BLOCK)
    mask.setflags(write=False)
    return mask


# ---------------------------------------------------------------------------
# Mixers. All take the already-normalized layer input x (node id of a
# [T, d] tensor) plus the bound parameter map and return a [T, d] node.
# ---------------------------------------------------------------------------


def _heads(spec: ModelSpec):
    return [(h * spec.d_head, (h + 1) * spec.d_head) for h in range(spec.n_heads)]


def _masked_attention(tape, x, bound, prefix, spec, mask) -> int:
    q = tape.apply("matmul", x, bound[prefix + "wq"])
    k = tape.apply("matmul", x, bound[prefix + "wk"])
    v = tape.apply("matmul", x, bound[prefix + "wv"])
    outs = []
    for lo, hi in _heads(spec):
        qh = tape.apply("slice", q, axis=1, start=lo, stop=hi)
        kh = tape.apply("slice", k, axis=1, start=lo, stop=hi)
        vh = tape.apply("slice", v, axis=1, start=lo, stop=hi)
        scores = tape.apply("matmul", qh, tape.apply("transpose", kh))
        scores = tape.apply("scale", scores, factor=1.0 / math.sqrt(spec.d_head))
        probs = tape.apply("softmax", scores, mask=mask)
        outs.append(tape.apply("matmul", probs, vh))
    merged = outs[0] if len(outs) == 1 else tape.apply("concat", *outs, axis=1)
    return tape.apply("matmul", merged, bound[prefix + "wo"])


def full_attention(tape: Tape, x: int, bound: dict[str, int], layer: int, spec: ModelSpec) -> int:
    seq = tape.value(x).shape[0]
    if seq > spec.max_seq:
        raise SequenceTooLong(f"sequence length {seq} exceeds max_seq {spec.max_seq}")
    prefix = f"layers.{layer}.attn."
    return _masked_attention(tape, x, bound, prefix, spec, causal_mask(seq))


def window_attention(
    tape: Tape, x: int, bound: dict[str, int], layer: int, spec: ModelSpec, window: int | None = None
) -> int:
    window = spec.window if window is None else window
    if window < 1:
        raise ValueError(f"window size must be >= 1, got {window}")
    seq = tape.value(x).shape[0]
    prefix = f"layers.{layer}.attn."
    return _masked_attention(tape, x, bound, prefix, spec, window_mask(seq, window))


def linear_attention(tape: Tape, x: int, bound: dict[str, int], layer: int, spec: ModelSpec) -> int:
    """Gated delta recurrence per head; keys are L2-normalized."""
    prefix = f"layers.{layer}.linear."
    seq = tape.value(x).shape[0]
    q = tape.apply("matmul", x, bound[prefix + "wq"])
    k = tape.apply("matmul", x, bound[prefix + "wk"])
    v = tape.apply("matmul", x, bound[prefix + "wv"])
    gates = tape.apply("sigmoid", tape.apply("matmul", x, bound[prefix + "gate"]))
    writes = tape.apply("sigmoid", tape.apply("matmul", x, bound[prefix + "write"]))
    outs = []
    for h, (lo, hi) in enumerate(_heads(spec)):
        qh = tape.apply("slice", q, axis=1, start=lo, stop=hi)
        kh = tape.apply("l2_normalize", tape.apply("slice", k, axis=1, start=lo, stop=hi))
        vh = tape.apply("slice", v, axis=1, start=lo, stop=hi)
        gh = tape.apply("reshape", tape.apply("slice", gates, axis=1, start=h, stop=h + 1), shape=(seq,))
        bh = tape.apply("reshape", tape.apply("slice", writes, axis=1, start=h, stop=h + 1), shape=(seq,))
        outs.append(tape.apply("gated_delta_scan", qh, kh, vh, gh, bh))
    merged = outs[0] if len(outs) == 1 else tape.apply("concat", *outs, axis=1)
    return tape.apply("matmul", merged, bound[prefix + "wo"])


_MIXERS = {
    OperatorKind.FULL: full_attention,
    OperatorKind.WINDOW: window_attention,
    OperatorKind.LINEAR: linear_attention,
}


class MixProbsError(ValueError):
    """Soft-mix probabilities do not form a distribution."""


def soft_mix(tape: Tape, x: int, bound: dict[str, int], layer: int, spec: ModelSpec, mixture: SoftMixture) -> int:
    """Probability-weighted sum of all candidate outputs on the same input."""
    probs = tape.value(mixture.probs)
    if probs.shape != (len(mixture.candidates),):
        raise MixProbsError(
            f"probs shape {probs.shape} for {len(mixture.candidates)} candidates"
        )
    if abs(float(probs.sum()) - 1.0) > 1e-9:
        raise MixProbsError(f"probs sum to {float(probs.sum()):.12f}, expected 1")
    total = None
    for i, kind in enumerate(mixture.candidates):
        out = _MIXERS[kind](tape, x, bound, layer, spec)
        weight = tape.apply("slice", mixture.probs, axis=0, start=i, stop=i + 1)
        term = tape.apply("mul", out, weight)
        total = term if total is None else tape.apply("add", total, term)
    return total


def _affine_norm(tape, x, gain, bias) -> int:
    normed = tape.apply("layer_norm", x)
    return tape.apply("add", tape.apply("mul", normed, gain), bias)


def block_forward(tape: Tape, x: int, bound: dict[str, int], layer: int, spec: ModelSpec, mixer) -> tuple[int, int]:
    """One residual block. Returns (next hidden state, post-mixer state).

    The post-mixer state (input + mixer output, before the FFN half) is
    what hidden-state alignment trains against.
    """
    p = f"layers.{layer}."
    normed = _affine_norm(tape, x, bound[p + "norm1_gain"], bound[p + "norm1_bias"])
    if isinstance(mixer, SoftMixture):
        mixed = soft_mix(tape, normed, bound, layer, spec, mixer)
    else:
        mixed = _MIXERS[mixer](tape, normed, bound, layer, spec)
    u = tape.apply("add", x, mixed)
    normed2 = _affine_norm(tape, u, bound[p + "norm2_gain"], bound[p + "norm2_bias"])
    hidden = tape.apply("silu", tape.apply("matmul", normed2, bound[p + "ffn.w1"]))
    ffn = tape.apply("matmul", hidden, bound[p + "ffn.w2"])
    return tape.apply("add", u, ffn), u


@dataclass
class ForwardResult:
    logits: int
    post_mixer: list[int]


def model_forward(tape: Tape, tokens, bound: dict[str, int], spec: ModelSpec, arch) -> ForwardResult:
    """Embed, run all blocks per ``arch``, final norm, project to logits.

    ``arch`` is a :class:`HybridArch` or a :class:`SoftArchPlan` whose
    entries are OperatorKind or SoftMixture per layer.
    """
    tokens = np.asarray(tokens)
    seq = tokens.shape[0]
    if seq > spec.max_seq:
        raise SequenceTooLong(f"sequence length {seq} exceeds max_seq {spec.max_seq}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= spec.vocab):
        raise TokenOutOfRange(f"token ids must be in [0, {spec.vocab})")
    layers = arch.ops if isinstance(arch, HybridArch) else arch.layers
    if len(layers) != spec.n_layers:
        raise ValueError(f"arch has {len(layers)} layers, model has {spec.n_layers}")

    emb = tape.apply("embedding", bound["tok_emb"], ids=tokens)
    pos = tape.apply("slice", bound["pos_emb"], axis=0, start=0, stop=seq)
    x = tape.apply("add", emb, pos)
    post = []
    for layer, mixer in enumerate(layers):
        x, u = block_forward(tape, x, bound, layer, spec, mixer)
        post.append(u)
    final = _affine_norm(tape, x, bound["final_gain"], bound["final_bias"])
    logits = tape.apply("matmul", final, bound["out_proj"])
    return ForwardResult(logits=logits, post_mixer=post)


@dataclass
class ModelHandle:
    """A (params, spec, arch) triple with inference-only helpers."""

    spec: ModelSpec
    params: dict[str, np.ndarray]
    arch: HybridArch

    def _forward(self, tokens) -> tuple[Tape, ForwardResult]:
        tape = Tape()
        bound = bind_params(tape, self.params, trainable=False)
        return tape, model_forward(tape, tokens, bound, self.spec, self.arch)

    def logits(self, tokens) -> np.ndarray:
        tape, result = self._forward(tokens)
        return tape.value(result.logits)

    def post_mixer_states(self, tokens) -> list[np.ndarray]:
        tape, result = self._forward(tokens)
        return [tape.value(node) for node in result.post_mixer]
