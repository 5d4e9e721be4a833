"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records primitive applications eagerly (forward values are
computed at record time) and replays them once in reverse to accumulate
vector-Jacobian products. The primitive set is exactly what the
transformer, the soft mixer, and the search loss need; everything is
float64 so central finite differences are a usable oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import kernels

# Additive mask value for disallowed attention edges. Large but finite so
# gradients stay well-defined; rows where every entry is blocked are
# defined to produce an all-zero softmax output.
MASK_BLOCK = -1e9

LAYER_NORM_EPS = 1e-5
L2_NORM_EPS = 1e-8


class ShapeError(ValueError):
    """Primitive inputs do not satisfy its shape rule."""


class NonScalarLossError(ValueError):
    """backward() was asked to differentiate a non-scalar node."""


def _f64(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    # ascontiguousarray would promote 0-d scalars to shape (1,)
    if arr.ndim and not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting introduced."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Primitive registry. forward(values, attrs) -> (output, cache);
# vjp(values, output, grad, attrs, cache) -> per-input gradients.
# ---------------------------------------------------------------------------


class Primitive(NamedTuple):
    forward: Callable
    vjp: Callable


PRIMITIVES: dict[str, Primitive] = {}


def _register(name: str, forward: Callable, vjp: Callable) -> None:
    PRIMITIVES[name] = Primitive(forward, vjp)


def _add_fwd(vals, attrs):
    a, b = vals
    return a + b, None


def _add_vjp(vals, out, g, attrs, cache):
    a, b = vals
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_fwd(vals, attrs):
    a, b = vals
    return a - b, None


def _sub_vjp(vals, out, g, attrs, cache):
    a, b = vals
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _mul_fwd(vals, attrs):
    a, b = vals
    return a * b, None


def _mul_vjp(vals, out, g, attrs, cache):
    a, b = vals
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _scale_fwd(vals, attrs):
    (a,) = vals
    return a * attrs["factor"], None


def _scale_vjp(vals, out, g, attrs, cache):
    return (g * attrs["factor"],)


def _matmul_fwd(vals, attrs):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    return a @ b, None


def _matmul_vjp(vals, out, g, attrs, cache):
    a, b = vals
    return g @ b.T, a.T @ g


def _transpose_fwd(vals, attrs):
    (a,) = vals
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return np.ascontiguousarray(a.T), None


def _transpose_vjp(vals, out, g, attrs, cache):
    return (np.ascontiguousarray(g.T),)


def _reshape_fwd(vals, attrs):
    (a,) = vals
    shape = tuple(attrs["shape"])
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return a.reshape(shape), None


def _reshape_vjp(vals, out, g, attrs, cache):
    return (g.reshape(vals[0].shape),)


def _slice_fwd(vals, attrs):
    (a,) = vals
    axis, start, stop = attrs["axis"], attrs["start"], attrs["stop"]
    if axis >= a.ndim or stop > a.shape[axis] or start < 0 or start >= stop:
        raise ShapeError(
            f"slice: range [{start},{stop}) on axis {axis} invalid for shape {a.shape}"
        )
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    return np.ascontiguousarray(a[tuple(index)]), None


def _slice_vjp(vals, out, g, attrs, cache):
    (a,) = vals
    grad = np.zeros_like(a)
    index = [slice(None)] * a.ndim
    index[attrs["axis"]] = slice(attrs["start"], attrs["stop"])
    grad[tuple(index)] = g
    return (grad,)


def _concat_fwd(vals, attrs):
    axis = attrs["axis"]
    return np.concatenate(vals, axis=axis), None


def _concat_vjp(vals, out, g, attrs, cache):
    axis = attrs["axis"]
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))


def _softmax_fwd(vals, attrs):
    (x,) = vals
    mask = attrs.get("mask")
    z = x if mask is None else x + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    if mask is not None:
        blocked = (mask <= MASK_BLOCK / 2).all(axis=-1)
        if blocked.any():
            p = np.where(blocked[..., None], 0.0, p)
    return p, None


def _softmax_vjp(vals, out, g, attrs, cache):
    # Rows zeroed by a fully-blocked mask have out == 0, so the formula
    # already returns a zero gradient there.
    inner = (g * out).sum(axis=-1, keepdims=True)
    return (out * (g - inner),)


def _log_softmax_fwd(vals, attrs):
    (x,) = vals
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    return out, np.exp(out)


def _log_softmax_vjp(vals, out, g, attrs, cache):
    probs = cache
    return (g - probs * g.sum(axis=-1, keepdims=True),)


def _layer_norm_fwd(vals, attrs):
    (x,) = vals
    eps = attrs.get("eps", LAYER_NORM_EPS)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, (xc, inv)


def _layer_norm_vjp(vals, out, g, attrs, cache):
    xc, inv = cache
    xhat = xc * inv
    gm = g.mean(axis=-1, keepdims=True)
    gx = (g * xhat).mean(axis=-1, keepdims=True)
    return (inv * (g - gm - xhat * gx),)


def _l2_normalize_fwd(vals, attrs):
    (x,) = vals
    eps = attrs.get("eps", L2_NORM_EPS)
    denom = np.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)
    return x / denom, denom


def _l2_normalize_vjp(vals, out, g, attrs, cache):
    (x,) = vals
    denom = cache
    inner = (g * x).sum(axis=-1, keepdims=True)
    return (g / denom - x * inner / denom**3,)


def _sigmoid_fwd(vals, attrs):
    (x,) = vals
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, None


def _sigmoid_vjp(vals, out, g, attrs, cache):
    return (g * out * (1.0 - out),)


def _silu_fwd(vals, attrs):
    (x,) = vals
    sig, _ = _sigmoid_fwd(vals, attrs)
    return x * sig, sig


def _silu_vjp(vals, out, g, attrs, cache):
    (x,) = vals
    sig = cache
    return (g * sig * (1.0 + x * (1.0 - sig)),)


def _sum_all_fwd(vals, attrs):
    return np.asarray(vals[0].sum()), None


def _sum_all_vjp(vals, out, g, attrs, cache):
    return (np.full(vals[0].shape, float(g)),)


def _mean_all_fwd(vals, attrs):
    return np.asarray(vals[0].mean()), None


def _mean_all_vjp(vals, out, g, attrs, cache):
    (a,) = vals
    return (np.full(a.shape, float(g) / a.size),)


def _sq_frobenius_fwd(vals, attrs):
    (a,) = vals
    return np.asarray((a * a).sum()), None


def _sq_frobenius_vjp(vals, out, g, attrs, cache):
    return (2.0 * float(g) * vals[0],)


def _embedding_fwd(vals, attrs):
    (table,) = vals
    ids = attrs["ids"]
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: token id out of range for table with {table.shape[0]} rows"
        )
    return table[ids], None


def _embedding_vjp(vals, out, g, attrs, cache):
    (table,) = vals
    grad = np.zeros_like(table)
    np.add.at(grad, attrs["ids"], g)
    return (grad,)


def _scan_fwd(vals, attrs):
    q, k, v, g, b = vals
    if q.ndim != 2 or k.shape != q.shape:
        raise ShapeError(f"gated_delta_scan: q/k shapes {q.shape} vs {k.shape}")
    if v.ndim != 2 or v.shape[0] != q.shape[0]:
        raise ShapeError(f"gated_delta_scan: v shape {v.shape} for q {q.shape}")
    if g.shape != (q.shape[0],) or b.shape != (q.shape[0],):
        raise ShapeError(f"gated_delta_scan: gate shapes {g.shape}, {b.shape}")
    y, states, delta = kernels.scan_fwd(_f64(q), _f64(k), _f64(v), _f64(g), _f64(b))
    return y, (states, delta)


def _scan_vjp(vals, out, grad, attrs, cache):
    q, k, v, g, b = vals
    states, delta = cache
    return kernels.scan_bwd(
        _f64(q), _f64(k), _f64(v), _f64(g), _f64(b), states, delta, _f64(grad)
    )


_register("add", _add_fwd, _add_vjp)
_register("sub", _sub_fwd, _sub_vjp)
_register("mul", _mul_fwd, _mul_vjp)
_register("scale", _scale_fwd, _scale_vjp)
_register("matmul", _matmul_fwd, _matmul_vjp)
_register("transpose", _transpose_fwd, _transpose_vjp)
_register("reshape", _reshape_fwd, _reshape_vjp)
_register("slice", _slice_fwd, _slice_vjp)
_register("concat", _concat_fwd, _concat_vjp)
_register("softmax", _softmax_fwd, _softmax_vjp)
_register("log_softmax", _log_softmax_fwd, _log_softmax_vjp)
_register("layer_norm", _layer_norm_fwd, _layer_norm_vjp)
_register("l2_normalize", _l2_normalize_fwd, _l2_normalize_vjp)
_register("sigmoid", _sigmoid_fwd, _sigmoid_vjp)
_register("silu", _silu_fwd, _silu_vjp)
_register("sum_all", _sum_all_fwd, _sum_all_vjp)
_register("mean_all", _mean_all_fwd, _mean_all_vjp)
_register("sq_frobenius", _sq_frobenius_fwd, _sq_frobenius_vjp)
_register("embedding", _embedding_fwd, _embedding_vjp)
_register("gated_delta_scan", _scan_fwd, _scan_vjp)


class Tape:
    """Append-only record of primitive applications.

    Node ids are indices into the record. Inputs always precede their
    consumers, so a single reverse sweep visits every node exactly once.
    A tape is single-threaded; independent tapes never share state.
    """

    __slots__ = ("_kinds", "_inputs", "_attrs", "_values", "_caches", "_trainable")

    def __init__(self) -> None:
        self._kinds: list[str] = []
        self._inputs: list[tuple[int, ...]] = []
        self._attrs: list[dict | None] = []
        self._values: list[np.ndarray] = []
        self._caches: list[object] = []
        self._trainable: list[bool] = []

    def __len__(self) -> int:
        return len(self._kinds)

    def _record(self, kind, inputs, attrs, value, cache, trainable) -> int:
        self._kinds.append(kind)
        self._inputs.append(inputs)
        self._attrs.append(attrs)
        self._values.append(value)
        self._caches.append(cache)
        self._trainable.append(trainable)
        return len(self._kinds) - 1

    def leaf(self, value, trainable: bool = True) -> int:
        """Register an input array; only trainable leaves receive gradients."""
        return self._record("leaf", (), None, _f64(value), None, trainable)

    def constant(self, value) -> int:
        return self.leaf(value, trainable=False)

    def apply(self, kind: str, *inputs: int, **attrs) -> int:
        """Apply a primitive to existing nodes and record the result."""
        prim = PRIMITIVES.get(kind)
        if prim is None:
            raise KeyError(f"unknown primitive {kind!r}")
        vals = [self._values[i] for i in inputs]
        out, cache = prim.forward(vals, attrs)
        return self._record(kind, inputs, attrs or None, _f64(out), cache, False)

    def value(self, node: int) -> np.ndarray:
        return self._values[node]

    def is_trainable_leaf(self, node: int) -> bool:
        return self._trainable[node]

    def backward(self, loss: int) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every trainable leaf.

        Leaves that do not feed the loss get an explicit zero gradient.
        """
        if self._values[loss].shape != ():
            raise NonScalarLossError(
                f"loss node has shape {self._values[loss].shape}, expected a scalar"
            )
        n = len(self._kinds)
        needed = bytearray(n)
        needed[loss] = 1
        for i in range(loss, -1, -1):
            if needed[i]:
                for j in self._inputs[i]:
                    needed[j] = 1
        grads: list[np.ndarray | None] = [None] * n
        grads[loss] = np.asarray(1.0)
        for i in range(loss, -1, -1):
            g = grads[i]
            if g is None or not needed[i] or self._kinds[i] == "leaf":
                continue
            prim = PRIMITIVES[self._kinds[i]]
            vals = [self._values[j] for j in self._inputs[i]]
            input_grads = prim.vjp(
                vals, self._values[i], g, self._attrs[i] or {}, self._caches[i]
            )
            for j, ig in zip(self._inputs[i], input_grads):
                if grads[j] is None:
                    grads[j] = np.asarray(ig, dtype=np.float64).copy()
                else:
                    grads[j] = grads[j] + ig
            grads[i] = None  # free as we go
        out: dict[int, np.ndarray] = {}
        for i in range(n):
            if self._trainable[i]:
                g = grads[i]
                out[i] = np.zeros_like(self._values[i]) if g is None else g
        return out


def apply_primitive(tape: Tape, kind: str, inputs: tuple[int, ...], attrs: dict | None = None) -> int:
    """Functional form of :meth:`Tape.apply`."""
    return tape.apply(kind, *inputs, **(attrs or {}))


@dataclass
class FdReport:
    """Result of a finite-difference gradient check."""

    passed: bool
    max_rel_err: float
    worst_leaf: str
    worst_index: tuple[int, ...]
    per_leaf: dict[str, float]

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (
            f"fd-check {status}: max rel err {self.max_rel_err:.3e} "
            f"at {self.worst_leaf}{list(self.worst_index)}"
        )


def finite_difference_check(fn, point, *, step: float = 1e-5, tol: float = 1e-5) -> FdReport:
    """Compare backward() against central finite differences.

    ``fn(tape, leaves)`` must build a scalar loss from the trainable
    leaves it is given and return its node id; ``point`` maps leaf names
    to starting arrays (a bare array is treated as ``{"x": array}``).
    Relative error uses ``max(|analytic|, |numeric|, step)`` as the
    denominator so near-zero gradients are judged on an absolute scale.
    """
    if not isinstance(point, dict):
        point = {"x": point}
    point = {name: _f64(arr) for name, arr in point.items()}

    def _eval(values: dict[str, np.ndarray]) -> float:
        tape = Tape()
        leaves = {name: tape.leaf(arr) for name, arr in values.items()}
        return float(tape.value(fn(tape, leaves)))

    tape = Tape()
    leaves = {name: tape.leaf(arr) for name, arr in point.items()}
    loss = fn(tape, leaves)
    grads = tape.backward(loss)
    analytic = {name: grads[node] for name, node in leaves.items()}

    max_rel = 0.0
    worst_leaf = ""
    worst_index: tuple[int, ...] = ()
    per_leaf: dict[str, float] = {}
    for name, base in point.items():
        leaf_max = 0.0
        flat = base.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            up = _eval(point)
            flat[idx] = orig - step
            down = _eval(point)
            flat[idx] = orig
            numeric = (up - down) / (2.0 * step)
            ana = float(analytic[name].reshape(-1)[idx])
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), step)
            if rel > leaf_max:
                leaf_max = rel
            if rel > max_rel:
                max_rel = rel
                worst_leaf = name
                worst_index = np.unravel_index(idx, base.shape)
        per_leaf[name] = leaf_max
    return FdReport(
        passed=max_rel < tol,
        max_rel_err=max_rel,
        worst_leaf=worst_leaf,
        worst_index=tuple(int(i) for i in worst_index),
        per_leaf=per_leaf,
    )
