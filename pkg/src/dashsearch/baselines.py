"""Selector-style allocation baselines: uniform placement and greedy
add/remove driven by held-out teacher KL of un-retrained flips.

The greedy selectors deliberately score single-layer flips without any
per-candidate retraining; that proxy-signal weakness is exactly what the
differentiable search is compared against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evaluation import eval_heldout_kl
from .model import HybridArch, ModelHandle, ModelSpec, OperatorKind


@dataclass
class SelectorResult:
    arch: HybridArch
    score_trace: list[list[tuple[int, float]]]
    budget: int


def uniform_alloc(n_layers: int, budget: int) -> HybridArch:
    """FULL layers on a centered stride: floor((i + 0.5) * L / B)."""
    if not 1 <= budget <= n_layers:
        raise ValueError(f"budget must be in [1, {n_layers}], got {budget}")
    ops = [OperatorKind.LINEAR] * n_layers
    for i in range(budget):
        ops[int((i + 0.5) * n_layers / budget)] = OperatorKind.FULL
    return HybridArch(tuple(ops))


def _arch_kl(params, spec, arch, teacher, heldout) -> float:
    return eval_heldout_kl(ModelHandle(spec, params, arch), teacher, heldout)


def _greedy(
    params: dict[str, np.ndarray],
    spec: ModelSpec,
    teacher: ModelHandle,
    heldout: list[np.ndarray],
    start: HybridArch,
    flip_to: OperatorKind,
    n_flips: int,
) -> tuple[HybridArch, list[list[tuple[int, float]]]]:
    arch = start
    trace: list[list[tuple[int, float]]] = []
    for _ in range(n_flips):
        scores = []
        for layer in range(spec.n_layers):
            if arch.ops[layer] is flip_to:
                continue
            kl = _arch_kl(params, spec, arch.replace(layer, flip_to), teacher, heldout)
            scores.append((layer, kl))
        # lowest KL wins; ties break to the lowest layer index
        best_layer, _ = min(scores, key=lambda item: (item[1], item[0]))
        arch = arch.replace(best_layer, flip_to)
        trace.append(scores)
    return arch, trace


def greedy_add_select(
    params: dict[str, np.ndarray],
    spec: ModelSpec,
    budget: int,
    heldout: list[np.ndarray],
) -> SelectorResult:
    """Start all-LINEAR; greedily flip to FULL the layer whose flip cuts
    held-out teacher KL the most, ``budget`` times."""
    if not 0 <= budget <= spec.n_layers:
        raise ValueError(f"budget must be in [0, {spec.n_layers}], got {budget}")
    teacher = ModelHandle(spec, params, HybridArch.all_full(spec.n_layers))
    arch, trace = _greedy(
        params, spec, teacher, heldout,
        HybridArch.all_linear(spec.n_layers), OperatorKind.FULL, budget,
    )
    return SelectorResult(arch=arch, score_trace=trace, budget=budget)


def greedy_remove_select(
    params: dict[str, np.ndarray],
    spec: ModelSpec,
    budget: int,
    heldout: list[np.ndarray],
) -> SelectorResult:
    """Start all-FULL; greedily flip to LINEAR the layer whose removal
    raises held-out teacher KL the least, until ``budget`` FULLs remain."""
    if not 0 <= budget <= spec.n_layers:
        raise ValueError(f"budget must be in [0, {spec.n_layers}], got {budget}")
    teacher = ModelHandle(spec, params, HybridArch.all_full(spec.n_layers))
    arch, trace = _greedy(
        params, spec, teacher, heldout,
        HybridArch.all_full(spec.n_layers), OperatorKind.LINEAR,
        spec.n_layers - budget,
    )
    return SelectorResult(arch=arch, score_trace=trace, budget=budget)
