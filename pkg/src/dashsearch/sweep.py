"""Lambda/seed sweep driver: one architecture search plus a short
distillation per (lambda, seed), run as independent workers.

Parallelism is process-based (the work is CPU-bound Python) and capped
by the DASH_THREADS environment variable; the records come back sorted
by (lambda, seed) so output files do not depend on completion order.
"""

from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .evaluation import eval_heldout_kl
from .model import HybridArch, ModelHandle, ModelSpec
from .report import SweepRecord
from .search import SearchConfig, realized_budget, routing_diagnostics, run_search
from .training import TrainConfig, run_distill

# Worker-global context, installed once per process by _init_worker so the
# corpus and parameters are not re-pickled for every (lambda, seed) task.
_CTX: dict = {}


def worker_count(requested: int | None = None) -> int:
    if requested is not None:
        return max(1, requested)
    env = os.environ.get("DASH_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"DASH_THREADS={env!r} is not an integer") from None
    return os.cpu_count() or 1


def _init_worker(ctx: dict) -> None:
    _CTX.clear()
    _CTX.update(ctx)


def _run_one(task: tuple[float, int]) -> SweepRecord:
    lam, seed = task
    spec: ModelSpec = _CTX["spec"]
    search_cfg: SearchConfig = dataclasses.replace(_CTX["search_cfg"], lam=lam, seed=seed)
    try:
        result = run_search(_CTX["params"], spec, search_cfg, _CTX["train_tokens"])
        diag = result.diagnostics
        arch = result.arch
        distill_cfg: TrainConfig | None = _CTX["distill_cfg"]
        if distill_cfg is not None:
            distill_cfg = dataclasses.replace(distill_cfg, seed=seed + 1)
            student, _ = run_distill(
                _CTX["train_tokens"], _CTX["params"], _CTX["params"], arch, spec,
                distill_cfg, tau=_CTX["tau"],
            )
        else:
            student = _CTX["params"]
        teacher = ModelHandle(spec, _CTX["params"], HybridArch.all_full(spec.n_layers))
        model = ModelHandle(spec, student, arch)
        kl = eval_heldout_kl(model, teacher, _CTX["heldout"])
        return SweepRecord(
            lam=lam,
            seed=seed,
            budget=realized_budget(arch, spec.window, search_cfg.seq_len),
            avg_entropy=diag.avg_entropy,
            avg_top1=diag.avg_top1,
            avg_margin=diag.avg_margin,
            ambiguous=diag.ambiguous,
            heldout_kl=kl,
            arch=arch,
        )
    except Exception as exc:  # record the failure, keep sweeping
        return SweepRecord(
            lam=lam, seed=seed, budget=float("nan"), avg_entropy=float("nan"),
            avg_top1=float("nan"), avg_margin=float("nan"), ambiguous=-1,
            heldout_kl=float("nan"), error=f"{type(exc).__name__}: {exc}",
        )


def run_sweep(
    lambdas,
    seeds,
    params: dict[str, np.ndarray],
    spec: ModelSpec,
    search_cfg: SearchConfig,
    train_tokens: np.ndarray,
    heldout: list[np.ndarray],
    distill_cfg: TrainConfig | None = None,
    tau: float = 1.0,
    workers: int | None = None,
) -> list[SweepRecord]:
    """One record per (lambda, seed); failed runs carry an error string."""
    ctx = {
        "params": params,
        "spec": spec,
        "search_cfg": search_cfg,
        "train_tokens": train_tokens,
        "heldout": heldout,
        "distill_cfg": distill_cfg,
        "tau": tau,
    }
    tasks = [(float(lam), int(seed)) for lam in lambdas for seed in seeds]
    n_workers = min(worker_count(workers), len(tasks))
    if n_workers <= 1:
        _init_worker(ctx)
        records = [_run_one(task) for task in tasks]
    else:
        with ProcessPoolExecutor(
            max_workers=n_workers, initializer=_init_worker, initargs=(ctx,)
        ) as pool:
            records = list(pool.map(_run_one, tasks))
    records.sort(key=lambda r: (r.lam, r.seed))
    return records
