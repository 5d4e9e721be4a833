"""Quality measurement for final models: held-out teacher KL, next-token
agreement, and a synthetic key-value recall task."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import CorpusSpec, RecallTaskSpec, make_recall_queries
from .model import HybridArch, OperatorKind
from .search import realized_budget


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kl_distill_value(teacher_logits: np.ndarray, student_logits: np.ndarray, tau: float = 1.0) -> float:
    """Plain-numpy recomputation of the token-averaged distillation KL.

    Independent of the tape route, so the two implementations check each
    other in tests.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(
            f"logit shapes differ: {teacher_logits.shape} vs {student_logits.shape}"
        )
    p = _softmax(teacher_logits / tau)
    log_p = np.log(np.clip(p, 1e-300, None))
    zq = student_logits / tau
    log_q = zq - zq.max(axis=-1, keepdims=True)
    log_q = log_q - np.log(np.exp(log_q).sum(axis=-1, keepdims=True))
    seq = teacher_logits.shape[0]
    return float(tau * tau / seq * (p * (log_p - log_q)).sum())


def eval_heldout_kl(model, teacher, heldout: list[np.ndarray], tau: float = 1.0) -> float:
    """Mean distillation KL over held-out sequences."""
    total = 0.0
    for seq in heldout:
        total += kl_distill_value(teacher.logits(seq), model.logits(seq), tau)
    return total / len(heldout)


def eval_agreement(model, teacher, heldout: list[np.ndarray]) -> float:
    """Fraction of positions where argmax logits match the teacher's."""
    hits = 0
    count = 0
    for seq in heldout:
        a = model.logits(seq).argmax(axis=-1)
        b = teacher.logits(seq).argmax(axis=-1)
        hits += int((a == b).sum())
        count += len(a)
    return hits / count


def eval_recall_task(model, cspec: CorpusSpec, task: RecallTaskSpec) -> float:
    """Fraction of key-value queries answered exactly via greedy decoding."""
    queries = make_recall_queries(cspec, task)
    hits = 0
    for tokens, query_pos, answer in queries:
        pred = int(model.logits(tokens)[query_pos].argmax())
        hits += int(pred == answer)
    return hits / len(queries)


@dataclass
class EvalReport:
    heldout_kl: float
    agreement: float
    recall_accuracy: float
    budget: float
    n_full: int
    n_window: int
    n_linear: int

    CSV_HEADER = "heldout_kl,agreement,recall_accuracy,budget,n_full,n_window,n_linear"

    def csv_row(self) -> str:
        return (
            f"{self.heldout_kl:.6g},{self.agreement:.6g},{self.recall_accuracy:.6g},"
            f"{self.budget:.6g},{self.n_full},{self.n_window},{self.n_linear}"
        )

    def text(self) -> str:
        return (
            f"held-out teacher KL : {self.heldout_kl:.6f}\n"
            f"next-token agreement: {self.agreement:.4f}\n"
            f"recall accuracy     : {self.recall_accuracy:.4f}\n"
            f"realized budget     : {self.budget:.4g} "
            f"(full={self.n_full}, window={self.n_window}, linear={self.n_linear})"
        )


def evaluate_model(
    model,
    teacher,
    arch: HybridArch,
    heldout: list[np.ndarray],
    cspec: CorpusSpec,
    task: RecallTaskSpec,
    window: int,
    seq_len: int,
) -> EvalReport:
    return EvalReport(
        heldout_kl=eval_heldout_kl(model, teacher, heldout),
        agreement=eval_agreement(model, teacher, heldout),
        recall_accuracy=eval_recall_task(model, cspec, task),
        budget=realized_budget(arch, window, seq_len),
        n_full=arch.count(OperatorKind.FULL),
        n_window=arch.count(OperatorKind.WINDOW),
        n_linear=arch.count(OperatorKind.LINEAR),
    )
