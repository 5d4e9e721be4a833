"""Synthetic corpus: an order-2 Markov stream with interleaved key-value
recall segments, so a model trained on it needs both local structure and
long-range retrieval.

The Markov component has a closed-form entropy rate and stationary
distribution, which the tests use as analytic ground truth. Vocabulary
layout: Markov tokens first, then key tokens, then value tokens, then a
single query-marker token at the top of the range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CorpusSpec:
    vocab: int = 64
    n_markov: int = 48
    n_keys: int = 8
    n_values: int = 7
    recall_fraction: float = 0.3
    segment_len: int = 64
    pairs_per_segment: int = 4
    recall_gap: int = 24
    table_seed: int = 0
    table_sharpness: float = 2.0

    def __post_init__(self) -> None:
        if self.n_markov + self.n_keys + self.n_values + 1 > self.vocab:
            raise ValueError("vocab too small for the requested token ranges")
        if not 0.0 <= self.recall_fraction <= 1.0:
            raise ValueError("recall_fraction must be in [0, 1]")
        if self.pairs_per_segment > self.n_keys:
            raise ValueError("cannot draw more distinct keys than n_keys")

    @property
    def key_base(self) -> int:
        return self.n_markov

    @property
    def value_base(self) -> int:
        return self.n_markov + self.n_keys

    @property
    def marker(self) -> int:
        return self.vocab - 1


def transition_table(cspec: CorpusSpec) -> np.ndarray:
    """P(next | prev2, prev1) over the Markov sub-vocabulary.

    Rows are softmaxed Gaussian logits; sharpness controls how peaked
    (and therefore how low-entropy) the chain is.
    """
    rng = np.random.default_rng(cspec.table_seed)
    m = cspec.n_markov
    logits = rng.normal(0.0, cspec.table_sharpness, size=(m, m, m))
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def stationary_pair_distribution(table: np.ndarray, iters: int = 400) -> np.ndarray:
    """Stationary distribution over (prev2, prev1) pairs by power iteration."""
    m = table.shape[0]
    pi = np.full((m, m), 1.0 / (m * m))
    for _ in range(iters):
        # pair (a, b) -> (b, c) with probability table[a, b, c]
        nxt = np.einsum("ab,abc->bc", pi, table)
        nxt /= nxt.sum()
        if np.abs(nxt - pi).sum() < 1e-14:
            pi = nxt
            break
        pi = nxt
    return pi


def stationary_unigram(table: np.ndarray) -> np.ndarray:
    pair = stationary_pair_distribution(table)
    return pair.sum(axis=0)


def markov_entropy_rate(table: np.ndarray) -> float:
    """Exact entropy rate (nats/token) of the order-2 chain."""
    pair = stationary_pair_distribution(table)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(table > 0, table * np.log(table), 0.0)
    row_entropy = -plogp.sum(axis=-1)
    return float((pair * row_entropy).sum())


def _markov_run(table, cdf, state, n, rng, out):
    """Append n Markov tokens continuing from state=(prev2, prev1)."""
    a, b = state
    uniform = rng.random(n)
    for i in range(n):
        c = int(np.searchsorted(cdf[a, b], uniform[i], side="right"))
        out.append(c)
        a, b = b, c
    return a, b


def _recall_segment(cspec: CorpusSpec, table, cdf, state, rng, out):
    """Pairs block, Markov filler, marker, query, answer.

    The filler length is drawn per segment from [1, recall_gap] so the
    retrieval distance varies during training.
    """
    keys = rng.choice(cspec.n_keys, size=cspec.pairs_per_segment, replace=False)
    values = rng.integers(0, cspec.n_values, size=cspec.pairs_per_segment)
    for k, v in zip(keys, values):
        out.append(cspec.key_base + int(k))
        out.append(cspec.value_base + int(v))
    gap = int(rng.integers(1, cspec.recall_gap + 1))
    state = _markov_run(table, cdf, state, gap, rng, out)
    q = int(rng.integers(0, cspec.pairs_per_segment))
    out.append(cspec.marker)
    out.append(cspec.key_base + int(keys[q]))
    out.append(cspec.value_base + int(values[q]))
    return state


def generate_tokens(cspec: CorpusSpec, seed: int, n_tokens: int) -> np.ndarray:
    """Deterministic stream of n_tokens token ids."""
    table = transition_table(cspec)
    cdf = np.cumsum(table, axis=-1)
    rng = np.random.default_rng(seed)
    out: list[int] = []
    state = (
        int(rng.integers(0, cspec.n_markov)),
        int(rng.integers(0, cspec.n_markov)),
    )
    while len(out) < n_tokens:
        if rng.random() < cspec.recall_fraction:
            state = _recall_segment(cspec, table, cdf, state, rng, out)
        else:
            state = _markov_run(table, cdf, state, cspec.segment_len, rng, out)
    return np.asarray(out[:n_tokens], dtype=np.int64)


def train_heldout_split(tokens: np.ndarray, heldout_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    cut = int(len(tokens) * (1.0 - heldout_fraction))
    return tokens[:cut], tokens[cut:]


@dataclass(frozen=True)
class RecallTaskSpec:
    """Evaluation-time recall task: pairs, a gap, then one query."""

    n_queries: int = 64
    n_pairs: int = 3
    gap: int = 24
    seed: int = 0


def make_recall_queries(
    cspec: CorpusSpec, task: RecallTaskSpec
) -> list[tuple[np.ndarray, int, int]]:
    """Build (tokens, query_position, answer) triples.

    The sequence is: pairs block, gap Markov tokens, marker, query key.
    The model answers by predicting the token after the query position,
    which sits gap + 2 .. gap + 2*n_pairs tokens after the queried pair.
    """
    table = transition_table(cspec)
    cdf = np.cumsum(table, axis=-1)
    rng = np.random.default_rng(task.seed)
    queries = []
    for _ in range(task.n_queries):
        out: list[int] = []
        keys = rng.choice(cspec.n_keys, size=task.n_pairs, replace=False)
        values = rng.integers(0, cspec.n_values, size=task.n_pairs)
        for k, v in zip(keys, values):
            out.append(cspec.key_base + int(k))
            out.append(cspec.value_base + int(v))
        state = (
            int(rng.integers(0, cspec.n_markov)),
            int(rng.integers(0, cspec.n_markov)),
        )
        _markov_run(table, cdf, state, task.gap, rng, out)
        q = int(rng.integers(0, task.n_pairs))
        out.append(cspec.marker)
        out.append(cspec.key_base + int(keys[q]))
        answer = cspec.value_base + int(values[q])
        queries.append((np.asarray(out, dtype=np.int64), len(out) - 1, answer))
    return queries
