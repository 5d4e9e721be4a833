"""Pure-numpy gated delta scan (reference backend).

The recurrence per token, with state S of shape (d_k, d_v):

    delta_t = v_t - S_{t-1}^T khat_t
    S_t     = g_t * S_{t-1} + beta_t * outer(khat_t, delta_t)
    y_t     = S_t^T q_t

The backward pass runs the adjoint recurrence in reverse. Both passes
keep the per-step arithmetic order fixed so the forward is reproducible
against a naive step-by-step recomputation.
"""

from __future__ import annotations

import numpy as np


def scan_fwd(q, k, v, g, b):
    """Run the scan; returns (y, states, delta) with states[0] == 0."""
    seq, d_k = q.shape
    d_v = v.shape[1]
    y = np.zeros((seq, d_v))
    states = np.zeros((seq + 1, d_k, d_v))
    delta = np.zeros((seq, d_v))
    state = states[0]
    for t in range(seq):
        delta[t] = v[t] - state.T @ k[t]
        state = g[t] * state + b[t] * np.outer(k[t], delta[t])
        states[t + 1] = state
        y[t] = state.T @ q[t]
    return y, states, delta


def scan_bwd(q, k, v, g, b, states, delta, dy):
    """Adjoint of :func:`scan_fwd` given upstream gradient dy."""
    seq, d_k = q.shape
    d_v = v.shape[1]
    dq = np.zeros((seq, d_k))
    dk = np.zeros((seq, d_k))
    dv = np.zeros((seq, d_v))
    dg = np.zeros(seq)
    db = np.zeros(seq)
    s_bar = np.zeros((d_k, d_v))
    for t in range(seq - 1, -1, -1):
        s_t = states[t + 1]
        s_prev = states[t]
        # y_t = S_t^T q_t
        dq[t] = s_t @ dy[t]
        s_bar += np.outer(q[t], dy[t])
        # S_t = g_t S_{t-1} + b_t outer(k_t, delta_t)
        dg[t] = float((s_bar * s_prev).sum())
        sd = s_bar @ delta[t]
        db[t] = float(k[t] @ sd)
        dk[t] = b[t] * sd
        d_delta = b[t] * (s_bar.T @ k[t])
        # delta_t = v_t - S_{t-1}^T k_t
        dv[t] = d_delta
        dk[t] -= s_prev @ d_delta
        s_bar = g[t] * s_bar - np.outer(k[t], d_delta)
    return dq, dk, dv, dg, db
