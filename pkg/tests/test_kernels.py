"""Scan kernel backends: oracle agreement, parity, and gradients."""

import numpy as np
import pytest

from dashsearch import kernels
from dashsearch.autodiff import Tape, finite_difference_check
from dashsearch.kernels import scan_ref


def naive_scan(q, k, v, g, b):
    """Independent step-by-step recomputation of the recurrence."""
    seq, d_k = q.shape
    d_v = v.shape[1]
    state = np.zeros((d_k, d_v))
    y = np.zeros((seq, d_v))
    for t in range(seq):
        delta = v[t] - state.T @ k[t]
        state = g[t] * state + b[t] * np.outer(k[t], delta)
        y[t] = state.T @ q[t]
    return y


def _random_inputs(rng, seq=8, d_k=4, d_v=5):
    return (
        rng.normal(size=(seq, d_k)),
        rng.normal(size=(seq, d_k)),
        rng.normal(size=(seq, d_v)),
        rng.uniform(0.2, 0.95, seq),
        rng.uniform(0.05, 0.9, seq),
    )


def test_python_backend_matches_naive_oracle_exactly():
    # same arithmetic order, so equality is bitwise
    rng = np.random.default_rng(0)
    q, k, v, g, b = _random_inputs(rng)
    y, _, _ = scan_ref.scan_fwd(q, k, v, g, b)
    np.testing.assert_array_equal(y, naive_scan(q, k, v, g, b))


def test_active_backend_matches_naive_oracle():
    rng = np.random.default_rng(1)
    q, k, v, g, b = _random_inputs(rng)
    y, _, _ = kernels.scan_fwd(q, k, v, g, b)
    np.testing.assert_allclose(y, naive_scan(q, k, v, g, b), atol=1e-12)


def test_backend_parity_forward_and_backward():
    backends = kernels.available_backends()
    if "cython" not in backends:
        pytest.skip("compiled kernel not built")
    rng = np.random.default_rng(2)
    q, k, v, g, b = _random_inputs(rng, seq=32, d_k=8, d_v=8)
    ref = scan_ref.scan_fwd(q, k, v, g, b)
    cy = backends["cython"].scan_fwd(q, k, v, g, b)
    for a, c in zip(ref, cy):
        np.testing.assert_allclose(a, c, rtol=1e-10, atol=1e-12)
    dy = rng.normal(size=ref[0].shape)
    ref_grads = scan_ref.scan_bwd(q, k, v, g, b, ref[1], ref[2], dy)
    cy_grads = backends["cython"].scan_bwd(q, k, v, g, b, cy[1], cy[2], dy)
    for a, c in zip(ref_grads, cy_grads):
        np.testing.assert_allclose(a, c, rtol=1e-10, atol=1e-12)


def test_single_step_closed_form():
    # with S_0 = 0: S_1 = b_1 * outer(k_1, v_1), y_1 = b_1 * (k_1 . q_1) * v_1
    rng = np.random.default_rng(3)
    q, k, v, g, b = _random_inputs(rng, seq=1)
    y, states, delta = kernels.scan_fwd(q, k, v, g, b)
    np.testing.assert_allclose(states[1], b[0] * np.outer(k[0], v[0]), atol=1e-14)
    np.testing.assert_allclose(y[0], b[0] * float(k[0] @ q[0]) * v[0], atol=1e-14)
    np.testing.assert_allclose(delta[0], v[0], atol=1e-15)


def test_zero_inputs_give_zero_output():
    seq = 4
    zeros2 = np.zeros((seq, 3))
    g = np.full(seq, 0.5)
    b = np.full(seq, 0.5)
    y, _, _ = kernels.scan_fwd(zeros2, zeros2, np.zeros((seq, 3)), g, b)
    assert np.abs(y).max() == 0.0


def test_scan_gradients_via_fd_on_each_backend(monkeypatch):
    rng = np.random.default_rng(4)
    q, k, v, g, b = _random_inputs(rng, seq=5, d_k=3, d_v=3)
    weight = rng.normal(size=(5, 3))

    def fn(tape, leaves):
        y = tape.apply(
            "gated_delta_scan", leaves["q"], leaves["k"], leaves["v"], leaves["g"], leaves["b"]
        )
        return tape.apply("sum_all", tape.apply("mul", y, tape.constant(weight)))

    point = {"q": q, "k": k, "v": v, "g": g, "b": b}
    for name, backend in kernels.available_backends().items():
        monkeypatch.setattr(kernels, "_impl", backend)
        report = finite_difference_check(fn, point)
        assert report.passed, f"{name}: {report}"


def test_scan_is_causal():
    rng = np.random.default_rng(5)
    q, k, v, g, b = _random_inputs(rng, seq=10)
    y1, _, _ = kernels.scan_fwd(q, k, v, g, b)
    q2, k2, v2 = q.copy(), k.copy(), v.copy()
    q2[7:] += 1.0
    k2[7:] -= 2.0
    v2[7:] *= 3.0
    y2, _, _ = kernels.scan_fwd(q2, k2, v2, g, b)
    np.testing.assert_array_equal(y1[:7], y2[:7])
