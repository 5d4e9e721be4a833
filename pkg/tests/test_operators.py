"""Mixer operators and model forward: oracles, identities, causality."""

import math

import numpy as np
import pytest

from dashsearch.autodiff import Tape
from dashsearch.model import (
    HybridArch,
    ModelHandle,
    ModelSpec,
    OperatorKind,
    SequenceTooLong,
    TokenOutOfRange,
    bind_params,
    block_forward,
    full_attention,
    init_params,
    linear_attention,
    model_forward,
    window_attention,
)

SPEC = ModelSpec(n_layers=4, d_model=16, n_heads=2, vocab=12, max_seq=24, window=4, ffn_mult=2)


@pytest.fixture(scope="module")
def params():
    return init_params(SPEC, np.random.default_rng(0))


def _mixer_output(fn, params, x, **kwargs):
    tape = Tape()
    bound = bind_params(tape, params, trainable=False)
    node = fn(tape, tape.constant(x), bound, 0, SPEC, **kwargs)
    return tape.value(node)


def naive_attention(x, params, mask):
    """Per-query loop oracle for masked multi-head attention at layer 0."""
    wq, wk, wv, wo = (params[f"layers.0.attn.{n}"] for n in ("wq", "wk", "wv", "wo"))
    seq = x.shape[0]
    d_h = SPEC.d_head
    q, k, v = x @ wq, x @ wk, x @ wv
    merged = np.zeros((seq, SPEC.d_model))
    for h in range(SPEC.n_heads):
        sl = slice(h * d_h, (h + 1) * d_h)
        for t in range(seq):
            scores = np.array(
                [
                    q[t, sl] @ k[s, sl] / math.sqrt(d_h) if mask[t, s] else -np.inf
                    for s in range(seq)
                ]
            )
            scores -= scores.max()
            w = np.exp(scores)
            w /= w.sum()
            merged[t, sl] = w @ v[:, sl]
    return merged @ wo


def test_full_attention_matches_naive_oracle(params):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, SPEC.d_model))
    mask = np.tri(4, dtype=bool)
    got = _mixer_output(full_attention, params, x)
    np.testing.assert_allclose(got, naive_attention(x, params, mask), atol=1e-12)


def test_window_attention_matches_naive_oracle(params):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, SPEC.d_model))
    rows, cols = np.indices((4, 4))
    mask = (cols <= rows) & (cols >= rows - 1)  # window of 2
    got = _mixer_output(window_attention, params, x, window=2)
    np.testing.assert_allclose(got, naive_attention(x, params, mask), atol=1e-12)


def test_window_equal_to_seq_matches_full(params):
    rng = np.random.default_rng(3)
    for seq in (1, 5, 9):
        x = rng.normal(size=(seq, SPEC.d_model))
        full = _mixer_output(full_attention, params, x)
        win = _mixer_output(window_attention, params, x, window=seq)
        np.testing.assert_allclose(win, full, atol=1e-12)
        wider = _mixer_output(window_attention, params, x, window=seq + 7)
        np.testing.assert_allclose(wider, full, atol=1e-12)


def test_window_one_attends_only_to_self(params):
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, SPEC.d_model))
    got = _mixer_output(window_attention, params, x, window=1)
    wv, wo = params["layers.0.attn.wv"], params["layers.0.attn.wo"]
    np.testing.assert_allclose(got, (x @ wv) @ wo, atol=1e-12)


def test_full_attention_single_token(params):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, SPEC.d_model))
    got = _mixer_output(full_attention, params, x)
    wv, wo = params["layers.0.attn.wv"], params["layers.0.attn.wo"]
    np.testing.assert_allclose(got, (x @ wv) @ wo, atol=1e-12)


def test_window_rejects_nonpositive_width(params):
    with pytest.raises(ValueError, match="window"):
        _mixer_output(window_attention, params, np.zeros((3, SPEC.d_model)), window=0)


def test_full_attention_rejects_overlong_input(params):
    with pytest.raises(SequenceTooLong):
        _mixer_output(full_attention, params, np.zeros((SPEC.max_seq + 1, SPEC.d_model)))


@pytest.mark.parametrize("fn,kwargs", [
    (full_attention, {}),
    (window_attention, {"window": 3}),
    (linear_attention, {}),
])
def test_mixer_causality(params, fn, kwargs):
    rng = np.random.default_rng(6)
    x = rng.normal(size=(10, SPEC.d_model))
    base = _mixer_output(fn, params, x, **kwargs)
    for trial in range(3):
        perturbed = x.copy()
        perturbed[6:] += rng.normal(size=(4, SPEC.d_model))
        out = _mixer_output(fn, params, perturbed, **kwargs)
        np.testing.assert_allclose(out[:6], base[:6], atol=1e-12)


def test_linear_attention_single_token_closed_form(params):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, SPEC.d_model))
    got = _mixer_output(linear_attention, params, x)
    p = "layers.0.linear."
    q, k, v = x @ params[p + "wq"], x @ params[p + "wk"], x @ params[p + "wv"]
    gate = 1 / (1 + np.exp(-(x @ params[p + "gate"])))  # unused at t=1 (S_0 = 0)
    beta = 1 / (1 + np.exp(-(x @ params[p + "write"])))
    d_h = SPEC.d_head
    merged = np.zeros((1, SPEC.d_model))
    for h in range(SPEC.n_heads):
        sl = slice(h * d_h, (h + 1) * d_h)
        khat = k[0, sl] / np.sqrt((k[0, sl] ** 2).sum() + 1e-8)
        state = beta[0, h] * np.outer(khat, v[0, sl])
        merged[0, sl] = state.T @ q[0, sl]
    np.testing.assert_allclose(got, merged @ params[p + "wo"], atol=1e-12)
    assert gate.shape == (1, SPEC.n_heads)


def test_linear_attention_zero_input_is_zero(params):
    got = _mixer_output(linear_attention, params, np.zeros((6, SPEC.d_model)))
    assert np.abs(got).max() == 0.0


def test_linear_attention_matches_stepwise_oracle(params):
    """T=8 scan against an independent per-step recomputation."""
    rng = np.random.default_rng(8)
    x = rng.normal(size=(8, SPEC.d_model))
    got = _mixer_output(linear_attention, params, x)
    p = "layers.0.linear."
    q, k, v = x @ params[p + "wq"], x @ params[p + "wk"], x @ params[p + "wv"]
    gate = 1 / (1 + np.exp(-(x @ params[p + "gate"])))
    beta = 1 / (1 + np.exp(-(x @ params[p + "write"])))
    d_h = SPEC.d_head
    merged = np.zeros((8, SPEC.d_model))
    for h in range(SPEC.n_heads):
        sl = slice(h * d_h, (h + 1) * d_h)
        state = np.zeros((d_h, d_h))
        for t in range(8):
            khat = k[t, sl] / np.sqrt((k[t, sl] ** 2).sum() + 1e-8)
            delta = v[t, sl] - state.T @ khat
            state = gate[t, h] * state + beta[t, h] * np.outer(khat, delta)
            merged[t, sl] = state.T @ q[t, sl]
    np.testing.assert_allclose(got, merged @ params[p + "wo"], atol=1e-12)


def test_weight_sharing_between_full_and_window(params):
    rng = np.random.default_rng(9)
    x = rng.normal(size=(5, SPEC.d_model))
    base_full = _mixer_output(full_attention, params, x)
    base_win = _mixer_output(window_attention, params, x)
    base_lin = _mixer_output(linear_attention, params, x)

    bumped = {k: v.copy() for k, v in params.items()}
    bumped["layers.0.attn.wq"] += 0.05
    assert np.abs(_mixer_output(full_attention, bumped, x) - base_full).max() > 1e-6
    assert np.abs(_mixer_output(window_attention, bumped, x) - base_win).max() > 1e-6
    np.testing.assert_array_equal(_mixer_output(linear_attention, bumped, x), base_lin)

    bumped = {k: v.copy() for k, v in params.items()}
    bumped["layers.0.linear.wv"] += 0.05
    np.testing.assert_array_equal(_mixer_output(full_attention, bumped, x), base_full)
    np.testing.assert_array_equal(_mixer_output(window_attention, bumped, x), base_win)
    assert np.abs(_mixer_output(linear_attention, bumped, x) - base_lin).max() > 1e-6


# -- block and model --------------------------------------------------------


def test_block_residual_identity_with_zero_weights(params):
    zeroed = {k: v.copy() for k, v in params.items()}
    for name in zeroed:
        if "layers.0.attn.wo" in name or "layers.0.ffn.w2" in name:
            zeroed[name][:] = 0.0
    rng = np.random.default_rng(10)
    x = rng.normal(size=(5, SPEC.d_model))
    tape = Tape()
    bound = bind_params(tape, zeroed, trainable=False)
    out, u = block_forward(tape, tape.constant(x), bound, 0, SPEC, OperatorKind.FULL)
    np.testing.assert_allclose(tape.value(out), x, atol=1e-14)
    np.testing.assert_allclose(tape.value(u), x, atol=1e-14)


def test_block_matches_manual_composition(params):
    rng = np.random.default_rng(11)
    x = rng.normal(size=(6, SPEC.d_model))
    tape = Tape()
    bound = bind_params(tape, params, trainable=False)
    xn = tape.constant(x)
    out, u = block_forward(tape, xn, bound, 1, SPEC, OperatorKind.FULL)

    # manual: u = x + attn(affine_ln(x)); out = u + ffn(affine_ln(u))
    def affine_ln(arr, gain, bias):
        mu = arr.mean(-1, keepdims=True)
        var = ((arr - mu) ** 2).mean(-1, keepdims=True)
        return (arr - mu) / np.sqrt(var + 1e-5) * gain + bias

    p = "layers.1."
    normed = affine_ln(x, params[p + "norm1_gain"], params[p + "norm1_bias"])
    attn = _attn_at_layer(normed, params, 1)
    u_ref = x + attn
    normed2 = affine_ln(u_ref, params[p + "norm2_gain"], params[p + "norm2_bias"])
    h = normed2 @ params[p + "ffn.w1"]
    h = h / (1 + np.exp(-h))
    out_ref = u_ref + h @ params[p + "ffn.w2"]
    np.testing.assert_allclose(tape.value(u), u_ref, atol=1e-10)
    np.testing.assert_allclose(tape.value(out), out_ref, atol=1e-10)


def _attn_at_layer(x, params, layer):
    tape = Tape()
    bound = bind_params(tape, params, trainable=False)
    return tape.value(full_attention(tape, tape.constant(x), bound, layer, SPEC))


def test_model_logits_shape(params):
    model = ModelHandle(SPEC, params, HybridArch.all_full(SPEC.n_layers))
    tokens = np.arange(7) % SPEC.vocab
    assert model.logits(tokens).shape == (7, SPEC.vocab)
    assert len(model.post_mixer_states(tokens)) == SPEC.n_layers


def test_model_rejects_bad_tokens(params):
    model = ModelHandle(SPEC, params, HybridArch.all_full(SPEC.n_layers))
    with pytest.raises(TokenOutOfRange):
        model.logits(np.array([0, SPEC.vocab]))
    with pytest.raises(SequenceTooLong):
        model.logits(np.zeros(SPEC.max_seq + 1, dtype=int))


def test_model_end_to_end_causality(params):
    rng = np.random.default_rng(12)
    for arch in (
        HybridArch.all_full(4),
        HybridArch.from_string("L F W L"),
        HybridArch.all_linear(4),
    ):
        model = ModelHandle(SPEC, params, arch)
        tokens = rng.integers(0, SPEC.vocab, size=12)
        base = model.logits(tokens)
        for _ in range(3):
            suffix = rng.integers(0, SPEC.vocab, size=4)
            edited = tokens.copy()
            edited[8:] = suffix
            np.testing.assert_allclose(model.logits(edited)[:8], base[:8], atol=1e-12)


def test_arch_string_round_trip():
    arch = HybridArch.from_string("L F W F")
    assert arch.to_string() == "L F W F"
    assert arch.count(OperatorKind.FULL) == 2
    with pytest.raises(ValueError):
        HybridArch.from_string("L F X")


def test_model_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(n_layers=1)
    with pytest.raises(ValueError):
        ModelSpec(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelSpec(window=0)
    with pytest.raises(ValueError):
        ModelSpec(window=999, max_seq=100)
