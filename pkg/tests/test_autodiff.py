"""Tape, primitives, backward, and the finite-difference oracle."""

import numpy as np
import pytest

from dashsearch.autodiff import (
    MASK_BLOCK,
    NonScalarLossError,
    ShapeError,
    Tape,
    apply_primitive,
    finite_difference_check,
)


def test_matmul_shape_rule():
    tape = Tape()
    a = tape.leaf(np.ones((2, 3)))
    b = tape.leaf(np.ones((3, 4)))
    out = tape.apply("matmul", a, b)
    assert tape.value(out).shape == (2, 4)


def test_matmul_shape_mismatch_names_primitive():
    tape = Tape()
    a = tape.leaf(np.ones((2, 3)))
    b = tape.leaf(np.ones((4, 2)))
    with pytest.raises(ShapeError, match="matmul"):
        tape.apply("matmul", a, b)


def test_softmax_of_zero_row_is_uniform():
    tape = Tape()
    x = tape.leaf(np.zeros((1, 3)))
    out = tape.value(tape.apply("softmax", x))
    np.testing.assert_allclose(out, np.full((1, 3), 1 / 3), atol=1e-15)


def test_softmax_rows_sum_to_one_under_mask():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 6))
    mask = np.where(np.tri(6) > 0, 0.0, MASK_BLOCK)
    tape = Tape()
    out = tape.value(tape.apply("softmax", tape.leaf(x), mask=mask))
    np.testing.assert_allclose(out.sum(axis=-1), np.ones(6), atol=1e-12)
    assert (out >= 0).all()
    # masked entries contribute nothing
    assert np.abs(out[np.tri(6) == 0]).max() < 1e-120


def test_softmax_fully_masked_row_outputs_zeros():
    mask = np.full((2, 3), MASK_BLOCK)
    mask[0] = 0.0
    tape = Tape()
    out = tape.value(tape.apply("softmax", tape.leaf(np.ones((2, 3))), mask=mask))
    np.testing.assert_allclose(out[0], np.full(3, 1 / 3), atol=1e-15)
    assert (out[1] == 0).all()


def test_layer_norm_constant_row_is_zero():
    tape = Tape()
    x = tape.leaf(np.full((2, 5), 3.7))
    out = tape.value(tape.apply("layer_norm", x))
    assert np.abs(out).max() == 0.0


def test_backward_of_sum_is_ones():
    tape = Tape()
    x = tape.leaf(np.arange(6.0).reshape(2, 3))
    loss = tape.apply("sum_all", x)
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads[x], np.ones((2, 3)))


def test_backward_of_half_squared_norm_is_x():
    tape = Tape()
    value = np.arange(1.0, 7.0).reshape(2, 3)
    x = tape.leaf(value)
    loss = tape.apply("scale", tape.apply("sq_frobenius", x), factor=0.5)
    grads = tape.backward(loss)
    np.testing.assert_allclose(grads[x], value, atol=1e-15)


def test_backward_requires_scalar_loss():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(NonScalarLossError):
        tape.backward(x)


def test_unreachable_leaf_gets_zero_gradient():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    y = tape.leaf(np.ones(2))
    loss = tape.apply("sum_all", x)
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads[y], np.zeros(2))


def test_constants_never_appear_in_gradient_map():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    c = tape.constant(np.ones(3))
    loss = tape.apply("sum_all", tape.apply("mul", x, c))
    grads = tape.backward(loss)
    assert set(grads) == {x}


def test_apply_primitive_functional_form():
    tape = Tape()
    a = tape.leaf(np.ones((2, 2)))
    node = apply_primitive(tape, "scale", (a,), {"factor": 3.0})
    np.testing.assert_array_equal(tape.value(node), np.full((2, 2), 3.0))


def test_tape_rerun_is_bit_identical():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 4))

    def run():
        tape = Tape()
        h = tape.apply("silu", tape.leaf(x))
        out = tape.apply("softmax", tape.apply("matmul", h, tape.apply("transpose", h)))
        return tape.value(tape.apply("sum_all", tape.apply("layer_norm", out)))

    assert run().tobytes() == run().tobytes()


def test_embedding_gather_and_scatter():
    tape = Tape()
    table = tape.leaf(np.arange(12.0).reshape(4, 3))
    ids = np.array([1, 1, 3])
    out = tape.apply("embedding", table, ids=ids)
    np.testing.assert_array_equal(tape.value(out)[0], [3.0, 4.0, 5.0])
    grads = tape.backward(tape.apply("sum_all", out))
    expected = np.zeros((4, 3))
    expected[1] = 2.0
    expected[3] = 1.0
    np.testing.assert_array_equal(grads[table], expected)


def test_embedding_rejects_out_of_range_ids():
    tape = Tape()
    table = tape.leaf(np.zeros((4, 3)))
    with pytest.raises(ShapeError, match="embedding"):
        tape.apply("embedding", table, ids=np.array([4]))


def test_concat_slice_round_trip_gradient():
    tape = Tape()
    a = tape.leaf(np.ones((2, 3)))
    b = tape.leaf(np.ones((2, 2)))
    cat = tape.apply("concat", a, b, axis=1)
    left = tape.apply("slice", cat, axis=1, start=0, stop=3)
    loss = tape.apply("sum_all", left)
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads[a], np.ones((2, 3)))
    np.testing.assert_array_equal(grads[b], np.zeros((2, 2)))


# -- finite differences -----------------------------------------------------


def test_fd_identity_function():
    report = finite_difference_check(
        lambda tape, leaves: tape.apply("sum_all", leaves["x"]),
        np.array([1.3, -0.2, 4.0]),
    )
    assert report.passed
    assert report.max_rel_err < 1e-9


def test_fd_softmax_then_sum_gradient_is_zero():
    # softmax rows sum to one, so the composite is constant
    def fn(tape, leaves):
        return tape.apply("sum_all", tape.apply("softmax", leaves["x"]))

    report = finite_difference_check(fn, np.random.default_rng(0).normal(size=(3, 4)))
    assert report.passed


@pytest.mark.parametrize(
    "kind,shape",
    [
        ("layer_norm", (3, 5)),
        ("l2_normalize", (3, 5)),
        ("sigmoid", (4,)),
        ("silu", (4,)),
        ("log_softmax", (3, 4)),
        ("softmax", (3, 4)),
        ("mean_all", (3, 4)),
    ],
)
def test_fd_each_primitive(kind, shape):
    rng = np.random.default_rng(hash(kind) % 2**32)
    weight = rng.normal(size=shape)

    def fn(tape, leaves):
        out = tape.apply(kind, leaves["x"])
        if tape.value(out).shape == ():
            return out
        return tape.apply("sum_all", tape.apply("mul", out, tape.constant(weight)))

    report = finite_difference_check(fn, rng.normal(size=shape))
    assert report.passed, str(report)


def test_fd_masked_softmax():
    mask = np.where(np.tri(4) > 0, 0.0, MASK_BLOCK)
    rng = np.random.default_rng(11)
    weight = rng.normal(size=(4, 4))

    def fn(tape, leaves):
        out = tape.apply("softmax", leaves["x"], mask=mask)
        return tape.apply("sum_all", tape.apply("mul", out, tape.constant(weight)))

    report = finite_difference_check(fn, rng.normal(size=(4, 4)))
    assert report.passed, str(report)


def test_fd_kl_loss_on_two_token_logits():
    # teacher fixed, student differentiable; rel err < 1e-6 per contract
    rng = np.random.default_rng(5)
    teacher = rng.normal(size=(2, 6))

    def fn(tape, leaves):
        from dashsearch.search import kl_distill_loss

        return kl_distill_loss(tape, teacher, leaves["x"], tau=1.0)

    report = finite_difference_check(fn, rng.normal(size=(2, 6)), tol=1e-6)
    assert report.passed, str(report)
    assert report.max_rel_err < 1e-6


def test_fd_report_lists_worst_coordinate():
    def fn(tape, leaves):
        return tape.apply("sum_all", tape.apply("mul", leaves["x"], leaves["x"]))

    report = finite_difference_check(fn, {"x": np.array([1.0, 2.0])})
    assert report.worst_leaf == "x"
    assert report.worst_index in ((0,), (1,))
    assert "fd-check" in str(report)
