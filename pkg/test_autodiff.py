#!/usr/bin/env python3
"""
Tests for the tape-based gradient engine
"""

import numpy as np
import pytest

from lab.autodiff import (
    Tape,
    Tensor,
    backward,
    cross_entropy,
    gelu,
    grad_check,
    layer_norm,
    log_softmax_rows,
    matmul,
    mul,
    softmax_rows,
    sum_all,
    take,
    scatter_rows,
    l2_normalize,
    elu_plus_one,
)
from lab.core.exceptions import ConfigError, MaskError, NumericError, ShapeError, TapeError, TargetIndexError


def test_matmul_examples():
    """Identity, diagonal scaling and mismatched shapes"""
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(a, np.eye(2)).data, a)
    out = matmul(np.array([[1.0, 0.0], [0.0, 2.0]]), np.array([[3.0], [4.0]]))
    assert np.array_equal(out.data, np.array([[3.0], [8.0]]))
    with pytest.raises(ShapeError) as exc:
        matmul(np.ones((2, 3)), np.ones((2, 2)))
    assert "[2, 3]" in str(exc.value) and "[2, 2]" in str(exc.value)


def test_softmax_rows_examples():
    """Uniform rows, single unmasked entry and a hand-evaluated row"""
    assert np.allclose(softmax_rows(np.full((1, 4), 0.7)).data, 0.25)
    masked = softmax_rows(np.array([[0.0, 5.0]]), mask=np.array([[False, True]])).data
    assert masked[0, 0] == 1.0 and masked[0, 1] == 0.0
    y = softmax_rows(np.log(np.array([[1.0, 3.0]]))).data
    assert y == pytest.approx(np.array([[0.25, 0.75]]), abs=1e-12)


def test_softmax_fully_masked_row():
    with pytest.raises(MaskError):
        softmax_rows(np.zeros((2, 2)), mask=np.array([[False, True], [True, True]]))


def test_softmax_rows_sum_to_one(rng):
    x = rng.uniform(-5, 5, size=(7, 9))
    mask = rng.uniform(size=(7, 9)) < 0.3
    mask[:, 0] = False
    y = softmax_rows(x, mask=mask).data
    assert np.all(y >= 0)
    assert np.all(y[mask] == 0.0)
    assert np.abs(y.sum(axis=1) - 1.0).max() < 1e-12


def test_cross_entropy_examples():
    """Saturated, uniform and hand-evaluated losses"""
    logits = np.zeros((1, 26))
    logits[0, 4] = 1000.0
    assert cross_entropy(logits, [4]).item() == pytest.approx(0.0, abs=1e-9)
    assert cross_entropy(np.zeros((3, 26)), [0, 1, 2]).item() == pytest.approx(np.log(26))
    assert cross_entropy(np.log(np.array([[1.0, 3.0]])), [0]).item() == pytest.approx(-np.log(0.25))


def test_cross_entropy_target_out_of_range():
    with pytest.raises(TargetIndexError):
        cross_entropy(np.zeros((2, 5)), [0, 5])
    with pytest.raises(IndexError):
        cross_entropy(np.zeros((1, 5)), [-1])


def test_backward_square_and_disconnected():
    """sum(x^2) gives 2x; a leaf the loss ignores gets zeros"""
    tape = Tape()
    x = tape.watch(Tensor([1.0, -2.0, 3.0]))
    y = tape.watch(Tensor([5.0, 6.0]))
    loss = sum_all(mul(x, x, tape=tape), tape=tape)
    backward(tape, loss)
    assert np.array_equal(x.grad, np.array([2.0, -4.0, 6.0]))
    assert np.array_equal(y.grad, np.zeros(2))


def test_backward_errors():
    tape = Tape()
    x = tape.watch(Tensor([1.0, 2.0]))
    with pytest.raises(ShapeError):
        tape.backward(mul(x, x, tape=tape))
    with pytest.raises(TapeError):
        tape.backward(Tensor(1.0))


def test_backward_is_deterministic(rng):
    w = rng.uniform(-1, 1, size=(4, 3))
    x = rng.uniform(-1, 1, size=(5, 4))

    def run():
        tape = Tape()
        wt = tape.watch(Tensor(w))
        loss = cross_entropy(matmul(x, wt, tape=tape), [0, 1, 2, 0, 1], tape=tape)
        tape.backward(loss)
        return wt.grad

    assert np.array_equal(run(), run())


def test_two_layer_mlp_matches_finite_differences(rng):
    w1 = rng.uniform(-1, 1, size=(4, 6))
    w2 = rng.uniform(-1, 1, size=(6, 3))
    x = rng.uniform(-1, 1, size=(5, 4))

    def f(tape, w):
        h = gelu(matmul(x, w, tape=tape), tape=tape)
        return cross_entropy(matmul(h, w2, tape=tape), [0, 2, 1, 1, 0], tape=tape)

    assert grad_check(f, w1) < 1e-4


def test_grad_check_examples():
    assert grad_check(lambda tape, x: sum_all(x, tape=tape), np.array([0.3, -0.2, 0.9])) < 1e-8
    cube = lambda tape, x: sum_all(mul(mul(x, x, tape=tape), x, tape=tape), tape=tape)  # noqa: E731
    assert grad_check(cube, np.array([1.0, 2.0])) < 1e-6


def test_grad_check_rejects_bad_eps():
    for eps in (0.0, -1e-4):
        with pytest.raises(ConfigError):
            grad_check(lambda tape, x: sum_all(x, tape=tape), np.ones(2), eps=eps)


def test_item_needs_one_element():
    assert Tensor([[2.5]]).item() == 2.5
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0,))).item()


def test_grad_check_non_finite():
    with pytest.raises(NumericError):
        grad_check(lambda tape, x: sum_all(mul(x, np.inf, tape=tape), tape=tape), np.ones(2))


@pytest.mark.parametrize("name", [
    "softmax_rows", "log_softmax_rows", "layer_norm", "gelu", "elu_plus_one", "l2_normalize", "take", "scatter_rows",
])
def test_primitive_gradients(name, rng):
    """Every primitive matches central differences on inputs in [-1, 1]"""
    x = rng.uniform(-1, 1, size=(3, 4))
    weights = rng.uniform(-1, 1, size=(3, 4))
    gamma, beta = rng.uniform(0.5, 1.5, size=4), rng.uniform(-1, 1, size=4)
    mask = np.zeros((3, 4), dtype=bool)
    mask[1, 2] = True

    ops = {
        "softmax_rows": lambda tape, v: softmax_rows(v, mask=mask, tape=tape),
        "log_softmax_rows": lambda tape, v: log_softmax_rows(v, mask=mask, tape=tape),
        "layer_norm": lambda tape, v: layer_norm(v, gamma, beta, tape=tape),
        "gelu": lambda tape, v: gelu(v, tape=tape),
        "elu_plus_one": lambda tape, v: elu_plus_one(v, tape=tape),
        "l2_normalize": lambda tape, v: l2_normalize(v, tape=tape),
        "take": lambda tape, v: take(v, (np.array([0, 2, 2]), np.array([1, 3, 3])), tape=tape),
        "scatter_rows": lambda tape, v: scatter_rows(v, 1, np.array([0.5, -0.5, 0.1, 0.2]), tape=tape),
    }
    op = ops[name]

    def f(tape, v):
        out = op(tape, v)
        w = weights[: out.shape[0]] if out.ndim == 2 else weights[0, : out.shape[0]]
        return sum_all(mul(out, w, tape=tape), tape=tape)

    assert grad_check(f, x) < 1e-4
