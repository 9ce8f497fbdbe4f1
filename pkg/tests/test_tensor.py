"""Tensor ops against naive oracles, and tape/backward semantics."""

import math

import numpy as np
import pytest

from sur import tensor as tz
from sur.errors import DimensionError, NumericError, TapeError
from sur.tensor import Tape, Tensor, backward

from conftest import central_diff, rel_error


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    m = Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(tz.matmul(eye, m).data, m.data)


def test_matmul_by_hand():
    out = tz.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


@pytest.mark.parametrize("m,k,n", [(4, 5, 3), (32, 32, 32)])
def test_matmul_against_triple_loop(m, k, n):
    rng = np.random.default_rng(1)
    a = rng.standard_normal((m, k))
    b = rng.standard_normal((k, n))
    expected = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for kk in range(k):
                expected[i, j] += a[i, kk] * b[kk, j]
    out = tz.matmul(Tensor(a), Tensor(b))
    assert np.abs(out.data - expected).max() < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        tz.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_row_softmax_uniform():
    out = tz.row_softmax(Tensor([[0.0, 0.0, 0.0]]))
    assert np.abs(out.data - 1.0 / 3.0).max() < 1e-15


def test_row_softmax_huge_logits_no_overflow():
    out = tz.row_softmax(Tensor([[1000.0, 1000.0]]))
    assert out.data.tolist() == [[0.5, 0.5]]


def test_row_softmax_matches_longdouble_oracle():
    x = np.array([[1.0, 2.0, 3.0]])
    ext = np.exp(x.astype(np.longdouble))
    expected = (ext / ext.sum()).astype(np.float64)
    out = tz.row_softmax(Tensor(x))
    assert np.abs(out.data - expected).max() < 1e-12


def test_row_softmax_rows_are_distributions():
    rng = np.random.default_rng(2)
    out = tz.row_softmax(Tensor(rng.standard_normal((7, 9)) * 5.0))
    assert np.abs(out.data.sum(axis=1) - 1.0).max() < 1e-12
    assert (out.data > 0.0).all() and (out.data < 1.0).all()


def test_row_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        tz.row_softmax(Tensor([[np.nan, 0.0]]))


def test_kl_div_identical_is_zero():
    rng = np.random.default_rng(3)
    v = rng.standard_normal(6)
    assert abs(tz.kl_div(Tensor(v), Tensor(v.copy()), 1.0).item()) < 1e-12


def test_kl_div_two_point_closed_form():
    # softmax([0,0]) = (1/2, 1/2); softmax([log 3, 0]) = (3/4, 1/4);
    # KL = 0.5 log(1/2 / 3/4) + 0.5 log(1/2 / 1/4) = 0.5 log(4/3)
    out = tz.kl_div(Tensor([0.0, 0.0]), Tensor([math.log(3.0), 0.0]), 1.0)
    assert abs(out.item() - 0.14384103622589046) < 1e-12


def test_kl_div_matches_summation_oracle():
    rng = np.random.default_rng(4)
    tau = 2.0
    p = rng.standard_normal(8)
    q = rng.standard_normal(8)

    def softmax_ld(v):
        e = np.exp(v.astype(np.longdouble) / tau)
        return e / e.sum()

    sp, sq = softmax_ld(p), softmax_ld(q)
    expected = float((sp * (np.log(sp) - np.log(sq))).sum())
    out = tz.kl_div(Tensor(p), Tensor(q), tau)
    assert abs(out.item() - expected) < 1e-12
    assert out.item() >= -1e-12


def test_kl_div_shift_invariance():
    rng = np.random.default_rng(5)
    v = rng.standard_normal(10)
    assert abs(tz.kl_div(Tensor(v), Tensor(v + 3.7), 1.5).item()) < 1e-12


def test_kl_div_length_mismatch():
    with pytest.raises(DimensionError):
        tz.kl_div(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]), 1.0)


def test_mse_zero_for_equal():
    v = Tensor([1.0, 2.0, 3.0])
    assert tz.mse(v, Tensor([1.0, 2.0, 3.0])).item() == 0.0


def test_mse_by_hand():
    assert tz.mse(Tensor([0.0, 0.0]), Tensor([3.0, 4.0])).item() == 12.5


def test_mse_matches_loop_oracle():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((5, 7))
    total = 0.0
    for i in range(5):
        for j in range(7):
            total += (a[i, j] - b[i, j]) ** 2
    assert abs(tz.mse(Tensor(a), Tensor(b)).item() - total / 35.0) < 1e-12


def test_mean_rows_single_row():
    out = tz.mean_rows(Tensor([[4.0, 5.0, 6.0]]))
    assert out.data.tolist() == [4.0, 5.0, 6.0]


def test_mean_rows_by_hand():
    out = tz.mean_rows(Tensor([[1.0, 3.0], [3.0, 5.0]]))
    assert out.data.tolist() == [2.0, 4.0]


def test_mean_rows_matches_loop_oracle():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((7, 16))
    expected = np.zeros(16)
    for row in x:
        expected += row
    expected /= 7.0
    assert np.abs(tz.mean_rows(Tensor(x)).data - expected).max() < 1e-12


def test_mean_rows_empty_errors():
    with pytest.raises(DimensionError):
        tz.mean_rows(Tensor(np.zeros((0, 3))))


# ---------------------------------------------------------------------------
# tape and backward


def test_backward_quadratic():
    w = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        loss = tz.mse(w, Tensor(0.0))
    backward(loss, tape)
    assert w.grad == pytest.approx(6.0, abs=1e-12)


def test_backward_sum_matmul_matches_fd():
    rng = np.random.default_rng(8)
    a0 = rng.standard_normal((3, 4))
    b0 = rng.standard_normal((4, 2))
    a = Tensor(a0, requires_grad=True)
    b = Tensor(b0, requires_grad=True)
    with Tape() as tape:
        loss = tz.sum_all(tz.matmul(a, b))
    backward(loss, tape)
    fd_a = central_diff(lambda arr: float((arr @ b0).sum()), a0)
    fd_b = central_diff(lambda arr: float((a0 @ arr).sum()), b0)
    assert rel_error(a.grad, fd_a) < 1e-6
    assert rel_error(b.grad, fd_b) < 1e-6


def test_backward_twice_errors():
    w = Tensor(2.0, requires_grad=True)
    with Tape() as tape:
        loss = tz.mse(w, Tensor(0.0))
    backward(loss, tape)
    with pytest.raises(TapeError):
        backward(loss, tape)


def test_backward_detached_loss_errors():
    w = Tensor(2.0, requires_grad=True)
    loss = tz.mse(w, Tensor(0.0))  # no active tape
    tape = Tape()
    with pytest.raises(TapeError):
        backward(loss, tape)


def test_backward_non_scalar_errors():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        out = tz.scale(a, 2.0)
    with pytest.raises(DimensionError):
        backward(out, tape)


def test_backward_gradient_accumulates_over_shared_input():
    # w used twice: loss = mse(w, 0) + mse(w, 0) has grad 2 * 2w
    w = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        loss = tz.add(tz.mse(w, Tensor(0.0)), tz.mse(w, Tensor(0.0)))
    backward(loss, tape)
    assert w.grad == pytest.approx(12.0, abs=1e-12)


def test_backward_deterministic():
    def run():
        rng = np.random.default_rng(9)
        a = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        with Tape() as tape:
            loss = tz.mse(tz.row_softmax(tz.matmul(a, b)), Tensor(np.zeros((4, 4))))
        backward(loss, tape)
        return a.grad.copy(), b.grad.copy()

    ga1, gb1 = run()
    ga2, gb2 = run()
    assert np.array_equal(ga1, ga2) and np.array_equal(gb1, gb2)


def test_no_tape_means_no_recording():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    out = tz.scale(a, 3.0)
    assert out._tape is None


# ---------------------------------------------------------------------------
# per-op gradient checks (central differences, step 1e-5)


def _check_unary(op, x0, h=1e-5, **kwargs):
    x = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        loss = tz.sum_all(op(x, **kwargs)) if op is not tz.sum_all else op(x)
    backward(loss, tape)

    def value(arr):
        out = op(Tensor(arr), **kwargs) if op is not tz.sum_all else op(Tensor(arr))
        return float(out.data.sum())

    assert rel_error(x.grad, central_diff(value, x0, h)) < 1e-6


def test_grad_row_softmax():
    # summed softmax is constant per row, so probe through a weighted target
    rng = np.random.default_rng(10)
    x0 = rng.standard_normal((3, 5))
    target = rng.standard_normal((3, 5))
    x = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        loss = tz.mse(tz.row_softmax(x), Tensor(target))
    backward(loss, tape)

    def value(arr):
        z = arr - arr.max(axis=1, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=1, keepdims=True)
        return float(((s - target) ** 2).mean())

    assert rel_error(x.grad, central_diff(value, x0)) < 1e-6


def test_grad_tanh():
    _check_unary(tz.tanh, np.random.default_rng(11).standard_normal((4, 3)))


def test_grad_transpose():
    _check_unary(tz.transpose, np.random.default_rng(12).standard_normal((3, 4)))


def test_grad_scale():
    _check_unary(tz.scale, np.random.default_rng(13).standard_normal((2, 5)), c=-1.7)


def test_grad_mean_rows():
    _check_unary(tz.mean_rows, np.random.default_rng(14).standard_normal((5, 4)))


def test_grad_slice_rows():
    _check_unary(tz.slice_rows, np.random.default_rng(15).standard_normal((5, 4)), k=3)


def test_grad_reshape():
    _check_unary(tz.reshape, np.random.default_rng(16).standard_normal((2, 6)), shape=(3, 4))


def test_grad_sum_all():
    _check_unary(tz.sum_all, np.random.default_rng(17).standard_normal((3, 3)))


@pytest.mark.parametrize("op", [tz.add, tz.sub, tz.mul])
def test_grad_binary_elementwise(op):
    rng = np.random.default_rng(18)
    a0 = rng.standard_normal((3, 4))
    b0 = rng.standard_normal((3, 4))
    a = Tensor(a0.copy(), requires_grad=True)
    b = Tensor(b0.copy(), requires_grad=True)
    with Tape() as tape:
        loss = tz.sum_all(op(a, b))
    backward(loss, tape)
    fd_a = central_diff(lambda arr: float(op(Tensor(arr), Tensor(b0)).data.sum()), a0)
    fd_b = central_diff(lambda arr: float(op(Tensor(a0), Tensor(arr)).data.sum()), b0)
    assert rel_error(a.grad, fd_a) < 1e-6
    assert rel_error(b.grad, fd_b) < 1e-6


def test_grad_add_rowvec():
    rng = np.random.default_rng(19)
    x0 = rng.standard_normal((4, 3))
    v0 = rng.standard_normal(3)
    x = Tensor(x0.copy(), requires_grad=True)
    v = Tensor(v0.copy(), requires_grad=True)
    with Tape() as tape:
        loss = tz.sum_all(tz.tanh(tz.add_rowvec(x, v)))
    backward(loss, tape)
    fd_v = central_diff(lambda arr: float(np.tanh(x0 + arr[None, :]).sum()), v0)
    assert rel_error(v.grad, fd_v) < 1e-6


def test_grad_mse_both_sides():
    rng = np.random.default_rng(20)
    a0 = rng.standard_normal((3, 3))
    b0 = rng.standard_normal((3, 3))
    a = Tensor(a0.copy(), requires_grad=True)
    b = Tensor(b0.copy(), requires_grad=True)
    with Tape() as tape:
        loss = tz.mse(a, b)
    backward(loss, tape)
    fd_a = central_diff(lambda arr: float(((arr - b0) ** 2).mean()), a0)
    fd_b = central_diff(lambda arr: float(((a0 - arr) ** 2).mean()), b0)
    assert rel_error(a.grad, fd_a) < 1e-6
    assert rel_error(b.grad, fd_b) < 1e-6


def test_grad_kl_div_both_sides():
    rng = np.random.default_rng(21)
    p0 = rng.standard_normal(7)
    q0 = rng.standard_normal(7)
    tau = 1.7

    def kl_value(p, q):
        def ls(v):
            z = v / tau
            z = z - z.max()
            return z - np.log(np.exp(z).sum())
        lp, lq = ls(p), ls(q)
        return float(np.exp(lp) @ (lp - lq))

    p = Tensor(p0.copy(), requires_grad=True)
    q = Tensor(q0.copy(), requires_grad=True)
    with Tape() as tape:
        loss = tz.kl_div(p, q, tau)
    backward(loss, tape)
    fd_p = central_diff(lambda arr: kl_value(arr, q0), p0)
    fd_q = central_diff(lambda arr: kl_value(p0, arr), q0)
    assert rel_error(p.grad, fd_p) < 1e-6
    assert rel_error(q.grad, fd_q) < 1e-6


def test_grad_concat_cols_and_mean_of():
    rng = np.random.default_rng(22)
    a0 = rng.standard_normal((1, 3))
    b0 = rng.standard_normal((1, 2))
    a = Tensor(a0.copy(), requires_grad=True)
    b = Tensor(b0.copy(), requires_grad=True)
    with Tape() as tape:
        joined = tz.concat_cols([a, b])
        loss = tz.mean_of([tz.sum_all(joined), tz.mse(a, Tensor(np.zeros((1, 3))))])
    backward(loss, tape)
    fd_a = central_diff(
        lambda arr: 0.5 * (float(arr.sum() + b0.sum()) + float((arr ** 2).mean())), a0)
    assert rel_error(a.grad, fd_a) < 1e-6
    assert rel_error(b.grad, np.full_like(b0, 0.5)) < 1e-6


def test_tensor_invariants():
    t = Tensor(np.arange(6.0).reshape(2, 3))
    assert t.shape == (2, 3)
    assert t.data.size == 6
    assert t.grad is None and not t.requires_grad
    assert np.isfinite(t.data).all()
