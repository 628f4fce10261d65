import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from strl import numerics as nx
from strl.numerics import Tensor

from oracles import central_diff, masked_ce_loop, rel_err


def grad_check(build, *shapes, rng, tol=1e-4, scale=1.0):
    """Compare tape gradients of ``sum(w * build(*xs))`` with central differences."""
    xs = [rng.normal(0, scale, size=s) for s in shapes]
    out_shape = build(*[Tensor(x) for x in xs]).shape
    w = rng.normal(size=out_shape)

    def loss_value():
        return float((build(*[Tensor(x) for x in xs]).data * w).sum())

    ts = [Tensor(x, requires_grad=True) for x in xs]
    nx.sum_all(nx.mul(build(*ts), Tensor(w))).backward()
    for t, x in zip(ts, xs):
        assert rel_err(t.grad, central_diff(loss_value, x)) < tol


def test_matmul_identity():
    out = nx.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
    assert np.array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_hand():
    assert nx.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]


def test_matmul_grad_is_ones_times_bT(f64, rng):
    A = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    B = rng.normal(size=(4, 2))
    nx.sum_all(nx.matmul(A, Tensor(B))).backward()
    np.testing.assert_allclose(A.grad, np.ones((3, 2)) @ B.T, rtol=1e-12)
    a = A.data.copy()
    fd = central_diff(lambda: float((a @ B).sum()), a)
    assert rel_err(A.grad, fd) < 1e-8


def test_matmul_shape_error():
    with pytest.raises(nx.ShapeError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_batched_with_shared_weight(f64, rng):
    grad_check(lambda a, b: nx.matmul(a, b), (2, 3, 4), (4, 5), rng=rng)
    grad_check(lambda a, b: nx.matmul(a, b), (2, 3, 4), (2, 4, 5), rng=rng)


def test_softmax_uniform():
    np.testing.assert_allclose(nx.softmax_rows(Tensor([[0.0, 0, 0, 0]])).data, [[0.25] * 4])


def test_softmax_ln2():
    np.testing.assert_allclose(nx.softmax_rows(Tensor([[math.log(2), 0.0]]), None).data, [[2 / 3, 1 / 3]], rtol=1e-6)


def test_softmax_masked(f64):
    out = nx.softmax_rows(Tensor([[5.0, 1.0, 3.0]]), np.array([[True, False, True]])).data
    e5, e3 = math.exp(5), math.exp(3)
    np.testing.assert_allclose(out, [[e5 / (e5 + e3), 0.0, e3 / (e5 + e3)]], rtol=1e-12)
    assert out[0, 1] == 0.0


def test_softmax_all_masked_row():
    with pytest.raises(ValueError):
        nx.softmax_rows(Tensor([[1.0, 2.0]]), np.array([[False, False]]))


@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(x):
    p = nx.softmax_rows(Tensor(x, dtype=np.float64)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


def test_layer_norm_constant_vector():
    out = nx.layer_norm(Tensor([[2.0, 2.0, 2.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-5)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_layer_norm_standardized(f64):
    out = nx.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-14)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], rtol=1e-10)


def test_layer_norm_grad(f64, rng):
    grad_check(lambda x, g, b: nx.layer_norm(x, g, b, 1e-5), (3, 4, 6), (6,), (6,), rng=rng)


def test_heaviside_forward():
    out = nx.heaviside_surrogate(Tensor([0.5, 1.5]), theta=1.0)
    assert out.data.tolist() == [0.0, 1.0]


def test_surrogate_peak():
    assert nx.surrogate_grad(np.array(1.0), 1.0, 2.0) == pytest.approx(1.0)
    assert nx.surrogate_grad(np.array(0.3), 0.3, 0.5) == pytest.approx(0.25)


def test_heaviside_backward_is_surrogate(f64, rng):
    u = rng.normal(1.0, 1.0, size=20)
    t = Tensor(u, requires_grad=True)
    nx.sum_all(nx.heaviside_surrogate(t, 1.0, 2.0)).backward()
    g = (2.0 / 2) / (1 + ((math.pi / 2) * 2.0 * (u - 1.0)) ** 2)
    np.testing.assert_allclose(t.grad, g, rtol=0, atol=1e-10)


@given(arrays(np.float64, (4, 4), elements=st.floats(-5, 5)))
def test_heaviside_is_binary(u):
    out = nx.heaviside_surrogate(Tensor(u), 0.3, 2.0).data
    assert set(np.unique(out)) <= {0.0, 1.0}


def test_smooth_step_derivative_matches_surrogate(f64, rng):
    u = rng.normal(1.0, 0.7, size=12)
    fd = central_diff(lambda: float(nx.smooth_step(u, 1.0, 2.0).sum()), u)
    np.testing.assert_allclose(fd, nx.surrogate_grad(u, 1.0, 2.0), rtol=1e-7)


def test_ce_uniform_logits():
    loss = nx.cross_entropy_masked(Tensor(np.zeros((2, 3, 4))), np.zeros((2, 3), int), np.ones((2, 3), bool))
    assert loss.item() == pytest.approx(math.log(4), rel=1e-6)
    assert loss.item() == pytest.approx(1.38629, abs=1e-5)


def test_ce_confident_limit():
    logits = np.zeros((1, 1, 4))
    logits[0, 0, 2] = 60.0
    loss = nx.cross_entropy_masked(Tensor(logits), np.array([[2]]), np.array([[True]]))
    assert loss.item() < 1e-20 + 1e-12


def test_ce_half_masked_matches_loop(f64, rng):
    logits = rng.normal(size=(4, 6, 4)) * 2
    targets = rng.integers(0, 4, size=(4, 6))
    mask = np.zeros((4, 6), bool)
    mask[:, :3] = True
    t = Tensor(logits, requires_grad=True)
    loss = nx.cross_entropy_masked(t, targets, mask)
    assert loss.item() == pytest.approx(masked_ce_loop(logits, targets, mask), rel=1e-12)
    loss.backward()
    assert np.all(t.grad[~mask] == 0.0)
    fd = central_diff(lambda: nx.cross_entropy_masked(Tensor(logits), targets, mask).item(), logits)
    assert rel_err(t.grad, fd) < 1e-7


def test_ce_all_masked():
    with pytest.raises(ValueError):
        nx.cross_entropy_masked(Tensor(np.zeros((1, 2, 4))), np.zeros((1, 2), int), np.zeros((1, 2), bool))


@pytest.mark.parametrize("trial", range(10))
def test_differentiable_ops_match_finite_differences(f64, trial):
    rng = np.random.default_rng(100 + trial)
    grad_check(lambda a, b: nx.matmul(a, b), (3, 4), (4, 2), rng=rng)
    grad_check(lambda a, b: nx.add(a, b), (2, 3, 4), (4,), rng=rng)
    grad_check(lambda a, b: nx.mul(a, b), (2, 3, 4), (3, 4), rng=rng)
    grad_check(lambda a: nx.softmax_rows(a, np.tril(np.ones((4, 4), bool))), (2, 4, 4), rng=rng)
    grad_check(lambda x, g, b: nx.layer_norm(x, g, b), (5, 6), (6,), (6,), rng=rng)
    grad_check(nx.gelu, (4, 5), rng=rng, scale=2.0)
    grad_check(lambda a: nx.transpose(nx.reshape(a, (2, 3, 4)), (0, 2, 1)), (6, 4), rng=rng)
    grad_check(lambda a: nx.mean_axis0(nx.expand(a, 3)), (2, 5), rng=rng)
    grad_check(lambda a: nx.scale(a, -1.7), (7,), rng=rng)
    grad_check(lambda w: nx.take_rows(w, np.array([[0, 2, 2], [1, 0, 4]])), (5, 3), rng=rng)


def test_chain_rule_three_ops(f64):
    # y = sum(gelu(2 * (x * w))): dy/dx = gelu'(2xw) * 2 * w
    x = np.array([0.3, -1.2, 2.0])
    w = np.array([1.5, 0.5, -0.25])
    tx = Tensor(x, requires_grad=True)
    nx.sum_all(nx.gelu(nx.scale(nx.mul(tx, Tensor(w)), 2.0))).backward()
    z = 2 * x * w
    c = math.sqrt(2 / math.pi)
    u = c * (z + 0.044715 * z**3)
    dgelu = 0.5 * (1 + np.tanh(u)) + 0.5 * z * (1 - np.tanh(u) ** 2) * c * (1 + 3 * 0.044715 * z**2)
    np.testing.assert_allclose(tx.grad, dgelu * 2 * w, rtol=1e-12)


def test_shared_input_accumulates(f64):
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    nx.sum_all(nx.mul(x, x) + x).backward()
    np.testing.assert_allclose(x.grad, [3.0, 5.0])


def test_broadcast_only_over_leading_dims():
    with pytest.raises(nx.ShapeError):
        nx.add(Tensor(np.ones((3, 4))), Tensor(np.ones(3)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_is_an_error():
    with pytest.raises(nx.NonFiniteError):
        nx.mul(Tensor([1e30]), Tensor([1e30]))


def test_precision_switch():
    assert Tensor([1.0]).data.dtype == np.float32
    with nx.precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_no_grad_builds_no_tape():
    x = Tensor([1.0], requires_grad=True)
    with nx.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_heaviside_strict_at_threshold():
    assert nx.heaviside_surrogate(Tensor([1.0]), theta=1.0).data.tolist() == [0.0]
