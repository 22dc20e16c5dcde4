"""Finite-difference validation of every autodiff primitive, in float64."""

import numpy as np
import pytest

from sowa import autodiff as ag
from sowa.errors import UsageError


def _fd_check(build, shapes, seed=0, step=1e-6, tol=1e-6):
    """Compare analytic gradients of a scalar graph against central differences."""
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    leaves = [ag.Var(a.copy(), requires_grad=True) for a in arrays]
    out = build(*leaves)
    out.backward()
    for leaf, base in zip(leaves, arrays):
        flat = leaf.data.reshape(-1)
        for idx in rng.choice(flat.size, size=min(5, flat.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + step
            hi = float(build(*leaves).data)
            flat[idx] = orig - step
            lo = float(build(*leaves).data)
            flat[idx] = orig
            fd = (hi - lo) / (2 * step)
            an = float(leaf.grad.reshape(-1)[idx])
            assert abs(an - fd) <= tol * max(1.0, abs(fd)), (an, fd)


def test_add_mul_broadcast():
    _fd_check(lambda a, b: ag.sum_(ag.mul(ag.add(a, b), a)), [(3, 4), (4,)])


def test_div():
    _fd_check(lambda a, b: ag.sum_(ag.div(a, ag.add(ag.mul(b, b), 1.0))), [(2, 3), (2, 3)])


def test_matmul_2d():
    _fd_check(lambda a, b: ag.sum_(ag.matmul(a, b)), [(3, 4), (4, 2)])


def test_matmul_stacked():
    _fd_check(lambda a, b: ag.sum_(ag.matmul(a, b)), [(2, 3, 4), (2, 4, 3)])


def test_matmul_vector_cases():
    _fd_check(lambda a, b: ag.sum_(ag.matmul(a, b)), [(4,), (4, 3)])
    _fd_check(lambda a, b: ag.sum_(ag.matmul(a, b)), [(3, 4), (4,)])
    _fd_check(lambda a, b: ag.matmul(a, b), [(4,), (4,)])


def test_matmul_vector_values_match_numpy():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(5,)), rng.normal(size=(5, 2))
    out = ag.matmul(ag.Var(a, requires_grad=True), ag.Var(b))
    np.testing.assert_allclose(out.data, a @ b, atol=1e-12)
    m = rng.normal(size=(3, 5))
    out2 = ag.matmul(ag.Var(m, requires_grad=True), ag.Var(a))
    np.testing.assert_allclose(out2.data, m @ a, atol=1e-12)


def test_exp_log_sqrt():
    _fd_check(lambda a: ag.sum_(ag.exp(a)), [(3, 3)])
    _fd_check(lambda a: ag.sum_(ag.log(ag.add(ag.mul(a, a), 1.0))), [(6,)])
    _fd_check(lambda a: ag.sum_(ag.sqrt(ag.add(ag.mul(a, a), 0.5))), [(5,)])


def test_tanh_power():
    _fd_check(lambda a: ag.sum_(ag.tanh(a)), [(4, 2)])
    _fd_check(lambda a: ag.sum_(ag.power(ag.add(ag.mul(a, a), 0.5), 1.7)), [(4,)])


def test_power_zero_exponent_is_constant():
    x = ag.Var(np.array([2.0, 3.0]), requires_grad=True)
    out = ag.sum_(ag.power(x, 0.0))
    assert float(out.data) == 2.0


def test_clip_gradient_mask():
    x = ag.Var(np.array([-2.0, 0.5, 2.0]), requires_grad=True)
    out = ag.sum_(ag.clip(x, 0.0, 1.0))
    out.backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_maximum_threshold():
    x = ag.Var(np.array([0.5, 2.0]), requires_grad=True)
    out = ag.sum_(ag.maximum(x, 1.0))
    out.backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_reductions():
    _fd_check(lambda a: ag.sum_(ag.mul(ag.sum_(a, axis=0, keepdims=True), a)), [(3, 4)])
    _fd_check(lambda a: ag.mean(ag.mul(a, a)), [(2, 5)])
    _fd_check(lambda a: ag.sum_(ag.mean(a, axis=1)), [(3, 4)])


def test_shape_ops():
    _fd_check(lambda a: ag.sum_(ag.mul(ag.reshape(a, (6,)), 2.0)), [(2, 3)])
    _fd_check(lambda a: ag.sum_(ag.mul(ag.transpose(a, (1, 0, 2)), 1.5)), [(2, 3, 4)])
    _fd_check(lambda a, b: ag.sum_(ag.mul(ag.concat([a, b], axis=0), 1.0)), [(2, 3), (4, 3)])


def test_take():
    _fd_check(lambda a: ag.sum_(ag.mul(a[1], 3.0)), [(4, 3)])
    _fd_check(lambda a: ag.sum_(a[:, 1]), [(4, 3)])


def test_softmax_last_and_norm():
    _fd_check(lambda a: ag.sum_(ag.mul(ag.softmax_last(a), np.arange(4.0))), [(3, 4)])
    _fd_check(lambda a: ag.sum_(ag.mul(ag.l2_normalize_rows(a), 1.0)), [(3, 4)])


def test_gelu_layer_norm():
    _fd_check(lambda a: ag.sum_(ag.gelu(a)), [(3, 4)])
    _fd_check(
        lambda a, s, o: ag.sum_(ag.mul(ag.layer_norm(a, s, o), np.ones((2, 6)))),
        [(2, 6), (6,), (6,)],
    )


def test_numpy_branch_matches_var_branch():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 5))
    var_out = ag.softmax_last(ag.Var(x, requires_grad=True)).data
    np.testing.assert_allclose(ag.softmax_last(x), var_out, atol=1e-12)
    var_norm = ag.l2_normalize_rows(ag.Var(x, requires_grad=True)).data
    np.testing.assert_allclose(ag.l2_normalize_rows(x), var_norm, atol=1e-12)


def test_backward_requires_scalar():
    x = ag.Var(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        ag.mul(x, 2.0).backward()


def test_gradient_accumulates_on_reuse():
    x = ag.Var(np.array([2.0]), requires_grad=True)
    out = ag.sum_(ag.add(ag.mul(x, x), x))  # x^2 + x -> d/dx = 2x + 1 = 5
    out.backward()
    np.testing.assert_allclose(x.grad, [5.0])


def test_constants_do_not_track():
    x = ag.Var(np.ones(3))  # requires_grad defaults False
    out = ag.mul(x, 2.0)
    assert not out.requires_grad and out._backward is None
