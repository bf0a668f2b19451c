"""Autodiff correctness: analytic cases plus finite-difference sweeps."""

import numpy as np
import pytest

from rectiflow import numerics as nm
from rectiflow.errors import ContractError, ShapeError
from rectiflow.rng import Rng

H_FD = 1e-6
TOL = 1e-5


def fd_check(build_loss, params, rng, tol=TOL, h=H_FD):
    """Compare grad() against central finite differences on every entry.

    `build_loss` maps the live parameter tensors to a scalar Tensor; it is
    re-evaluated with perturbed entries, so it must be a pure function of
    the parameter data.
    """
    loss = build_loss()
    analytic = nm.grad(loss, params)
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = build_loss().item()
            flat[i] = orig - h
            down = build_loss().item()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            a = g.reshape(-1)[i]
            err = abs(a - numeric)
            assert err <= tol * max(1.0, abs(a), abs(numeric)), (
                f"gradient mismatch at entry {i}: analytic {a}, numeric {numeric}"
            )


def rand_param(rng, shape):
    return nm.parameter((rng.uniforms(int(np.prod(shape))) * 4.0 - 2.0).reshape(shape))


def random_projection(rng, t):
    r = nm.Tensor((rng.uniforms(t.size) * 2.0 - 1.0).reshape(t.shape))
    return nm.sum_all(nm.mul(t, r))


# ---------------------------------------------------------------------------
# analytic examples


def test_matmul_identity():
    x = nm.Tensor([[1.0, 2.0], [3.0, 4.0]])
    eye = nm.Tensor(np.eye(2))
    assert np.array_equal(nm.matmul(eye, x).data, x.data)


def test_matmul_hand_value():
    a = nm.Tensor([[1.0, 2.0]])
    b = nm.Tensor([[3.0], [4.0]])
    assert nm.matmul(a, b).data.tolist() == [[11.0]]


def test_matmul_zero_annihilates():
    a = nm.Tensor(np.arange(6, dtype=float).reshape(2, 3))
    z = nm.zeros((3, 4))
    assert np.array_equal(nm.matmul(a, z).data, np.zeros((2, 4)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        nm.matmul(nm.zeros((2, 3)), nm.zeros((2, 3)))
    assert "(2, 3)" in str(exc.value)


def test_elementwise_shape_error():
    with pytest.raises(ShapeError):
        nm.add(nm.zeros((2,)), nm.zeros((3,)))


def test_tanh_at_zero_value_and_derivative():
    x = nm.parameter([0.0])
    y = nm.sum_all(nm.tanh(x))
    assert y.item() == 0.0
    (g,) = nm.grad(y, [x])
    assert g[0] == pytest.approx(1.0, abs=1e-12)


def test_scale_by_one_is_identity():
    x = nm.Tensor([1.5, -2.5])
    assert np.array_equal(nm.scale(x, 1.0).data, x.data)


def test_add_neg_is_zero():
    x = nm.Tensor([1.0, -3.0, 2.5])
    assert np.array_equal(nm.add(x, nm.neg(x)).data, np.zeros(3))


def test_grad_of_squared_norm():
    x = nm.parameter([1.0, 2.0])
    loss = nm.sum_all(nm.mul(x, x))
    (g,) = nm.grad(loss, [x])
    assert g.tolist() == [2.0, 4.0]


def test_grad_of_constant_is_zero():
    x = nm.parameter([1.0, 2.0])
    loss = nm.sum_all(nm.Tensor([3.0]))
    (g,) = nm.grad(loss, [x])
    assert np.array_equal(g, np.zeros(2))


def test_grad_sum_tanh_at_zero_all_ones():
    x = nm.parameter(np.zeros(5))
    (g,) = nm.grad(nm.sum_all(nm.tanh(x)), [x])
    assert np.array_equal(g, np.ones(5))


def test_grad_rejects_non_scalar_loss():
    x = nm.parameter([1.0, 2.0])
    with pytest.raises(ContractError):
        nm.grad(nm.mul(x, x), [x])


def test_grad_accumulates_shared_subexpressions():
    # loss = sum(x*x) + sum(x*x) -> gradient 4x
    x = nm.parameter([1.0, -2.0])
    sq = nm.mul(x, x)
    loss = nm.add(nm.sum_all(sq), nm.sum_all(sq))
    (g,) = nm.grad(loss, [x])
    assert g.tolist() == [4.0, -8.0]


def test_no_grad_suppresses_tape():
    x = nm.parameter([1.0])
    with nm.no_grad():
        y = nm.mul(x, x)
    assert not y.requires_grad
    assert y._parents == ()


# ---------------------------------------------------------------------------
# finite-difference sweeps, >= 20 random instances per op


@pytest.mark.parametrize("trial", range(20))
def test_fd_matmul(trial):
    rng = Rng(1000 + trial)
    a = rand_param(rng, (3, 4))
    b = rand_param(rng, (4, 2))
    fd_check(lambda: random_projection(Rng(5000 + trial), nm.matmul(a, b)), [a, b], rng)


@pytest.mark.parametrize("op_name", ["add", "sub", "mul"])
@pytest.mark.parametrize("trial", range(20))
def test_fd_binary_elementwise(op_name, trial):
    rng = Rng(2000 + trial)
    op = getattr(nm, op_name)
    a = rand_param(rng, (2, 3))
    b = rand_param(rng, (2, 3))
    fd_check(lambda: random_projection(Rng(6000 + trial), op(a, b)), [a, b], rng)


@pytest.mark.parametrize("op_name", ["tanh", "softplus", "neg", "transpose"])
@pytest.mark.parametrize("trial", range(20))
def test_fd_unary(op_name, trial):
    rng = Rng(3000 + trial)
    op = getattr(nm, op_name)
    a = rand_param(rng, (3, 3))
    fd_check(lambda: random_projection(Rng(7000 + trial), op(a)), [a], rng)


@pytest.mark.parametrize("trial", range(20))
def test_fd_reshape(trial):
    rng = Rng(3200 + trial)
    a = rand_param(rng, (2, 6))
    fd_check(lambda: random_projection(Rng(7200 + trial), nm.reshape(a, (3, 4))), [a], rng)


def test_reshape_rejects_size_mismatch():
    with pytest.raises(ShapeError):
        nm.reshape(nm.zeros((2, 3)), (4, 2))


@pytest.mark.parametrize("trial", range(20))
def test_fd_scale(trial):
    rng = Rng(3500 + trial)
    a = rand_param(rng, (4,))
    s = rng.uniform() * 3.0 - 1.5
    fd_check(lambda: random_projection(Rng(7500 + trial), nm.scale(a, s)), [a], rng)


@pytest.mark.parametrize("trial", range(20))
def test_fd_sum_all(trial):
    rng = Rng(4000 + trial)
    a = rand_param(rng, (2, 5))
    fd_check(lambda: nm.sum_all(nm.mul(a, a)), [a], rng)


@pytest.mark.parametrize("trial", range(20))
def test_fd_add_bias(trial):
    rng = Rng(4500 + trial)
    m = rand_param(rng, (3, 4))
    v = rand_param(rng, (4,))
    fd_check(lambda: random_projection(Rng(8500 + trial), nm.add_bias(m, v)), [m, v], rng)


@pytest.mark.parametrize("trial", range(20))
def test_fd_concat_cols(trial):
    rng = Rng(4800 + trial)
    a = rand_param(rng, (3, 2))
    b = rand_param(rng, (3, 3))
    fd_check(lambda: random_projection(Rng(8800 + trial), nm.concat_cols([a, b])), [a, b], rng)


# ---------------------------------------------------------------------------
# gaussian tensors


def test_gaussian_deterministic_per_seed():
    a = nm.gaussian(Rng(42), [4])
    b = nm.gaussian(Rng(42), [4])
    assert np.array_equal(a.data, b.data)


def test_gaussian_moments():
    z = nm.gaussian(Rng(7), [100_000])
    assert abs(z.data.mean()) < 0.02
    assert abs(z.data.var() - 1.0) < 0.05


def test_gaussian_empty_shape():
    assert nm.gaussian(Rng(1), [0]).shape == (0,)


def test_gaussian_rejects_negative_dim():
    with pytest.raises(ShapeError):
        nm.gaussian(Rng(1), [-1])


def test_outputs_stay_finite():
    rng = Rng(99)
    a = rand_param(rng, (8, 8))
    b = rand_param(rng, (8, 8))
    for t in [nm.matmul(a, b), nm.add(a, b), nm.mul(a, b), nm.tanh(a), nm.softplus(b)]:
        assert np.isfinite(t.data).all()
