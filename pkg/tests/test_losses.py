import numpy as np
import pytest
from hypothesis import given, strategies as st

from cql.errors import ContractError
from cql.losses import (CompositeWeights, LossBasis, LossComponent, composite_loss,
                        composite_subgradient, prox_composite, quantile_grid)

Q = lambda tau, b=0.0: LossBasis((LossComponent("quantile", tau=tau, offset=b),))
finite = st.floats(-50, 50, allow_nan=False)


def test_loss_examples():
    assert composite_loss(LossBasis.squared(), [1.0], 2.0) == 4.0
    assert composite_loss(Q(0.5), [2.0], -3.0) == pytest.approx(3.0)
    assert composite_loss(Q(0.3, 0.1), [1.0], 1.1) == pytest.approx(0.3)


def test_subgradient_examples():
    assert composite_subgradient(LossBasis.squared(), [1.0], 3.0) == 6.0
    assert composite_subgradient(LossBasis.absolute(), [1.0], -0.5) == -1.0
    assert composite_subgradient(Q(0.25), [4.0], 2.0) == pytest.approx(1.0)


def test_subgradient_at_kinks():
    assert composite_subgradient(Q(0.3, 1.0), [1.0], 1.0) == pytest.approx(0.3)
    assert composite_subgradient(LossBasis.absolute(2.0), [1.0], 2.0) == 0.0


def test_length_mismatch():
    with pytest.raises(ContractError):
        composite_loss(LossBasis.l1l2(), [1.0], 0.0)
    with pytest.raises(ContractError):
        composite_subgradient(LossBasis.cqr(3), [1.0, 1.0], 0.0)


def test_basis_invariants():
    with pytest.raises(ContractError):
        LossComponent("quantile", tau=1.0)
    with pytest.raises(ContractError):
        LossComponent("squared", offset=1.0)
    with pytest.raises(ContractError):
        LossBasis((LossComponent("quantile", tau=0.6), LossComponent("quantile", tau=0.4)))
    with pytest.raises(ContractError):
        LossBasis((LossComponent("squared"), LossComponent("squared")))
    with pytest.raises(ContractError):
        CompositeWeights([0.0, 0.0])
    with pytest.raises(ContractError):
        CompositeWeights([1.0, -1.0], "constrained")
    assert CompositeWeights([1.0, -1.0], "unconstrained").w[1] == -1.0


def test_prox_examples():
    assert prox_composite(LossBasis.squared(), [1.0], 4.0, 0.5) == pytest.approx(2.0)
    assert prox_composite(LossBasis.absolute(), [1.0], 0.3, 1.0) == 0.0
    assert prox_composite(LossBasis.absolute(), [1.0], 5.0, 1.0) == pytest.approx(4.0)


def test_prox_matches_grid_oracle():
    # golden-section style check by dense grid
    basis = LossBasis.cqr(3, offsets=[-1.0, 0.2, 0.9])
    w = [0.5, 1.0, 2.0]
    grid = np.linspace(-6, 6, 1_200_001)
    for v, step in [(3.0, 0.7), (-2.0, 1.5), (0.5, 0.1), (0.2, 3.0)]:
        f = composite_loss(basis, w, grid) + (grid - v) ** 2 / (2 * step)
        assert prox_composite(basis, w, v, step) == pytest.approx(grid[np.argmin(f)], abs=2e-5)


def test_prox_refuses_unconstrained():
    with pytest.raises(ContractError):
        prox_composite(LossBasis.l1l2(), CompositeWeights([1.0, -0.5], "unconstrained"), 1.0, 1.0)
    with pytest.raises(ContractError):
        prox_composite(LossBasis.squared(), [1.0], 1.0, 0.0)


def test_quantile_grid():
    assert np.allclose(quantile_grid(1), [0.5])
    assert np.allclose(quantile_grid(3), [0.25, 0.5, 0.75])
    assert np.allclose(quantile_grid(9), np.arange(1, 10) / 10)
    with pytest.raises(ContractError):
        quantile_grid(0)


bases = st.sampled_from([LossBasis.squared(), LossBasis.absolute(0.3), LossBasis.l1l2(-0.2),
                         LossBasis.cqr(3, [-1.0, 0.0, 1.5]), LossBasis.cqr(5)])


def _weights(basis, data):
    return data.draw(st.lists(st.floats(0, 5), min_size=basis.K, max_size=basis.K)
                     .filter(lambda w: sum(w) > 1e-3))


@given(bases, st.data(), finite, finite, st.floats(0, 1))
def test_convexity(basis, data, r1, r2, th):
    w = _weights(basis, data)
    lhs = composite_loss(basis, w, th * r1 + (1 - th) * r2)
    rhs = th * composite_loss(basis, w, r1) + (1 - th) * composite_loss(basis, w, r2)
    assert lhs <= rhs + 1e-9 * (1 + abs(rhs))


@given(bases, st.data(), finite, st.floats(1e-6, 10))
def test_subgradient_inequality(basis, data, r, h):
    w = _weights(basis, data)
    f0 = composite_loss(basis, w, r)
    g = composite_subgradient(basis, w, r)
    tol = 1e-9 * (1 + abs(f0))
    assert composite_loss(basis, w, r + h) >= f0 + h * g - tol
    assert composite_loss(basis, w, r - h) >= f0 - h * g - tol


@given(bases, st.data(), finite, st.floats(0.01, 10))
def test_prox_optimality(basis, data, v, step):
    w = _weights(basis, data)
    z = prox_composite(basis, w, v, step)
    f = lambda t: composite_loss(basis, w, t) + (t - v) ** 2 / (2 * step)
    h = 1e-7
    # one-sided difference quotients bracket zero
    assert (f(z + h) - f(z)) / h >= -1e-5
    assert (f(z) - f(z - h)) / h <= 1e-5


@given(bases, st.data(), finite, st.floats(0.01, 100))
def test_scale_identity(basis, data, r, c):
    w = np.array(_weights(basis, data))
    assert composite_loss(basis, c * w, r) == pytest.approx(c * composite_loss(basis, w, r), rel=1e-12, abs=1e-300)
