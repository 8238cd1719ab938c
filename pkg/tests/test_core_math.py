import numpy as np
import pytest

from sgee2.core_math import (
    DiagonalWeight,
    EquicorrelatedCovariance,
    equicorr_inverse_coeffs,
    equicorr_pd_bounds,
    expit,
    fisher_z,
    inv_fisher_z,
    invert_equicorrelated,
    logit,
    pair_enumerate,
    sparse_weighted_product,
)
from sgee2.errors import DomainError, ShapeError, SingularityError


def test_expit_logit_roundtrip():
    x = np.linspace(-20, 20, 101)
    assert np.allclose(logit(expit(x)), x, atol=1e-7)
    assert expit(0.0) == 0.5


def test_expit_extreme_tails_stay_in_unit_interval():
    assert expit(-800.0) == 0.0
    assert expit(800.0) == 1.0
    assert 0.0 < expit(-700.0 + 1e3) <= 1.0


def test_logit_rejects_boundary():
    for bad in (0.0, 1.0, -0.1, 1.1, np.nan):
        with pytest.raises(DomainError):
            logit(bad)


def test_fisher_z_roundtrip_and_edge():
    r = np.linspace(-0.99, 0.99, 41)
    assert np.allclose(inv_fisher_z(fisher_z(r)), r, atol=1e-12)
    with pytest.raises(DomainError):
        fisher_z(1.0)
    with pytest.raises(DomainError):
        fisher_z(-1.0 + 1e-13)


def test_pd_bounds():
    lo, hi = equicorr_pd_bounds(5)
    assert lo == pytest.approx(-0.25)
    assert hi == 1.0
    assert equicorr_pd_bounds(1)[0] == -np.inf


@pytest.mark.parametrize("n,rho", [(2, 0.3), (5, -0.2), (8, 0.95), (12, -0.08)])
def test_woodbury_identity(n, rho):
    # implicit inverse times the dense matrix is the identity
    rng = np.random.default_rng(n)
    u = rng.uniform(0.1, 2.0, n)
    cov = EquicorrelatedCovariance(n=n, rho=rho, u=u)
    inv = invert_equicorrelated(cov)
    assert np.allclose(inv.dense() @ cov.dense(), np.eye(n), atol=1e-10)
    m = rng.standard_normal((n, 3))
    assert np.allclose(inv.apply(m), np.linalg.solve(cov.dense(), m), atol=1e-10)
    v = rng.standard_normal(n)
    assert np.allclose(inv.apply(v), np.linalg.solve(cov.dense(), v), atol=1e-10)


def test_pd_violation_raises():
    with pytest.raises(SingularityError):
        EquicorrelatedCovariance(n=5, rho=-0.25, u=np.ones(5))
    with pytest.raises(SingularityError):
        equicorr_inverse_coeffs(4, 1.0)


def test_covariance_input_validation():
    with pytest.raises(ShapeError):
        EquicorrelatedCovariance(n=3, rho=0.1, u=np.ones(4))
    with pytest.raises(DomainError):
        EquicorrelatedCovariance(n=3, rho=0.1, u=np.array([1.0, 0.0, 1.0]))


def test_sparse_weighted_product_matches_dense():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((4, 9))
    n = rng.standard_normal((9, 5))
    w = rng.uniform(0, 1, 9)
    w[[1, 4, 7]] = 0.0
    weight = DiagonalWeight(entries=w)
    assert np.allclose(
        sparse_weighted_product(m, weight, n), m @ np.diag(w) @ n, atol=1e-12
    )
    assert np.array_equal(weight.support, np.array([0, 2, 3, 5, 6, 8]))


def test_sparse_weighted_product_empty_support():
    weight = DiagonalWeight(entries=np.zeros(3))
    out = sparse_weighted_product(np.ones((2, 3)), weight, np.ones((3, 2)))
    assert np.array_equal(out, np.zeros((2, 2)))


def test_diagonal_weight_rejects_negative():
    with pytest.raises(DomainError):
        DiagonalWeight(entries=np.array([0.5, -0.1]))


def test_pair_enumerate_order_and_flat():
    idx = pair_enumerate(4)
    assert idx.pairs == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    for pos, (j, k) in enumerate(idx.pairs):
        assert idx.flat(j, k) == pos
    assert len(pair_enumerate(1)) == 0
    with pytest.raises(DomainError):
        pair_enumerate(0)
