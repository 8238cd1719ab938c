import numpy as np
import pytest

from sgee2.core_math import expit, pair_enumerate
from sgee2.errors import DomainError, ShapeError
from sgee2.model import (
    ClusterData,
    Dataset,
    ModelSpec,
    ParameterVector,
    corr_design,
    jacobian,
    mean_design,
    predict_corr,
    predict_mean,
    rho_dagger,
    standardized_residuals,
    working_covariance,
)


def _cluster(n=5, a=1, seed=0, missing=()):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n).astype(float)
    y[list(missing)] = np.nan
    return ClusterData(
        id="c",
        a=a,
        z=np.array([2.0]),
        x=rng.uniform(-1, 1, (n, 2)),
        y=y,
    )


def test_cluster_data_observation_bookkeeping():
    cl = _cluster(n=6, missing=(1, 4))
    assert cl.n == 6
    assert cl.n_observed == 4
    assert np.array_equal(cl.observed, np.array([0, 2, 3, 5]))
    assert np.array_equal(cl.r, np.array([1, 0, 1, 1, 0, 1]))


def test_dataset_empirical_treatment_fraction():
    ds = Dataset((_cluster(a=1), _cluster(a=0), _cluster(a=0)))
    assert ds.p_a == pytest.approx(1 / 3)
    assert Dataset((_cluster(a=1), _cluster(a=0)), p_a=0.5).p_a == 0.5


def test_spec_counts_and_validation():
    spec = ModelSpec(
        target="OM",
        mean_main=("x1", "x2", "z1"),
        mean_interact=("x1",),
        corr_main=("z1",),
        corr_interact=(),
    )
    assert spec.n_beta == 2 + 3 + 1
    assert spec.n_alpha == 2 + 1
    tm = ModelSpec(target="TM")
    assert (tm.n_beta, tm.n_alpha) == (2, 2)
    with pytest.raises(DomainError):
        ModelSpec(target="treatment")
    with pytest.raises(DomainError):
        ModelSpec(target="OM", mean_main=("w1",))


def test_design_matrices():
    spec = ModelSpec(
        target="OM",
        mean_main=("x1", "z1"),
        mean_interact=("x2",),
        corr_main=("z1",),
        corr_interact=("z1",),
    )
    cl = _cluster(n=3, a=1)
    d = mean_design(spec, cl)
    assert d.shape == (3, 5)
    assert np.array_equal(d[:, 0], np.ones(3))
    assert np.array_equal(d[:, 1], np.ones(3))
    assert np.array_equal(d[:, 2], cl.x[:, 0])
    assert np.array_equal(d[:, 3], np.full(3, 2.0))
    assert np.array_equal(d[:, 4], cl.x[:, 1])  # a = 1
    row = corr_design(spec, cl)
    assert np.array_equal(row, np.array([1.0, 1.0, 2.0, 2.0]))
    cl0 = _cluster(n=3, a=0)
    assert np.array_equal(mean_design(spec, cl0)[:, 4], np.zeros(3))


def test_predict_mean_and_corr():
    spec = ModelSpec(target="TM")
    theta = ParameterVector(np.array([0.2, 0.5]), np.array([0.1, -0.3]))
    cl1 = _cluster(n=4, a=1)
    assert np.allclose(predict_mean(spec, theta, cl1), expit(0.7))
    assert predict_corr(spec, theta, cl1) == pytest.approx(np.tanh(-0.2))
    cl0 = _cluster(n=4, a=0)
    assert np.allclose(predict_mean(spec, theta, cl0), expit(0.2))


def test_parameter_vector_stacking():
    spec = ModelSpec(target="TM")
    theta = ParameterVector.from_stacked(np.array([1.0, 2.0, 3.0, 4.0]), spec)
    assert np.array_equal(theta.beta, [1.0, 2.0])
    assert np.array_equal(theta.alpha, [3.0, 4.0])
    assert np.array_equal(theta.stacked, [1.0, 2.0, 3.0, 4.0])
    with pytest.raises(ShapeError):
        ParameterVector.from_stacked(np.zeros(3), spec)


def test_standardized_residuals():
    pairs = pair_enumerate(3)
    y = np.array([1.0, 0.0, np.nan])
    e = standardized_residuals(y, 0.25, pairs)
    v = 0.25 * 0.75
    assert e[pairs.flat(0, 1)] == pytest.approx((0.75 * -0.25) / v)
    assert np.isnan(e[pairs.flat(0, 2)])
    assert np.isnan(e[pairs.flat(1, 2)])


def test_rho_dagger_identities():
    # equal means at the marginal value: transform returns rho itself
    assert rho_dagger(0.4, 0.4, 0.2, 0.4) == pytest.approx(0.2)
    # zero correlation leaves only the mean-shift product
    pi1, pi2, ps = 0.3, 0.6, 0.45
    expected = (pi1 - ps) * (pi2 - ps) / (ps * (1 - ps))
    assert rho_dagger(pi1, pi2, 0.0, ps) == pytest.approx(expected)


def test_rho_dagger_marginalization_recovers_icc():
    # E[rho_dagger | A] equals the correlation of the standardized residuals
    # under the mixture over conditional means
    rng = np.random.default_rng(8)
    n_mc = 200_000
    pi_pair = rng.uniform(0.3, 0.7, (n_mc, 2))
    rho = 0.15
    pi_star = pi_pair.mean()
    v = pi_pair * (1 - pi_pair)
    num = (pi_pair[:, 0] - pi_star) * (pi_pair[:, 1] - pi_star) + rho * np.sqrt(
        v[:, 0] * v[:, 1]
    )
    direct = np.mean(num / (pi_star * (1 - pi_star)))
    via_fn = np.mean(
        [
            rho_dagger(p1, p2, rho, pi_star)
            for p1, p2 in pi_pair[:2000]
        ]
    )
    assert direct == pytest.approx(
        np.mean(num[:2000] / (pi_star * (1 - pi_star))), abs=5e-3
    )
    assert via_fn == pytest.approx(
        np.mean(num[:2000] / (pi_star * (1 - pi_star))), abs=1e-12
    )


def test_jacobian_matches_finite_differences():
    spec = ModelSpec(target="TM")
    theta = ParameterVector(np.array([0.3, -0.2]), np.array([0.15, 0.05]))
    cl = _cluster(n=4, a=1, seed=2)
    jac = jacobian(spec, theta, cl)
    pairs = pair_enumerate(cl.n)
    h = 1e-6
    for j in range(2):
        up = theta.stacked.copy()
        up[j] += h
        dn = theta.stacked.copy()
        dn[j] -= h
        fd = (
            predict_mean(spec, ParameterVector(up[:2], up[2:]), cl)
            - predict_mean(spec, ParameterVector(dn[:2], dn[2:]), cl)
        ) / (2 * h)
        assert np.allclose(jac.d_mean[:, j], fd, atol=1e-7)
    for j in range(2):
        up = theta.stacked.copy()
        up[2 + j] += h
        dn = theta.stacked.copy()
        dn[2 + j] -= h
        fd = (
            predict_corr(spec, ParameterVector(up[:2], up[2:]), cl)
            - predict_corr(spec, ParameterVector(dn[:2], dn[2:]), cl)
        ) / (2 * h)
        assert jac.d_corr[j] == pytest.approx(fd, abs=1e-7)
    assert jac.n_pairs == len(pairs)


def test_working_covariance_blocks():
    cl = _cluster(n=4)
    pi = np.full(4, 0.4)
    wc = working_covariance(cl, pi, 0.2)
    dense = wc.dense()
    assert dense.shape == (4 + 6, 4 + 6)
    assert np.allclose(dense[4:, 4:], np.eye(6))
    v = np.arange(10.0)
    assert np.allclose(wc.inverse_apply(v), np.linalg.solve(dense, v), atol=1e-10)


def test_working_covariance_singleton_cluster():
    cl = _cluster(n=1)
    wc = working_covariance(cl, np.array([0.5]), 0.9)
    assert wc.dense().shape == (1, 1)
