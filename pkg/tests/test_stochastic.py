import numpy as np
import pytest

from sgee2.core_math import DiagonalWeight, pair_enumerate
from sgee2.errors import (
    AggregateChainFailure,
    ConfigError,
    SamplingError,
    ShapeError,
)
from sgee2.estimators import (
    ScoringControls,
    augmentation_term,
    fit_complete_case,
    fit_dr_gee2,
    fit_ipw_gee2,
    fit_omee,
    fit_psee,
)
from sgee2.model import ModelSpec, ParameterVector
from sgee2.stochastic import (
    SamplingPlan,
    _upsilon,
    default_gamma,
    induced_weights,
    par_sgee2,
    s_dr_gee2,
    s_ipw_gee2,
    s_omee,
    s_psee,
    srswor,
    stochastic_zeta,
)
from test_estimators import _simulate


def _nocov(b0, ba, a0, aa):
    beta = np.zeros(10)
    beta[:2] = [b0, ba]
    alpha = np.zeros(4)
    alpha[:2] = [a0, aa]
    return beta, alpha


@pytest.fixture(scope="module")
def small_data():
    yb, ya = _nocov(0.2, 0.5, 0.08, 0.25)
    rb, ra = _nocov(1.0, 0.3, 0.05, 0.15)
    ds = _simulate(
        n_clusters=60, size_law=(10, 20), seed=31,
        y_beta=yb, y_alpha=ya, r_beta=rb, r_alpha=ra,
    )
    psee = fit_psee(ds, ModelSpec(target="PSM"))
    omee = fit_omee(ds, ModelSpec(target="OM"))
    return ds, psee, omee


def test_default_gamma_schedule():
    assert default_gamma(0) == 1.0
    assert default_gamma(4) == pytest.approx(0.2)


def test_sampling_plan_validation():
    with pytest.raises(ConfigError):
        SamplingPlan(pi_s=0.0)
    with pytest.raises(ConfigError):
        SamplingPlan(pi_s=1.5)
    with pytest.raises(ConfigError):
        SamplingPlan(omega_tm=0)
    with pytest.raises(ConfigError):
        SamplingPlan(chains=0)
    with pytest.raises(ConfigError):
        SamplingPlan(gamma=lambda w: 0.0)
    plan = SamplingPlan(gamma=[0.5] * 20)
    assert plan.gamma_at(3) == 0.5
    assert SamplingPlan().gamma_at(9) == pytest.approx(0.1)


def test_srswor_properties():
    rng = np.random.default_rng(0)
    universe = np.array([3, 5, 8, 11, 14])
    s = srswor(universe, 3, rng)
    assert len(set(s.tolist())) == 3
    assert set(s.tolist()) <= set(universe.tolist())
    # identical generator state gives identical draws
    a = srswor(universe, 3, np.random.default_rng(7))
    b = srswor(universe, 3, np.random.default_rng(7))
    assert np.array_equal(a, b)
    with pytest.raises(SamplingError):
        srswor(universe, 6, rng)
    with pytest.raises(SamplingError):
        srswor(universe, 0, rng)


def test_upsilon_floor_and_cap():
    assert _upsilon(0.3, 10) == 3
    assert _upsilon(0.01, 10) == 2   # floor of two for pair terms
    assert _upsilon(0.99, 10) == 10
    assert _upsilon(0.5, 1) == 1
    assert _upsilon(0.5, 0) == 0


def test_induced_weights_first_order():
    w = DiagonalWeight(np.array([1.0, 2.0, 3.0, 4.0]))
    out = induced_weights(w, np.array([1, 3]), m_i=4, upsilon_i=2, order="first")
    assert np.allclose(out.entries, [0.0, 4.0, 0.0, 8.0])


def test_induced_weights_second_order():
    n = 4
    pairs = pair_enumerate(n)
    w = DiagonalWeight(np.arange(1.0, len(pairs) + 1.0))
    out = induced_weights(
        w, np.array([0, 2, 3]), m_i=4, upsilon_i=3, order="second", pairs=pairs
    )
    fac = (4 * 3) / (3 * 2)
    for pos, (j, k) in enumerate(pairs.pairs):
        if {j, k} <= {0, 2, 3}:
            assert out.entries[pos] == pytest.approx(w.entries[pos] * fac)
        else:
            assert out.entries[pos] == 0.0
    with pytest.raises(SamplingError):
        induced_weights(w, np.array([0]), 4, 1, "second", pairs=pairs)
    with pytest.raises(ShapeError):
        induced_weights(w, np.array([0, 1]), 4, 2, "second")
    with pytest.raises(ShapeError):
        induced_weights(w, np.array([0, 1]), 4, 2, "third")


def test_induced_weights_unbiased_over_samples():
    rng = np.random.default_rng(3)
    m = 6
    w = DiagonalWeight(rng.uniform(0.5, 2.0, m))
    acc = np.zeros(m)
    reps = 20000
    for _ in range(reps):
        s = srswor(np.arange(m), 3, rng)
        acc += induced_weights(w, s, m, 3, "first").entries
    # E over SRSWOR of the inflated masked weights is the original diagonal
    assert np.allclose(acc / reps, w.entries, atol=0.05)


def test_full_sampling_unit_rate_matches_deterministic(small_data):
    ds, psee, omee = small_data
    plan = SamplingPlan(pi_s=1.0, omega_nuisance=40, omega_tm=40,
                        gamma=lambda w: 1.0, seed=5)
    det = fit_psee(ds, ModelSpec(target="PSM"))
    sto = s_psee(ds, ModelSpec(target="PSM"), plan)
    assert sto.converged
    assert np.allclose(sto.theta.stacked, det.theta.stacked, atol=1e-10)

    det_tm = fit_ipw_gee2(ds, ModelSpec(target="TM"), psee, "g2")
    sto_tm = s_ipw_gee2(ds, ModelSpec(target="TM"), psee, plan, mode="g2")
    assert np.allclose(sto_tm.theta.stacked, det_tm.theta.stacked, atol=1e-10)

    det_dr = fit_dr_gee2(ds, ModelSpec(target="TM"), psee, omee)
    sto_dr = s_dr_gee2(ds, ModelSpec(target="TM"), psee, omee, plan)
    assert np.allclose(sto_dr.theta.stacked, det_dr.theta.stacked, atol=1e-10)


def test_stochastic_chains_near_deterministic(small_data):
    ds, psee, omee = small_data
    plan = SamplingPlan(pi_s=0.5, omega_nuisance=60, omega_tm=60, seed=2)
    det = fit_ipw_gee2(ds, ModelSpec(target="TM"), psee, "g2")
    sto = s_ipw_gee2(ds, ModelSpec(target="TM"), psee, plan, mode="g2")
    assert sto.converged
    assert np.all(np.abs(sto.theta.stacked - det.theta.stacked) < 0.1)


def test_stage_seeds_reproducible(small_data):
    ds, psee, omee = small_data
    plan = SamplingPlan(pi_s=0.4, omega_tm=15, seed=11)
    a = s_dr_gee2(ds, ModelSpec(target="TM"), psee, omee, plan, chain=0)
    b = s_dr_gee2(ds, ModelSpec(target="TM"), psee, omee, plan, chain=0)
    assert np.array_equal(a.theta.stacked, b.theta.stacked)
    c = s_dr_gee2(ds, ModelSpec(target="TM"), psee, omee, plan, chain=1)
    assert not np.array_equal(a.theta.stacked, c.theta.stacked)
    # nuisance stages draw from distinct streams than the treatment stage
    p1 = s_psee(ds, ModelSpec(target="PSM"), plan)
    p2 = s_omee(ds, ModelSpec(target="OM"), plan)
    assert not np.array_equal(p1.theta.stacked, p2.theta.stacked)


def test_zeta_variant_three_unbiased_for_augmentation(small_data):
    ds, psee, omee = small_data
    tm_theta = ParameterVector(np.array([0.2, 0.4]), np.array([0.05, 0.2]))
    tm_spec = ModelSpec(target="TM")
    cluster = ds.clusters[0]
    exact = augmentation_term(cluster, tm_spec, tm_theta, omee, ds.p_a)
    rng = np.random.default_rng(9)
    up = _upsilon(0.4, cluster.n)
    draws = np.array(
        [
            stochastic_zeta(
                cluster, tm_spec, tm_theta, omee, ds.p_a,
                srswor(np.arange(cluster.n), up, rng), variant="z3",
            )
            for _ in range(3000)
        ]
    )
    se = draws.std(axis=0, ddof=1) / np.sqrt(draws.shape[0])
    z = (draws.mean(axis=0) - exact) / np.maximum(se, 1e-12)
    assert np.all(np.abs(z) < 4.0)


def test_zeta_observed_sample_variants_are_biased(small_data):
    # restricting the augmentation to observed indices misses the
    # counterfactual part of the correction under informative missingness
    ds, psee, omee = small_data
    tm_theta = ParameterVector(np.array([0.2, 0.4]), np.array([0.05, 0.2]))
    tm_spec = ModelSpec(target="TM")
    cluster = next(c for c in ds.clusters if c.n_observed < c.n)
    exact = augmentation_term(cluster, tm_spec, tm_theta, omee, ds.p_a)
    rng = np.random.default_rng(13)
    m = cluster.n_observed
    up = _upsilon(0.4, m)
    for variant in ("z1", "z2"):
        draws = np.array(
            [
                stochastic_zeta(
                    cluster, tm_spec, tm_theta, omee, ds.p_a,
                    srswor(cluster.observed, up, rng), variant=variant,
                    psee_fit=psee,
                )
                for _ in range(2000)
            ]
        )
        se = draws.std(axis=0, ddof=1) / np.sqrt(draws.shape[0])
        z = (draws.mean(axis=0) - exact) / np.maximum(se, 1e-12)
        assert np.max(np.abs(z)) > 5.0, variant
    with pytest.raises(ShapeError):
        stochastic_zeta(
            cluster, tm_spec, tm_theta, omee, ds.p_a,
            cluster.observed, variant="z9",
        )


def test_par_sgee2_averages_convergent_chains(small_data):
    ds, psee, omee = small_data
    plan = SamplingPlan(pi_s=0.4, omega_tm=15, seed=3, chains=4)
    avg, chains = par_sgee2(ds, ModelSpec(target="TM"), psee, omee, plan)
    assert len(chains) == 4
    good = [c for c in chains if c.converged]
    assert good
    assert np.allclose(
        avg.beta, np.mean([c.theta.beta for c in good], axis=0)
    )
    assert np.allclose(
        avg.alpha, np.mean([c.theta.alpha for c in good], axis=0)
    )
    det = fit_dr_gee2(ds, ModelSpec(target="TM"), psee, omee)
    assert np.all(np.abs(avg.stacked - det.theta.stacked) < 0.2)


def test_par_sgee2_aggregate_failure(small_data):
    ds, psee, omee = small_data
    plan = SamplingPlan(pi_s=0.4, omega_tm=5, seed=3, chains=2)
    controls = ScoringControls(cond_threshold=1.0)  # nothing can pass
    with pytest.raises(AggregateChainFailure):
        par_sgee2(ds, ModelSpec(target="TM"), psee, omee, plan, controls=controls)


def test_chain_divergence_is_reported_not_raised(small_data):
    ds, psee, omee = small_data
    plan = SamplingPlan(pi_s=0.4, omega_tm=8, seed=3)
    controls = ScoringControls(cond_threshold=1.0)
    res = s_dr_gee2(
        ds, ModelSpec(target="TM"), psee, omee, plan, controls=controls
    )
    assert not res.converged
    assert res.theta is None
    assert "ill-conditioned" in res.divergence_reason


def test_chain_result_as_fit_carries_extras(small_data):
    ds, psee, omee = small_data
    plan = SamplingPlan(pi_s=0.5, omega_tm=10, seed=1)
    res = s_dr_gee2(ds, ModelSpec(target="TM"), psee, omee, plan)
    fit = res.as_fit(res.spec, plan.omega_tm, kind="doubly_robust", psee=psee, omee=omee)
    assert fit.kind == "doubly_robust"
    assert fit.iterations == plan.omega_tm
    assert fit.psee is psee
    assert np.array_equal(fit.theta.stacked, res.theta.stacked)
