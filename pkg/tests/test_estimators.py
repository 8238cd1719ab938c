import numpy as np
import pytest

from sgee2.core_math import expit, pair_enumerate
from sgee2.errors import (
    DivergenceError,
    InfeasibleCorrelationError,
    PositivityError,
    SeparationError,
    ShapeError,
)
from sgee2.estimators import (
    EstimatorChoice,
    FitResult,
    ScoreStackContext,
    ScoringControls,
    augmentation_term,
    build_ipw_matrix,
    build_packed,
    dr_score,
    fisher_scoring,
    fit_complete_case,
    fit_dr_gee2,
    fit_ipw_gee2,
    fit_omee,
    fit_pipeline,
    fit_psee,
    gee2_score,
    ipw_weight_arrays,
    joint_observation_prob,
    segment_sum,
)
from sgee2.model import (
    Dataset,
    ModelSpec,
    ParameterVector,
    jacobian,
    predict_corr,
    predict_mean,
    rho_dagger,
    working_covariance,
)
from sgee2.simgen import (
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    GenerationConfig,
    assemble_dataset,
    generate_covariates,
    generating_spec,
    parzen_generate,
)


def _simulate(
    n_clusters=40,
    seed=0,
    size_law=(8, 14),
    y_beta=DEFAULT_BETA,
    y_alpha=DEFAULT_ALPHA,
    r_beta=DEFAULT_BETA,
    r_alpha=DEFAULT_ALPHA,
    missing=True,
):
    cfg = GenerationConfig(
        method="parzen",
        n_clusters=n_clusters,
        size_law=size_law,
        y_beta=tuple(y_beta),
        y_alpha=tuple(y_alpha),
        r_beta=tuple(r_beta) if missing else None,
        r_alpha=tuple(r_alpha) if missing else None,
        seed=seed,
    )
    rng = np.random.default_rng(seed)
    skel = generate_covariates(cfg, rng)
    y = parzen_generate(skel, np.asarray(y_beta), np.asarray(y_alpha), rng)
    r = (
        parzen_generate(skel, np.asarray(r_beta), np.asarray(r_alpha), rng)
        if missing
        else None
    )
    return assemble_dataset(skel, y, r, p_a=0.5)


def test_segment_sum_handles_empty_segments():
    arr = np.arange(6.0)
    offsets = np.array([0, 2, 2, 6])
    out = segment_sum(arr, offsets)
    assert np.allclose(out, [1.0, 0.0, 14.0])
    rows = segment_sum(np.ones((4, 2)), np.array([0, 3, 4]))
    assert np.allclose(rows, [[3.0, 3.0], [1.0, 1.0]])


def test_build_packed_layout():
    ds = _simulate(n_clusters=3, size_law=(3, 5), seed=1)
    spec = generating_spec("PSM")
    packed = build_packed(ds, spec, response="y")
    sizes = [c.n for c in ds]
    assert packed.offsets.tolist() == [0] + np.cumsum(sizes).tolist()
    assert packed.xb.shape == (sum(sizes), spec.n_beta)
    assert packed.za.shape == (3, spec.n_alpha)
    # pair indices are global row positions within the owning cluster
    for i, c in enumerate(ds):
        lo, hi = packed.pair_offsets[i], packed.pair_offsets[i + 1]
        assert hi - lo == c.n * (c.n - 1) // 2
        assert np.all(packed.jj[lo:hi] >= packed.offsets[i])
        assert np.all(packed.kk[lo:hi] < packed.offsets[i + 1])
        assert np.all(packed.jj[lo:hi] < packed.kk[lo:hi])
    # indicator packing is always fully observed
    rp = build_packed(ds, spec, response="r")
    assert np.all(rp.r == 1.0)
    assert set(np.unique(rp.v)) <= {0.0, 1.0}
    with pytest.raises(ShapeError):
        build_packed(ds, spec, response="w")


def _dense_cluster_score(spec, theta, cluster, w1, w2):
    """Dense D' V^-1 W e oracle for one cluster of the packed score."""
    pi = predict_mean(spec, theta, cluster)
    rho = predict_corr(spec, theta, cluster)
    u = pi * (1.0 - pi)
    pairs = pair_enumerate(cluster.n)
    e1 = np.where(w1 > 0, np.nan_to_num(cluster.y - pi), 0.0)
    pr = e1 / np.sqrt(u)
    e2 = np.array([pr[j] * pr[k] - rho for j, k in pairs.pairs])
    d = jacobian(spec, theta, cluster).dense()
    v = working_covariance(cluster, pi, rho).dense()
    w = np.concatenate([w1, w2])
    resid = np.concatenate([e1, e2])
    g = d.T @ np.linalg.solve(v, w * resid)
    h = d.T @ np.linalg.solve(v, w[:, None] * d)
    return g, h


def test_gee2_score_matches_dense_oracle():
    ds = _simulate(n_clusters=4, size_law=(2, 7), seed=5)
    spec = ModelSpec(target="TM")
    theta = ParameterVector(np.array([0.2, 0.4]), np.array([-0.1, 0.3]))
    packed = build_packed(ds, spec, response="y")
    rng = np.random.default_rng(11)
    w1 = np.where(packed.r > 0, rng.uniform(0.5, 2.0, packed.v.shape[0]), 0.0)
    w2 = np.where(
        (packed.r[packed.jj] > 0) & (packed.r[packed.kk] > 0),
        rng.uniform(0.5, 2.0, packed.jj.shape[0]),
        0.0,
    )
    parts = gee2_score(packed, theta.beta, theta.alpha, w1, w2, want_percluster=True)
    p = spec.n_beta
    g_ref = np.zeros(p + spec.n_alpha)
    hb_ref = np.zeros((p, p))
    ha_ref = np.zeros((spec.n_alpha, spec.n_alpha))
    for i, c in enumerate(ds):
        lo, hi = packed.offsets[i], packed.offsets[i + 1]
        plo, phi = packed.pair_offsets[i], packed.pair_offsets[i + 1]
        g, h = _dense_cluster_score(spec, theta, c, w1[lo:hi], w2[plo:phi])
        g_ref += g
        hb_ref += h[:p, :p]
        ha_ref += h[p:, p:]
        assert np.allclose(parts.percluster[i], g, atol=1e-10)
    assert np.allclose(parts.stacked_gradient, g_ref, atol=1e-9)
    assert np.allclose(parts.h_beta, hb_ref, atol=1e-9)
    assert np.allclose(parts.h_alpha, ha_ref, atol=1e-9)
    assert np.allclose(parts.percluster.sum(axis=0), parts.stacked_gradient)


def test_fisher_scoring_quadratic_converges_in_one_step():
    target = np.array([1.5, -0.5])
    h = np.array([[2.0, 0.3], [0.3, 1.0]])

    def grad(theta):
        return h @ (target - theta.beta), np.zeros(0)

    res = fisher_scoring(
        lambda t: grad(t), lambda t: (h, np.zeros((0, 0))),
        ParameterVector(np.zeros(2), np.zeros(0)),
    )
    assert res.converged
    assert np.allclose(res.theta.beta, target, atol=1e-8)


def test_fisher_scoring_singular_hessian_raises():
    with pytest.raises(DivergenceError) as exc:
        fisher_scoring(
            lambda t: (np.ones(2), np.zeros(0)),
            lambda t: (np.ones((2, 2)), np.zeros((0, 0))),
            ParameterVector(np.zeros(2), np.zeros(0)),
            stage="tm",
        )
    assert exc.value.stage == "tm"


def test_fisher_scoring_iteration_budget_returns_unconverged():
    # an unconverged full-step pass triggers one damped retry with a
    # quadrupled budget; the returned result reports the retry's iterations
    h = np.eye(2)
    res = fisher_scoring(
        lambda t: (0.5 * (np.ones(2) - t.beta), np.zeros(0)),
        lambda t: (h, np.zeros((0, 0))),
        ParameterVector(np.zeros(2), np.zeros(0)),
        ScoringControls(max_iter=2),
    )
    assert not res.converged
    assert res.iterations == 8


def test_psee_recovers_generating_coefficients():
    # no covariate effects: the canonical four parameters are identified
    beta = np.zeros(10)
    beta[:2] = [0.4, 0.5]
    alpha = np.zeros(4)
    alpha[:2] = [0.1, 0.3]
    ds = _simulate(
        n_clusters=400, size_law=(10, 20), seed=3,
        r_beta=beta, r_alpha=alpha,
    )
    fit = fit_psee(ds, ModelSpec(target="PSM"))
    assert fit.converged
    assert np.allclose(fit.theta.beta, [0.4, 0.5], atol=0.05)
    assert np.allclose(fit.theta.alpha, [0.1, 0.3], atol=0.08)


def test_complete_case_unbiased_without_missingness():
    beta = np.zeros(10)
    beta[:2] = [0.11, 0.67]
    alpha = np.zeros(4)
    alpha[:2] = [0.05, 0.45]
    ds = _simulate(
        n_clusters=400, size_law=(10, 20), seed=7,
        y_beta=beta, y_alpha=alpha, missing=False,
    )
    fit = fit_complete_case(ds, ModelSpec(target="TM"))
    assert fit.converged
    assert fit.kind == "complete_case"
    # the fitted marginal tracks the realized arm mean closely; the
    # generating coefficients only up to between-cluster noise
    for a in (0, 1):
        arm_mean = np.mean(np.concatenate([c.y for c in ds if c.a == a]))
        fitted = expit(fit.theta.beta[0] + a * fit.theta.beta[1])
        assert abs(fitted - arm_mean) < 0.01
    assert np.allclose(fit.theta.beta, [0.11, 0.67], atol=0.25)
    assert np.allclose(fit.theta.alpha, [0.05, 0.45], atol=0.15)


def test_separation_error_when_indicator_is_constant():
    ds = _simulate(n_clusters=10, seed=2, missing=False)
    with pytest.raises(SeparationError):
        fit_psee(ds, ModelSpec(target="PSM"))


def test_joint_observation_prob():
    eta = joint_observation_prob(0.8, 0.7, 0.1)
    assert eta == pytest.approx(0.56 + 0.1 * np.sqrt(0.8 * 0.2 * 0.7 * 0.3))
    assert joint_observation_prob(0.5, 0.5, 0.0) == pytest.approx(0.25)
    with pytest.raises(InfeasibleCorrelationError):
        joint_observation_prob(1.2, 0.5, 0.0)
    with pytest.raises(InfeasibleCorrelationError):
        joint_observation_prob(0.5, 0.5, 1.0)
    with pytest.raises(InfeasibleCorrelationError):
        # eta below the lower Frechet bound for high margins
        joint_observation_prob(0.9, 0.9, -0.9)


def _psm_fit(ds, beta, alpha):
    spec = ModelSpec(target="PSM")
    return FitResult(
        spec=spec,
        theta=ParameterVector(np.asarray(beta, float), np.asarray(alpha, float)),
        converged=True, iterations=0, max_update=0.0, condition_diag=0.0,
    )


def test_ipw_weight_arrays_values_and_modes():
    ds = _simulate(n_clusters=4, size_law=(3, 6), seed=9)
    psee = _psm_fit(ds, [0.8, 0.3], [0.1, 0.2])
    spec = ModelSpec(target="TM")
    packed = build_packed(ds, spec, response="y")
    psm_packed = build_packed(ds, psee.spec, response="r")
    for mode in ("g1", "g2"):
        w1, w2 = ipw_weight_arrays(
            packed, psee.spec, psee.theta, mode,
            psm_xb=psm_packed.xb, psm_za=psm_packed.za,
        )
        for i, c in enumerate(ds):
            lo, hi = packed.offsets[i], packed.offsets[i + 1]
            plo, phi = packed.pair_offsets[i], packed.pair_offsets[i + 1]
            ref = build_ipw_matrix(c, psee, mode).entries
            assert np.allclose(w1[lo:hi], ref[: c.n], atol=1e-12)
            assert np.allclose(w2[plo:phi], ref[c.n :], atol=1e-12)
        # missing subjects and incomplete pairs carry zero weight
        assert np.all(w1[packed.r == 0] == 0.0)
    with pytest.raises(ShapeError):
        ipw_weight_arrays(
            packed, psee.spec, psee.theta, "g3",
            psm_xb=psm_packed.xb, psm_za=psm_packed.za,
        )


def test_ipw_positivity_floor_raises():
    ds = _simulate(n_clusters=3, size_law=(3, 4), seed=4)
    psee = _psm_fit(ds, [-10.0, 0.0], [0.0, 0.0])
    spec = ModelSpec(target="TM")
    packed = build_packed(ds, spec, response="y")
    psm_packed = build_packed(ds, psee.spec, response="r")
    with pytest.raises(PositivityError):
        ipw_weight_arrays(
            packed, psee.spec, psee.theta, "g1",
            psm_xb=psm_packed.xb, psm_za=psm_packed.za,
        )
    with pytest.raises(PositivityError):
        build_ipw_matrix(ds.clusters[0], psee, "g1")


def test_ipw_frechet_violation_raises():
    ds = _simulate(n_clusters=3, size_law=(3, 4), seed=4)
    from sgee2.core_math import logit, fisher_z

    psee = _psm_fit(ds, [logit(0.9), 0.0], [fisher_z(-0.9), 0.0])
    spec = ModelSpec(target="TM")
    packed = build_packed(ds, spec, response="y")
    psm_packed = build_packed(ds, psee.spec, response="r")
    with pytest.raises(InfeasibleCorrelationError):
        ipw_weight_arrays(
            packed, psee.spec, psee.theta, "g2",
            psm_xb=psm_packed.xb, psm_za=psm_packed.za,
        )
    # the independence denominator never touches the correlation
    w1, w2 = ipw_weight_arrays(
        packed, psee.spec, psee.theta, "g1",
        psm_xb=psm_packed.xb, psm_za=psm_packed.za,
    )
    assert np.all(np.isfinite(w2))


def _om_fit(spec, beta, alpha):
    return FitResult(
        spec=spec,
        theta=ParameterVector(np.asarray(beta, float), np.asarray(alpha, float)),
        converged=True, iterations=0, max_update=0.0, condition_diag=0.0,
    )


def test_dr_score_matches_per_cluster_reference():
    ds = _simulate(n_clusters=5, size_law=(2, 6), seed=13)
    tm_spec = ModelSpec(target="TM")
    tm_theta = ParameterVector(np.array([0.15, 0.45]), np.array([-0.08, 0.45]))
    om_spec = ModelSpec(
        target="OM", mean_main=("x1", "z1"), mean_interact=("x1",),
        corr_main=("z1",), corr_interact=(),
    )
    om = _om_fit(om_spec, [0.1, 0.3, 0.004, -0.001, 0.002], [-0.2, 0.4, 0.002])
    psee = _psm_fit(ds, [0.9, 0.2], [0.05, 0.1])

    packed = build_packed(ds, tm_spec, response="y")
    psm_packed = build_packed(ds, psee.spec, response="r")
    w1, w2 = ipw_weight_arrays(
        packed, psee.spec, psee.theta, "g2",
        psm_xb=psm_packed.xb, psm_za=psm_packed.za,
    )
    from sgee2.estimators import _om_predictions

    pibar0, pibar1, rhobar0, rhobar1 = _om_predictions(ds, om)
    parts = dr_score(
        packed, tm_theta.beta, tm_theta.alpha, w1, w2,
        pibar0, pibar1, rhobar0, rhobar1, ds.p_a, want_percluster=True,
    )

    g_ref = np.zeros(4)
    for i, c in enumerate(ds):
        lo, hi = packed.offsets[i], packed.offsets[i + 1]
        plo, phi = packed.pair_offsets[i], packed.pair_offsets[i + 1]
        pi_s = predict_mean(tm_spec, tm_theta, c)
        rho_s = predict_corr(tm_spec, tm_theta, c)
        pibar = predict_mean(om.spec, om.theta, c)
        rhobar = predict_corr(om.spec, om.theta, c)
        su = np.sqrt(pi_s * (1.0 - pi_s))
        e1 = np.where(w1[lo:hi] > 0, np.nan_to_num(c.y - pibar), 0.0)
        pr = np.where(w1[lo:hi] > 0, np.nan_to_num(c.y - pi_s), 0.0) / su
        pairs = pair_enumerate(c.n)
        e2 = np.array(
            [
                pr[j] * pr[k]
                - rho_dagger(pibar[j], pibar[k], rhobar, float(pi_s[0]))
                for j, k in pairs.pairs
            ]
        )
        d = jacobian(tm_spec, tm_theta, c).dense()
        v = working_covariance(c, pi_s, rho_s).dense()
        w = np.concatenate([w1[lo:hi], w2[plo:phi]])
        resid = np.concatenate([e1, e2])
        contrib = d.T @ np.linalg.solve(v, w * resid)
        contrib += augmentation_term(c, tm_spec, tm_theta, om, ds.p_a)
        g_ref += contrib
        assert np.allclose(parts.percluster[i], contrib, atol=1e-8)
    assert np.allclose(parts.stacked_gradient, g_ref, atol=1e-8)


def test_dr_hessian_is_mixed_counterfactual_curvature():
    from dataclasses import replace

    ds = _simulate(n_clusters=4, size_law=(2, 5), seed=17)
    tm_spec = ModelSpec(target="TM")
    tm_theta = ParameterVector(np.array([0.1, 0.5]), np.array([-0.1, 0.5]))
    om = _om_fit(ModelSpec(target="OM"), [0.2, 0.3], [-0.1, 0.2])
    psee = _psm_fit(ds, [1.2, 0.0], [0.0, 0.0])
    packed = build_packed(ds, tm_spec, response="y")
    psm_packed = build_packed(ds, psee.spec, response="r")
    w1, w2 = ipw_weight_arrays(
        packed, psee.spec, psee.theta, "g2",
        psm_xb=psm_packed.xb, psm_za=psm_packed.za,
    )
    from sgee2.estimators import _om_predictions

    parts = dr_score(
        packed, tm_theta.beta, tm_theta.alpha, w1, w2,
        *_om_predictions(ds, om), ds.p_a,
    )
    hb_ref = np.zeros((2, 2))
    ha_ref = np.zeros((2, 2))
    for c in ds:
        for a, wgt in ((0, 1.0 - ds.p_a), (1, ds.p_a)):
            cf = replace(c, a=a)
            pi = predict_mean(tm_spec, tm_theta, cf)
            rho = predict_corr(tm_spec, tm_theta, cf)
            d = jacobian(tm_spec, tm_theta, cf).dense()
            v = working_covariance(cf, pi, rho).dense()
            h = d.T @ np.linalg.solve(v, d)
            hb_ref += wgt * h[:2, :2]
            ha_ref += wgt * h[2:, 2:]
    assert np.allclose(parts.h_beta, hb_ref, atol=1e-9)
    assert np.allclose(parts.h_alpha, ha_ref, atol=1e-9)


@pytest.fixture(scope="module")
def fitted_pipeline():
    ds = _simulate(n_clusters=150, size_law=(20, 40), seed=21)
    tm = ModelSpec(target="TM")
    psm = generating_spec("PSM")
    om = generating_spec("OM")
    fits = {
        kind: fit_pipeline(ds, EstimatorChoice(kind), tm, psm_spec=psm, om_spec=om)
        for kind in ("complete_case", "ipw_g1", "ipw_g2", "doubly_robust")
    }
    return ds, fits


def test_pipeline_fits_converge_and_label(fitted_pipeline):
    ds, fits = fitted_pipeline
    for kind, fit in fits.items():
        assert fit.converged, kind
        assert fit.kind == kind
        assert "tm" in fit.runtime
        assert np.all(np.isfinite(fit.theta.stacked))
    assert fits["ipw_g2"].psee is not None
    assert fits["doubly_robust"].omee is not None
    # estimators agree loosely on the same data
    cc = fits["complete_case"].theta.stacked
    for kind in ("ipw_g1", "ipw_g2", "doubly_robust"):
        assert np.all(np.abs(fits[kind].theta.stacked - cc) < 0.5)


def test_pipeline_requires_nuisance_specs():
    ds = _simulate(n_clusters=10, seed=1)
    tm = ModelSpec(target="TM")
    with pytest.raises(ShapeError):
        fit_pipeline(ds, EstimatorChoice("ipw_g2"), tm)
    with pytest.raises(ShapeError):
        fit_pipeline(
            ds, EstimatorChoice("doubly_robust"), tm,
            psm_spec=generating_spec("PSM"),
        )


def test_score_stack_sums_to_zero_at_the_fit(fitted_pipeline):
    ds, fits = fitted_pipeline
    for kind, fit in fits.items():
        ctx = ScoreStackContext.build(ds, fit)
        psm_theta = fit.psee.theta if fit.psee is not None else None
        om_theta = fit.omee.theta if fit.omee is not None else None
        rows = ctx.tm_scores(fit.theta, psm_theta, om_theta)
        assert rows.shape == (len(ds.clusters), 4)
        assert np.all(np.abs(rows.sum(axis=0)) < 1e-4), kind
        if fit.psee is not None:
            prows = ctx.psm_scores(psm_theta)
            assert np.all(np.abs(prows.sum(axis=0)) < 1e-4)


def test_nuisance_fits_reused_by_direct_calls(fitted_pipeline):
    ds, fits = fitted_pipeline
    psee = fits["ipw_g2"].psee
    direct = fit_ipw_gee2(ds, ModelSpec(target="TM"), psee, "g2")
    assert np.allclose(direct.theta.stacked, fits["ipw_g2"].theta.stacked, atol=1e-10)
    omee = fits["doubly_robust"].omee
    dr = fit_dr_gee2(ds, ModelSpec(target="TM"), psee, omee)
    assert np.allclose(dr.theta.stacked, fits["doubly_robust"].theta.stacked, atol=1e-10)


def test_omee_fits_on_complete_cases(fitted_pipeline):
    ds, fits = fitted_pipeline
    om = fit_omee(ds, generating_spec("OM"))
    assert om.converged
    assert np.allclose(om.theta.stacked, fits["doubly_robust"].omee.theta.stacked)
