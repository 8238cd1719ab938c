import numpy as np
import pytest

from sgee2.errors import DomainError, InferenceError
from sgee2.estimators import (
    EstimatorChoice,
    fit_pipeline,
)
from sgee2.inference import sandwich_variance, wald
from sgee2.model import ModelSpec
from test_estimators import _simulate
from test_stochastic import _nocov


def test_wald_basic():
    res = wald(0.5, 0.25)
    assert res.statistic == pytest.approx(2.0)
    assert res.p_value == pytest.approx(0.0455, abs=1e-3)
    assert not res.flagged  # strictly greater than two flags
    assert wald(0.51, 0.25).flagged


def test_wald_replicate_scaling():
    # averaged bias over R replicates: statistic scales by sqrt(R)
    plain = wald(0.01, 0.2)
    scaled = wald(0.01, 0.2, reps=400)
    assert scaled.statistic == pytest.approx(plain.statistic * 20.0)
    assert not plain.flagged and not scaled.flagged
    assert wald(0.025, 0.2, reps=400).flagged


def test_wald_input_validation():
    with pytest.raises(DomainError):
        wald(0.1, 0.0)
    with pytest.raises(DomainError):
        wald(0.1, -1.0)
    with pytest.raises(DomainError):
        wald(0.1, 0.2, reps=0)


@pytest.fixture(scope="module")
def fits():
    yb, ya = _nocov(0.2, 0.5, 0.08, 0.25)
    rb, ra = _nocov(1.0, 0.3, 0.05, 0.15)
    ds = _simulate(
        n_clusters=120, size_law=(10, 20), seed=41,
        y_beta=yb, y_alpha=ya, r_beta=rb, r_alpha=ra,
    )
    tm = ModelSpec(target="TM")
    psm = ModelSpec(target="PSM")
    om = ModelSpec(target="OM")
    out = {}
    for kind in ("complete_case", "ipw_g2", "doubly_robust"):
        out[kind] = fit_pipeline(
            ds, EstimatorChoice(kind), tm, psm_spec=psm, om_spec=om
        )
    return ds, out


def test_sandwich_block_layout(fits):
    ds, out = fits
    res_cc = sandwich_variance(ds, out["complete_case"])
    assert res_cc.blocks == (("tm", 4),)
    res_ipw = sandwich_variance(ds, out["ipw_g2"])
    assert res_ipw.blocks == (("tm", 4), ("psm", 4))
    res_dr = sandwich_variance(ds, out["doubly_robust"])
    assert res_dr.blocks == (("tm", 4), ("psm", 4), ("om", 4))
    assert res_dr.kappa_cov.shape == (12, 12)
    assert res_dr.tm_cov.shape == (4, 4)


def test_sandwich_symmetric_psd_sensible(fits):
    ds, out = fits
    for kind, fit in out.items():
        res = sandwich_variance(ds, fit)
        cov = res.kappa_cov
        assert np.allclose(cov, cov.T, atol=1e-14), kind
        eig = np.linalg.eigvalsh(cov)
        assert np.all(eig > -1e-12), kind
        se = res.tm_se
        assert np.all(se > 0.0)
        # cluster-level binary outcome: marginal-logit SE in a plausible range
        assert np.all(se < 1.0)
        assert np.allclose(res.tm_cov, cov[:4, :4])


def test_covariate_free_psm_has_no_propagation(fits):
    # weights constant within arm: estimating them cannot move the
    # treatment-model root, so the correction contributes nothing
    ds, out = fits
    fit = out["ipw_g2"]
    full = sandwich_variance(ds, fit, nuisance_corrected=True)
    naive = sandwich_variance(ds, fit, nuisance_corrected=False)
    assert np.allclose(full.tm_cov, naive.tm_cov, atol=1e-7)


def test_nuisance_correction_changes_tm_block():
    # covariate-dependent missingness: the propagation term must bite
    from sgee2.estimators import fit_ipw_gee2, fit_psee
    from sgee2.simgen import reduced_psm_spec
    from test_stochastic import _nocov as nocov

    yb, ya = nocov(0.2, 0.5, 0.08, 0.25)
    ds = _simulate(
        n_clusters=150, size_law=(20, 40), seed=21, y_beta=yb, y_alpha=ya
    )
    psee = fit_psee(ds, reduced_psm_spec())
    fit = fit_ipw_gee2(ds, ModelSpec(target="TM"), psee, "g2")
    full = sandwich_variance(ds, fit, nuisance_corrected=True)
    naive = sandwich_variance(ds, fit, nuisance_corrected=False)
    assert not np.allclose(full.tm_cov, naive.tm_cov)
    # the nuisance's own block is unaffected by the correction switch
    d = psee.theta.stacked.shape[0]
    assert np.allclose(
        full.kappa_cov[-d:, -d:], naive.kappa_cov[-d:, -d:], atol=1e-10
    )


def test_sandwich_singular_bread_raises(fits):
    ds, out = fits
    import copy

    broken = copy.deepcopy(out["complete_case"])
    # a flat score surface in one coordinate makes the bread singular
    broken.theta.beta[1] = broken.theta.beta[0]
    broken.theta.alpha[:] = [50.0, 0.0]  # rho pinned at 1: derivative ~ 0
    with pytest.raises((InferenceError, Exception)):
        sandwich_variance(ds, broken)


def test_sandwich_agrees_with_replicate_spread():
    # across many generated datasets the sandwich SE should track the
    # spread of the estimates to within sampling error
    yb, ya = _nocov(0.2, 0.5, 0.08, 0.25)
    estimates = []
    ses = []
    for seed in range(40):
        ds = _simulate(
            n_clusters=80, size_law=(8, 16), seed=100 + seed,
            y_beta=yb, y_alpha=ya, missing=False,
        )
        from sgee2.estimators import fit_complete_case

        fit = fit_complete_case(ds, ModelSpec(target="TM"))
        if not fit.converged:
            continue
        estimates.append(fit.theta.stacked)
        ses.append(sandwich_variance(ds, fit).tm_se)
    estimates = np.array(estimates)
    ses = np.array(ses)
    emp = estimates.std(axis=0, ddof=1)
    med = np.median(ses, axis=0)
    assert np.all(med / emp > 0.6)
    assert np.all(med / emp < 1.6)
