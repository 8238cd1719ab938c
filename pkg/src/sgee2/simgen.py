"""Synthetic cluster-trial generators, the marginal truth oracle, and the
replicate harness.

Two generators produce binary outcome (or missingness) matrices over a fixed
covariate skeleton: a beta-mixture that attains the nominal per-subject means
and a common pairwise correlation exactly, and a logistic random intercept
whose manifested correlation varies within cluster.  ``marginal_truth``
integrates the generating model over the covariate laws by deterministic
quadrature to recover the treatment-only coefficients that the estimators
target, and ``run_replicates`` repeatedly regenerates missingness and
outcomes to tabulate bias, replicate spread, sandwich standard errors,
failure rates, and runtimes per estimator.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .core_math import expit, logit
from .errors import (
    AccuracyError,
    DomainError,
    FeasibilityError,
    Sgee2Error,
)
from .estimators import (
    EstimatorChoice,
    FitResult,
    ScoringControls,
    clamp_working_corr,
    fit_complete_case,
    fit_dr_gee2,
    fit_ipw_gee2,
    fit_omee,
    fit_psee,
)
from .inference import sandwich_variance
from .model import ClusterData, Dataset, ModelSpec, ParameterVector
from .stochastic import SamplingPlan, par_sgee2, s_dr_gee2, s_ipw_gee2, s_omee, s_psee

# default generating coefficients, mean design order
# [1, a, x1, x2, x3, z1, a*x1, a*x2, a*x3, a*z1]
DEFAULT_BETA = (0.11, 0.67, -0.007, -0.020, -0.040, 0.009, 0.012, 0.030, 0.060, -0.018)
# correlation design order [1, a, z1, a*z1]
DEFAULT_ALPHA = (-0.32, 0.96, 0.004, -0.008)

# covariate laws: three continuous uniforms for X, one integer uniform for Z
X_SUPPORTS = ((20.0, 60.0), (1.0, 10.0), (4.0, 25.0))
Z_SUPPORT = (80, 140)

METHODS = ("parzen", "random_intercept")

_FULL_LABELS = ("x1", "x2", "x3", "z1")


def generating_spec(target: str) -> ModelSpec:
    """Model specification matching the generating process for one stage."""
    return ModelSpec(
        target=target,
        mean_main=_FULL_LABELS,
        mean_interact=_FULL_LABELS,
        corr_main=("z1",),
        corr_interact=("z1",),
    )


def reduced_psm_spec() -> ModelSpec:
    """Missingness model with every treatment interaction dropped."""
    return ModelSpec(
        target="PSM",
        mean_main=_FULL_LABELS,
        mean_interact=(),
        corr_main=("z1",),
        corr_interact=(),
    )


@dataclass(frozen=True)
class GenerationConfig:
    """Everything needed to draw one synthetic trial.

    ``y_beta``/``y_alpha`` and ``r_beta``/``r_alpha`` follow the mean design
    order [1, a, x1, x2, x3, z1, a*x1, a*x2, a*x3, a*z1] and the correlation
    order [1, a, z1, a*z1].  ``r_beta=None`` disables missingness entirely.
    The missingness indicators are always drawn with the beta-mixture
    generator; ``method`` selects the outcome generator.
    """

    method: str = "parzen"
    n_clusters: int = 100
    size_law: tuple[int, int] = (80, 140)
    y_beta: tuple[float, ...] = DEFAULT_BETA
    y_alpha: tuple[float, ...] = DEFAULT_ALPHA
    r_beta: tuple[float, ...] | None = DEFAULT_BETA
    r_alpha: tuple[float, ...] | None = DEFAULT_ALPHA
    p_a: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise DomainError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.n_clusters < 1:
            raise DomainError(f"need at least one cluster, got {self.n_clusters}")
        lo, hi = self.size_law
        if not (1 <= lo <= hi):
            raise DomainError(f"invalid cluster size bounds {self.size_law}")
        if not 0.0 < self.p_a < 1.0:
            raise DomainError(f"treatment probability must be in (0,1), got {self.p_a}")
        if len(self.y_beta) != 10 or len(self.y_alpha) != 4:
            raise DomainError("outcome coefficients must have lengths 10 and 4")
        if (self.r_beta is None) != (self.r_alpha is None):
            raise DomainError("missingness coefficients must be given together")
        if self.r_beta is not None and (len(self.r_beta) != 10 or len(self.r_alpha) != 4):
            raise DomainError("missingness coefficients must have lengths 10 and 4")


@dataclass(frozen=True)
class Skeleton:
    """Fixed covariate layer: treatment, cluster covariate, subject covariates."""

    a: np.ndarray
    z: np.ndarray
    x: tuple[np.ndarray, ...]

    @property
    def n_clusters(self) -> int:
        return self.a.shape[0]

    @property
    def sizes(self) -> np.ndarray:
        return np.array([xi.shape[0] for xi in self.x])


def generate_covariates(config: GenerationConfig, rng: np.random.Generator) -> Skeleton:
    """Draw the covariate skeleton shared by outcome and missingness."""
    i_count = config.n_clusters
    lo, hi = config.size_law
    sizes = rng.integers(lo, hi + 1, size=i_count)
    a = (rng.random(i_count) < config.p_a).astype(float)
    z = rng.integers(Z_SUPPORT[0], Z_SUPPORT[1] + 1, size=i_count).astype(float)
    x = tuple(
        np.column_stack([rng.uniform(s_lo, s_hi, size=n) for s_lo, s_hi in X_SUPPORTS])
        for n in sizes
    )
    return Skeleton(a=a, z=z, x=x)


def _cluster_moments(skeleton, i, beta, alpha, arm=None):
    """Conditional per-subject means and the common correlation for cluster i.

    ``arm`` overrides the assigned treatment to evaluate a counterfactual
    level on the same covariates."""
    b = np.asarray(beta)
    al = np.asarray(alpha)
    a = skeleton.a[i] if arm is None else arm
    z = skeleton.z[i]
    bx = b[2:5] + a * b[6:9]
    lin = b[0] + a * b[1] + skeleton.x[i] @ bx + (b[5] + a * b[9]) * z
    pi = expit(lin)
    rho = float(np.tanh(al[0] + a * al[1] + (al[2] + a * al[3]) * z))
    return pi, rho


def parzen_generate(
    skeleton: Skeleton,
    beta,
    alpha,
    rng: np.random.Generator,
) -> tuple[np.ndarray, ...]:
    """Equicorrelated binary draws through a shared scaled-beta effect.

    The cluster effect xi lives on (L, U) chosen so that pi + xi*sqrt(pi(1-pi))
    stays in [0,1] for every subject, with E[xi]=0 and Var[xi]=rho, so the
    draws hit the nominal means and the nominal pairwise correlation exactly.
    """
    out = []
    for i in range(skeleton.n_clusters):
        pi, rho = _cluster_moments(skeleton, i, beta, alpha)
        sd = np.sqrt(pi * (1.0 - pi))
        if rho < 0.0:
            raise FeasibilityError(
                f"cluster {i}: negative correlation {rho:.6f} is outside the "
                "support of the beta-mixture generator"
            )
        if rho < 1e-12:
            xi = 0.0
        else:
            pmin = float(pi.min())
            pmax = float(pi.max())
            lo = -np.sqrt(pmin / (1.0 - pmin))
            hi = np.sqrt((1.0 - pmax) / pmax)
            slack = -hi * lo - rho
            if slack < 0.0:
                raise FeasibilityError(
                    f"cluster {i}: correlation {rho:.6f} exceeds the feasible "
                    f"bound {-hi * lo:.6f} for its mean range "
                    f"[{pmin:.4f}, {pmax:.4f}]"
                )
            k = slack / ((hi - lo) * rho)
            xi = (hi - lo) * rng.beta(-lo * k, hi * k) + lo
        out.append((rng.random(pi.shape[0]) < pi + xi * sd).astype(float))
    return tuple(out)


def random_intercept_generate(
    skeleton: Skeleton,
    beta,
    alpha,
    rng: np.random.Generator,
) -> tuple[np.ndarray, ...]:
    """Binary draws through a normal intercept on the logit scale.

    The intercept standard deviation is 1/3 + a/2, so the manifested
    correlation varies within cluster; ``alpha`` is accepted for signature
    symmetry but does not enter the draw.
    """
    del alpha
    out = []
    for i in range(skeleton.n_clusters):
        pi, _ = _cluster_moments(skeleton, i, beta, DEFAULT_ALPHA)
        sd = 1.0 / 3.0 + skeleton.a[i] / 2.0
        xi = rng.normal(0.0, sd)
        p = expit(xi + logit(pi))
        out.append((rng.random(pi.shape[0]) < p).astype(float))
    return tuple(out)


def assemble_dataset(
    skeleton: Skeleton,
    y: tuple[np.ndarray, ...],
    r: tuple[np.ndarray, ...] | None,
    p_a: float | None = None,
) -> Dataset:
    """Fold generated outcomes (NaN where unobserved) into a Dataset."""
    clusters = []
    for i in range(skeleton.n_clusters):
        yi = np.asarray(y[i], dtype=float)
        if r is not None:
            yi = np.where(np.asarray(r[i]) > 0, yi, np.nan)
        clusters.append(
            ClusterData(
                id=str(i),
                a=int(skeleton.a[i]),
                z=np.array([skeleton.z[i]]),
                x=skeleton.x[i],
                y=yi,
            )
        )
    return Dataset(tuple(clusters), p_a=p_a)


# ---------------------------------------------------------------------------
# marginal truth by quadrature
# ---------------------------------------------------------------------------

def _x_rule(n_nodes):
    """Flattened tensor Gauss-Legendre rule over the three X supports."""
    nodes, wts = np.polynomial.legendre.leggauss(n_nodes)
    vals = []
    ws = []
    for lo, hi in X_SUPPORTS:
        vals.append(0.5 * (hi - lo) * nodes + 0.5 * (hi + lo))
        ws.append(0.5 * wts)
    grid = np.stack(
        [g.ravel() for g in np.meshgrid(*vals, indexing="ij")], axis=1
    )
    w = (ws[0][:, None, None] * ws[1][None, :, None] * ws[2][None, None, :]).ravel()
    return grid, w


def _arm_truth(config, arm, n_nodes):
    """Marginal mean and marginal pairwise correlation for one arm."""
    b = np.asarray(config.y_beta)
    al = np.asarray(config.y_alpha)
    grid, wx = _x_rule(n_nodes)
    bx = b[2:5] + arm * b[6:9]
    sx = grid @ bx
    z_vals = np.arange(Z_SUPPORT[0], Z_SUPPORT[1] + 1, dtype=float)
    z_w = 1.0 / z_vals.shape[0]
    base = b[0] + arm * b[1] + (b[5] + arm * b[9]) * z_vals
    rho_z = np.tanh(al[0] + arm * al[1] + (al[2] + arm * al[3]) * z_vals)

    if config.method == "parzen":
        mu = np.empty(z_vals.shape[0])
        sbar = np.empty(z_vals.shape[0])
        for t, b0 in enumerate(base):
            pi = expit(b0 + sx)
            mu[t] = wx @ pi
            sbar[t] = wx @ np.sqrt(pi * (1.0 - pi))
        pi_star = float(z_w * mu.sum())
        num = z_w * ((mu - pi_star) ** 2 + rho_z * sbar**2).sum()
        rho_star = float(num / (pi_star * (1.0 - pi_star)))
        return pi_star, rho_star

    # random intercept: a shared normal effect couples subjects, so the
    # pairwise moment reduces to the xi-expectation of the squared
    # X-average f(xi, z) = E_X[expit(xi + linear)]
    gh_nodes, gh_w = np.polynomial.hermite.hermgauss(n_nodes)
    sd = 1.0 / 3.0 + arm / 2.0
    xi = np.sqrt(2.0) * sd * gh_nodes
    wxi = gh_w / np.sqrt(np.pi)
    mu = np.empty(z_vals.shape[0])
    fsq = np.empty(z_vals.shape[0])
    for t, b0 in enumerate(base):
        f = expit(b0 + xi[:, None] + sx[None, :]) @ wx
        mu[t] = wxi @ f
        fsq[t] = wxi @ f**2
    pi_star = float(z_w * mu.sum())
    rho_star = float((z_w * fsq.sum() - pi_star**2) / (pi_star * (1.0 - pi_star)))
    return pi_star, rho_star


@lru_cache(maxsize=16)
def marginal_truth(
    config: GenerationConfig,
    n_nodes: int = 64,
    check_nodes: int | None = 32,
    tol: float = 1e-4,
) -> tuple[float, float, float, float]:
    """Treatment-only coefficients implied by the generating model.

    Integrates the conditional mean and the pairwise correlation transform
    over the covariate laws (exact sum over the integer support of z,
    Gauss-Legendre over x, Gauss-Hermite over the random intercept), then
    inverts the links.  A coarser companion rule guards the quadrature
    error on the link scale.
    """
    fine = [_arm_truth(config, a, n_nodes) for a in (0.0, 1.0)]
    est = (
        logit(fine[0][0]),
        logit(fine[1][0]) - logit(fine[0][0]),
        float(np.arctanh(fine[0][1])),
        float(np.arctanh(fine[1][1]) - np.arctanh(fine[0][1])),
    )
    if check_nodes is not None:
        coarse = [_arm_truth(config, a, check_nodes) for a in (0.0, 1.0)]
        ref = (
            logit(coarse[0][0]),
            logit(coarse[1][0]) - logit(coarse[0][0]),
            float(np.arctanh(coarse[0][1])),
            float(np.arctanh(coarse[1][1]) - np.arctanh(coarse[0][1])),
        )
        err = max(abs(e - r) for e, r in zip(est, ref))
        if err > tol:
            raise AccuracyError(
                f"quadrature not settled: node-refinement change {err:.3g} "
                f"exceeds {tol:.3g}; estimate {est}"
            )
    return est


def _realized_cluster_sums(skeleton, i, config, n_nodes, arm=None):
    """Per-cluster moment sums of the generated outcome for one cluster.

    Returns (n, sum of means, sum of squared means, sum over pairs of the
    within-cluster outcome covariance).  ``arm`` overrides the assigned
    treatment for counterfactual evaluation.
    """
    a = skeleton.a[i] if arm is None else arm
    if config.method == "parzen":
        pi, rho = _cluster_moments(skeleton, i, config.y_beta, config.y_alpha, arm=arm)
        s = np.sqrt(pi * (1.0 - pi))
        csum = rho * (s.sum() ** 2 - (s * s).sum()) / 2.0
        return pi.shape[0], float(pi.sum()), float((pi * pi).sum()), float(csum)
    base, _ = _cluster_moments(skeleton, i, config.y_beta, DEFAULT_ALPHA, arm=arm)
    gh_nodes, gh_w = np.polynomial.hermite.hermgauss(n_nodes)
    sd = 1.0 / 3.0 + a / 2.0
    xi = np.sqrt(2.0) * sd * gh_nodes
    wxi = gh_w / np.sqrt(np.pi)
    f = expit(xi[:, None] + logit(base)[None, :])
    pi = wxi @ f
    pair_yy = wxi @ ((f.sum(axis=1) ** 2 - (f * f).sum(axis=1)) / 2.0)
    s1 = float(pi.sum())
    s2 = float((pi * pi).sum())
    csum = float(pair_yy) - (s1 * s1 - s2) / 2.0
    return pi.shape[0], s1, s2, float(csum)


@lru_cache(maxsize=16)
def realized_truth(
    config: GenerationConfig,
    n_nodes: int = 64,
    tol: float = 1e-12,
    mixture: bool = False,
) -> tuple[float, float, float, float]:
    """Treatment-only coefficients implied by one realized covariate skeleton.

    ``run_replicates`` regenerates the skeleton once and holds it fixed, so
    an unbiased estimator concentrates on the solution of the full-data
    estimating equations conditional on that skeleton, not on the covariate
    distribution; the gap between the two does not shrink with the number of
    replicates.  This solves those equations exactly: per-cluster outcome
    moments in closed form (Gauss-Hermite over the random intercept when the
    generator needs it), then a per-arm fixed point alternating the
    equicorrelated-weighted mean equation and the pairwise correlation
    average.  Use the result as the ``truth`` argument of
    ``run_replicates`` whenever bias is judged against replicate noise.

    With ``mixture=True`` each arm's equations run over every cluster at the
    counterfactual treatment level instead of the assigned-arm subset.  That
    is the target of the doubly robust estimator, whose augmentation mixes
    both treatment levels for every cluster; with a correct outcome model
    its observed part cancels the prediction pairwise, leaving exactly the
    mixture equations.
    """
    skeleton = generate_covariates(
        config, np.random.default_rng(np.random.SeedSequence((config.seed, 0)))
    )
    start = marginal_truth(config)
    out = []
    for arm in (0.0, 1.0):
        if mixture:
            idx = list(range(skeleton.n_clusters))
            sums = [
                _realized_cluster_sums(skeleton, i, config, n_nodes, arm=arm)
                for i in idx
            ]
        else:
            idx = [i for i in range(skeleton.n_clusters) if skeleton.a[i] == arm]
            sums = [_realized_cluster_sums(skeleton, i, config, n_nodes) for i in idx]
        n = np.array([s[0] for s in sums], dtype=float)
        s1 = np.array([s[1] for s in sums])
        s2 = np.array([s[2] for s in sums])
        csum = np.array([s[3] for s in sums])
        n_pairs = float((n * (n - 1.0) / 2.0).sum())
        pi_star = float(expit(start[0] + arm * start[1]))
        rho_star = float(np.tanh(start[2] + arm * start[3]))
        for _ in range(200):
            rw = clamp_working_corr(np.full(n.shape[0], rho_star), n)
            coeff = 1.0 / (1.0 - rw) - n * rw / (
                (1.0 - rw) * (1.0 + (n - 1.0) * rw)
            )
            pi_new = float((coeff * s1).sum() / (coeff * n).sum())
            u = pi_new * (1.0 - pi_new)
            dpair = ((s1 - n * pi_new) ** 2 - (s2 - 2.0 * pi_new * s1 + n * pi_new**2)) / 2.0
            rho_new = float((dpair + csum).sum() / u / n_pairs)
            done = abs(pi_new - pi_star) < tol and abs(rho_new - rho_star) < tol
            pi_star, rho_star = pi_new, rho_new
            if done:
                break
        else:
            raise AccuracyError(
                f"skeleton-conditional fixed point did not settle for arm {arm}"
            )
        out.append((pi_star, rho_star))
    return (
        logit(out[0][0]),
        logit(out[1][0]) - logit(out[0][0]),
        float(np.arctanh(out[0][1])),
        float(np.arctanh(out[1][1]) - np.arctanh(out[0][1])),
    )


def _generating_designs(skeleton, i, arm):
    """Generating-order design rows for one cluster at a treatment level.

    Mean columns [1, a, x1, x2, x3, z1, a*x1, a*x2, a*x3, a*z1],
    correlation columns [1, a, z1, a*z1]."""
    x = skeleton.x[i]
    n = x.shape[0]
    a = float(arm)
    z = float(skeleton.z[i])
    one = np.ones(n)
    xb = np.column_stack([
        one, a * one, x[:, 0], x[:, 1], x[:, 2], z * one,
        a * x[:, 0], a * x[:, 1], a * x[:, 2], a * z * one,
    ])
    za = np.array([1.0, a, z, a * z])
    return xb, za


def _true_cluster_law(skeleton, i, config, n_nodes):
    """Per-subject means and the pairwise covariance matrix (diagonal
    zeroed) of the generated outcome for one cluster at its assigned arm."""
    if config.method == "parzen":
        pi, rho = _cluster_moments(skeleton, i, config.y_beta, config.y_alpha)
        s = np.sqrt(pi * (1.0 - pi))
        cov = rho * np.outer(s, s)
    else:
        base, _ = _cluster_moments(skeleton, i, config.y_beta, DEFAULT_ALPHA)
        gh_nodes, gh_w = np.polynomial.hermite.hermgauss(n_nodes)
        sd = 1.0 / 3.0 + skeleton.a[i] / 2.0
        xi = np.sqrt(2.0) * sd * gh_nodes
        wxi = gh_w / np.sqrt(np.pi)
        f = expit(xi[:, None] + logit(base)[None, :])
        pi = wxi @ f
        cov = f.T @ (wxi[:, None] * f) - np.outer(pi, pi)
    np.fill_diagonal(cov, 0.0)
    return pi, cov


def _om_skeleton_limit(skeleton, config, n_nodes):
    """Fixed-skeleton limit of the generating-form outcome working model.

    The outcome model is fit on observed subjects and complete pairs; with
    outcomes and missingness independent given the skeleton, the expected
    fitting equations replace each observation indicator by its mean and
    each indicator pair by its joint probability.  Solving those expected
    equations gives the coefficients the outcome fit concentrates on when
    its form cannot reproduce the generating moments."""
    from scipy.optimize import root

    i_count = skeleton.n_clusters
    pre = []
    for i in range(i_count):
        pit, cov = _true_cluster_law(skeleton, i, config, n_nodes)
        if config.r_beta is None:
            pi_r, rho_r = np.ones(pit.shape[0]), 0.0
        else:
            pi_r, rho_r = _cluster_moments(skeleton, i, config.r_beta, config.r_alpha)
        s_r = np.sqrt(pi_r * (1.0 - pi_r))
        eta_sum = 0.5 * (
            pi_r.sum() ** 2 - (pi_r**2).sum()
            + rho_r * (s_r.sum() ** 2 - (s_r**2).sum())
        )
        xb, za = _generating_designs(skeleton, i, skeleton.a[i])
        n = pit.shape[0]
        lo = -(1.0 - 0.05) / max(n - 1.0, 1.0)
        pre.append((pit, cov, pi_r, rho_r, s_r, eta_sum, xb, za, float(n), lo))

    def score(theta):
        tb, ta = theta[:10], theta[10:]
        g = np.zeros(14)
        for pit, cov, pi_r, rho_r, s_r, eta_sum, xb, za, n, lo in pre:
            piom = expit(xb @ tb)
            u = piom * (1.0 - piom)
            su = np.sqrt(u)
            e1 = pit - piom
            rhom = float(np.tanh(za @ ta))
            rw = min(max(rhom, lo), 1.0 - 1e-8)
            ac = 1.0 / (1.0 - rw)
            bc = -rw / ((1.0 - rw) * (1.0 + (n - 1.0) * rw))
            g[:10] += ac * (xb.T @ (pi_r * e1))
            g[:10] += bc * float((pi_r * e1 / su).sum()) * (xb.T @ su)
            v = 1.0 / su
            w = e1 / su
            q1, q2 = pi_r * v, s_r * v
            pair = 0.5 * (q1 @ cov @ q1 + rho_r * (q2 @ cov @ q2))
            pw, sw = pi_r * w, s_r * w
            pair += 0.5 * (
                pw.sum() ** 2 - (pw**2).sum()
                + rho_r * (sw.sum() ** 2 - (sw**2).sum())
            )
            g[10:] += (pair - rhom * eta_sum) * (1.0 - rhom * rhom) * za
        return g

    start = np.concatenate([config.y_beta, config.y_alpha])
    sol = root(score, start, method="hybr", options={"xtol": 1e-13})
    resid = float(np.max(np.abs(sol.fun)))
    if not sol.success and resid > 1e-6:
        raise AccuracyError(
            f"outcome-model skeleton limit did not settle: residual {resid:.3g}"
        )
    return sol.x[:10], sol.x[10:]


@lru_cache(maxsize=16)
def realized_dr_truth(
    config: GenerationConfig,
    n_nodes: int = 64,
) -> tuple[float, float, float, float]:
    """Fixed-skeleton target of the doubly robust fit when the outcome
    working model cannot reproduce the generating moments.

    With a correct outcome model the observed part of the doubly robust
    equations cancels the model predictions in expectation and the target
    reduces to ``realized_truth(config, mixture=True)``.  When the
    generating moments lie outside the working family (the random-intercept
    generator under the generating-form outcome model), the observed part
    keeps a residual on the assigned arms.  This solves the expected
    doubly robust equations exactly: the outcome model is first pushed to
    its own fixed-skeleton limit, then the four treatment-model parameters
    solve the assigned-arm residual plus counterfactual-mixture system.
    Assumes the missingness model is the generating form, so the weights
    are mean one and independent of the outcome."""
    from scipy.optimize import root

    skeleton = generate_covariates(
        config, np.random.default_rng(np.random.SeedSequence((config.seed, 0)))
    )
    tb, ta = _om_skeleton_limit(skeleton, config, n_nodes)

    i_count = skeleton.n_clusters
    n = skeleton.sizes.astype(float)
    arm = skeleton.a.astype(float)
    s1t = np.zeros(i_count)
    s2t = np.zeros(i_count)
    csum = np.zeros(i_count)
    om = {}
    for lvl in (0.0, 1.0):
        om[lvl] = {k: np.zeros(i_count) for k in ("s1", "s2", "sv", "sv2", "rho")}
    for i in range(i_count):
        pit, cov = _true_cluster_law(skeleton, i, config, n_nodes)
        s1t[i] = pit.sum()
        s2t[i] = (pit**2).sum()
        csum[i] = 0.5 * cov.sum()
        for lvl in (0.0, 1.0):
            xb, za = _generating_designs(skeleton, i, lvl)
            piom = expit(xb @ tb)
            om[lvl]["s1"][i] = piom.sum()
            om[lvl]["s2"][i] = (piom**2).sum()
            uom = piom * (1.0 - piom)
            om[lvl]["sv"][i] = np.sqrt(uom).sum()
            om[lvl]["sv2"][i] = uom.sum()
            om[lvl]["rho"][i] = np.tanh(za @ ta)
    npairs = n * (n - 1.0) / 2.0
    wgt = {0.0: 1.0 - config.p_a, 1.0: config.p_a}
    on_arm = {lvl: arm == lvl for lvl in (0.0, 1.0)}

    def pair_quad(s1, s2, pi_s):
        # sum over pairs of (m_j - pi_s)(m_k - pi_s) from first two moments
        return 0.5 * ((s1 - n * pi_s) ** 2 - (s2 - 2.0 * pi_s * s1 + n * pi_s**2))

    def score(theta):
        g = np.zeros(4)
        coeff = {}
        star = {}
        for lvl in (0.0, 1.0):
            pi_s = float(expit(theta[0] + lvl * theta[1]))
            rho_s = float(np.tanh(theta[2] + lvl * theta[3]))
            rw = clamp_working_corr(np.full(i_count, rho_s), n)
            coeff[lvl] = 1.0 / (1.0 + (n - 1.0) * rw)
            star[lvl] = (pi_s, rho_s)
        for lvl in (0.0, 1.0):
            pi_s, rho_s = star[lvl]
            u_s = pi_s * (1.0 - pi_s)
            x = np.array([1.0, lvl])
            dfac = 1.0 - rho_s * rho_s
            o = om[lvl]
            # observed residual part on the clusters assigned this level
            m = on_arm[lvl]
            gb_obs = (coeff[lvl][m] * (s1t[m] - o["s1"][m])).sum()
            pair_obs = (
                csum[m]
                + pair_quad(s1t, s2t, pi_s)[m]
                - pair_quad(o["s1"], o["s2"], pi_s)[m]
                - o["rho"][m] * 0.5 * (o["sv"][m] ** 2 - o["sv2"][m])
            ) / u_s
            ga_obs = pair_obs.sum()
            # counterfactual-mixture augmentation over every cluster
            gb_aug = wgt[lvl] * (coeff[lvl] * (o["s1"] - n * pi_s)).sum()
            pair_aug = (
                pair_quad(o["s1"], o["s2"], pi_s)
                + o["rho"] * 0.5 * (o["sv"] ** 2 - o["sv2"])
            ) / u_s - npairs * rho_s
            ga_aug = wgt[lvl] * pair_aug.sum()
            g[:2] += (gb_obs + gb_aug) * x
            g[2:] += (ga_obs + ga_aug) * dfac * x
        return g

    start = np.asarray(realized_truth(config, n_nodes=n_nodes, mixture=True))
    sol = root(score, start, method="hybr", options={"xtol": 1e-13})
    resid = float(np.max(np.abs(sol.fun)))
    if not sol.success and resid > 1e-8 * float(npairs.sum()):
        raise AccuracyError(
            f"doubly robust skeleton target did not settle: residual {resid:.3g}"
        )
    return tuple(sol.x)


# ---------------------------------------------------------------------------
# replicate harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EstimatorRequest:
    """One estimator to run each replicate.

    Missingness/outcome model specs default to the generating form; pass a
    reduced spec to study misspecification.  ``solver`` selects the
    deterministic scoring path, a single stochastic chain, or the averaged
    multi-chain stochastic fit.
    """

    name: str
    kind: str
    solver: str = "deterministic"
    psm_spec: ModelSpec | None = None
    om_spec: ModelSpec | None = None
    sandwich: bool = False


@dataclass
class EstimatorSummary:
    name: str
    n_requested: int
    n_converged: int
    bias: np.ndarray
    replicate_se: np.ndarray
    sandwich_se: np.ndarray
    pct_psm_error: float
    pct_om_error: float
    pct_both_error: float
    pct_tm_error: float
    runtime: dict
    estimates: np.ndarray | None = None
    sandwich_ses: np.ndarray | None = None

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "n_requested": self.n_requested,
            "n_converged": self.n_converged,
            "bias": [float(v) for v in self.bias],
            "replicate_se": [float(v) for v in self.replicate_se],
            "sandwich_se": [float(v) for v in self.sandwich_se],
            "pct_psm_error": self.pct_psm_error,
            "pct_om_error": self.pct_om_error,
            "pct_both_error": self.pct_both_error,
            "pct_tm_error": self.pct_tm_error,
            "runtime": {k: float(v) for k, v in self.runtime.items()},
        }


@dataclass
class ReplicateSummary:
    truth: tuple[float, float, float, float]
    n_replicates: int
    rows: tuple[EstimatorSummary, ...]

    def as_dict(self) -> dict:
        return {
            "truth": [float(v) for v in self.truth],
            "n_replicates": self.n_replicates,
            "rows": [r.as_dict() for r in self.rows],
        }


_PARAM_NAMES = ("beta0", "beta_a", "alpha0", "alpha_a")


def _generate_outcome(config, skeleton, rng):
    if config.method == "parzen":
        return parzen_generate(skeleton, config.y_beta, config.y_alpha, rng)
    return random_intercept_generate(skeleton, config.y_beta, config.y_alpha, rng)


def _nuisance(dataset, spec, stage, plan, controls, stochastic, cache):
    """Fit one nuisance stage, memoized per replicate on the model spec."""
    key = (stage, spec, stochastic)
    if cache is not None and key in cache:
        return cache[key]
    t0 = time.perf_counter()
    if stage == "psm":
        if stochastic:
            fit = s_psee(dataset, spec, plan).as_fit(spec, plan.omega_nuisance)
        else:
            fit = fit_psee(dataset, spec, controls)
    else:
        if stochastic:
            fit = s_omee(dataset, spec, plan).as_fit(spec, plan.omega_nuisance)
        else:
            fit = fit_omee(dataset, spec, controls)
    entry = (fit, time.perf_counter() - t0)
    if cache is not None:
        cache[key] = entry
    return entry


def _fit_one(dataset, req, tm_spec, plan, controls, cache=None):
    """Run the staged fit for one estimator; returns (fit, failure flags)."""
    psm_err = om_err = tm_err = False
    fit = None
    psee = omee = None
    stochastic = req.solver in ("stochastic", "parallel_stochastic")
    needs_psm = req.kind in ("ipw_g1", "ipw_g2", "doubly_robust")
    needs_om = req.kind == "doubly_robust"
    runtimes: dict = {}
    try:
        if needs_psm:
            psee, dt = _nuisance(
                dataset, req.psm_spec, "psm", plan, controls, stochastic, cache
            )
            runtimes["psm"] = dt
            if not psee.converged:
                psm_err = True
    except Sgee2Error:
        psm_err = True
    try:
        if needs_om and not psm_err:
            omee, dt = _nuisance(
                dataset, req.om_spec, "om", plan, controls, stochastic, cache
            )
            runtimes["om"] = dt
            if not omee.converged:
                om_err = True
    except Sgee2Error:
        om_err = True
    if not (psm_err or om_err):
        try:
            t0 = time.perf_counter()
            if req.kind == "complete_case":
                fit = fit_complete_case(dataset, tm_spec, controls)
            elif req.kind in ("ipw_g1", "ipw_g2"):
                if stochastic:
                    fit = s_ipw_gee2(
                        dataset, tm_spec, psee, plan, mode=req.kind[-2:]
                    ).as_fit(tm_spec, plan.omega_tm, kind=req.kind, psee=psee)
                else:
                    fit = fit_ipw_gee2(
                        dataset, tm_spec, psee, req.kind[-2:], controls
                    )
            else:
                if req.solver == "parallel_stochastic":
                    theta, chains = par_sgee2(dataset, tm_spec, psee, omee, plan)
                    fit = FitResult(
                        spec=tm_spec, theta=theta, converged=True,
                        iterations=plan.omega_tm, max_update=np.nan,
                        condition_diag=np.nan, kind="doubly_robust",
                        mode="parallel_stochastic", psee=psee, omee=omee,
                    )
                elif stochastic:
                    fit = s_dr_gee2(dataset, tm_spec, psee, omee, plan).as_fit(
                        tm_spec, plan.omega_tm, kind="doubly_robust",
                        psee=psee, omee=omee,
                    )
                else:
                    fit = fit_dr_gee2(dataset, tm_spec, psee, omee, controls)
            runtimes["tm"] = time.perf_counter() - t0
            if not fit.converged:
                tm_err = True
                fit = None
        except Sgee2Error:
            tm_err = True
            fit = None
    if fit is not None:
        fit.runtime = {**runtimes, **(fit.runtime or {})}
        fit.runtime.update({k: runtimes[k] for k in runtimes})
    return fit, psm_err, om_err, tm_err, runtimes


def run_replicates(
    config: GenerationConfig,
    estimators: tuple[EstimatorRequest, ...],
    n_replicates: int,
    plan: SamplingPlan | None = None,
    controls: ScoringControls = ScoringControls(),
    truth: tuple[float, float, float, float] | None = None,
    with_sandwich: bool = False,
) -> ReplicateSummary:
    """Fixed-skeleton replicate study.

    Covariates are drawn once; missingness and outcomes are regenerated each
    replicate from disjoint seed streams, so every estimator inside a
    replicate sees the same data.  Failure percentages follow the staged
    taxonomy (missingness model only, outcome model only, both, and
    treatment model conditional on sound nuisances); runtimes average over
    converged runs only.
    """
    if truth is None:
        truth = marginal_truth(config)
    truth_arr = np.asarray(truth)
    skeleton = generate_covariates(
        config, np.random.default_rng(np.random.SeedSequence((config.seed, 0)))
    )
    tm_spec = ModelSpec(target="TM")
    base_plan = plan if plan is not None else SamplingPlan()
    reqs = [
        replace(
            req,
            psm_spec=req.psm_spec
            if req.psm_spec is not None
            else generating_spec("PSM"),
            om_spec=req.om_spec if req.om_spec is not None else generating_spec("OM"),
        )
        for req in estimators
    ]

    est_rows = {req.name: [] for req in reqs}
    sw_rows = {req.name: [] for req in reqs}
    counts = {
        req.name: {"psm": 0, "om": 0, "both": 0, "tm": 0} for req in reqs
    }
    run_acc = {req.name: {} for req in reqs}

    for t in range(n_replicates):
        rng_y = np.random.default_rng(np.random.SeedSequence((config.seed, t, 1)))
        rng_r = np.random.default_rng(np.random.SeedSequence((config.seed, t, 2)))
        y = _generate_outcome(config, skeleton, rng_y)
        if config.r_beta is not None:
            r = parzen_generate(skeleton, config.r_beta, config.r_alpha, rng_r)
        else:
            r = None
        dataset = assemble_dataset(skeleton, y, r, p_a=config.p_a)
        rep_plan = replace(base_plan, seed=base_plan.seed + 7919 * (t + 1))
        cache: dict = {}
        for req in reqs:
            fit, psm_err, om_err, tm_err, runtimes = _fit_one(
                dataset, req, tm_spec, rep_plan, controls, cache
            )
            c = counts[req.name]
            if psm_err and om_err:
                c["both"] += 1
            elif psm_err:
                c["psm"] += 1
            elif om_err:
                c["om"] += 1
            elif tm_err:
                c["tm"] += 1
            if fit is None:
                continue
            est_rows[req.name].append(fit.theta.stacked.copy())
            for k, v in runtimes.items():
                run_acc[req.name].setdefault(k, []).append(v)
            if with_sandwich or req.sandwich:
                try:
                    sw = sandwich_variance(dataset, fit)
                    sw_rows[req.name].append(sw.tm_se)
                except Sgee2Error:
                    sw_rows[req.name].append(np.full(4, np.nan))

    rows = []
    for req in reqs:
        ests = np.asarray(est_rows[req.name])
        n_ok = ests.shape[0]
        if n_ok:
            bias = ests.mean(axis=0) - truth_arr
            rep_se = ests.std(axis=0, ddof=1) if n_ok > 1 else np.full(4, np.nan)
        else:
            bias = np.full(4, np.nan)
            rep_se = np.full(4, np.nan)
        sws = np.asarray(sw_rows[req.name])
        sw_se = np.nanmean(sws, axis=0) if sws.size else np.full(4, np.nan)
        c = counts[req.name]
        rows.append(
            EstimatorSummary(
                name=req.name,
                n_requested=n_replicates,
                n_converged=n_ok,
                bias=bias,
                replicate_se=rep_se,
                sandwich_se=sw_se,
                pct_psm_error=100.0 * c["psm"] / n_replicates,
                pct_om_error=100.0 * c["om"] / n_replicates,
                pct_both_error=100.0 * c["both"] / n_replicates,
                pct_tm_error=100.0 * c["tm"] / n_replicates,
                runtime={
                    k: float(np.mean(v)) for k, v in run_acc[req.name].items()
                },
                estimates=ests if n_ok else None,
                sandwich_ses=sws if sws.size else None,
            )
        )
    return ReplicateSummary(
        truth=tuple(float(v) for v in truth),
        n_replicates=n_replicates,
        rows=tuple(rows),
    )
