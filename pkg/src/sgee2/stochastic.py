"""Subsampled (Robbins-Monro) Fisher scoring.

Each iteration draws a fresh per-cluster simple random sample without
replacement of the observed indices, rescales the diagonal weights so the
subsampled gradient and Hessian are conditionally unbiased for their full
counterparts, and takes a damped Newton step with learning rate gamma.
Iteration budgets are fixed; a chain "converges" when every iterate stayed
finite and the final Hessians are well conditioned.

The doubly-robust variant additionally needs the augmentation term; its
subsampled form draws an independent second sample over all cluster
indices (variant z3, conditionally unbiased).  The two biased candidates
z1/z2, which reuse the observed-outcome sample, are kept for the bias
demonstration tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .core_math import DiagonalWeight, PairIndex, expit, pair_enumerate
from .errors import (
    AggregateChainFailure,
    ConfigError,
    SamplingError,
    ShapeError,
)
from .estimators import (
    FitResult,
    ScoringControls,
    clamp_working_corr,
    equilibrate,
    joint_observation_prob,
    POSITIVITY_FLOOR,
)
from .errors import PositivityError
from .model import (
    ClusterData,
    Dataset,
    ModelSpec,
    ParameterVector,
    corr_design,
    mean_design,
    predict_corr,
    predict_mean,
)

ZETA_VARIANTS = ("z1", "z2", "z3")


def default_gamma(omega: int) -> float:
    return 1.0 / (omega + 1.0)


@dataclass(frozen=True)
class SamplingPlan:
    """Subsampling and iteration schedule for one stochastic fit."""

    pi_s: float = 0.30
    omega_nuisance: int = 20
    omega_tm: int = 10
    gamma: object = None          # callable omega -> rate, or indexable
    seed: int = 0
    chains: int = 1

    def __post_init__(self):
        if not 0.0 < self.pi_s <= 1.0:
            raise ConfigError(f"pi_s must be in (0,1], got {self.pi_s}")
        if self.omega_nuisance < 1 or self.omega_tm < 1:
            raise ConfigError("iteration budgets must be >= 1")
        if self.chains < 1:
            raise ConfigError("chain count must be >= 1")
        n_check = max(self.omega_nuisance, self.omega_tm)
        rates = [self.gamma_at(w) for w in range(n_check)]
        if any(not (g > 0.0) for g in rates):
            raise ConfigError("learning rates must be strictly positive")

    def gamma_at(self, omega: int) -> float:
        if self.gamma is None:
            return default_gamma(omega)
        if callable(self.gamma):
            return float(self.gamma(omega))
        return float(self.gamma[omega])


@dataclass
class ChainResult:
    theta: ParameterVector | None
    converged: bool
    divergence_reason: str | None = None
    trace: list | None = None
    spec: ModelSpec | None = None

    def as_fit(self, spec: ModelSpec, iterations: int, **extra) -> FitResult:
        return FitResult(
            spec=spec,
            theta=self.theta,
            converged=self.converged,
            iterations=iterations,
            max_update=float("nan"),
            condition_diag=float("nan"),
            **extra,
        )


def srswor(universe: np.ndarray, upsilon: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform subset of exactly upsilon distinct indices."""
    universe = np.asarray(universe, dtype=np.int64)
    if not 1 <= upsilon <= universe.shape[0]:
        raise SamplingError(
            f"subsample size {upsilon} out of range for universe of "
            f"{universe.shape[0]}"
        )
    return rng.choice(universe, size=upsilon, replace=False)


def induced_weights(
    w: DiagonalWeight,
    s_i: np.ndarray,
    m_i: int,
    upsilon_i: int,
    order: str,
    pairs: PairIndex | None = None,
) -> DiagonalWeight:
    """Rescaled weights after subsampling: zero outside the (pairwise)
    sample, inflated by m/upsilon (first order) or m(m-1)/(upsilon(upsilon-1))
    (second order) inside, so the expectation over samples recovers w."""
    s_i = np.asarray(s_i, dtype=np.int64)
    entries = np.zeros(len(w))
    if order == "first":
        entries[s_i] = w.entries[s_i] * (m_i / upsilon_i)
    elif order == "second":
        if upsilon_i < 2:
            raise SamplingError(
                "second-order induced weights need a subsample of >= 2"
            )
        if pairs is None or len(pairs) != len(w):
            raise ShapeError("second-order induced weights need the pair index")
        member = np.zeros(pairs.n, dtype=bool)
        member[s_i] = True
        mask = member[pairs.jj] & member[pairs.kk]
        fac = (m_i * (m_i - 1)) / (upsilon_i * (upsilon_i - 1))
        entries[mask] = w.entries[mask] * fac
    else:
        raise ShapeError(f"order must be 'first' or 'second', got {order!r}")
    return DiagonalWeight(entries)


def _upsilon(pi_s: float, m: int) -> int:
    if m <= 0:
        return 0
    up = math.ceil(pi_s * m)
    if m >= 2:
        up = max(up, 2)
    return min(up, m)


# ---------------------------------------------------------------------------
# per-cluster work units
# ---------------------------------------------------------------------------

@dataclass
class _Work:
    """Precomputed per-cluster arrays reused by every iteration."""

    n: int
    a: int
    xb: np.ndarray
    za: np.ndarray
    v: np.ndarray             # response with NaN at missing
    w1: np.ndarray            # full-data first-order weights
    w2: np.ndarray            # full-data pair weights, length n(n-1)/2
    universe: np.ndarray      # sampling universe (observed indices)
    zeros: np.ndarray         # scratch zero vector of length n
    pibar0: np.ndarray | None = None
    pibar1: np.ndarray | None = None
    rhobar0: float = 0.0
    rhobar1: float = 0.0


def _cluster_ipw_weights(cluster, psee_fit, mode):
    pi_r = predict_mean(psee_fit.spec, psee_fit.theta, cluster)
    if np.any(pi_r < POSITIVITY_FLOOR):
        raise PositivityError(
            cluster.id,
            np.flatnonzero(pi_r < POSITIVITY_FLOOR).tolist(),
            POSITIVITY_FLOOR,
        )
    w1 = np.where(cluster.r > 0, 1.0 / pi_r, 0.0)
    pairs = pair_enumerate(cluster.n)
    p1 = pi_r[pairs.jj]
    p2 = pi_r[pairs.kk]
    if mode == "g2":
        rho_r = predict_corr(psee_fit.spec, psee_fit.theta, cluster)
        eta = p1 * p2 + rho_r * np.sqrt(p1 * (1.0 - p1) * p2 * (1.0 - p2))
    else:
        eta = p1 * p2
    obs = cluster.r > 0
    w2 = np.where(obs[pairs.jj] & obs[pairs.kk], 1.0 / eta, 0.0)
    return w1, w2


def _build_works(
    dataset: Dataset,
    spec: ModelSpec,
    response: str,
    psee_fit: FitResult | None = None,
    mode: str | None = None,
    omee_fit: FitResult | None = None,
) -> list[_Work]:
    works = []
    for c in dataset:
        xb = mean_design(spec, c)
        za = corr_design(spec, c)
        pairs = pair_enumerate(c.n)
        if response == "r":
            v = c.r.astype(float)
            w1 = np.ones(c.n)
            w2 = np.ones(len(pairs))
            universe = np.arange(c.n, dtype=np.int64)
        else:
            v = c.y
            universe = c.observed.astype(np.int64)
            if psee_fit is not None:
                w1, w2 = _cluster_ipw_weights(c, psee_fit, mode)
            else:
                obs = c.r > 0
                w1 = obs.astype(float)
                w2 = (obs[pairs.jj] & obs[pairs.kk]).astype(float)
        work = _Work(
            n=c.n, a=c.a, xb=xb, za=za, v=v, w1=w1, w2=w2,
            universe=universe, zeros=np.zeros(c.n),
        )
        if omee_fit is not None:
            for a in (0, 1):
                cf = replace(c, a=a)
                pib = predict_mean(omee_fit.spec, omee_fit.theta, cf)
                rhb = predict_corr(omee_fit.spec, omee_fit.theta, cf)
                if a == 0:
                    work.pibar0, work.rhobar0 = pib, rhb
                else:
                    work.pibar1, work.rhobar1 = pib, rhb
        works.append(work)
    return works


# ---------------------------------------------------------------------------
# subsampled score accumulation
# ---------------------------------------------------------------------------

def _accum_gee2(works, p, q, beta, alpha, pi_s, rng):
    """One subsampled evaluation of the weighted GEE2 score."""
    hb = np.zeros((p, p))
    gb = np.zeros(p)
    ha = np.zeros((q, q))
    ga = np.zeros(q)
    for wk in works:
        m = wk.universe.shape[0]
        if m == 0:
            continue
        up = _upsilon(pi_s, m)
        s = srswor(wk.universe, up, rng)
        lp = wk.xb @ beta
        if np.any(~np.isfinite(lp)):
            raise FloatingPointError("nonfinite mean predictor")
        pi = expit(lp)
        u = pi * (1.0 - pi)
        rho = float(np.tanh(wk.za @ alpha))
        if not -1.0 + 1e-10 < rho < 1.0 - 1e-10:
            raise FloatingPointError("correlation outside the open unit range")
        rho_w = float(clamp_working_corr(rho, wk.n))
        d = u[:, None] * wk.xb
        e = np.where(wk.w1 > 0.0, wk.v - pi, 0.0)
        wt = np.zeros(wk.n)
        wt[s] = wk.w1[s] * (m / up)
        h1, g1 = _kernels.gee1_cluster(d, u, rho_w, wt, e, np.sort(s), 2)
        hb += h1
        gb += g1
        if up >= 2:
            pr = e / np.sqrt(u)
            s0, s1 = _kernels.pair_accum_sub(
                s, wk.n, wk.w2, 1, pr, wk.zeros, 0.0, wk.zeros, rho
            )
            fac = (m * (m - 1)) / (up * (up - 1))
            da = (1.0 - rho * rho) * wk.za
            ha += fac * s0 * np.outer(da, da)
            ga += fac * s1 * da
    return hb, gb, ha, ga


def _dr_cluster_zeta(wk, pi_star, rho_star, coeffs, p_a, sample, variant, fac1, fac2, wvec):
    """Subsampled augmentation contribution for one cluster; fac1/fac2 are
    the first/second-order inflation factors and wvec the per-subject
    weights attached to the sample (IPW weights for z1, ones otherwise)."""
    zb = np.zeros(2)
    za_c = np.zeros(2)
    for a, wgt in ((0, 1.0 - p_a), (1, p_a)):
        x = np.array([1.0, float(a)])
        pib = wk.pibar1 if a == 1 else wk.pibar0
        rhb = wk.rhobar1 if a == 1 else wk.rhobar0
        us = pi_star[a] * (1.0 - pi_star[a])
        ss = np.sqrt(us)
        e1 = pib - pi_star[a]
        zb += wgt * coeffs[a] * float((wvec[sample] * fac1 * e1[sample]).sum()) * x
        if sample.shape[0] >= 2:
            bq = e1 / ss
            sq = np.sqrt(pib * (1.0 - pib))
            use_w2 = 1 if variant == "z1" else 0
            s0, s1 = _kernels.pair_accum_sub(
                sample, wk.n, wk.w2, use_w2, bq, wk.zeros,
                -(rhb / us), sq, rho_star[a],
            )
            za_c += wgt * fac2 * s1 * (1.0 - rho_star[a] ** 2) * x
    return zb, za_c


def stochastic_zeta(
    cluster: ClusterData,
    tm_spec: ModelSpec,
    tm_theta: ParameterVector,
    om_fit: FitResult,
    p_a: float,
    sample: np.ndarray,
    variant: str = "z3",
    psee_fit: FitResult | None = None,
    mode: str = "g2",
) -> np.ndarray:
    """Subsampled augmentation term for one cluster (stacked beta, alpha).

    z3 expects ``sample`` drawn from all cluster indices and inflates by
    n/len(sample); z1/z2 expect a sample of observed indices and inflate by
    m/len(sample), z1 additionally carrying the inverse-probability weights
    (which makes z1 and z2 biased for the deterministic term).
    """
    if variant not in ZETA_VARIANTS:
        raise ShapeError(f"variant must be one of {ZETA_VARIANTS}, got {variant!r}")
    sample = np.asarray(sample, dtype=np.int64)
    wk = _build_works(
        Dataset((cluster,), p_a=p_a if 0 < p_a < 1 else None),
        tm_spec, "y",
        psee_fit=psee_fit if variant == "z1" else None,
        mode=mode,
        omee_fit=om_fit,
    )[0]
    n = cluster.n
    pi_star = {a: float(expit(tm_theta.beta[0] + tm_theta.beta[1] * a)) for a in (0, 1)}
    rho_star = {a: float(np.tanh(tm_theta.alpha[0] + tm_theta.alpha[1] * a)) for a in (0, 1)}
    coeffs = {}
    for a in (0, 1):
        rho = float(clamp_working_corr(rho_star[a], n))
        ac = 1.0 / (1.0 - rho)
        bc = -rho / ((1.0 - rho) * (1.0 + (n - 1) * rho))
        coeffs[a] = ac + bc * n
    k = sample.shape[0]
    if variant == "z3":
        fac1 = n / k
        fac2 = (n * (n - 1)) / (k * (k - 1)) if k >= 2 else 0.0
        wvec = np.ones(n)
    else:
        m = cluster.n_observed
        fac1 = m / k
        fac2 = (m * (m - 1)) / (k * (k - 1)) if k >= 2 else 0.0
        wvec = wk.w1 if variant == "z1" else np.ones(n)
    zb, za_c = _dr_cluster_zeta(
        wk, pi_star, rho_star, coeffs, p_a, sample, variant, fac1, fac2, wvec
    )
    return np.concatenate([zb, za_c])


def _accum_dr(works, beta, alpha, p_a, pi_s, rng_s, rng_sp, variant):
    """One subsampled evaluation of the doubly-robust score.

    The curvature of the augmented equation does not depend on the data
    (canonical treatment model), so the subsampled Hessian coincides with
    the deterministic one and is assembled directly.
    """
    pi_star = {a: float(expit(beta[0] + beta[1] * a)) for a in (0, 1)}
    rho_star = {a: float(np.tanh(alpha[0] + alpha[1] * a)) for a in (0, 1)}
    for a in (0, 1):
        if not -1.0 + 1e-10 < rho_star[a] < 1.0 - 1e-10:
            raise FloatingPointError("correlation outside the PD range")
    hb = np.zeros((2, 2))
    gb = np.zeros(2)
    ha = np.zeros((2, 2))
    ga = np.zeros(2)
    for wk in works:
        n = wk.n
        coeffs = {}
        for a in (0, 1):
            rw = float(clamp_working_corr(rho_star[a], n))
            ac = 1.0 / (1.0 - rw)
            bc = -rw / ((1.0 - rw) * (1.0 + (n - 1) * rw))
            coeffs[a] = ac + bc * n
        npairs = n * (n - 1) / 2.0
        for a, wgt in ((0, 1.0 - p_a), (1, p_a)):
            x = np.array([1.0, float(a)])
            us = pi_star[a] * (1.0 - pi_star[a])
            hb += wgt * us * coeffs[a] * n * np.outer(x, x)
            dfac = 1.0 - rho_star[a] ** 2
            ha += wgt * dfac * dfac * npairs * np.outer(x, x)

        a_i = wk.a
        x_i = np.array([1.0, float(a_i)])
        pis = pi_star[a_i]
        rhs = rho_star[a_i]
        us = pis * (1.0 - pis)
        pibar = wk.pibar1 if a_i == 1 else wk.pibar0
        rhobar = wk.rhobar1 if a_i == 1 else wk.rhobar0

        m = wk.universe.shape[0]
        s = None
        up = 0
        if m > 0:
            up = _upsilon(pi_s, m)
            s = srswor(wk.universe, up, rng_s)
            e1 = np.where(wk.w1 > 0.0, wk.v - pibar, 0.0)
            gb += coeffs[a_i] * float((wk.w1[s] * e1[s]).sum()) * (m / up) * x_i
            if up >= 2:
                ss = np.sqrt(us)
                av = np.where(wk.w1 > 0.0, (wk.v - pis) / ss, 0.0)
                bv = (pibar - pis) / ss
                sv = np.sqrt(pibar * (1.0 - pibar))
                s0, s1 = _kernels.pair_accum_sub(
                    s, n, wk.w2, 1, av, bv, rhobar / us, sv, 0.0
                )
                fac = (m * (m - 1)) / (up * (up - 1))
                ga += fac * s1 * (1.0 - rhs * rhs) * x_i

        # augmentation with its independent sample over all indices
        upp = _upsilon(pi_s, n)
        if variant == "z3":
            sp = srswor(np.arange(n, dtype=np.int64), upp, rng_sp)
            fac1 = n / upp
            fac2 = (n * (n - 1)) / (upp * (upp - 1)) if upp >= 2 else 0.0
            wvec = np.ones(n)
        else:
            # z1/z2 reuse the observed-outcome sample itself
            if s is None:
                continue
            sp = s
            fac1 = m / up
            fac2 = (m * (m - 1)) / (up * (up - 1)) if up >= 2 else 0.0
            wvec = wk.w1 if variant == "z1" else np.ones(n)
        zb, za_c = _dr_cluster_zeta(
            wk, pi_star, rho_star, coeffs, p_a, sp, variant, fac1, fac2, wvec
        )
        gb += zb
        ga += za_c
    return hb, gb, ha, ga


# ---------------------------------------------------------------------------
# chain drivers
# ---------------------------------------------------------------------------

def _run_chain(
    accum,
    omega: int,
    plan: SamplingPlan,
    theta0: ParameterVector,
    controls: ScoringControls,
    keep_trace: bool = False,
) -> ChainResult:
    beta = theta0.beta.copy()
    alpha = theta0.alpha.copy()
    trace = [] if keep_trace else None
    hb = ha = None
    for w in range(omega):
        try:
            hb, gb, ha, ga = accum(beta, alpha, w)
        except FloatingPointError as exc:
            return ChainResult(None, False, divergence_reason=str(exc), trace=trace)
        gam = plan.gamma_at(w)
        try:
            db = np.linalg.solve(hb, gb)
            da = np.linalg.solve(ha, ga)
        except np.linalg.LinAlgError as exc:
            return ChainResult(None, False, divergence_reason=str(exc), trace=trace)
        beta = beta + gam * db
        alpha = alpha + gam * da
        if np.any(~np.isfinite(beta)) or np.any(~np.isfinite(alpha)):
            return ChainResult(
                None, False, divergence_reason="nonfinite iterate", trace=trace
            )
        if keep_trace:
            trace.append(np.concatenate([beta, alpha]))
    # scale out the covariate units so the gate measures near-singularity
    cond = max(
        float(np.linalg.cond(equilibrate(hb)[0])),
        float(np.linalg.cond(equilibrate(ha)[0])),
    )
    if not np.isfinite(cond) or cond > controls.cond_threshold:
        return ChainResult(
            None, False,
            divergence_reason=f"ill-conditioned final Hessian ({cond:.3g})",
            trace=trace,
        )
    return ChainResult(ParameterVector(beta, alpha), True, trace=trace)


_STAGE_CODES = {"psee": 1, "omee": 2, "tm": 3, "tm_dr": 4}


def _stage_rngs(plan: SamplingPlan, chain: int, stage: str):
    root = np.random.SeedSequence(
        entropy=(plan.seed, chain, _STAGE_CODES.get(stage, 0))
    )
    s1, s2 = root.spawn(2)
    return np.random.default_rng(s1), np.random.default_rng(s2)


def s_gee2_stage(
    dataset: Dataset,
    spec: ModelSpec,
    response: str,
    plan: SamplingPlan,
    omega: int,
    stage: str,
    psee_fit: FitResult | None = None,
    mode: str | None = None,
    theta0: ParameterVector | None = None,
    rng: np.random.Generator | None = None,
    controls: ScoringControls = ScoringControls(),
    keep_trace: bool = False,
) -> ChainResult:
    """Generic stochastic GEE2 stage (missingness, outcome, complete-case,
    or inverse-probability-weighted treatment model)."""
    works = _build_works(dataset, spec, response, psee_fit=psee_fit, mode=mode)
    if rng is None:
        rng, _ = _stage_rngs(plan, 0, stage)
    start = theta0 if theta0 is not None else ParameterVector.zeros(spec)

    def accum(beta, alpha, _w):
        return _accum_gee2(works, spec.n_beta, spec.n_alpha, beta, alpha, plan.pi_s, rng)

    res = _run_chain(accum, omega, plan, start, controls, keep_trace)
    res.spec = spec
    return res


def s_psee(dataset, psm_spec, plan, **kw) -> ChainResult:
    return s_gee2_stage(
        dataset, psm_spec, "r", plan, plan.omega_nuisance, "psee", **kw
    )


def s_omee(dataset, om_spec, plan, **kw) -> ChainResult:
    return s_gee2_stage(
        dataset, om_spec, "y", plan, plan.omega_nuisance, "omee", **kw
    )


def s_ipw_gee2(dataset, tm_spec, psee_fit, plan, mode="g2", **kw) -> ChainResult:
    return s_gee2_stage(
        dataset, tm_spec, "y", plan, plan.omega_tm, "tm",
        psee_fit=psee_fit, mode=mode, **kw
    )


def s_dr_gee2(
    dataset: Dataset,
    tm_spec: ModelSpec,
    psee_fit: FitResult,
    omee_fit: FitResult,
    plan: SamplingPlan,
    chain: int = 0,
    theta0: ParameterVector | None = None,
    variant: str = "z3",
    controls: ScoringControls = ScoringControls(),
    keep_trace: bool = False,
) -> ChainResult:
    """Stochastic doubly-robust treatment-model chain (Robbins-Monro)."""
    works = _build_works(
        dataset, tm_spec, "y", psee_fit=psee_fit, mode="g2", omee_fit=omee_fit
    )
    rng_s, rng_sp = _stage_rngs(plan, chain, "tm_dr")
    start = theta0 if theta0 is not None else ParameterVector.zeros(tm_spec)

    def accum(beta, alpha, _w):
        return _accum_dr(
            works, beta, alpha, dataset.p_a, plan.pi_s, rng_s, rng_sp, variant
        )

    res = _run_chain(accum, plan.omega_tm, plan, start, controls, keep_trace)
    res.spec = tm_spec
    return res


def par_sgee2(
    dataset: Dataset,
    tm_spec: ModelSpec,
    psee_fit: FitResult,
    omee_fit: FitResult,
    plan: SamplingPlan,
    second_round: bool = False,
    controls: ScoringControls = ScoringControls(),
) -> tuple[ParameterVector, list[ChainResult]]:
    """Average of independent stochastic doubly-robust chains.

    Only convergent chains enter the average; an aggregate failure is
    raised when none converge.  With second_round=True the averaged
    estimate seeds one further set of chains.
    """
    chains = [
        s_dr_gee2(dataset, tm_spec, psee_fit, omee_fit, plan, chain=k,
                  controls=controls)
        for k in range(plan.chains)
    ]
    good = [c for c in chains if c.converged]
    if not good:
        raise AggregateChainFailure([c.divergence_reason for c in chains])
    avg = ParameterVector(
        np.mean([c.theta.beta for c in good], axis=0),
        np.mean([c.theta.alpha for c in good], axis=0),
    )
    if second_round:
        plan2 = SamplingPlan(
            pi_s=plan.pi_s, omega_nuisance=plan.omega_nuisance,
            omega_tm=plan.omega_tm, gamma=plan.gamma,
            seed=plan.seed + 1, chains=plan.chains,
        )
        chains2 = [
            s_dr_gee2(dataset, tm_spec, psee_fit, omee_fit, plan2, chain=k,
                      theta0=avg, controls=controls)
            for k in range(plan2.chains)
        ]
        good2 = [c for c in chains2 if c.converged]
        if good2:
            avg = ParameterVector(
                np.mean([c.theta.beta for c in good2], axis=0),
                np.mean([c.theta.alpha for c in good2], axis=0),
            )
            chains = chains2
    return avg, chains
