"""Deterministic Fisher-scoring solvers for the three-stage pipeline.

The missingness model (PSM) and the conditional outcome model (OM) are
fitted first; their estimates are then frozen while the treatment model
(TM) is solved by complete-case, inverse-probability-weighted (g1/g2), or
doubly-robust second-order estimating equations.

Internally every fit runs on a packed representation of the dataset: all
subject rows concatenated, all within-cluster pairs enumerated once, and
per-cluster sums taken by segment reduction, so one scoring iteration is a
handful of dense matrix products regardless of the cluster count.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .core_math import expit, pair_enumerate
from .errors import (
    DivergenceError,
    InfeasibleCorrelationError,
    NumericalOverflowError,
    PositivityError,
    SeparationError,
    ShapeError,
    SingularityError,
)
from .model import (
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
    working_covariance,
)

KINDS = ("complete_case", "ipw_g1", "ipw_g2", "doubly_robust")
SOLVERS = ("deterministic", "stochastic", "parallel_stochastic")

POSITIVITY_FLOOR = 1e-3
_PD_MARGIN = 1e-10


@dataclass(frozen=True)
class EstimatorChoice:
    """Which treatment-model estimator to run and with which solver."""

    kind: str
    solver: str = "deterministic"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ShapeError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.solver not in SOLVERS:
            raise ShapeError(f"solver must be one of {SOLVERS}, got {self.solver!r}")


@dataclass(frozen=True)
class ScoringControls:
    tol: float = 1e-8
    max_iter: int = 50
    cond_threshold: float = 1e12
    # a near-singular iterate can propose a Newton step of any magnitude
    # representable in double precision; 60 halvings (2^60 ~ 1e18) always
    # bring the linear predictor back out of exp overflow, and the budget
    # only costs time on evaluations that already failed
    max_halvings: int = 60


@dataclass
class FitResult:
    """Converged estimates plus solver diagnostics for one fitted stage."""

    spec: ModelSpec
    theta: ParameterVector
    converged: bool
    iterations: int
    max_update: float
    condition_diag: float
    runtime: dict = field(default_factory=dict)
    sandwich: np.ndarray | None = None
    kind: str | None = None
    mode: str | None = None
    psee: "FitResult | None" = None
    omee: "FitResult | None" = None


# ---------------------------------------------------------------------------
# packed dataset representation
# ---------------------------------------------------------------------------

def segment_sum(arr: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Sum of arr rows within [offsets[i], offsets[i+1]); empty segments -> 0."""
    cs = np.concatenate([np.zeros((1,) + arr.shape[1:]), np.cumsum(arr, axis=0)])
    return cs[offsets[1:]] - cs[offsets[:-1]]


@dataclass(frozen=True)
class PackedData:
    """Flattened per-subject and per-pair views of a dataset for one spec."""

    offsets: np.ndarray       # (I+1,) subject offsets
    xb: np.ndarray            # (N, p) mean design rows
    za: np.ndarray            # (I, q) correlation design rows
    v: np.ndarray             # (N,) response, NaN when missing
    r: np.ndarray             # (N,) observation indicators for the response
    cl_sub: np.ndarray        # (N,) owning cluster per subject row
    pair_offsets: np.ndarray  # (I+1,) pair offsets
    jj: np.ndarray            # (P,) global row index of the first pair member
    kk: np.ndarray            # (P,) global row index of the second member
    cl_pair: np.ndarray       # (P,) owning cluster per pair
    n: np.ndarray             # (I,) cluster sizes
    a: np.ndarray             # (I,) treatments
    ids: tuple                # cluster identifiers, for error messages

    @property
    def n_clusters(self) -> int:
        return self.n.shape[0]


def build_packed(dataset: Dataset, spec: ModelSpec, response: str = "y") -> PackedData:
    """Concatenate designs, responses, and the pair enumeration.

    response "y" packs outcomes with their missingness indicators;
    response "r" packs the (always observed) indicators themselves.
    """
    sizes = np.array([c.n for c in dataset], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    xb = np.vstack([mean_design(spec, c) for c in dataset])
    za = np.vstack([corr_design(spec, c) for c in dataset])
    if response == "y":
        v = np.concatenate([c.y for c in dataset])
        r = np.concatenate([c.r for c in dataset]).astype(float)
    elif response == "r":
        v = np.concatenate([c.r for c in dataset]).astype(float)
        r = np.ones(offsets[-1])
    else:
        raise ShapeError(f"response must be 'y' or 'r', got {response!r}")
    cl_sub = np.repeat(np.arange(sizes.shape[0]), sizes)
    jj_parts, kk_parts = [], []
    for i, c in enumerate(dataset):
        p = pair_enumerate(c.n)
        jj_parts.append(p.jj + offsets[i])
        kk_parts.append(p.kk + offsets[i])
    npairs = sizes * (sizes - 1) // 2
    pair_offsets = np.concatenate([[0], np.cumsum(npairs)])
    jj = np.concatenate(jj_parts) if jj_parts else np.zeros(0, dtype=np.int64)
    kk = np.concatenate(kk_parts) if kk_parts else np.zeros(0, dtype=np.int64)
    cl_pair = np.repeat(np.arange(sizes.shape[0]), npairs)
    return PackedData(
        offsets=offsets,
        xb=xb,
        za=za,
        v=v,
        r=r,
        cl_sub=cl_sub,
        pair_offsets=pair_offsets,
        jj=jj,
        kk=kk,
        cl_pair=cl_pair,
        n=sizes,
        a=np.array([c.a for c in dataset], dtype=np.int64),
        ids=tuple(c.id for c in dataset),
    )


_WORKING_CORR_SLACK = 0.05


def clamp_working_corr(rho, n):
    """Pull a fitted correlation strictly inside the equicorrelated
    positive-definite range before building the first-order working
    inverse.

    The mean-block weight matrix is a working choice, so truncating the
    correlation there reweights the mean equations without biasing them.
    Without the clamp, a slightly negative fitted correlation in a large
    cluster sits below -1/(n-1) and makes the whole fit unsolvable even
    at the solution.  Pair residuals always use the raw value."""
    n = np.asarray(n, dtype=float)
    lo = np.where(
        n > 1.0,
        -(1.0 - _WORKING_CORR_SLACK) / np.maximum(n - 1.0, 1.0),
        -(1.0 - _WORKING_CORR_SLACK),
    )
    return np.clip(rho, lo, 1.0 - 1e-8)


def _corr_coeffs(n: np.ndarray, rho: np.ndarray, stage: str):
    """Vectorized (a, b) of the implicit equicorrelated inverse, with the
    positive-definiteness range enforced per cluster."""
    lo = np.where(n > 1, -1.0 / np.maximum(n - 1, 1), -np.inf)
    if np.any(rho <= lo + _PD_MARGIN) or np.any(rho >= 1.0 - _PD_MARGIN):
        i = int(np.argmax((rho <= lo + _PD_MARGIN) | (rho >= 1.0 - _PD_MARGIN)))
        raise SingularityError(float(rho[i]), int(n[i]))
    a = 1.0 / (1.0 - rho)
    b = -rho / ((1.0 - rho) * (1.0 + (n - 1) * rho))
    return a, b


@dataclass(frozen=True)
class ScoreParts:
    """One evaluation of the estimating function and its scoring matrices."""

    g_beta: np.ndarray
    g_alpha: np.ndarray
    h_beta: np.ndarray
    h_alpha: np.ndarray
    percluster: np.ndarray | None = None

    @property
    def stacked_gradient(self) -> np.ndarray:
        return np.concatenate([self.g_beta, self.g_alpha])


def gee2_score(
    packed: PackedData,
    beta: np.ndarray,
    alpha: np.ndarray,
    w1: np.ndarray,
    w2: np.ndarray,
    want_percluster: bool = False,
) -> ScoreParts:
    """Weighted GEE2 score with equicorrelated first-order working block
    and identity second-order block.

    w1/w2 are the per-subject and per-pair diagonal weights (zero entries
    drop the component and shield any NaN residual behind them).
    """
    lp = packed.xb @ beta
    if np.any(~np.isfinite(lp)):
        i = packed.cl_sub[int(np.argmax(~np.isfinite(lp)))]
        raise NumericalOverflowError(
            f"cluster {packed.ids[i]}: nonfinite mean linear predictor"
        )
    pi = expit(lp)
    u = pi * (1.0 - pi)
    if np.any(u <= 0.0):
        # a degenerate mean puts zeros in the variance denominators; raise
        # so the scoring loop can halve the step instead of absorbing NaNs
        i = packed.cl_sub[int(np.argmax(u <= 0.0))]
        raise NumericalOverflowError(
            f"cluster {packed.ids[i]}: mean saturated at the working point"
        )
    rho = np.tanh(packed.za @ alpha)
    ac, bc = _corr_coeffs(
        packed.n, clamp_working_corr(rho, packed.n), "gee2_score"
    )

    e = np.where(w1 > 0.0, packed.v - pi, 0.0)
    su = np.sqrt(u)
    ac_sub = ac[packed.cl_sub]
    awu = ac_sub * w1 * u
    f = segment_sum(su[:, None] * packed.xb, packed.offsets)      # sum sqrt(u) x
    gw = segment_sum((w1 * su)[:, None] * packed.xb, packed.offsets)
    s_we = segment_sum(w1 * e / su, packed.offsets)
    h_beta = packed.xb.T @ (awu[:, None] * packed.xb) + (bc[:, None] * f).T @ gw
    gb_rows = segment_sum((ac_sub * w1 * e)[:, None] * packed.xb, packed.offsets)
    gb_rows = gb_rows + (bc * s_we)[:, None] * f
    g_beta = gb_rows.sum(axis=0)

    pr = e / su
    e2 = pr[packed.jj] * pr[packed.kk] - rho[packed.cl_pair]
    s0 = segment_sum(w2, packed.pair_offsets)
    s1 = segment_sum(w2 * e2, packed.pair_offsets)
    da = (1.0 - rho * rho)[:, None] * packed.za
    h_alpha = (s0[:, None] * da).T @ da
    ga_rows = s1[:, None] * da
    g_alpha = ga_rows.sum(axis=0)

    percluster = (
        np.hstack([gb_rows, ga_rows]) if want_percluster else None
    )
    return ScoreParts(g_beta, g_alpha, h_beta, h_alpha, percluster)


# ---------------------------------------------------------------------------
# scoring loop
# ---------------------------------------------------------------------------

def equilibrate(h: np.ndarray):
    """Symmetric diagonal scaling of a scoring block.

    The Newton step is invariant to it, but the condition number of the
    scaled matrix reflects actual near-singularity instead of the physical
    units of the covariate columns."""
    if not h.size:
        return h, np.ones(0)
    d = np.sqrt(np.abs(np.diag(h)))
    d = np.where(d > 0.0, d, 1.0)
    return h / np.outer(d, d), d


def fisher_scoring(
    gradient_fn,
    hessian_fn,
    theta0: ParameterVector,
    controls: ScoringControls = ScoringControls(),
    stage: str = "fit",
) -> FitResult:
    """Blockwise Newton/Fisher iteration on (beta, alpha).

    gradient_fn(theta) -> (g_beta, g_alpha) and hessian_fn(theta) ->
    (h_beta, h_alpha); the beta and alpha blocks are updated simultaneously
    from the same iterate.  Stops when the largest relative update falls
    below tol, raises on ill-conditioned Hessians or persistently nonfinite
    evaluations (after step halving).  Because the two blocks move from the
    same iterate, full steps can settle into a cycle when the blocks are
    strongly coupled; a failed pass is retried once with every step damped
    by half, which leaves converged fits untouched.
    """
    first = None
    try:
        first = _scoring_pass(gradient_fn, hessian_fn, theta0, controls, stage, 1.0)
        if first.converged:
            return first
    except DivergenceError:
        pass
    try:
        return _scoring_pass(gradient_fn, hessian_fn, theta0, controls, stage, 0.5)
    except DivergenceError:
        if first is not None:
            return first
        raise


def _scoring_pass(gradient_fn, hessian_fn, theta0, controls, stage, damp):
    theta = theta0
    try:
        grad = gradient_fn(theta)
    except (NumericalOverflowError, SingularityError) as exc:
        raise DivergenceError(stage, f"invalid initial point: {exc}") from exc
    worst_cond = 0.0
    max_update = np.inf
    iterations = 0
    budget = controls.max_iter if damp == 1.0 else 4 * controls.max_iter
    for _ in range(budget):
        iterations += 1
        hb, ha = hessian_fn(theta)
        hbs, sb = equilibrate(hb)
        has, sa = equilibrate(ha)
        cond = max(
            float(np.linalg.cond(hbs)) if hb.size else 0.0,
            float(np.linalg.cond(has)) if ha.size else 0.0,
        )
        worst_cond = max(worst_cond, cond)
        if not np.isfinite(cond) or cond > controls.cond_threshold:
            raise DivergenceError(stage, "ill-conditioned Hessian", condition=cond)
        try:
            db = np.linalg.solve(hbs, grad[0] / sb) / sb if hb.size else np.zeros(0)
            da = np.linalg.solve(has, grad[1] / sa) / sa if ha.size else np.zeros(0)
        except np.linalg.LinAlgError:
            raise DivergenceError(stage, "singular Hessian", condition=cond)
        if np.any(~np.isfinite(db)) or np.any(~np.isfinite(da)):
            raise DivergenceError(stage, "nonfinite update")
        g_stack = np.concatenate(grad)
        g_prev = float(np.max(np.abs(g_stack))) if g_stack.size else 0.0
        step = damp
        for _h in range(controls.max_halvings + 1):
            cand = ParameterVector(theta.beta + step * db, theta.alpha + step * da)
            try:
                grad = gradient_fn(cand)
            except (NumericalOverflowError, SingularityError):
                step *= 0.5
                continue
            # a full Newton step that inflates the score tenfold signals an
            # overshoot or a two-cycle; shrinking the step restores descent,
            # and the ratio tends to one as the step vanishes so the loop
            # always terminates on a finite point
            g_new = float(np.max(np.abs(np.concatenate(grad))))
            if g_new > 10.0 * g_prev and g_prev > 0.0:
                step *= 0.5
                continue
            break
        else:
            raise DivergenceError(stage, "nonfinite evaluation after step halving")
        denom = np.maximum(1.0, np.abs(theta.stacked))
        max_update = float(
            np.max(np.abs(step * np.concatenate([db, da])) / denom)
        ) if denom.size else 0.0
        theta = cand
        if max_update < controls.tol:
            return FitResult(
                spec=None, theta=theta, converged=True, iterations=iterations,
                max_update=max_update, condition_diag=worst_cond,
            )
    return FitResult(
        spec=None, theta=theta, converged=False, iterations=iterations,
        max_update=max_update, condition_diag=worst_cond,
    )


def _cached_score(score_fn):
    """Share one score evaluation between the gradient and Hessian callables."""
    memo = {}

    def evaluate(theta: ParameterVector) -> ScoreParts:
        key = theta.stacked.tobytes()
        if key not in memo:
            memo.clear()
            memo[key] = score_fn(theta)
        return memo[key]

    return (
        lambda theta: (evaluate(theta).g_beta, evaluate(theta).g_alpha),
        lambda theta: (evaluate(theta).h_beta, evaluate(theta).h_alpha),
    )


def _check_variation(dataset: Dataset, response: str, stage: str):
    for arm in (0, 1):
        vals = []
        for c in dataset:
            if c.a != arm:
                continue
            vals.append(c.r if response == "r" else c.y[c.r == 1])
        flat = np.concatenate(vals) if vals else np.zeros(0)
        if flat.size == 0 or np.all(flat == flat[0]):
            raise SeparationError(
                f"{stage}: no variation in {response} within arm a={arm}"
            )


def _run_gee2_fit(
    dataset: Dataset,
    spec: ModelSpec,
    response: str,
    w1_fn,
    w2_fn,
    controls: ScoringControls,
    stage: str,
    theta0: ParameterVector | None = None,
) -> FitResult:
    t0 = time.perf_counter()
    packed = build_packed(dataset, spec, response=response)
    w1 = w1_fn(packed)
    w2 = w2_fn(packed)

    def score(theta: ParameterVector) -> ScoreParts:
        return gee2_score(packed, theta.beta, theta.alpha, w1, w2)

    grad_fn, hess_fn = _cached_score(score)
    start = theta0 if theta0 is not None else ParameterVector.zeros(spec)
    res = fisher_scoring(grad_fn, hess_fn, start, controls, stage=stage)
    res.spec = spec
    res.runtime = {stage: time.perf_counter() - t0}
    return res


def fit_psee(
    dataset: Dataset,
    psm_spec: ModelSpec,
    controls: ScoringControls = ScoringControls(),
    theta0: ParameterVector | None = None,
) -> FitResult:
    """Second-order fit of the missingness model on the fully observed
    indicators (every subject contributes, unit weights)."""
    _check_variation(dataset, "r", "psee")
    return _run_gee2_fit(
        dataset, psm_spec, "r",
        lambda p: np.ones(p.v.shape[0]),
        lambda p: np.ones(p.jj.shape[0]),
        controls, "psee", theta0,
    )


def fit_omee(
    dataset: Dataset,
    om_spec: ModelSpec,
    controls: ScoringControls = ScoringControls(),
    theta0: ParameterVector | None = None,
) -> FitResult:
    """Second-order fit of the conditional outcome model on complete cases."""
    _check_variation(dataset, "y", "omee")
    return _run_gee2_fit(
        dataset, om_spec, "y",
        lambda p: p.r.astype(float),
        lambda p: (p.r[p.jj] * p.r[p.kk]).astype(float),
        controls, "omee", theta0,
    )


def fit_complete_case(
    dataset: Dataset,
    tm_spec: ModelSpec,
    controls: ScoringControls = ScoringControls(),
    theta0: ParameterVector | None = None,
) -> FitResult:
    """Treatment-model GEE2 using observed outcomes with unit weights."""
    res = _run_gee2_fit(
        dataset, tm_spec, "y",
        lambda p: p.r.astype(float),
        lambda p: (p.r[p.jj] * p.r[p.kk]).astype(float),
        controls, "tm", theta0,
    )
    res.kind = "complete_case"
    return res


# ---------------------------------------------------------------------------
# inverse-probability weighting
# ---------------------------------------------------------------------------

def joint_observation_prob(pi1: float, pi2: float, rho_r: float) -> float:
    """Probability that both pair members are observed.

    eta = pi1 pi2 + rho sqrt(pi1(1-pi1)pi2(1-pi2)); values outside the
    Frechet bounds for the given margins are an error, never clamped.
    """
    for p in (pi1, pi2):
        if not 0.0 <= p <= 1.0:
            raise InfeasibleCorrelationError(f"margin {p} outside [0,1]")
    if not abs(rho_r) < 1.0:
        raise InfeasibleCorrelationError(f"|rho_r| must be < 1, got {rho_r}")
    eta = pi1 * pi2 + rho_r * np.sqrt(pi1 * (1.0 - pi1) * pi2 * (1.0 - pi2))
    lo = max(0.0, pi1 + pi2 - 1.0)
    hi = min(pi1, pi2)
    if eta < lo - 1e-12 or eta > hi + 1e-12:
        raise InfeasibleCorrelationError(
            f"eta={eta} outside Frechet bounds [{lo}, {hi}] "
            f"for margins ({pi1}, {pi2})"
        )
    return float(min(max(eta, lo), hi))


def ipw_weight_arrays(
    packed: PackedData,
    psm_spec: ModelSpec,
    psm_theta: ParameterVector,
    mode: str,
    floor: float = POSITIVITY_FLOOR,
    psm_xb: np.ndarray | None = None,
    psm_za: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-subject and per-pair inverse-probability weights on the packed
    layout of an outcome fit.  mode "g1" uses the independence product in
    the pair denominator; "g2" adds the fitted missingness correlation."""
    if mode not in ("g1", "g2"):
        raise ShapeError(f"mode must be 'g1' or 'g2', got {mode!r}")
    if psm_xb is None or psm_za is None:
        raise ShapeError("packed PSM designs are required")
    pi_r = expit(psm_xb @ psm_theta.beta)
    low = pi_r < floor
    if np.any(low):
        i = int(packed.cl_sub[int(np.argmax(low))])
        offending = np.flatnonzero(
            low[packed.offsets[i] : packed.offsets[i + 1]]
        )
        raise PositivityError(packed.ids[i], offending.tolist(), floor)
    w1 = np.where(packed.r > 0, 1.0 / pi_r, 0.0)
    p1 = pi_r[packed.jj]
    p2 = pi_r[packed.kk]
    if mode == "g2":
        rho_r = np.tanh(psm_za @ psm_theta.alpha)[packed.cl_pair]
        eta = p1 * p2 + rho_r * np.sqrt(p1 * (1.0 - p1) * p2 * (1.0 - p2))
        lo = np.maximum(0.0, p1 + p2 - 1.0)
        hi = np.minimum(p1, p2)
        bad = (eta < lo - 1e-12) | (eta > hi + 1e-12)
        if np.any(bad):
            p = int(np.argmax(bad))
            raise InfeasibleCorrelationError(
                f"cluster {packed.ids[packed.cl_pair[p]]}: joint observation "
                f"probability {eta[p]} outside Frechet bounds"
            )
    else:
        eta = p1 * p2
    w2 = np.where((packed.r[packed.jj] > 0) & (packed.r[packed.kk] > 0), 1.0 / eta, 0.0)
    return w1, w2


def build_ipw_matrix(cluster: ClusterData, psee_fit: FitResult, mode: str):
    """Reference per-cluster weight diagonal (length n + n(n-1)/2)."""
    from .core_math import DiagonalWeight

    pi_r = predict_mean(psee_fit.spec, psee_fit.theta, cluster)
    if np.any(pi_r < POSITIVITY_FLOOR):
        raise PositivityError(
            cluster.id,
            np.flatnonzero(pi_r < POSITIVITY_FLOOR).tolist(),
            POSITIVITY_FLOOR,
        )
    rho_r = predict_corr(psee_fit.spec, psee_fit.theta, cluster)
    pairs = pair_enumerate(cluster.n)
    first = np.where(cluster.r > 0, 1.0 / pi_r, 0.0)
    second = np.zeros(len(pairs))
    for p, (j, k) in enumerate(pairs.pairs):
        if mode == "g2":
            eta = joint_observation_prob(pi_r[j], pi_r[k], rho_r)
        else:
            eta = pi_r[j] * pi_r[k]
        if cluster.r[j] > 0 and cluster.r[k] > 0:
            second[p] = 1.0 / eta
    return DiagonalWeight(np.concatenate([first, second]))


def fit_ipw_gee2(
    dataset: Dataset,
    tm_spec: ModelSpec,
    psee_fit: FitResult,
    mode: str,
    controls: ScoringControls = ScoringControls(),
    theta0: ParameterVector | None = None,
) -> FitResult:
    """Treatment-model GEE2 weighted by inverse observation probabilities
    from the frozen missingness fit."""
    t0 = time.perf_counter()
    packed = build_packed(dataset, tm_spec, response="y")
    psm_packed = build_packed(dataset, psee_fit.spec, response="r")
    w1, w2 = ipw_weight_arrays(
        packed, psee_fit.spec, psee_fit.theta, mode,
        psm_xb=psm_packed.xb, psm_za=psm_packed.za,
    )

    def score(theta: ParameterVector) -> ScoreParts:
        return gee2_score(packed, theta.beta, theta.alpha, w1, w2)

    grad_fn, hess_fn = _cached_score(score)
    start = theta0 if theta0 is not None else ParameterVector.zeros(tm_spec)
    res = fisher_scoring(grad_fn, hess_fn, start, controls, stage="tm")
    res.spec = tm_spec
    res.kind = f"ipw_{mode}"
    res.mode = mode
    res.psee = psee_fit
    res.runtime = {"tm": time.perf_counter() - t0}
    return res


# ---------------------------------------------------------------------------
# doubly-robust estimation
# ---------------------------------------------------------------------------

def augmentation_term(
    cluster: ClusterData,
    tm_spec: ModelSpec,
    tm_theta: ParameterVector,
    om_fit: FitResult,
    p_a: float,
) -> np.ndarray:
    """Counterfactual-mixture correction for one cluster (reference form).

    Mixes D(a)' V(a)^{-1} (OM prediction - TM prediction) over both
    treatment levels with weights (1 - p_a, p_a); returns the stacked
    (beta, alpha) contribution.
    """
    out = np.zeros(tm_spec.n_beta + tm_spec.n_alpha)
    pairs = pair_enumerate(cluster.n)
    for a, wgt in ((0, 1.0 - p_a), (1, p_a)):
        cf = replace(cluster, a=a)
        pi_star = float(predict_mean(tm_spec, tm_theta, cf)[0])
        rho_star = predict_corr(tm_spec, tm_theta, cf)
        pibar = predict_mean(om_fit.spec, om_fit.theta, cf)
        rhobar = predict_corr(om_fit.spec, om_fit.theta, cf)
        e1 = pibar - pi_star
        e2 = np.array(
            [
                rho_dagger(pibar[j], pibar[k], rhobar, pi_star) - rho_star
                for j, k in pairs.pairs
            ]
        )
        d = jacobian(tm_spec, tm_theta, cf).dense()
        v = working_covariance(cf, np.full(cluster.n, pi_star), rho_star)
        out += wgt * (d.T @ v.inverse_apply(np.concatenate([e1, e2])))
    return out


def _om_predictions(dataset: Dataset, om_fit: FitResult):
    """Counterfactual OM mean vectors and correlation scalars, packed."""
    pibar = {0: [], 1: []}
    rhobar = {0: [], 1: []}
    for c in dataset:
        for a in (0, 1):
            cf = replace(c, a=a)
            pibar[a].append(predict_mean(om_fit.spec, om_fit.theta, cf))
            rhobar[a].append(predict_corr(om_fit.spec, om_fit.theta, cf))
    return (
        np.concatenate(pibar[0]),
        np.concatenate(pibar[1]),
        np.array(rhobar[0]),
        np.array(rhobar[1]),
    )


def dr_score(
    packed: PackedData,
    beta: np.ndarray,
    alpha: np.ndarray,
    w1: np.ndarray,
    w2: np.ndarray,
    pibar0: np.ndarray,
    pibar1: np.ndarray,
    rhobar0: np.ndarray,
    rhobar1: np.ndarray,
    p_a: float,
    want_percluster: bool = False,
) -> ScoreParts:
    """Doubly-robust treatment-model score on the packed layout.

    The observed part is the IPW score with the OM predictions centering
    the first-order residuals and the rho-dagger surface centering the
    pair residuals; the augmentation part mixes both counterfactual
    treatment levels.  Scoring matrices carry no weights (they average the
    counterfactual curvature instead)."""
    i_count = packed.n_clusters
    n = packed.n.astype(float)
    npairs = n * (n - 1.0) / 2.0
    a_arm = packed.a.astype(float)

    # treatment-model predictions at both counterfactual levels, per cluster
    pi_star = {a: expit(beta[0] + beta[1] * a) for a in (0, 1)}
    rho_star = {a: np.tanh(alpha[0] + alpha[1] * a) for a in (0, 1)}
    coeffs = {}
    for a in (0, 1):
        rr = clamp_working_corr(np.full(i_count, rho_star[a]), packed.n)
        ac, bc = _corr_coeffs(packed.n, rr, "dr")
        coeffs[a] = ac + bc * n       # scalar row-sum factor of the inverse
    pis_arm = np.where(a_arm > 0, pi_star[1], pi_star[0])
    rhos_arm = np.where(a_arm > 0, rho_star[1], rho_star[0])
    us_arm = pis_arm * (1.0 - pis_arm)
    coeff_arm = np.where(a_arm > 0, coeffs[1], coeffs[0])
    ss_arm = np.sqrt(us_arm)

    pibar_act = np.where(packed.a[packed.cl_sub] > 0, pibar1, pibar0)
    rhobar_act = np.where(packed.a > 0, rhobar1, rhobar0)

    # observed part, first order: rows of D identical within cluster
    e1 = np.where(w1 > 0.0, packed.v - pibar_act, 0.0)
    swe = segment_sum(w1 * e1, packed.offsets)
    x_rows = np.column_stack([np.ones(i_count), a_arm])
    g_beta = ((coeff_arm * swe)[:, None] * x_rows).sum(axis=0)
    gb_rows = (coeff_arm * swe)[:, None] * x_rows

    # observed part, second order
    pis_sub = pis_arm[packed.cl_sub]
    ss_sub = ss_arm[packed.cl_sub]
    av = np.where(w1 > 0.0, (packed.v - pis_sub) / ss_sub, 0.0)
    bv = (pibar_act - pis_sub) / ss_sub
    sv = np.sqrt(pibar_act * (1.0 - pibar_act))
    cpair = (rhobar_act / us_arm)[packed.cl_pair]
    e2 = (
        av[packed.jj] * av[packed.kk]
        - bv[packed.jj] * bv[packed.kk]
        - cpair * sv[packed.jj] * sv[packed.kk]
    )
    s1 = segment_sum(w2 * e2, packed.pair_offsets)
    da_arm = (1.0 - rhos_arm * rhos_arm)[:, None] * x_rows
    g_alpha = (s1[:, None] * da_arm).sum(axis=0)
    ga_rows = s1[:, None] * da_arm

    # augmentation and curvature, mixed over counterfactual levels
    h_beta = np.zeros((2, 2))
    h_alpha = np.zeros((2, 2))
    for a, wgt in ((0, 1.0 - p_a), (1, p_a)):
        x = np.array([1.0, float(a)])
        pib = pibar1 if a == 1 else pibar0
        rhb = rhobar1 if a == 1 else rhobar0
        us = pi_star[a] * (1.0 - pi_star[a])
        ss = np.sqrt(us)
        # first-order: coeff_i * sum_j (pibar_j(a) - pi*(a))
        s_e1 = segment_sum(pib - pi_star[a], packed.offsets)
        zb = wgt * coeffs[a] * s_e1
        g_beta += zb.sum() * x
        gb_rows = gb_rows + zb[:, None] * x_rows_at(x, i_count)
        # second-order: separable pair sums of rho_dagger(a) - rho*(a)
        bq = (pib - pi_star[a]) / ss
        sq = np.sqrt(pib * (1.0 - pib))
        sb = segment_sum(bq, packed.offsets)
        sb2 = segment_sum(bq * bq, packed.offsets)
        ssum = segment_sum(sq, packed.offsets)
        ssum2 = segment_sum(sq * sq, packed.offsets)
        pair_sum = 0.5 * (sb * sb - sb2) + (rhb / us) * 0.5 * (
            ssum * ssum - ssum2
        ) - npairs * rho_star[a]
        dfac = 1.0 - rho_star[a] ** 2
        za_row = dfac * x
        zalph = wgt * pair_sum
        g_alpha += zalph.sum() * za_row
        ga_rows = ga_rows + zalph[:, None] * (np.ones((i_count, 1)) * za_row)
        # curvature: D(a)' V(a)^{-1} D(a), no weights
        h_beta += wgt * float((us * coeffs[a] * n).sum()) * np.outer(x, x)
        h_alpha += wgt * dfac * dfac * float(npairs.sum()) * np.outer(x, x)

    percluster = np.hstack([gb_rows, ga_rows]) if want_percluster else None
    return ScoreParts(g_beta, g_alpha, h_beta, h_alpha, percluster)


def x_rows_at(x: np.ndarray, count: int) -> np.ndarray:
    return np.ones((count, 1)) * x


def fit_dr_gee2(
    dataset: Dataset,
    tm_spec: ModelSpec,
    psee_fit: FitResult,
    omee_fit: FitResult,
    controls: ScoringControls = ScoringControls(),
    theta0: ParameterVector | None = None,
) -> FitResult:
    """Doubly-robust treatment-model fit with both nuisance fits frozen."""
    t0 = time.perf_counter()
    packed = build_packed(dataset, tm_spec, response="y")
    psm_packed = build_packed(dataset, psee_fit.spec, response="r")
    w1, w2 = ipw_weight_arrays(
        packed, psee_fit.spec, psee_fit.theta, "g2",
        psm_xb=psm_packed.xb, psm_za=psm_packed.za,
    )
    pibar0, pibar1, rhobar0, rhobar1 = _om_predictions(dataset, omee_fit)
    p_a = dataset.p_a

    def score(theta: ParameterVector) -> ScoreParts:
        return dr_score(
            packed, theta.beta, theta.alpha, w1, w2,
            pibar0, pibar1, rhobar0, rhobar1, p_a,
        )

    grad_fn, hess_fn = _cached_score(score)
    start = theta0 if theta0 is not None else ParameterVector.zeros(tm_spec)
    res = fisher_scoring(grad_fn, hess_fn, start, controls, stage="tm")
    res.spec = tm_spec
    res.kind = "doubly_robust"
    res.psee = psee_fit
    res.omee = omee_fit
    res.runtime = {"tm": time.perf_counter() - t0}
    return res


# ---------------------------------------------------------------------------
# pipeline driver and per-cluster score stacks (for the sandwich)
# ---------------------------------------------------------------------------

def fit_pipeline(
    dataset: Dataset,
    choice: EstimatorChoice,
    tm_spec: ModelSpec,
    psm_spec: ModelSpec | None = None,
    om_spec: ModelSpec | None = None,
    controls: ScoringControls = ScoringControls(),
) -> FitResult:
    """Run PSM -> OM -> TM as the estimator requires; nuisance stage
    runtimes are folded into the returned treatment-model result."""
    if choice.kind in ("ipw_g1", "ipw_g2", "doubly_robust") and psm_spec is None:
        raise ShapeError(f"{choice.kind} requires a missingness model spec")
    if choice.kind == "doubly_robust" and om_spec is None:
        raise ShapeError("doubly_robust requires an outcome model spec")
    runtimes = {}
    psee = omee = None
    if choice.kind in ("ipw_g1", "ipw_g2", "doubly_robust"):
        psee = fit_psee(dataset, psm_spec, controls)
        runtimes.update(psee.runtime)
    if choice.kind == "doubly_robust":
        omee = fit_omee(dataset, om_spec, controls)
        runtimes.update(omee.runtime)
    if choice.kind == "complete_case":
        res = fit_complete_case(dataset, tm_spec, controls)
    elif choice.kind in ("ipw_g1", "ipw_g2"):
        res = fit_ipw_gee2(dataset, tm_spec, psee, choice.kind[-2:], controls)
    else:
        res = fit_dr_gee2(dataset, tm_spec, psee, omee, controls)
    res.runtime = {**runtimes, **res.runtime}
    return res


@dataclass
class ScoreStackContext:
    """Everything needed to re-evaluate the per-cluster stacked scores at
    perturbed parameter values (used by the sandwich derivatives)."""

    dataset: Dataset
    kind: str
    tm_spec: ModelSpec
    tm_packed: PackedData
    psm_spec: ModelSpec | None = None
    psm_packed: PackedData | None = None
    om_spec: ModelSpec | None = None
    om_packed: PackedData | None = None

    @classmethod
    def build(cls, dataset: Dataset, tm_fit: FitResult) -> "ScoreStackContext":
        ctx = cls(
            dataset=dataset,
            kind=tm_fit.kind,
            tm_spec=tm_fit.spec,
            tm_packed=build_packed(dataset, tm_fit.spec, response="y"),
        )
        if tm_fit.psee is not None:
            ctx.psm_spec = tm_fit.psee.spec
            ctx.psm_packed = build_packed(dataset, tm_fit.psee.spec, response="r")
        if tm_fit.omee is not None:
            ctx.om_spec = tm_fit.omee.spec
            ctx.om_packed = build_packed(dataset, tm_fit.omee.spec, response="y")
        return ctx

    def tm_scores(
        self,
        tm_theta: ParameterVector,
        psm_theta: ParameterVector | None,
        om_theta: ParameterVector | None,
    ) -> np.ndarray:
        """Per-cluster treatment-model score rows (I, 4)."""
        p = self.tm_packed
        if self.kind == "complete_case":
            w1 = p.r.astype(float)
            w2 = (p.r[p.jj] * p.r[p.kk]).astype(float)
            return gee2_score(
                p, tm_theta.beta, tm_theta.alpha, w1, w2, want_percluster=True
            ).percluster
        mode = "g1" if self.kind == "ipw_g1" else "g2"
        w1, w2 = ipw_weight_arrays(
            p, self.psm_spec, psm_theta, mode,
            psm_xb=self.psm_packed.xb, psm_za=self.psm_packed.za,
        )
        if self.kind in ("ipw_g1", "ipw_g2"):
            return gee2_score(
                p, tm_theta.beta, tm_theta.alpha, w1, w2, want_percluster=True
            ).percluster
        om_fit = FitResult(
            spec=self.om_spec, theta=om_theta, converged=True,
            iterations=0, max_update=0.0, condition_diag=0.0,
        )
        pibar0, pibar1, rhobar0, rhobar1 = _om_predictions(self.dataset, om_fit)
        return dr_score(
            p, tm_theta.beta, tm_theta.alpha, w1, w2,
            pibar0, pibar1, rhobar0, rhobar1, self.dataset.p_a,
            want_percluster=True,
        ).percluster

    def psm_scores(self, psm_theta: ParameterVector) -> np.ndarray:
        p = self.psm_packed
        return gee2_score(
            p, psm_theta.beta, psm_theta.alpha,
            np.ones(p.v.shape[0]), np.ones(p.jj.shape[0]),
            want_percluster=True,
        ).percluster

    def om_scores(self, om_theta: ParameterVector) -> np.ndarray:
        p = self.om_packed
        return gee2_score(
            p, om_theta.beta, om_theta.alpha,
            p.r.astype(float), (p.r[p.jj] * p.r[p.kk]).astype(float),
            want_percluster=True,
        ).percluster
