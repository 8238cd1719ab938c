"""Data model for clustered binary outcomes with missingness.

Holds the cluster/dataset containers, model specifications (which covariate
columns enter the mean and correlation linear predictors, and which of those
are interacted with treatment), predictions on the probability/correlation
scale, the standardized pairwise residual stack, the rho-dagger transform,
analytic Jacobians, and the block working covariance used by the solvers.

Covariate columns are addressed by label: ``x1..xm`` are subject-level
columns, ``z1..zq`` are cluster-level columns (broadcast to subjects when
they enter the mean predictor).  Correlation predictors accept cluster-level
labels only, so the within-cluster correlation is a single scalar per
cluster.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core_math import EquicorrelatedCovariance, PairIndex, expit
from .errors import DomainError, NumericalOverflowError, ShapeError

TARGETS = ("TM", "PSM", "OM")


@dataclass(frozen=True)
class ClusterData:
    """One cluster: treatment, covariates, outcomes, and missingness.

    ``y`` uses NaN for a missing outcome; ``r`` is its indicator and must
    agree entrywise.  Pass ``r=None`` to derive it from ``y``.
    """

    id: object
    a: int
    z: np.ndarray
    x: np.ndarray
    y: np.ndarray
    r: np.ndarray | None = None

    def __post_init__(self):
        if self.a not in (0, 1):
            raise DomainError(f"cluster {self.id}: treatment must be 0/1, got {self.a}")
        z = np.atleast_1d(np.asarray(self.z, dtype=float))
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim != 2:
            raise ShapeError(f"cluster {self.id}: x must be 2-d (n, m)")
        n = x.shape[0]
        if n < 1:
            raise ShapeError(f"cluster {self.id}: cluster size must be >= 1")
        if y.shape != (n,):
            raise ShapeError(f"cluster {self.id}: y must have shape ({n},)")
        observed = ~np.isnan(y)
        if self.r is None:
            r = observed.astype(np.int64)
        else:
            r = np.asarray(self.r, dtype=np.int64)
            if r.shape != (n,):
                raise ShapeError(f"cluster {self.id}: r must have shape ({n},)")
            if not np.array_equal(r == 1, observed):
                raise DomainError(
                    f"cluster {self.id}: r must be 1 exactly where y is present"
                )
        vals = y[observed]
        if not np.all((vals == 0.0) | (vals == 1.0)):
            raise DomainError(f"cluster {self.id}: present outcomes must be 0/1")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "r", r)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def n_observed(self) -> int:
        return int(self.r.sum())

    @property
    def observed(self) -> np.ndarray:
        return np.flatnonzero(self.r == 1)


@dataclass(frozen=True)
class Dataset:
    """Ordered cluster collection plus the treatment probability p_a.

    p_a defaults to the empirical treatment fraction; pass it explicitly
    when the randomization probability is known.
    """

    clusters: tuple[ClusterData, ...]
    p_a: float | None = None

    def __post_init__(self):
        clusters = tuple(self.clusters)
        if not clusters:
            raise ShapeError("dataset must contain at least one cluster")
        object.__setattr__(self, "clusters", clusters)
        if self.p_a is None:
            object.__setattr__(
                self, "p_a", float(np.mean([c.a for c in clusters]))
            )
        elif not 0.0 < self.p_a < 1.0:
            raise DomainError(f"p_a must be in (0,1), got {self.p_a}")

    def __len__(self):
        return len(self.clusters)

    def __iter__(self):
        return iter(self.clusters)

    def arms(self) -> tuple[int, int]:
        """Cluster counts per treatment arm (n_control, n_treated)."""
        treated = sum(c.a for c in self.clusters)
        return len(self.clusters) - treated, treated


def _split_labels(labels):
    for lab in labels:
        if len(lab) < 2 or lab[0] not in ("x", "z") or not lab[1:].isdigit():
            raise DomainError(f"covariate label must look like x1/z1, got {lab!r}")
    return tuple(labels)


@dataclass(frozen=True)
class ModelSpec:
    """Design description for one of the three fitted models.

    The mean predictor is always ``[1, a] + main columns + a * interacted
    columns``; the correlation predictor likewise but restricted to
    cluster-level columns.  The treatment model (target TM) is the canonical
    intercept + treatment design and admits no extra columns.
    """

    target: str
    mean_main: tuple[str, ...] = ()
    mean_interact: tuple[str, ...] = ()
    corr_main: tuple[str, ...] = ()
    corr_interact: tuple[str, ...] = ()

    def __post_init__(self):
        if self.target not in TARGETS:
            raise DomainError(f"target must be one of {TARGETS}, got {self.target!r}")
        for name in ("mean_main", "mean_interact", "corr_main", "corr_interact"):
            object.__setattr__(self, name, _split_labels(getattr(self, name)))
        if self.target == "TM" and (
            self.mean_main or self.mean_interact or self.corr_main or self.corr_interact
        ):
            raise DomainError("treatment model takes intercept + treatment only")
        for lab in self.corr_main + self.corr_interact:
            if lab[0] != "z":
                raise DomainError(
                    f"correlation predictors take cluster-level columns only, got {lab!r}"
                )

    @property
    def n_beta(self) -> int:
        return 2 + len(self.mean_main) + len(self.mean_interact)

    @property
    def n_alpha(self) -> int:
        return 2 + len(self.corr_main) + len(self.corr_interact)


@dataclass(frozen=True)
class ParameterVector:
    """(beta, alpha) on the link scales for one model."""

    beta: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        if np.any(~np.isfinite(beta)) or np.any(~np.isfinite(alpha)):
            raise DomainError("parameters must be finite")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "ParameterVector":
        return cls(np.zeros(spec.n_beta), np.zeros(spec.n_alpha))

    @classmethod
    def from_stacked(cls, stacked: np.ndarray, spec: ModelSpec) -> "ParameterVector":
        stacked = np.asarray(stacked, dtype=float)
        if stacked.shape != (spec.n_beta + spec.n_alpha,):
            raise ShapeError(
                f"stacked vector has shape {stacked.shape}, "
                f"expected ({spec.n_beta + spec.n_alpha},)"
            )
        return cls(stacked[: spec.n_beta], stacked[spec.n_beta :])

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.beta, self.alpha])


def _column(cluster: ClusterData, lab: str) -> np.ndarray:
    idx = int(lab[1:]) - 1
    if lab[0] == "x":
        if idx >= cluster.x.shape[1]:
            raise ShapeError(f"cluster {cluster.id}: no column {lab}")
        return cluster.x[:, idx]
    if idx >= cluster.z.shape[0]:
        raise ShapeError(f"cluster {cluster.id}: no column {lab}")
    return np.full(cluster.n, cluster.z[idx])


def mean_design(spec: ModelSpec, cluster: ClusterData) -> np.ndarray:
    """(n, n_beta) design for the mean predictor."""
    cols = [np.ones(cluster.n), np.full(cluster.n, float(cluster.a))]
    cols += [_column(cluster, lab) for lab in spec.mean_main]
    cols += [cluster.a * _column(cluster, lab) for lab in spec.mean_interact]
    return np.column_stack(cols)


def corr_design(spec: ModelSpec, cluster: ClusterData) -> np.ndarray:
    """(n_alpha,) design row for the cluster-level correlation predictor."""
    row = [1.0, float(cluster.a)]
    row += [float(cluster.z[int(lab[1:]) - 1]) for lab in spec.corr_main]
    row += [cluster.a * float(cluster.z[int(lab[1:]) - 1]) for lab in spec.corr_interact]
    return np.asarray(row)


def predict_mean(spec: ModelSpec, theta: ParameterVector, cluster: ClusterData) -> np.ndarray:
    """Per-subject success probabilities expit(design @ beta)."""
    lp = mean_design(spec, cluster) @ theta.beta
    if np.any(~np.isfinite(lp)):
        raise NumericalOverflowError(
            f"cluster {cluster.id}: nonfinite mean linear predictor"
        )
    return expit(lp)


def predict_corr(spec: ModelSpec, theta: ParameterVector, cluster: ClusterData) -> float:
    """Within-cluster correlation tanh(design @ alpha), constant per cluster."""
    lp = float(corr_design(spec, cluster) @ theta.alpha)
    if not np.isfinite(lp):
        raise NumericalOverflowError(
            f"cluster {cluster.id}: nonfinite correlation linear predictor"
        )
    return float(np.tanh(lp))


def standardized_residuals(y: np.ndarray, pi_star: float, pairs: PairIndex) -> np.ndarray:
    """Pairwise products (y_j - pi*)(y_k - pi*) / (pi*(1 - pi*)).

    Pairs touching a missing outcome come back NaN; downstream weights must
    vanish there, so the NaN never enters a sum.
    """
    if not 0.0 < pi_star < 1.0:
        raise DomainError(f"pi_star must be in (0,1), got {pi_star}")
    y = np.asarray(y, dtype=float)
    if y.shape[0] != pairs.n:
        raise ShapeError(f"y has length {y.shape[0]}, pairs built for {pairs.n}")
    d = y - pi_star
    return d[pairs.jj] * d[pairs.kk] / (pi_star * (1.0 - pi_star))


def rho_dagger(pi1: float, pi2: float, rho: float, pi_star: float) -> float:
    """Map a conditional (mean pair, correlation) to the marginal pair scale.

    ((pi1 - pi*)(pi2 - pi*) + rho * sqrt(pi1(1-pi1)pi2(1-pi2))) / (pi*(1-pi*));
    its conditional expectation given treatment is the marginal ICC.
    """
    for p in (pi1, pi2, pi_star):
        if not 0.0 < p < 1.0:
            raise DomainError(f"probabilities must be in (0,1), got {p}")
    if not abs(rho) < 1.0:
        raise DomainError(f"|rho| must be < 1, got {rho}")
    v = pi1 * (1.0 - pi1) * pi2 * (1.0 - pi2)
    return ((pi1 - pi_star) * (pi2 - pi_star) + rho * np.sqrt(v)) / (
        pi_star * (1.0 - pi_star)
    )


@dataclass(frozen=True)
class ClusterJacobian:
    """Derivatives of (per-subject mean, cluster correlation) in the fitted
    parameters: d_mean has one row per subject, d_corr is the single row
    shared by every pair.  The (beta, alpha) blocks do not mix."""

    d_mean: np.ndarray
    d_corr: np.ndarray
    n_pairs: int

    def dense(self) -> np.ndarray:
        """Full block-diagonal stacked Jacobian, (n + n_pairs, p + q)."""
        n, p = self.d_mean.shape
        q = self.d_corr.shape[0]
        out = np.zeros((n + self.n_pairs, p + q))
        out[:n, :p] = self.d_mean
        out[n:, p:] = self.d_corr
        return out


def jacobian(spec: ModelSpec, theta: ParameterVector, cluster: ClusterData) -> ClusterJacobian:
    """Analytic derivatives of the expit/tanh predictions."""
    xb = mean_design(spec, cluster)
    pi = expit(xb @ theta.beta)
    za = corr_design(spec, cluster)
    rho = np.tanh(float(za @ theta.alpha))
    n = cluster.n
    return ClusterJacobian(
        d_mean=(pi * (1.0 - pi))[:, None] * xb,
        d_corr=(1.0 - rho * rho) * za,
        n_pairs=n * (n - 1) // 2,
    )


@dataclass(frozen=True)
class BlockWorkingCovariance:
    """Working covariance: equicorrelated block for the means, identity for
    the pair stack, zero cross blocks."""

    mean_cov: EquicorrelatedCovariance
    n_pairs: int = field(init=False)

    def __post_init__(self):
        n = self.mean_cov.n
        object.__setattr__(self, "n_pairs", n * (n - 1) // 2)

    @property
    def size(self) -> int:
        return self.mean_cov.n + self.n_pairs

    def inverse_apply(self, v: np.ndarray) -> np.ndarray:
        """V^{-1} v for a stacked (n + n_pairs,) vector or matrix."""
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.size:
            raise ShapeError(f"operand has {v.shape[0]} rows, expected {self.size}")
        n = self.mean_cov.n
        out = np.array(v, dtype=float, copy=True)
        out[:n] = self.mean_cov.inverse().apply(v[:n])
        return out

    def dense(self) -> np.ndarray:
        n = self.mean_cov.n
        out = np.eye(self.size)
        out[:n, :n] = self.mean_cov.dense()
        return out


def working_covariance(cluster: ClusterData, pi: np.ndarray, icc: float) -> BlockWorkingCovariance:
    """Block operator from per-subject means and the current ICC estimate.

    Positive-definiteness of the equicorrelated block is enforced by the
    covariance constructor (singularity error outside the open PD range).
    """
    pi = np.asarray(pi, dtype=float)
    u = pi * (1.0 - pi)
    icc_eff = icc if cluster.n > 1 else 0.0
    return BlockWorkingCovariance(
        mean_cov=EquicorrelatedCovariance(n=cluster.n, rho=icc_eff, u=u)
    )
