"""Stacked sandwich variance and Wald statistics.

The parameter stack kappa holds the treatment-model estimate first,
followed by whichever nuisance estimates the chosen estimator used
(missingness model, then outcome model).  The bread is the averaged
derivative of the per-cluster stacked scores in kappa, taken by central
finite differences blockwise (a perturbed missingness parameter re-enters
the treatment-model score through the weights, a perturbed outcome
parameter through the augmentation predictions); the meat is the averaged
outer product of the scores at the estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import DomainError, InferenceError
from .estimators import FitResult, ScoreStackContext
from .model import Dataset, ParameterVector

_FD_SCALE = 1e-6


@dataclass(frozen=True)
class WaldResult:
    statistic: float
    p_value: float
    flagged: bool


def wald(estimate: float, se: float, reps: int | None = None) -> WaldResult:
    """Two-sided normal Wald test of a zero null.

    With ``reps`` the input is read as an averaged bias over that many
    replicates with the replicate standard error ``se``; the statistic is
    scaled by sqrt(reps) and flagged when its magnitude exceeds 2.
    """
    if not se > 0.0:
        raise DomainError(f"standard error must be positive, got {se}")
    stat = estimate / se
    if reps is not None:
        if reps < 1:
            raise DomainError(f"replicate count must be >= 1, got {reps}")
        stat *= np.sqrt(reps)
    p = 2.0 * stats.norm.sf(abs(stat))
    return WaldResult(float(stat), float(p), bool(abs(stat) > 2.0))


@dataclass(frozen=True)
class SandwichResult:
    """Covariance of the full parameter stack and the treatment-model block."""

    blocks: tuple[tuple[str, int], ...]
    kappa_cov: np.ndarray
    tm_cov: np.ndarray

    @property
    def tm_se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.tm_cov))


def _perturbed(theta: ParameterVector, j: int, h: float) -> ParameterVector:
    stacked = theta.stacked.copy()
    stacked[j] += h
    p = theta.beta.shape[0]
    return ParameterVector(stacked[:p], stacked[p:])


def sandwich_variance(
    dataset: Dataset,
    tm_fit: FitResult,
    nuisance_corrected: bool = True,
) -> SandwichResult:
    """Sandwich covariance of the stacked estimate.

    With nuisance_corrected=False the cross-derivative blocks are zeroed
    (each stage treated as if its nuisances were known), which understates
    or overstates the treatment-model uncertainty; the corrected form is
    the default and the one reported everywhere.
    """
    ctx = ScoreStackContext.build(dataset, tm_fit)
    tm_theta = tm_fit.theta
    psm_theta = tm_fit.psee.theta if tm_fit.psee is not None else None
    om_theta = tm_fit.omee.theta if tm_fit.omee is not None else None

    blocks: list[tuple[str, int]] = [("tm", tm_theta.stacked.shape[0])]
    scores = [ctx.tm_scores(tm_theta, psm_theta, om_theta)]
    if psm_theta is not None:
        blocks.append(("psm", psm_theta.stacked.shape[0]))
        scores.append(ctx.psm_scores(psm_theta))
    if om_theta is not None:
        blocks.append(("om", om_theta.stacked.shape[0]))
        scores.append(ctx.om_scores(om_theta))
    psi = np.hstack(scores)
    i_count = psi.shape[0]
    dim = psi.shape[1]
    delta = psi.T @ psi / i_count

    offs = np.concatenate([[0], np.cumsum([d for _, d in blocks])])
    gamma = np.zeros((dim, dim))

    def mean_tm(tm_t, psm_t, om_t):
        return ctx.tm_scores(tm_t, psm_t, om_t).mean(axis=0)

    # derivatives in the treatment-model parameters
    for j in range(blocks[0][1]):
        h = _FD_SCALE * max(1.0, abs(tm_theta.stacked[j]))
        up = mean_tm(_perturbed(tm_theta, j, h), psm_theta, om_theta)
        dn = mean_tm(_perturbed(tm_theta, j, -h), psm_theta, om_theta)
        gamma[offs[0] : offs[1], j] = (up - dn) / (2 * h)

    col = blocks[0][1]
    for name, size in blocks[1:]:
        theta = psm_theta if name == "psm" else om_theta
        row_lo, row_hi = None, None
        for bi, (bn, _bs) in enumerate(blocks):
            if bn == name:
                row_lo, row_hi = offs[bi], offs[bi + 1]
        for j in range(size):
            h = _FD_SCALE * max(1.0, abs(theta.stacked[j]))
            tp = _perturbed(theta, j, h)
            tn = _perturbed(theta, j, -h)
            tm_up = tm_dn = None
            if name == "psm":
                own_up = ctx.psm_scores(tp).mean(axis=0)
                own_dn = ctx.psm_scores(tn).mean(axis=0)
                if nuisance_corrected:
                    tm_up = mean_tm(tm_theta, tp, om_theta)
                    tm_dn = mean_tm(tm_theta, tn, om_theta)
            else:
                own_up = ctx.om_scores(tp).mean(axis=0)
                own_dn = ctx.om_scores(tn).mean(axis=0)
                if nuisance_corrected and tm_fit.kind == "doubly_robust":
                    tm_up = mean_tm(tm_theta, psm_theta, tp)
                    tm_dn = mean_tm(tm_theta, psm_theta, tn)
            gamma[row_lo:row_hi, col + j] = (own_up - own_dn) / (2 * h)
            if tm_up is not None:
                gamma[offs[0] : offs[1], col + j] = (tm_up - tm_dn) / (2 * h)
        col += size

    # row/column scaling removes the covariate units so the gate measures
    # near-singularity of the stacked derivative, not its physical scales
    rs = np.max(np.abs(gamma), axis=1)
    rs = np.where(rs > 0.0, rs, 1.0)
    gs = gamma / rs[:, None]
    cs = np.max(np.abs(gs), axis=0)
    cs = np.where(cs > 0.0, cs, 1.0)
    gs = gs / cs[None, :]
    cond = float(np.linalg.cond(gs))
    if not np.isfinite(cond) or cond > 1e12:
        raise InferenceError(
            f"singular stacked derivative matrix (condition {cond:.3g})",
            condition=cond,
        )
    bread = np.linalg.inv(gs) / cs[:, None] / rs[None, :]
    cov = bread @ delta @ bread.T / i_count
    cov = 0.5 * (cov + cov.T)
    tm_dim = blocks[0][1]
    return SandwichResult(
        blocks=tuple(blocks),
        kappa_cov=cov,
        tm_cov=cov[:tm_dim, :tm_dim],
    )
