"""Scalar links, equicorrelation linear algebra, and sparsity-aware products.

Everything here is pure and allocation-light; the fitting loops call these
helpers (or their compiled twins in ``_kernels``) once per cluster per
iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import DomainError, ShapeError, SingularityError

_FISHER_Z_EDGE = 1.0 - 1e-12


def expit(x):
    """Inverse logit, numerically stable on both tails."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=float)
    if np.any(~np.isfinite(p)) or np.any(p <= 0.0) or np.any(p >= 1.0):
        raise DomainError(f"logit requires p in (0,1), got {p}")
    out = np.log(p / (1.0 - p))
    return out if out.ndim else float(out)


def fisher_z(rho):
    """atanh link mapping correlations in (-1,1) to the real line.

    Inputs with |rho| >= 1 - 1e-12 are rejected rather than clamped:
    clamping would hide solver divergence.
    """
    rho = np.asarray(rho, dtype=float)
    if np.any(~np.isfinite(rho)) or np.any(np.abs(rho) >= _FISHER_Z_EDGE):
        raise DomainError(f"fisher_z requires |rho| < 1 - 1e-12, got {rho}")
    out = np.arctanh(rho)
    return out if out.ndim else float(out)


def inv_fisher_z(x):
    x = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(x)):
        raise DomainError(f"inv_fisher_z requires finite input, got {x}")
    out = np.tanh(x)
    return out if out.ndim else float(out)


def equicorr_pd_bounds(n: int) -> tuple[float, float]:
    """Open interval of rho for which (1-rho)I + rho*J is positive definite."""
    if n <= 1:
        return (-np.inf, 1.0)
    return (-1.0 / (n - 1), 1.0)


@dataclass(frozen=True)
class EquicorrelatedCovariance:
    """V = U^{1/2} C U^{1/2} with C = (1-rho)I + rho*J and U = diag(u)."""

    n: int
    rho: float
    u: np.ndarray

    def __post_init__(self):
        if self.n < 1:
            raise ShapeError(f"matrix size must be >= 1, got {self.n}")
        u = np.asarray(self.u, dtype=float)
        if u.shape != (self.n,):
            raise ShapeError(f"u must have shape ({self.n},), got {u.shape}")
        if np.any(~np.isfinite(u)) or np.any(u <= 0.0):
            raise DomainError("all diagonal variances must be finite and > 0")
        lo, hi = equicorr_pd_bounds(self.n)
        if not (lo < self.rho < hi):
            raise SingularityError(self.rho, self.n)
        object.__setattr__(self, "u", u)

    def dense(self) -> np.ndarray:
        c = np.full((self.n, self.n), self.rho)
        np.fill_diagonal(c, 1.0)
        su = np.sqrt(self.u)
        return su[:, None] * c * su[None, :]

    def inverse(self) -> "EquicorrelatedInverse":
        return invert_equicorrelated(self)


@dataclass(frozen=True)
class EquicorrelatedInverse:
    """Implicit C^{-1} = a*I + b*J together with the diagonal scale.

    V^{-1} M is computed in O(n * cols); no dense n x n inverse is formed.
    """

    n: int
    a: float
    b: float
    u: np.ndarray

    def apply(self, m: np.ndarray) -> np.ndarray:
        """V^{-1} @ m for a vector or matrix m with n rows."""
        m = np.asarray(m, dtype=float)
        if m.shape[0] != self.n:
            raise ShapeError(f"operand has {m.shape[0]} rows, expected {self.n}")
        su = np.sqrt(self.u)
        w = m / (su[:, None] if m.ndim == 2 else su)
        out = self.a * w + self.b * w.sum(axis=0)
        return out / (su[:, None] if m.ndim == 2 else su)

    def dense(self) -> np.ndarray:
        c_inv = np.full((self.n, self.n), self.b)
        np.fill_diagonal(c_inv, self.a + self.b)
        isu = 1.0 / np.sqrt(self.u)
        return isu[:, None] * c_inv * isu[None, :]


def equicorr_inverse_coeffs(n: int, rho: float) -> tuple[float, float]:
    """Scalars (a, b) with C^{-1} = a*I + b*J for equicorrelated C."""
    lo, hi = equicorr_pd_bounds(n)
    if not (lo < rho < hi):
        raise SingularityError(rho, n)
    a = 1.0 / (1.0 - rho)
    b = -rho / ((1.0 - rho) * (1.0 + (n - 1) * rho))
    return a, b


def invert_equicorrelated(cov: EquicorrelatedCovariance) -> EquicorrelatedInverse:
    a, b = equicorr_inverse_coeffs(cov.n, cov.rho)
    return EquicorrelatedInverse(n=cov.n, a=a, b=b, u=cov.u)


@dataclass(frozen=True)
class DiagonalWeight:
    """Nonnegative diagonal weight with its strictly-positive support."""

    entries: np.ndarray
    support: np.ndarray = field(init=False)

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=float)
        if entries.ndim != 1:
            raise ShapeError("weight entries must be a vector")
        if np.any(~np.isfinite(entries)) or np.any(entries < 0.0):
            raise DomainError("weight entries must be finite and nonnegative")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "support", np.flatnonzero(entries > 0.0))

    def __len__(self):
        return self.entries.shape[0]


def sparse_weighted_product(m: np.ndarray, weight: DiagonalWeight, n: np.ndarray) -> np.ndarray:
    """M @ diag(w) @ N touching only the strictly-positive weights.

    Work scales with |support| * (rows(M) + cols(N)) rather than with the
    full inner dimension.
    """
    m = np.asarray(m, dtype=float)
    n = np.asarray(n, dtype=float)
    if m.ndim != 2 or n.ndim != 2:
        raise ShapeError("operands must be matrices")
    if m.shape[1] != len(weight) or n.shape[0] != len(weight):
        raise ShapeError(
            f"inner dimensions {m.shape[1]}, {len(weight)}, {n.shape[0]} do not conform"
        )
    supp = weight.support
    if supp.size == 0:
        return np.zeros((m.shape[0], n.shape[1]))
    lam = weight.entries[supp]
    return m[:, supp] @ (lam[:, None] * n[supp, :])


@dataclass(frozen=True)
class PairIndex:
    """Lexicographic enumeration of all (j, k) with j < k for one cluster size."""

    n: int
    jj: np.ndarray
    kk: np.ndarray

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.jj.tolist(), self.kk.tolist()))

    def __len__(self):
        return self.jj.shape[0]

    def flat(self, j: int, k: int) -> int:
        """Position of pair (j, k), j < k, in the lexicographic order."""
        return j * self.n - j * (j + 1) // 2 + (k - j - 1)


@lru_cache(maxsize=None)
def pair_enumerate(n: int) -> PairIndex:
    if n < 1:
        raise DomainError(f"cluster size must be >= 1, got {n}")
    jj, kk = np.triu_indices(n, k=1)
    jj = np.ascontiguousarray(jj.astype(np.int64))
    kk = np.ascontiguousarray(kk.astype(np.int64))
    return PairIndex(n=n, jj=jj, kk=kk)
