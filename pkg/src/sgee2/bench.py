"""Per-iteration timing harness for the scoring kernels.

Times one scoring iteration of the first-order (subject-level) and
second-order (pair-level) accumulations under each working covariance
structure, for the full pass and for the subsampled pass with the sampling
fraction proportional to 1/n, then fits log-log slopes of time against
cluster size.  Medians over repeated measurements on a monotonic clock,
with an untimed warm-up; absolute times are host-dependent, the slopes are
the contract.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigError

STRUCTURES = ("arbitrary", "equicorrelated", "independence", "identity")
SOLVERS = ("full", "stochastic")
PORTIONS = ("gee1", "gee2")

_CODES = {
    "identity": _kernels.STRUCT_IDENTITY,
    "independence": _kernels.STRUCT_INDEPENDENCE,
    "equicorrelated": _kernels.STRUCT_EQUICORRELATED,
    "arbitrary": _kernels.STRUCT_ARBITRARY,
}

# largest pair-stack size allowed to densify for the arbitrary structure
_DENSE_PAIR_CAP = 4000


@dataclass(frozen=True)
class BenchRow:
    structure: str
    solver: str
    portion: str
    n: int
    median_seconds: float


@dataclass(frozen=True)
class BenchReport:
    rows: tuple[BenchRow, ...]
    slopes: dict

    def median(self, structure: str, solver: str, portion: str, n: int) -> float:
        for row in self.rows:
            if (row.structure, row.solver, row.portion, row.n) == (
                structure,
                solver,
                portion,
                n,
            ):
                return row.median_seconds
        raise KeyError((structure, solver, portion, n))


def _fixture(n: int, rng: np.random.Generator):
    """Synthetic per-cluster arrays for both portions at size n."""
    p = 4
    d1 = rng.standard_normal((n, p))
    u1 = rng.uniform(0.15, 0.25, n)
    e1 = rng.standard_normal(n)
    m = n * (n - 1) // 2
    d2 = rng.standard_normal((m, p))
    u2 = rng.uniform(0.5, 1.5, m)
    e2 = rng.standard_normal(m)
    return d1, u1, e1, d2, u2, e2


def _subsample(n: int, pi_s: float, rng: np.random.Generator) -> np.ndarray:
    ups = min(n, max(2, int(np.ceil(pi_s * n))))
    return np.sort(rng.choice(n, size=ups, replace=False)).astype(np.int64)


def _pair_support(sub: np.ndarray, n: int) -> np.ndarray:
    jl, kl = np.triu_indices(sub.shape[0], k=1)
    j = sub[jl]
    k = sub[kl]
    return np.sort(j * n - j * (j + 1) // 2 + (k - j - 1)).astype(np.int64)


def _time_call(fn, args, repetitions: int, target: float = 5e-4):
    """Median seconds for one call; cheap calls are batched to fill target."""
    fn(*args, 1)  # warm-up, also triggers compilation on the numba path
    t0 = time.perf_counter()
    fn(*args, 1)
    once = time.perf_counter() - t0
    inner = max(1, int(np.ceil(target / max(once, 1e-9))))
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn(*args, inner)
        times.append((time.perf_counter() - t0) / inner)
    return float(np.median(times))


def bench_grid(
    sizes=(50, 100, 200, 400),
    structures=STRUCTURES,
    solvers=SOLVERS,
    portions=PORTIONS,
    repetitions: int = 20,
    pi_s_scale: float = 8.0,
    seed: int = 0,
) -> BenchReport:
    """Timing grid over cluster sizes with fitted log-log slopes.

    The stochastic rows use sampling fraction pi_s = pi_s_scale / n, so the
    subsample size stays constant as n grows.  The arbitrary structure on
    the pair portion densifies an n(n-1)/2-dimensional matrix and is
    refused beyond a size cap.
    """
    if len(sizes) < 3:
        raise ConfigError(f"need at least 3 grid sizes, got {len(sizes)}")
    if repetitions < 1:
        raise ConfigError(f"repetitions must be positive, got {repetitions}")
    for s in structures:
        if s not in STRUCTURES:
            raise ConfigError(f"unknown structure {s!r}")
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        d1, u1, e1, d2, u2, e2 = _fixture(n, rng)
        m = d2.shape[0]
        w1 = np.ones(n)
        w2 = np.ones(m)
        full1 = np.arange(n, dtype=np.int64)
        full2 = np.arange(m, dtype=np.int64)
        sub = _subsample(n, pi_s_scale / n, rng)
        sub2 = _pair_support(sub, n)
        for structure in structures:
            code = _CODES[structure]
            for solver in solvers:
                supp1 = full1 if solver == "full" else sub
                supp2 = full2 if solver == "full" else sub2
                for portion in portions:
                    if portion == "gee2" and structure == "arbitrary":
                        if m > _DENSE_PAIR_CAP:
                            continue
                    if portion == "gee1":
                        args = (d1, u1, 0.1, w1, e1, supp1, code)
                    else:
                        args = (d2, u2, 0.05, w2, e2, supp2, code)
                    med = _time_call(
                        _kernels.bench_gee1_iter, args, repetitions
                    )
                    rows.append(BenchRow(structure, solver, portion, n, med))
    slopes = {}
    for structure in structures:
        for solver in solvers:
            for portion in portions:
                pts = [
                    (r.n, r.median_seconds)
                    for r in rows
                    if (r.structure, r.solver, r.portion)
                    == (structure, solver, portion)
                ]
                if len(pts) >= 3:
                    ns, ts = zip(*pts)
                    slopes[(structure, solver, portion)] = float(
                        np.polyfit(np.log(ns), np.log(ts), 1)[0]
                    )
    return BenchReport(rows=tuple(rows), slopes=slopes)


def combined_slope(report: BenchReport, parts, sizes) -> float:
    """Slope of the summed per-iteration time of several grid cells."""
    totals = []
    for n in sizes:
        totals.append(
            sum(report.median(s, sol, portion, n) for s, sol, portion in parts)
        )
    return float(np.polyfit(np.log(sizes), np.log(totals), 1)[0])


def compare_backends(n: int = 200, repetitions: int = 20, seed: int = 0) -> dict:
    """Median per-iteration seconds of the compiled and numpy kernels.

    Runs both implementations on the same fixture regardless of which one
    the package selected at import, so the speed ratio can be reported
    without re-importing under a different environment flag.
    """
    rng = np.random.default_rng(seed)
    d1, u1, e1, d2, u2, e2 = _fixture(n, rng)
    full1 = np.arange(n, dtype=np.int64)
    full2 = np.arange(d2.shape[0], dtype=np.int64)
    out = {"backend_selected": _kernels.backend_name(), "n": n}
    cases = {
        "gee1_equicorrelated": (d1, u1, 0.1, np.ones(n), e1, full1, 2),
        "gee2_identity": (d2, u2, 0.05, np.ones(d2.shape[0]), e2, full2, 0),
    }
    impls = {"numpy": _kernels._bench_gee1_iter_np}
    if _kernels.NUMBA_ENABLED:
        impls["numba"] = _kernels._bench_gee1_iter_nb
    for case, args in cases.items():
        for name, fn in impls.items():
            out[f"{case}_{name}"] = _time_call(fn, args, repetitions)
    return out
