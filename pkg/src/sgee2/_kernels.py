"""Compiled inner kernels with a pure-numpy fallback.

The numba path is the default; set ``SGEE2_DISABLE_NUMBA=1`` (or run without
numba installed) to select the numpy implementations.  Both backends expose
the same functions and are compared by ``sgee2.bench.compare_backends``.

Structure codes for the GEE1-style accumulation (also used for the pair
stack when the second-order portion carries a non-identity working
structure in benchmarks):

    0 identity        V = I
    1 independence    V = diag(u)
    2 equicorrelated  V = U^{1/2}((1-rho)I + rho J)U^{1/2}, implicit inverse
    3 arbitrary       same V, densified and inverted with LAPACK
"""

from __future__ import annotations

import os

import numpy as np

STRUCT_IDENTITY = 0
STRUCT_INDEPENDENCE = 1
STRUCT_EQUICORRELATED = 2
STRUCT_ARBITRARY = 3

_DISABLE = os.environ.get("SGEE2_DISABLE_NUMBA", "0") == "1"

if not _DISABLE:
    try:
        from numba import njit

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a hard dependency
        NUMBA_ENABLED = False
else:
    NUMBA_ENABLED = False


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _gee1_cluster_np(d, u, rho, w, e, supp, structure):
    """H = D' V^{-1} W D and G = D' V^{-1} W e for one cluster.

    Only indices in ``supp`` (the strictly positive weights) contribute to
    the weighted sums; the equicorrelated J-term still mixes all rows.
    """
    n, p = d.shape
    ws = w[supp]
    ds = d[supp]
    es = e[supp]
    if structure == STRUCT_IDENTITY:
        h = ds.T @ (ws[:, None] * ds)
        g = ds.T @ (ws * es)
        return h, g
    if structure == STRUCT_INDEPENDENCE:
        wu = ws / u[supp]
        h = ds.T @ (wu[:, None] * ds)
        g = ds.T @ (wu * es)
        return h, g
    if structure == STRUCT_EQUICORRELATED:
        a = 1.0 / (1.0 - rho)
        b = -rho / ((1.0 - rho) * (1.0 + (n - 1) * rho))
        us = u[supp]
        wu = ws / us
        h = a * (ds.T @ (wu[:, None] * ds))
        g = a * (ds.T @ (wu * es))
        col_all = (d / np.sqrt(u)[:, None]).sum(axis=0)
        wcol = ds.T @ (ws / np.sqrt(us))
        h += b * np.outer(col_all, wcol)
        g += b * col_all * float((ws * es / np.sqrt(us)).sum())
        return h, g
    # arbitrary: dense inverse of the same equicorrelated V
    c = np.full((n, n), rho)
    np.fill_diagonal(c, 1.0)
    su = np.sqrt(u)
    vinv = np.linalg.inv(su[:, None] * c * su[None, :])
    wd = np.zeros_like(d)
    wd[supp] = ws[:, None] * ds
    we = np.zeros(n)
    we[supp] = ws * es
    return d.T @ (vinv @ wd), d.T @ (vinv @ we)


def _pair_accum_pairs_np(jj, kk, w2, a, b, c, s, t):
    """S0 = sum w2, S1 = sum w2 * e2 over an explicit pair list.

    e2 = a_j a_k - b_j b_k - c * s_j s_k - t.
    """
    e2 = a[jj] * a[kk] - b[jj] * b[kk] - c * s[jj] * s[kk] - t
    return float(w2.sum()), float((w2 * e2).sum())


def _pair_accum_sub_np(sidx, n, w2, use_w2, a, b, c, s, t):
    """Pair accumulation restricted to pairs within the sampled index set."""
    if sidx.shape[0] < 2:
        return 0.0, 0.0
    sj = np.sort(sidx)
    jl, kl = np.triu_indices(sj.shape[0], k=1)
    j = sj[jl]
    k = sj[kl]
    if use_w2:
        flat = j * n - j * (j + 1) // 2 + (k - j - 1)
        w = w2[flat]
    else:
        w = np.ones(j.shape[0])
    e2 = a[j] * a[k] - b[j] * b[k] - c * s[j] * s[k] - t
    return float(w.sum()), float((w * e2).sum())


def _ipw_pair_w2_np(jj, kk, r, pi_r, rho_r, use_eta):
    """Second-order IPW weights r_j r_k / eta_jk; returns (w2, bad_pair).

    bad_pair is the first pair index whose eta violates the Frechet bounds
    (-1 when all pairs are feasible).  With use_eta false the denominator is
    the independence product pi_j pi_k.
    """
    p1 = pi_r[jj]
    p2 = pi_r[kk]
    if use_eta:
        eta = p1 * p2 + rho_r * np.sqrt(p1 * (1.0 - p1) * p2 * (1.0 - p2))
        lo = np.maximum(0.0, p1 + p2 - 1.0)
        hi = np.minimum(p1, p2)
        bad = np.flatnonzero((eta < lo - 1e-12) | (eta > hi + 1e-12))
        bad_pair = int(bad[0]) if bad.size else -1
    else:
        eta = p1 * p2
        bad_pair = -1
    w2 = np.where((r[jj] > 0) & (r[kk] > 0), 1.0 / eta, 0.0)
    return w2, bad_pair


def _bench_gee1_iter_np(d, u, rho, w, e, supp, structure, reps):
    acc = 0.0
    for _ in range(reps):
        h, g = _gee1_cluster_np(d, u, rho, w, e, supp, structure)
        acc += h[0, 0] + g[0]
    return acc


def _bench_pair_iter_np(jj, kk, w2, a, b, c, s, t, reps):
    acc = 0.0
    for _ in range(reps):
        s0, s1 = _pair_accum_pairs_np(jj, kk, w2, a, b, c, s, t)
        acc += s0 + s1
    return acc


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if NUMBA_ENABLED:

    @njit(cache=True)
    def _gee1_cluster_nb(d, u, rho, w, e, supp, structure):
        n, p = d.shape
        h = np.zeros((p, p))
        g = np.zeros(p)
        if structure == 0 or structure == 1:
            for idx in range(supp.shape[0]):
                j = supp[idx]
                wj = w[j] if structure == 0 else w[j] / u[j]
                for r_ in range(p):
                    g[r_] += wj * e[j] * d[j, r_]
                    for c_ in range(p):
                        h[r_, c_] += wj * d[j, r_] * d[j, c_]
            return h, g
        if structure == 2:
            a = 1.0 / (1.0 - rho)
            b = -rho / ((1.0 - rho) * (1.0 + (n - 1) * rho))
            col_all = np.zeros(p)
            for j in range(n):
                su = np.sqrt(u[j])
                for r_ in range(p):
                    col_all[r_] += d[j, r_] / su
            wcol = np.zeros(p)
            wse = 0.0
            for idx in range(supp.shape[0]):
                j = supp[idx]
                su = np.sqrt(u[j])
                wu = w[j] / u[j]
                for r_ in range(p):
                    g[r_] += a * wu * e[j] * d[j, r_]
                    wcol[r_] += (w[j] / su) * d[j, r_]
                    for c_ in range(p):
                        h[r_, c_] += a * wu * d[j, r_] * d[j, c_]
                wse += w[j] * e[j] / su
            for r_ in range(p):
                g[r_] += b * col_all[r_] * wse
                for c_ in range(p):
                    h[r_, c_] += b * col_all[r_] * wcol[c_]
            return h, g
        # arbitrary
        c = np.full((n, n), rho)
        for j in range(n):
            c[j, j] = 1.0
        su = np.sqrt(u)
        v = np.empty((n, n))
        for j in range(n):
            for k in range(n):
                v[j, k] = su[j] * c[j, k] * su[k]
        vinv = np.linalg.inv(v)
        wd = np.zeros((n, p))
        we = np.zeros(n)
        for idx in range(supp.shape[0]):
            j = supp[idx]
            we[j] = w[j] * e[j]
            for r_ in range(p):
                wd[j, r_] = w[j] * d[j, r_]
        vwd = vinv @ wd
        vwe = vinv @ we
        for j in range(n):
            for r_ in range(p):
                g[r_] += d[j, r_] * vwe[j]
                for c_ in range(p):
                    h[r_, c_] += d[j, r_] * vwd[j, c_]
        return h, g

    @njit(cache=True)
    def _pair_accum_pairs_nb(jj, kk, w2, a, b, c, s, t):
        s0 = 0.0
        s1 = 0.0
        for p in range(jj.shape[0]):
            w = w2[p]
            if w == 0.0:
                continue
            j = jj[p]
            k = kk[p]
            e2 = a[j] * a[k] - b[j] * b[k] - c * s[j] * s[k] - t
            s0 += w
            s1 += w * e2
        return s0, s1

    @njit(cache=True)
    def _pair_accum_sub_nb(sidx, n, w2, use_w2, a, b, c, s, t):
        s0 = 0.0
        s1 = 0.0
        m = sidx.shape[0]
        for ia in range(m):
            for ib in range(ia + 1, m):
                j = sidx[ia]
                k = sidx[ib]
                if j > k:
                    j, k = k, j
                if use_w2:
                    flat = j * n - j * (j + 1) // 2 + (k - j - 1)
                    w = w2[flat]
                else:
                    w = 1.0
                if w == 0.0:
                    continue
                e2 = a[j] * a[k] - b[j] * b[k] - c * s[j] * s[k] - t
                s0 += w
                s1 += w * e2
        return s0, s1

    @njit(cache=True)
    def _ipw_pair_w2_nb(jj, kk, r, pi_r, rho_r, use_eta):
        npairs = jj.shape[0]
        w2 = np.zeros(npairs)
        bad_pair = -1
        for p in range(npairs):
            p1 = pi_r[jj[p]]
            p2 = pi_r[kk[p]]
            if use_eta:
                eta = p1 * p2 + rho_r * np.sqrt(p1 * (1.0 - p1) * p2 * (1.0 - p2))
                lo = max(0.0, p1 + p2 - 1.0)
                hi = min(p1, p2)
                if (eta < lo - 1e-12 or eta > hi + 1e-12) and bad_pair < 0:
                    bad_pair = p
            else:
                eta = p1 * p2
            if r[jj[p]] > 0 and r[kk[p]] > 0:
                w2[p] = 1.0 / eta
        return w2, bad_pair

    @njit(cache=True)
    def _bench_gee1_iter_nb(d, u, rho, w, e, supp, structure, reps):
        acc = 0.0
        for _ in range(reps):
            h, g = _gee1_cluster_nb(d, u, rho, w, e, supp, structure)
            acc += h[0, 0] + g[0]
        return acc

    @njit(cache=True)
    def _bench_pair_iter_nb(jj, kk, w2, a, b, c, s, t, reps):
        acc = 0.0
        for _ in range(reps):
            s0, s1 = _pair_accum_pairs_nb(jj, kk, w2, a, b, c, s, t)
            acc += s0 + s1
        return acc

    gee1_cluster = _gee1_cluster_nb
    pair_accum_pairs = _pair_accum_pairs_nb
    pair_accum_sub = _pair_accum_sub_nb
    ipw_pair_w2 = _ipw_pair_w2_nb
    bench_gee1_iter = _bench_gee1_iter_nb
    bench_pair_iter = _bench_pair_iter_nb
else:
    gee1_cluster = _gee1_cluster_np
    pair_accum_pairs = _pair_accum_pairs_np
    pair_accum_sub = _pair_accum_sub_np
    ipw_pair_w2 = _ipw_pair_w2_np
    bench_gee1_iter = _bench_gee1_iter_np
    bench_pair_iter = _bench_pair_iter_np


def backend_name() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"
