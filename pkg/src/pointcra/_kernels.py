"""Hot geometric and scatter kernels.

Every kernel has a pure-numpy implementation and, when numba is importable,
an ``@njit`` twin.  The numba path is used unless the environment variable
``CRA_NUMBA`` is set to ``0``.  Both paths return identical results; the
test-suite and ``benchmarks/bench_kernels.py`` compare them directly.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("CRA_NUMBA", "1") != "0"


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------

def _sqdist_np(query, ref):
    # explicit difference form, summed column by column in the same order as
    # the numba loops so both paths agree bit for bit
    d2 = np.zeros((query.shape[0], ref.shape[0]))
    for c in range(query.shape[1]):
        t = query[:, None, c] - ref[None, :, c]
        d2 += t * t
    return d2


def fps_np(pos, m, seed_index):
    n = pos.shape[0]
    out = np.empty(m, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = seed_index
    for s in range(m):
        out[s] = cur
        d = np.zeros(n)
        for c in range(pos.shape[1]):
            t = pos[:, c] - pos[cur, c]
            d += t * t
        np.minimum(mind, d, out=mind)
        # argmax returns the first maximum -> lowest index on ties
        cur = int(np.argmax(mind))
    return out


def knn_np(query, ref, k):
    d2 = _sqdist_np(query, ref)
    order = np.argsort(d2, axis=1, kind="stable")
    n_ref = ref.shape[0]
    if n_ref >= k:
        idx = order[:, :k]
    else:
        pad = np.repeat(order[:, :1], k - n_ref, axis=1)
        idx = np.concatenate([order, pad], axis=1)
    return idx.astype(np.int64), np.take_along_axis(d2, idx, axis=1)


def ball_query_np(query, ref, r2, max_k):
    d2 = _sqdist_np(query, ref)
    nq = query.shape[0]
    out = np.empty((nq, max_k), dtype=np.int64)
    for q in range(nq):
        inside = np.flatnonzero(d2[q] <= r2)
        if inside.size == 0:
            # stable argmin -> lowest index among equally near points
            out[q, :] = int(np.argmin(d2[q]))
            continue
        inside = inside[:max_k]
        out[q, : inside.size] = inside
        out[q, inside.size:] = inside[-1]
    return out


def scatter_add_np(out, idx, vals):
    np.add.at(out, idx, vals)
    return out


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def fps_nb(pos, m, seed_index):
        n = pos.shape[0]
        out = np.empty(m, dtype=np.int64)
        mind = np.full(n, np.inf)
        cur = seed_index
        for s in range(m):
            out[s] = cur
            best = -1.0
            best_i = 0
            for i in range(n):
                d = 0.0
                for c in range(pos.shape[1]):
                    t = pos[i, c] - pos[cur, c]
                    d += t * t
                if d < mind[i]:
                    mind[i] = d
                if mind[i] > best:
                    best = mind[i]
                    best_i = i
            cur = best_i
        return out

    @njit(cache=True)
    def _sqdist_row(query, ref, q, d2):
        for r in range(ref.shape[0]):
            d = 0.0
            for c in range(ref.shape[1]):
                t = query[q, c] - ref[r, c]
                d += t * t
            d2[r] = d

    @njit(cache=True)
    def knn_nb(query, ref, k):
        nq = query.shape[0]
        n_ref = ref.shape[0]
        idx = np.empty((nq, k), dtype=np.int64)
        dist = np.empty((nq, k))
        d2 = np.empty(n_ref)
        take = min(k, n_ref)
        for q in range(nq):
            _sqdist_row(query, ref, q, d2)
            order = np.argsort(d2, kind="mergesort")
            for j in range(take):
                idx[q, j] = order[j]
                dist[q, j] = d2[order[j]]
            for j in range(take, k):
                idx[q, j] = order[0]
                dist[q, j] = d2[order[0]]
        return idx, dist

    @njit(cache=True)
    def ball_query_nb(query, ref, r2, max_k):
        nq = query.shape[0]
        n_ref = ref.shape[0]
        out = np.empty((nq, max_k), dtype=np.int64)
        d2 = np.empty(n_ref)
        for q in range(nq):
            _sqdist_row(query, ref, q, d2)
            cnt = 0
            for r in range(n_ref):
                if d2[r] <= r2:
                    out[q, cnt] = r
                    cnt += 1
                    if cnt == max_k:
                        break
            if cnt == 0:
                best = 0
                for r in range(1, n_ref):
                    if d2[r] < d2[best]:
                        best = r
                for j in range(max_k):
                    out[q, j] = best
            else:
                for j in range(cnt, max_k):
                    out[q, j] = out[q, cnt - 1]
        return out

    @njit(cache=True)
    def scatter_add_nb(out, idx, vals):
        for i in range(idx.shape[0]):
            r = idx[i]
            for c in range(vals.shape[1]):
                out[r, c] += vals[i, c]
        return out


def fps(pos, m, seed_index):
    if USE_NUMBA:
        return fps_nb(pos, m, seed_index)
    return fps_np(pos, m, seed_index)


def knn(query, ref, k):
    if USE_NUMBA:
        return knn_nb(query, ref, k)
    return knn_np(query, ref, k)


def ball_query(query, ref, r2, max_k):
    if USE_NUMBA:
        return ball_query_nb(query, ref, r2, max_k)
    return ball_query_np(query, ref, r2, max_k)


def scatter_add_rows(out, idx, vals):
    """Accumulate ``vals[i]`` into ``out[idx[i]]`` for a 2-D ``out``."""
    if USE_NUMBA:
        return scatter_add_nb(out, idx, vals)
    return scatter_add_np(out, idx, vals)
