"""Hot inner loops, compiled with numba when available.

Set ``UREWRITE_DISABLE_NUMBA=1`` to force the pure-numpy fallback path
(useful for debugging and for the benchmark comparison).  Both paths are
kept numerically identical up to summation order.
"""
import os

import numpy as np

_DISABLED = os.environ.get("UREWRITE_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("numba disabled by environment")
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# --------------------------------------------------------------------------
# numpy reference implementations (always importable, used by the benchmark)
# --------------------------------------------------------------------------

def scatter_add_rows_np(out, idx, src):
    np.add.at(out, idx, src)
    return out


def copy_scatter_np(weights, ids, size):
    B, T, m = weights.shape
    out = np.zeros((B, T, size))
    b = np.arange(B)[:, None, None]
    t = np.arange(T)[None, :, None]
    np.add.at(out, (b, t, ids[:, None, :]), weights)
    return out


def lcs_length_np(a, b):
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        return 0
    prev = [0] * (m + 1)
    for i in range(n):
        cur = [0] * (m + 1)
        ai = a[i]
        for j in range(m):
            if ai == b[j]:
                cur[j + 1] = prev[j] + 1
            else:
                cur[j + 1] = cur[j] if cur[j] > prev[j + 1] else prev[j + 1]
        prev = cur
    return prev[m]


# --------------------------------------------------------------------------
# numba versions
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _scatter_add_rows_nb(out, idx, src):
        n, d = src.shape
        for i in range(n):
            r = idx[i]
            for k in range(d):
                out[r, k] += src[i, k]
        return out

    @njit(cache=True)
    def _copy_scatter_nb(weights, ids, size):
        B, T, m = weights.shape
        out = np.zeros((B, T, size))
        for b in range(B):
            for j in range(m):
                v = ids[b, j]
                for t in range(T):
                    out[b, t, v] += weights[b, t, j]
        return out

    @njit(cache=True)
    def _lcs_length_nb(a, b):
        n = a.shape[0]
        m = b.shape[0]
        if n == 0 or m == 0:
            return 0
        prev = np.zeros(m + 1, dtype=np.int64)
        cur = np.zeros(m + 1, dtype=np.int64)
        for i in range(n):
            cur[0] = 0
            for j in range(m):
                if a[i] == b[j]:
                    cur[j + 1] = prev[j] + 1
                elif cur[j] > prev[j + 1]:
                    cur[j + 1] = cur[j]
                else:
                    cur[j + 1] = prev[j + 1]
            prev, cur = cur, prev
        return prev[m]


def scatter_add_rows(out, idx, src):
    """``out[idx[i]] += src[i]`` for 2-D ``out``/``src``, repeated indices summed."""
    idx = np.ascontiguousarray(idx, dtype=np.int64).reshape(-1)
    src = np.ascontiguousarray(src, dtype=np.float64).reshape(len(idx), -1)
    if HAVE_NUMBA:
        return _scatter_add_rows_nb(out, idx, src)
    return scatter_add_rows_np(out, idx, src)


def copy_scatter(weights, ids, size):
    """Sum position weights ``[B, T, m]`` into token slots ``[B, T, size]``.

    ``ids[b, j]`` is the token id at source position ``j`` of batch row ``b``;
    weights of repeated tokens accumulate.
    """
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    if HAVE_NUMBA:
        return _copy_scatter_nb(weights, ids, int(size))
    return copy_scatter_np(weights, ids, int(size))


def lcs_length(a, b):
    """Length of the longest common subsequence of two integer sequences."""
    if HAVE_NUMBA:
        return int(_lcs_length_nb(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64)))
    return lcs_length_np(list(a), list(b))
