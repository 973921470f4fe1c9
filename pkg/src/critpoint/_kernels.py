"""Hot numeric kernels.

Each kernel has a numba-compiled implementation and a pure-numpy twin with
identical outputs. Set ``CRITPOINT_NO_NUMBA=1`` before import to force the
numpy path (or when numba is missing).
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("CRITPOINT_NO_NUMBA", "0") not in ("1", "true", "yes")


# --------------------------------------------------------------------------
# numpy reference implementations
# --------------------------------------------------------------------------

def _pool_max_np(x):
    idx = np.argmax(x, axis=1)
    val = np.take_along_axis(x, idx[:, None, :], axis=1)[:, 0, :]
    return val, idx


def _pool_median_np(x):
    n = x.shape[1]
    order = np.argsort(x, axis=1, kind="stable")
    lo = order[:, (n - 1) // 2, :]
    hi = order[:, n // 2, :]
    vlo = np.take_along_axis(x, lo[:, None, :], axis=1)[:, 0, :]
    vhi = np.take_along_axis(x, hi[:, None, :], axis=1)[:, 0, :]
    return 0.5 * (vlo + vhi), lo, hi


def _nearest_np(a, b):
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    idx = np.argmin(d, axis=1)
    return d[np.arange(len(a)), idx], idx


def _knn_mean_np(p, k):
    d = np.sqrt(((p[:, None, :] - p[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    part = np.partition(d, k - 1, axis=1)[:, :k]
    return part.mean(axis=1)


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

if numba is not None:

    @numba.njit(cache=True)
    def _pool_max_nb(x):
        b, n, c = x.shape
        val = np.empty((b, c))
        idx = np.zeros((b, c), dtype=np.int64)
        for i in range(b):
            for j in range(c):
                val[i, j] = x[i, 0, j]
            for p in range(1, n):
                for j in range(c):
                    v = x[i, p, j]
                    if v > val[i, j]:
                        val[i, j] = v
                        idx[i, j] = p
        return val, idx

    @numba.njit(cache=True)
    def _stable_rank_index(col, v, rank):
        # index of the element at position ``rank`` of a stable sort, given its value ``v``
        below = 0
        for p in range(col.shape[0]):
            if col[p] < v:
                below += 1
        want = rank - below
        for p in range(col.shape[0]):
            if col[p] == v:
                if want == 0:
                    return p
                want -= 1
        return -1

    @numba.njit(cache=True)
    def _pool_median_nb(x):
        # selection instead of a full sort; ties resolved as a stable sort would
        b, n, c = x.shape
        val = np.empty((b, c))
        lo = np.empty((b, c), dtype=np.int64)
        hi = np.empty((b, c), dtype=np.int64)
        col = np.empty(n)
        rlo, rhi = (n - 1) // 2, n // 2
        for i in range(b):
            for j in range(c):
                for p in range(n):
                    col[p] = x[i, p, j]
                part = np.partition(col, (rlo, rhi))
                vlo, vhi = part[rlo], part[rhi]
                lo[i, j] = _stable_rank_index(col, vlo, rlo)
                hi[i, j] = _stable_rank_index(col, vhi, rhi)
                val[i, j] = 0.5 * (vlo + vhi)
        return val, lo, hi

    @numba.njit(cache=True)
    def _nearest_nb(a, b):
        na = a.shape[0]
        nb = b.shape[0]
        dist = np.empty(na)
        idx = np.zeros(na, dtype=np.int64)
        for i in range(na):
            best = np.inf
            arg = 0
            for j in range(nb):
                dx = a[i, 0] - b[j, 0]
                dy = a[i, 1] - b[j, 1]
                dz = a[i, 2] - b[j, 2]
                d = dx * dx + dy * dy + dz * dz
                if d < best:
                    best = d
                    arg = j
            dist[i] = np.sqrt(best)
            idx[i] = arg
        return dist, idx

    @numba.njit(cache=True)
    def _knn_mean_nb(p, k):
        n = p.shape[0]
        out = np.empty(n)
        row = np.empty(n - 1)
        for i in range(n):
            m = 0
            for j in range(n):
                if j == i:
                    continue
                dx = p[i, 0] - p[j, 0]
                dy = p[i, 1] - p[j, 1]
                dz = p[i, 2] - p[j, 2]
                row[m] = np.sqrt(dx * dx + dy * dy + dz * dz)
                m += 1
            part = np.partition(row, k - 1)
            s = 0.0
            for t in range(k):
                s += part[t]
            out[i] = s / k
        return out


def _as3d(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    return x.reshape((-1,) + x.shape[-2:]), False


def pool_max(x, backend=None):
    """Max over the point axis (-2); returns values and lowest-index argmax."""
    lead = x.shape[:-2]
    x3, _ = _as3d(x)
    fast = USE_NUMBA if backend is None else backend == "numba"
    val, idx = (_pool_max_nb if fast else _pool_max_np)(x3)
    return val.reshape(lead + val.shape[-1:]), idx.reshape(lead + idx.shape[-1:])


def pool_median(x, backend=None):
    """Median over the point axis (-2).

    Returns ``(values, lo, hi)`` where ``lo``/``hi`` index the two middle
    elements of a stable sort (equal for odd counts).
    """
    lead = x.shape[:-2]
    x3, _ = _as3d(x)
    fast = USE_NUMBA if backend is None else backend == "numba"
    val, lo, hi = (_pool_median_nb if fast else _pool_median_np)(x3)
    shp = lead + val.shape[-1:]
    return val.reshape(shp), lo.reshape(shp), hi.reshape(shp)


def nearest(a, b, backend=None):
    """For each row of ``a`` the L2 distance to, and index of, its nearest row in ``b``."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    fast = USE_NUMBA if backend is None else backend == "numba"
    return (_nearest_nb if fast else _nearest_np)(a, b)


def knn_mean_distance(points, k, backend=None):
    """Mean distance from each point to its ``k`` nearest other points."""
    p = np.ascontiguousarray(points, dtype=np.float64)
    fast = USE_NUMBA if backend is None else backend == "numba"
    return (_knn_mean_nb if fast else _knn_mean_np)(p, int(k))
