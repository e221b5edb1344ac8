"""Brute-force nearest-neighbour kernels.

Two implementations of each kernel: numba ``@njit`` loops and a chunked
pure-numpy path. Set ``CIM_KERNELS=numpy`` to force the numpy path (it is
also used when numba cannot be imported). Both paths perform the same
floating-point operations in the same order, so their results are
bit-identical:

* projections are accumulated ``0.0 + a0*b0 + a1*b1 + ...`` left to right,
* squared euclidean distances likewise, followed by ``sqrt``,
* neighbour distances are summed in ascending order, left to right.

Each kernel returns ``(nearest, counts)``: ``nearest[i, :counts[i]]`` are the
sorted distances from point ``i`` to its closest candidates (the point itself
excluded), padded with ``inf``.
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

_CHUNK = 256


def _default_backend() -> str:
    flag = os.environ.get("CIM_KERNELS", "").strip().lower()
    if flag in ("numpy", "python", "off", "0"):
        return "numpy"
    return "numba" if HAVE_NUMBA else "numpy"


BACKEND = _default_backend()


def set_backend(name: str) -> str:
    """Switch kernel backend at runtime; returns the previous one."""
    global BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    prev, BACKEND = BACKEND, name
    return prev


# ---------------------------------------------------------------- numpy path

def _select(d: np.ndarray, k: int) -> np.ndarray:
    if d.shape[1] > k:
        d = np.partition(d, k - 1, axis=1)[:, :k]
    return np.sort(d, axis=1)


def _np_projected(phi, z, group, k):
    n, dim = phi.shape
    nearest = np.full((n, k), np.inf)
    cols = np.arange(n)
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        zc = z[lo:hi]
        proj = np.zeros((hi - lo, n))
        for c in range(dim):
            proj += zc[:, c:c + 1] * phi[None, :, c]
        own = proj[np.arange(hi - lo), cols[lo:hi]]
        d = np.abs(proj - own[:, None])
        d[np.arange(hi - lo), cols[lo:hi]] = np.inf
        d[group[lo:hi, None] != group[None, :]] = np.inf
        nearest[lo:hi, :min(k, n)] = _select(d, k)[:, :min(k, n)]
    counts = np.minimum(np.isfinite(nearest).sum(axis=1), k)
    return nearest, counts


def _np_euclid(x, k):
    n, dim = x.shape
    nearest = np.full((n, k), np.inf)
    cols = np.arange(n)
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        sq = np.zeros((hi - lo, n))
        for c in range(dim):
            diff = x[lo:hi, c:c + 1] - x[None, :, c]
            sq += diff * diff
        d = np.sqrt(sq)
        d[np.arange(hi - lo), cols[lo:hi]] = np.inf
        nearest[lo:hi, :min(k, n)] = _select(d, k)[:, :min(k, n)]
    counts = np.full(n, min(k, n - 1), dtype=np.int64)
    return nearest, counts


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _insert(buf, count, k, d):
        # keeps buf[:count] sorted ascending; equal values keep arrival order
        if count == k and d >= buf[k - 1]:
            return count
        pos = count if count < k else k - 1
        while pos > 0 and buf[pos - 1] > d:
            if pos < k:
                buf[pos] = buf[pos - 1]
            pos -= 1
        buf[pos] = d
        return count + 1 if count < k else count

    @njit(cache=True)
    def _nb_projected(phi, z, group, k):
        n, dim = phi.shape
        nearest = np.full((n, k), np.inf)
        counts = np.zeros(n, dtype=np.int64)
        for i in range(n):
            own = 0.0
            for c in range(dim):
                own += z[i, c] * phi[i, c]
            buf = nearest[i]
            cnt = 0
            gi = group[i]
            for j in range(n):
                if j == i or group[j] != gi:
                    continue
                p = 0.0
                for c in range(dim):
                    p += z[i, c] * phi[j, c]
                cnt = _insert(buf, cnt, k, abs(p - own))
            counts[i] = cnt
        return nearest, counts

    @njit(cache=True)
    def _nb_euclid(x, k):
        n, dim = x.shape
        nearest = np.full((n, k), np.inf)
        counts = np.zeros(n, dtype=np.int64)
        for i in range(n):
            buf = nearest[i]
            cnt = 0
            for j in range(n):
                if j == i:
                    continue
                sq = 0.0
                for c in range(dim):
                    diff = x[i, c] - x[j, c]
                    sq += diff * diff
                cnt = _insert(buf, cnt, k, np.sqrt(sq))
            counts[i] = cnt
        return nearest, counts


# ---------------------------------------------------------------- dispatch

def projected_neighbours(phi, z, group, k: int, backend: str | None = None):
    """Nearest distances in the 1-D projection onto each anchor's own ``z``.

    Candidates for anchor ``i`` are points ``j != i`` with ``group[j] == group[i]``;
    point ``j`` is projected as ``phi[j] . z[i]``.
    """
    phi = np.ascontiguousarray(phi, dtype=np.float64)
    z = np.ascontiguousarray(z, dtype=np.float64)
    group = np.ascontiguousarray(group, dtype=np.int64)
    if (backend or BACKEND) == "numba":
        return _nb_projected(phi, z, group, int(k))
    return _np_projected(phi, z, group, int(k))


def euclidean_neighbours(x, k: int, backend: str | None = None):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if (backend or BACKEND) == "numba":
        return _nb_euclid(x, int(k))
    return _np_euclid(x, int(k))


def mean_of_nearest(nearest: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Left-to-right sum of each row's first ``counts`` entries, divided by the count."""
    acc = np.zeros(nearest.shape[0])
    for j in range(nearest.shape[1]):
        acc = acc + np.where(j < counts, nearest[:, j], 0.0)
    out = np.zeros_like(acc)
    ok = counts > 0
    out[ok] = acc[ok] / counts[ok]
    return out
