"""Numeric kernels with a numba path and a pure-numpy fallback.

The numba implementations are used when numba imports cleanly and the
``FOGSIM_DISABLE_JIT`` environment variable is unset (or ``0``). Both
implementations are always importable through ``NUMBA_KERNELS`` and
``NUMPY_KERNELS`` so they can be cross-checked and benchmarked.
"""

import math
import os

import numpy as np

EARTH_RADIUS_KM = 6371.0

try:
    import numba as nb
except ImportError:  # pragma: no cover - numba is a declared dependency
    nb = None

JIT_DISABLED = os.environ.get("FOGSIM_DISABLE_JIT", "0") not in ("", "0", "false", "False")
HAVE_NUMBA = nb is not None


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _np_haversine_to_many(lat, lon, lats, lons):
    lat1 = math.radians(lat)
    lat2 = np.radians(lats)
    dlat = lat2 - lat1
    dlon = np.radians(lons) - math.radians(lon)
    a = np.sin(dlat / 2.0) ** 2 + math.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.minimum(a, 1.0)))


def _np_pairwise_haversine(lats, lons):
    la = np.radians(lats)
    lo = np.radians(lons)
    dlat = la[:, None] - la[None, :]
    dlon = lo[:, None] - lo[None, :]
    a = np.sin(dlat / 2.0) ** 2 + np.cos(la)[:, None] * np.cos(la)[None, :] * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.minimum(a, 1.0)))


def _np_nearest_index(lat, lon, lats, lons):
    d = _np_haversine_to_many(lat, lon, lats, lons)
    i = int(np.argmin(d))  # first minimum, i.e. lowest index on ties
    return i, float(d[i])


def _np_floyd_warshall(weights):
    dist = np.array(weights, dtype=np.float64, copy=True)
    n = dist.shape[0]
    for i in range(n):
        dist[i, i] = 0.0
    for k in range(n):
        dist = np.minimum(dist, dist[:, k, None] + dist[None, k, :])
    return dist


def _np_next_hops(weights, dist, tol):
    # smallest-index neighbour that sits on some shortest path
    n = dist.shape[0]
    nh = np.full((n, n), -1, dtype=np.int64)
    for s in range(n):
        with np.errstate(invalid="ignore"):  # inf - inf where nothing is reachable
            cand = weights[s][:, None] + dist  # cand[v, d] = w(s, v) + dist(v, d)
            ok = np.isfinite(weights[s])[:, None] & (np.abs(cand - dist[s][None, :]) <= tol * np.maximum(1.0, dist[s][None, :]))
        ok[s, :] = False
        has = ok.any(axis=0)
        first = np.argmax(ok, axis=0)
        nh[s] = np.where(has & np.isfinite(dist[s]), first, -1)
        nh[s, s] = s
    return nh


NUMPY_KERNELS = {
    "haversine_to_many": _np_haversine_to_many,
    "pairwise_haversine": _np_pairwise_haversine,
    "nearest_index": _np_nearest_index,
    "floyd_warshall": _np_floyd_warshall,
    "next_hops": _np_next_hops,
}


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @nb.njit(cache=True)
    def _nb_haversine_to_many(lat, lon, lats, lons):
        n = lats.shape[0]
        out = np.empty(n, dtype=np.float64)
        lat1 = math.radians(lat)
        lon1 = math.radians(lon)
        c1 = math.cos(lat1)
        for i in range(n):
            lat2 = math.radians(lats[i])
            s1 = math.sin((lat2 - lat1) / 2.0)
            s2 = math.sin((math.radians(lons[i]) - lon1) / 2.0)
            a = s1 * s1 + c1 * math.cos(lat2) * s2 * s2
            if a > 1.0:
                a = 1.0
            out[i] = 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(a))
        return out

    @nb.njit(cache=True)
    def _nb_pairwise_haversine(lats, lons):
        n = lats.shape[0]
        out = np.zeros((n, n), dtype=np.float64)
        for i in range(n):
            la1 = math.radians(lats[i])
            lo1 = math.radians(lons[i])
            c1 = math.cos(la1)
            for j in range(i + 1, n):
                la2 = math.radians(lats[j])
                s1 = math.sin((la2 - la1) / 2.0)
                s2 = math.sin((math.radians(lons[j]) - lo1) / 2.0)
                a = s1 * s1 + c1 * math.cos(la2) * s2 * s2
                if a > 1.0:
                    a = 1.0
                d = 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(a))
                out[i, j] = d
                out[j, i] = d
        return out

    @nb.njit(cache=True)
    def _nb_nearest_core(lat, lon, lats, lons):
        d = _nb_haversine_to_many(lat, lon, lats, lons)
        best = 0
        for i in range(1, d.shape[0]):
            if d[i] < d[best]:
                best = i
        return best, d[best]

    def _nb_nearest_index(lat, lon, lats, lons):
        i, d = _nb_nearest_core(float(lat), float(lon), lats, lons)
        return int(i), float(d)

    @nb.njit(cache=True)
    def _nb_floyd_warshall_core(dist):
        n = dist.shape[0]
        for i in range(n):
            dist[i, i] = 0.0
        for k in range(n):
            for i in range(n):
                dik = dist[i, k]
                if dik == np.inf:
                    continue
                for j in range(n):
                    v = dik + dist[k, j]
                    if v < dist[i, j]:
                        dist[i, j] = v
        return dist

    def _nb_floyd_warshall(weights):
        return _nb_floyd_warshall_core(np.array(weights, dtype=np.float64, copy=True))

    @nb.njit(cache=True)
    def _nb_next_hops_core(weights, dist, tol):
        n = dist.shape[0]
        nh = np.full((n, n), -1, dtype=np.int64)
        for s in range(n):
            nh[s, s] = s
            for d in range(n):
                if d == s or dist[s, d] == np.inf:
                    continue
                target = dist[s, d]
                scale = target if target > 1.0 else 1.0
                for v in range(n):
                    if v == s or weights[s, v] == np.inf:
                        continue
                    if abs(weights[s, v] + dist[v, d] - target) <= tol * scale:
                        nh[s, d] = v
                        break
        return nh

    def _nb_next_hops(weights, dist, tol):
        return _nb_next_hops_core(np.asarray(weights, dtype=np.float64), np.asarray(dist, dtype=np.float64), float(tol))

    def _nb_haversine_to_many_wrapped(lat, lon, lats, lons):
        return _nb_haversine_to_many(float(lat), float(lon), np.asarray(lats, dtype=np.float64), np.asarray(lons, dtype=np.float64))

    def _nb_pairwise_wrapped(lats, lons):
        return _nb_pairwise_haversine(np.asarray(lats, dtype=np.float64), np.asarray(lons, dtype=np.float64))

    def _nb_nearest_wrapped(lat, lon, lats, lons):
        return _nb_nearest_index(lat, lon, np.asarray(lats, dtype=np.float64), np.asarray(lons, dtype=np.float64))

    NUMBA_KERNELS = {
        "haversine_to_many": _nb_haversine_to_many_wrapped,
        "pairwise_haversine": _nb_pairwise_wrapped,
        "nearest_index": _nb_nearest_wrapped,
        "floyd_warshall": _nb_floyd_warshall,
        "next_hops": _nb_next_hops,
    }
else:  # pragma: no cover
    NUMBA_KERNELS = None


USING_NUMBA = HAVE_NUMBA and not JIT_DISABLED
ACTIVE = NUMBA_KERNELS if USING_NUMBA else NUMPY_KERNELS

haversine_to_many = ACTIVE["haversine_to_many"]
pairwise_haversine = ACTIVE["pairwise_haversine"]
nearest_index = ACTIVE["nearest_index"]
floyd_warshall = ACTIVE["floyd_warshall"]
next_hops = ACTIVE["next_hops"]


def backend() -> str:
    return "numba" if USING_NUMBA else "numpy"
