"""Hot numeric kernels with a compiled path and a vectorised numpy path.

Each public function checks :func:`urbanstate._accel.use_numba` at call time
and dispatches to either the ``_nb`` loop kernel or the ``_np`` twin. Both
paths compute the same quantities; they differ only in summation order.
"""
from __future__ import annotations

import math

import numpy as np

from ._accel import njit, use_numba

PROB_EPS = 1e-7
EARTH_RADIUS_M = 6_371_008.8


# -- observation-row loss/gradient accumulation ------------------------------


@njit
def _unobserved_nb(nodes, types, labels, rhat, a_eff, th_eff, X, w_bce, w_reg):
    n_types = rhat.shape[1]
    d1 = X.shape[1]
    d_rhat = np.zeros_like(rhat)
    d_a = np.zeros(n_types)
    d_th = np.zeros((n_types, d1))
    bce = 0.0
    reg = 0.0
    for row in range(nodes.shape[0]):
        i = nodes[row]
        k = types[row]
        r = rhat[i, k]
        z = a_eff[k] * r
        for j in range(d1):
            z += th_eff[k, j] * X[i, j]
        p = 1.0 / (1.0 + math.exp(-z))
        y = labels[row]
        g = 0.0
        if p < PROB_EPS:
            p = PROB_EPS
        elif p > 1.0 - PROB_EPS:
            p = 1.0 - PROB_EPS
        else:
            g = p - y
        bce -= y * math.log(p) + (1.0 - y) * math.log(1.0 - p)
        reg += r * r
        gw = w_bce * g
        d_rhat[i, k] += gw * a_eff[k] + 2.0 * w_reg * r
        d_a[k] += gw * r
        for j in range(d1):
            d_th[k, j] += gw * X[i, j]
    return bce, reg, d_rhat, d_a, d_th


def _unobserved_np(nodes, types, labels, rhat, a_eff, th_eff, X, w_bce, w_reg):
    n, n_types = rhat.shape
    r = rhat[nodes, types]
    z = a_eff[types] * r + np.einsum("rj,rj->r", th_eff[types], X[nodes])
    p_raw = 1.0 / (1.0 + np.exp(-z))
    p = np.clip(p_raw, PROB_EPS, 1.0 - PROB_EPS)
    inside = (p_raw >= PROB_EPS) & (p_raw <= 1.0 - PROB_EPS)
    g = np.where(inside, p_raw - labels, 0.0)
    bce = -np.sum(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))
    reg = float(np.sum(r * r))
    gw = w_bce * g
    flat = nodes * n_types + types
    d_rhat = np.bincount(
        flat, weights=gw * a_eff[types] + 2.0 * w_reg * r, minlength=n * n_types
    ).reshape(n, n_types)
    d_a = np.bincount(types, weights=gw * r, minlength=n_types)
    d_th = np.zeros((n_types, X.shape[1]))
    np.add.at(d_th, types, gw[:, None] * X[nodes])
    return float(bce), reg, d_rhat, d_a, d_th


def unobserved_rows(nodes, types, labels, rhat, a_eff, th_eff, X, w_bce=1.0, w_reg=0.0):
    """Report BCE and rating L2 over node-level rows whose rating is unobserved.

    Returns ``(bce_sum, reg_sum, d_rhat, d_alpha_eff, d_theta_eff)``, where the
    gradients are of ``w_bce * bce_sum + w_reg * reg_sum``. ``a_eff``/``th_eff``
    hold the coefficients each type actually uses (own or mean).
    """
    args = (
        np.ascontiguousarray(nodes, dtype=np.int64),
        np.ascontiguousarray(types, dtype=np.int64),
        np.ascontiguousarray(labels, dtype=np.float64),
        np.ascontiguousarray(rhat, dtype=np.float64),
        np.ascontiguousarray(a_eff, dtype=np.float64),
        np.ascontiguousarray(th_eff, dtype=np.float64),
        np.ascontiguousarray(X, dtype=np.float64),
        float(w_bce),
        float(w_reg),
    )
    if use_numba():
        return _unobserved_nb(*args)
    return _unobserved_np(*args)


@njit
def _observed_nb(nodes, types, labels, ratings, rhat, alpha, theta, X, w_bce, w_rating):
    n_types = rhat.shape[1]
    d1 = X.shape[1]
    d_rhat = np.zeros_like(rhat)
    d_a = np.zeros(n_types)
    d_th = np.zeros((n_types, d1))
    bce = 0.0
    sq = 0.0
    for row in range(nodes.shape[0]):
        i = nodes[row]
        k = types[row]
        rv = ratings[row]
        z = alpha[k] * rv
        for j in range(d1):
            z += theta[k, j] * X[i, j]
        p = 1.0 / (1.0 + math.exp(-z))
        y = labels[row]
        g = 0.0
        if p < PROB_EPS:
            p = PROB_EPS
        elif p > 1.0 - PROB_EPS:
            p = 1.0 - PROB_EPS
        else:
            g = p - y
        bce -= y * math.log(p) + (1.0 - y) * math.log(1.0 - p)
        diff = rhat[i, k] - rv
        sq += diff * diff
        gw = w_bce * g
        d_rhat[i, k] += 2.0 * w_rating * diff
        d_a[k] += gw * rv
        for j in range(d1):
            d_th[k, j] += gw * X[i, j]
    return bce, sq, d_rhat, d_a, d_th


def _observed_np(nodes, types, labels, ratings, rhat, alpha, theta, X, w_bce, w_rating):
    n, n_types = rhat.shape
    z = alpha[types] * ratings + np.einsum("rj,rj->r", theta[types], X[nodes])
    p_raw = 1.0 / (1.0 + np.exp(-z))
    p = np.clip(p_raw, PROB_EPS, 1.0 - PROB_EPS)
    inside = (p_raw >= PROB_EPS) & (p_raw <= 1.0 - PROB_EPS)
    g = np.where(inside, p_raw - labels, 0.0)
    bce = -np.sum(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))
    diff = rhat[nodes, types] - ratings
    sq = float(np.sum(diff * diff))
    gw = w_bce * g
    flat = nodes * n_types + types
    d_rhat = np.bincount(flat, weights=2.0 * w_rating * diff, minlength=n * n_types).reshape(
        n, n_types
    )
    d_a = np.bincount(types, weights=gw * ratings, minlength=n_types)
    d_th = np.zeros((n_types, X.shape[1]))
    np.add.at(d_th, types, gw[:, None] * X[nodes])
    return float(bce), sq, d_rhat, d_a, d_th


def observed_rows(nodes, types, labels, ratings, rhat, alpha, theta, X, w_bce=1.0, w_rating=1.0):
    """Sub-node report BCE (true rating as input) and rating squared error.

    Returns ``(bce_sum, sq_err_sum, d_rhat, d_alpha, d_theta)``; gradients are
    of ``w_bce * bce_sum + w_rating * sq_err_sum``.
    """
    args = (
        np.ascontiguousarray(nodes, dtype=np.int64),
        np.ascontiguousarray(types, dtype=np.int64),
        np.ascontiguousarray(labels, dtype=np.float64),
        np.ascontiguousarray(ratings, dtype=np.float64),
        np.ascontiguousarray(rhat, dtype=np.float64),
        np.ascontiguousarray(alpha, dtype=np.float64),
        np.ascontiguousarray(theta, dtype=np.float64),
        np.ascontiguousarray(X, dtype=np.float64),
        float(w_bce),
        float(w_rating),
    )
    if use_numba():
        return _observed_nb(*args)
    return _observed_np(*args)


# -- nearest neighbour on the sphere -----------------------------------------


@njit
def _nearest_nb(lat_a, lon_a, lat_b, lon_b):
    m = lat_a.shape[0]
    best_idx = np.full(m, -1, dtype=np.int64)
    best_d = np.full(m, np.inf)
    for a in range(m):
        p1 = math.radians(lat_a[a])
        l1 = math.radians(lon_a[a])
        cp1 = math.cos(p1)
        for b in range(lat_b.shape[0]):
            p2 = math.radians(lat_b[b])
            dphi = p2 - p1
            dl = math.radians(lon_b[b]) - l1
            h = math.sin(dphi / 2.0) ** 2 + cp1 * math.cos(p2) * math.sin(dl / 2.0) ** 2
            if h > 1.0:
                h = 1.0
            d = 2.0 * EARTH_RADIUS_M * math.asin(math.sqrt(h))
            if d < best_d[a]:
                best_d[a] = d
                best_idx[a] = b
    return best_idx, best_d


def haversine_m(lat1, lon1, lat2, lon2):
    """Great-circle distance in metres (broadcasting)."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dl = np.radians(lon2) - np.radians(lon1)
    h = np.sin(dphi / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.minimum(h, 1.0)))


def _nearest_np(lat_a, lon_a, lat_b, lon_b, chunk=2048):
    m = lat_a.shape[0]
    best_idx = np.full(m, -1, dtype=np.int64)
    best_d = np.full(m, np.inf)
    if lat_b.shape[0] == 0:
        return best_idx, best_d
    for s in range(0, m, chunk):
        d = haversine_m(
            lat_a[s : s + chunk, None], lon_a[s : s + chunk, None], lat_b[None, :], lon_b[None, :]
        )
        # argmin returns the first minimum: lowest candidate index wins ties
        j = np.argmin(d, axis=1)
        best_idx[s : s + chunk] = j
        best_d[s : s + chunk] = d[np.arange(j.shape[0]), j]
    return best_idx, best_d


def nearest_haversine(lat_a, lon_a, lat_b, lon_b):
    """For every point in A, the index of and distance (m) to the nearest point in B."""
    args = tuple(np.ascontiguousarray(v, dtype=np.float64) for v in (lat_a, lon_a, lat_b, lon_b))
    if use_numba():
        return _nearest_nb(*args)
    return _nearest_np(*args)
