"""Numba-jitted kernels; same contracts as numpy_backend.

Dense matmuls stay on BLAS (np.matmul) in both backends; numba fuses the
memory-bound pieces: masked softmax, its backward, layernorm and the
rectangle-overlap scan.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True, fastmath=True)
def _layernorm_fwd(x, gamma, beta, eps):
    n, f = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    inv = np.empty(n)
    for i in prange(n):
        mu = 0.0
        for j in range(f):
            mu += x[i, j]
        mu /= f
        var = 0.0
        for j in range(f):
            d = x[i, j] - mu
            var += d * d
        var /= f
        s = 1.0 / np.sqrt(var + eps)
        inv[i] = s
        for j in range(f):
            h = (x[i, j] - mu) * s
            xhat[i, j] = h
            y[i, j] = h * gamma[j] + beta[j]
    return y, xhat, inv


def layernorm_forward(x2d, gamma, beta, eps=1e-6):
    return _layernorm_fwd(
        np.ascontiguousarray(x2d), np.ascontiguousarray(gamma),
        np.ascontiguousarray(beta), eps,
    )


@njit(cache=True, parallel=True, fastmath=True)
def _layernorm_bwd_dx(dy, xhat, inv, gamma):
    n, f = dy.shape
    dx = np.empty_like(dy)
    for i in prange(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(f):
            g = dy[i, j] * gamma[j]
            m1 += g
            m2 += g * xhat[i, j]
        m1 /= f
        m2 /= f
        s = inv[i]
        for j in range(f):
            dx[i, j] = s * (dy[i, j] * gamma[j] - m1 - xhat[i, j] * m2)
    return dx


def layernorm_backward_dx(dy2d, xhat, inv, gamma):
    return _layernorm_bwd_dx(
        np.ascontiguousarray(dy2d), np.ascontiguousarray(xhat),
        np.ascontiguousarray(inv), np.ascontiguousarray(gamma),
    )


@njit(cache=True, parallel=True, fastmath=True)
def _masked_softmax(scores, key_valid):
    R, H, Tq, Tk = scores.shape
    out = np.empty_like(scores)
    for rh in prange(R * H):
        r = rh // H
        h = rh % H
        for i in range(Tq):
            m = -1e300
            n_valid = 0
            for j in range(Tk):
                if key_valid[r, j]:
                    n_valid += 1
                    s = scores[r, h, i, j]
                    if s > m:
                        m = s
            if n_valid == 0:
                for j in range(Tk):
                    out[r, h, i, j] = 0.0
                continue
            z = 0.0
            for j in range(Tk):
                if key_valid[r, j]:
                    e = np.exp(scores[r, h, i, j] - m)
                    out[r, h, i, j] = e
                    z += e
                else:
                    out[r, h, i, j] = 0.0
            zinv = 1.0 / z
            for j in range(Tk):
                out[r, h, i, j] *= zinv
    return out


def masked_softmax(scores, key_valid):
    return _masked_softmax(
        np.ascontiguousarray(scores), np.ascontiguousarray(key_valid)
    )


@njit(cache=True, parallel=True, fastmath=True)
def _softmax_backward_ds(probs, dp):
    R, H, Tq, Tk = probs.shape
    ds = np.empty_like(probs)
    for rh in prange(R * H):
        r = rh // H
        h = rh % H
        for i in range(Tq):
            rowdot = 0.0
            for j in range(Tk):
                rowdot += probs[r, h, i, j] * dp[r, h, i, j]
            for j in range(Tk):
                ds[r, h, i, j] = probs[r, h, i, j] * (dp[r, h, i, j] - rowdot)
    return ds


def softmax_backward_ds(probs, dp):
    return _softmax_backward_ds(
        np.ascontiguousarray(probs), np.ascontiguousarray(dp)
    )


def attention_forward(q, k, v, key_valid):
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    probs = masked_softmax(scores, key_valid)
    out = np.matmul(probs, v)
    return out, probs


def attention_backward(q, k, v, key_valid, probs, d_out):
    scale = 1.0 / np.sqrt(q.shape[-1])
    dv = np.matmul(np.swapaxes(probs, -1, -2), d_out)
    dp = np.matmul(d_out, np.swapaxes(v, -1, -2))
    ds = softmax_backward_ds(probs, dp)
    dq = np.matmul(ds, k) * scale
    dk = np.matmul(np.swapaxes(ds, -1, -2), q) * scale
    return dq, dk, dv


@njit(cache=True)
def _proj_interval(corners, ax, ay):
    lo = corners[0, 0] * ax + corners[0, 1] * ay
    hi = lo
    for c in range(1, 4):
        p = corners[c, 0] * ax + corners[c, 1] * ay
        if p < lo:
            lo = p
        if p > hi:
            hi = p
    return lo, hi


@njit(cache=True)
def _rects_intersect(ca, cb):
    # separating-axis test over the 4 edge normals
    for src in range(2):
        corners = ca if src == 0 else cb
        for e in range(2):
            ex = corners[e + 1, 0] - corners[e, 0]
            ey = corners[e + 1, 1] - corners[e, 1]
            ax, ay = -ey, ex
            alo, ahi = _proj_interval(ca, ax, ay)
            blo, bhi = _proj_interval(cb, ax, ay)
            if bhi < alo or blo > ahi:
                return False
    return True


@njit(cache=True, parallel=True)
def _rect_overlap_matrix(corners_a, corners_b):
    na = corners_a.shape[0]
    nb = corners_b.shape[0]
    out = np.zeros((na, nb), dtype=np.bool_)
    for i in prange(na):
        for j in range(nb):
            out[i, j] = _rects_intersect(corners_a[i], corners_b[j])
    return out


def rect_overlap_matrix(corners_a, corners_b):
    return _rect_overlap_matrix(
        np.ascontiguousarray(corners_a), np.ascontiguousarray(corners_b)
    )
