"""Pure-numpy reference implementations of the hot kernels."""

import numpy as np

_NEG = -1e30  # effective -inf that keeps exp() finite


def layernorm_forward(x2d, gamma, beta, eps=1e-6):
    mu = x2d.mean(axis=1, keepdims=True)
    xc = x2d - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, xhat, inv[:, 0]


def layernorm_backward_dx(dy2d, xhat, inv, gamma):
    dxhat = dy2d * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    return inv[:, None] * (dxhat - m1 - xhat * m2)


def masked_softmax(scores, key_valid):
    """Row softmax over the last axis restricted to valid keys (in place).

    scores: (R, H, Tq, Tk); key_valid: (R, Tk). Rows with no valid key
    become all-zero.
    """
    mask = key_valid[:, None, None, :]
    scores = np.where(mask, scores, _NEG)
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    e = np.where(mask, e, 0.0)
    z = e.sum(axis=-1, keepdims=True)
    return np.where(z > 0.0, e / np.where(z > 0.0, z, 1.0), 0.0)


def softmax_backward_ds(probs, dp):
    """ds = p * (dp - sum(dp * p)) along the last axis."""
    return probs * (dp - np.sum(dp * probs, axis=-1, keepdims=True))


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


def rect_overlap_matrix(corners_a, corners_b):
    na, nb = corners_a.shape[0], corners_b.shape[0]
    # candidate separating axes: edge normals of both rectangles (2 unique each)
    ea = corners_a[:, 1:3, :] - corners_a[:, 0:2, :]  # (Na, 2, 2)
    eb = corners_b[:, 1:3, :] - corners_b[:, 0:2, :]
    axes_a = np.stack([-ea[..., 1], ea[..., 0]], axis=-1)  # (Na, 2, 2)
    axes_b = np.stack([-eb[..., 1], eb[..., 0]], axis=-1)

    overlap = np.ones((na, nb), dtype=bool)
    # project onto A's axes
    pa = np.einsum("nkd,nad->nka", corners_a, axes_a)  # (Na, 4, 2ax)
    pb = np.einsum("mkd,nad->nmka", corners_b, axes_a)  # (Na, Nb, 4, 2ax)
    amin, amax = pa.min(axis=1), pa.max(axis=1)  # (Na, 2ax)
    bmin, bmax = pb.min(axis=2), pb.max(axis=2)  # (Na, Nb, 2ax)
    sep = (bmax < amin[:, None, :]) | (bmin > amax[:, None, :])
    overlap &= ~sep.any(axis=-1)
    # project onto B's axes
    pb2 = np.einsum("mkd,mad->mka", corners_b, axes_b)  # (Nb, 4, 2ax)
    pa2 = np.einsum("nkd,mad->nmka", corners_a, axes_b)  # (Na, Nb, 4, 2ax)
    bmin2, bmax2 = pb2.min(axis=1), pb2.max(axis=1)
    amin2, amax2 = pa2.min(axis=2), pa2.max(axis=2)
    sep2 = (amax2 < bmin2[None, :, :]) | (amin2 > bmax2[None, :, :])
    overlap &= ~sep2.any(axis=-1)
    return overlap
