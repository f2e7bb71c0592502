"""Building blocks with explicit forward caches and hand-written backward.

Parameters live in a flat dict name -> float64 array; every backward returns
input gradients and accumulates parameter gradients into a matching dict.
The attention core dispatches through scenediff.kernels (numba or numpy).
"""

from __future__ import annotations

import numpy as np

from .. import kernels


def _matmul2d(x, w):
    return x.reshape(-1, x.shape[-1]) @ w


def linear_init(params, name, d_in, d_out, rng, scale=None):
    std = np.sqrt(1.0 / d_in) if scale is None else scale
    params[f"{name}.w"] = rng.normal(0.0, std, size=(d_in, d_out))
    params[f"{name}.b"] = np.zeros(d_out)


def linear_fwd(params, name, x):
    w, b = params[f"{name}.w"], params[f"{name}.b"]
    y = _matmul2d(x, w).reshape(x.shape[:-1] + (w.shape[1],)) + b
    return y, x


def linear_bwd(params, grads, name, dy, x):
    w = params[f"{name}.w"]
    dy2 = dy.reshape(-1, dy.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    grads[f"{name}.w"] = grads.get(f"{name}.w", 0.0) + x2.T @ dy2
    grads[f"{name}.b"] = grads.get(f"{name}.b", 0.0) + dy2.sum(axis=0)
    return (dy2 @ w.T).reshape(x.shape)


def relu_fwd(x):
    mask = x > 0
    return x * mask, mask


def relu_bwd(dy, mask):
    return dy * mask


def mlp_init(params, name, dims, rng):
    """dims = (d_in, h1, ..., d_out); ReLU between all but the last layer."""
    for i in range(len(dims) - 1):
        scale = np.sqrt(2.0 / dims[i]) if i < len(dims) - 2 else np.sqrt(1.0 / dims[i])
        linear_init(params, f"{name}.l{i}", dims[i], dims[i + 1], rng, scale)


def mlp_fwd(params, name, x, n_layers):
    caches = []
    h = x
    for i in range(n_layers):
        h, xc = linear_fwd(params, f"{name}.l{i}", h)
        if i < n_layers - 1:
            h, mask = relu_fwd(h)
        else:
            mask = None
        caches.append((xc, mask))
    return h, caches


def mlp_bwd(params, grads, name, dy, caches):
    n_layers = len(caches)
    d = dy
    for i in reversed(range(n_layers)):
        xc, mask = caches[i]
        if mask is not None:
            d = relu_bwd(d, mask)
        d = linear_bwd(params, grads, f"{name}.l{i}", d, xc)
    return d


def layernorm_init(params, name, dim):
    params[f"{name}.g"] = np.ones(dim)
    params[f"{name}.b"] = np.zeros(dim)


def layernorm_fwd(params, name, x, eps=1e-6):
    f = x.shape[-1]
    y2, xhat, inv = kernels.layernorm_forward(
        x.reshape(-1, f), params[f"{name}.g"], params[f"{name}.b"], eps
    )
    return y2.reshape(x.shape), (xhat, inv, x.shape)


def layernorm_bwd(params, grads, name, dy, cache):
    xhat, inv, shape = cache
    f = shape[-1]
    dy2 = dy.reshape(-1, f)
    grads[f"{name}.g"] = grads.get(f"{name}.g", 0.0) + (dy2 * xhat).sum(axis=0)
    grads[f"{name}.b"] = grads.get(f"{name}.b", 0.0) + dy2.sum(axis=0)
    dx2 = kernels.layernorm_backward_dx(dy2, xhat, inv, params[f"{name}.g"])
    return dx2.reshape(shape)


def _split_heads(x, heads):
    R, T, F = x.shape
    return x.reshape(R, T, heads, F // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    R, H, T, D = x.shape
    return x.transpose(0, 2, 1, 3).reshape(R, T, H * D)


def mha_init(params, name, dim, rng, out_scale=None):
    for p in ("wq", "wv"):
        linear_init(params, f"{name}.{p}", dim, dim, rng)
    # no key bias: softmax is invariant to constant shifts along a score row
    std = np.sqrt(1.0 / dim)
    params[f"{name}.wk.w"] = rng.normal(0.0, std, size=(dim, dim))
    linear_init(params, f"{name}.wo", dim, dim, rng, scale=out_scale)


def _linear_nobias_fwd(params, name, x):
    w = params[f"{name}.w"]
    return _matmul2d(x, w).reshape(x.shape[:-1] + (w.shape[1],)), x


def _linear_nobias_bwd(params, grads, name, dy, x):
    w = params[f"{name}.w"]
    dy2 = dy.reshape(-1, dy.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    grads[f"{name}.w"] = grads.get(f"{name}.w", 0.0) + x2.T @ dy2
    return (dy2 @ w.T).reshape(x.shape)


def mha_fwd(params, name, xq, xkv, key_valid, heads):
    """Multi-head attention; xq (R,Tq,F), xkv (R,Tk,F), key_valid (R,Tk).

    Query rows whose key set is empty get zero attention output.
    """
    q, xq_c = linear_fwd(params, f"{name}.wq", xq)
    k, xk_c = _linear_nobias_fwd(params, f"{name}.wk", xkv)
    v, xv_c = linear_fwd(params, f"{name}.wv", xkv)
    qh, kh, vh = (_split_heads(a, heads) for a in (q, k, v))
    oh, probs = kernels.attention_forward(qh, kh, vh, key_valid)
    merged = _merge_heads(oh)
    out, merged_c = linear_fwd(params, f"{name}.wo", merged)
    cache = (xq_c, xk_c, xv_c, qh, kh, vh, key_valid, probs, merged_c, heads)
    return out, cache


def mha_bwd(params, grads, name, d_out, cache):
    xq_c, xk_c, xv_c, qh, kh, vh, key_valid, probs, merged_c, heads = cache
    d_merged = linear_bwd(params, grads, f"{name}.wo", d_out, merged_c)
    d_oh = _split_heads(d_merged, heads)
    dqh, dkh, dvh = kernels.attention_backward(qh, kh, vh, key_valid, probs, d_oh)
    dxq = linear_bwd(params, grads, f"{name}.wq", _merge_heads(dqh), xq_c)
    dxk = _linear_nobias_bwd(params, grads, f"{name}.wk", _merge_heads(dkh), xk_c)
    dxv = linear_bwd(params, grads, f"{name}.wv", _merge_heads(dvh), xv_c)
    return dxq, dxk + dxv


def block_init(params, name, dim, ffn_dim, rng, cross=False, out_scale=None):
    layernorm_init(params, f"{name}.ln1", dim)
    if cross:
        layernorm_init(params, f"{name}.lnkv", dim)
    mha_init(params, f"{name}.attn", dim, rng, out_scale=out_scale)
    layernorm_init(params, f"{name}.ln2", dim)
    linear_init(params, f"{name}.ffn0", dim, ffn_dim, rng, np.sqrt(2.0 / dim))
    linear_init(params, f"{name}.ffn1", ffn_dim, dim, rng, out_scale)


def block_fwd(params, name, x, key_valid, heads, kv=None):
    """Pre-layernorm transformer block. Self-attention when kv is None,
    otherwise cross-attention against kv (R,Tk,F)."""
    h, ln1_c = layernorm_fwd(params, f"{name}.ln1", x)
    if kv is None:
        attn, attn_c = mha_fwd(params, f"{name}.attn", h, h, key_valid, heads)
        lnkv_c = None
    else:
        kvn, lnkv_c = layernorm_fwd(params, f"{name}.lnkv", kv)
        attn, attn_c = mha_fwd(params, f"{name}.attn", h, kvn, key_valid, heads)
    x1 = x + attn
    h2, ln2_c = layernorm_fwd(params, f"{name}.ln2", x1)
    f0, f0_c = linear_fwd(params, f"{name}.ffn0", h2)
    f0r, relu_c = relu_fwd(f0)
    f1, f1_c = linear_fwd(params, f"{name}.ffn1", f0r)
    out = x1 + f1
    cache = (ln1_c, lnkv_c, attn_c, ln2_c, f0_c, relu_c, f1_c, kv is not None)
    return out, cache


def block_bwd(params, grads, name, d_out, cache):
    """Returns (dx, dkv); dkv is None for self-attention blocks."""
    ln1_c, lnkv_c, attn_c, ln2_c, f0_c, relu_c, f1_c, is_cross = cache
    d_f1 = linear_bwd(params, grads, f"{name}.ffn1", d_out, f1_c)
    d_f0 = relu_bwd(d_f1, relu_c)
    d_h2 = linear_bwd(params, grads, f"{name}.ffn0", d_f0, f0_c)
    d_x1 = d_out + layernorm_bwd(params, grads, f"{name}.ln2", d_h2, ln2_c)
    d_h, d_kv_in = mha_bwd(params, grads, f"{name}.attn", d_x1, attn_c)
    if is_cross:
        dx = d_x1 + layernorm_bwd(params, grads, f"{name}.ln1", d_h, ln1_c)
        dkv = layernorm_bwd(params, grads, f"{name}.lnkv", d_kv_in, lnkv_c)
        return dx, dkv
    # self-attention: queries and keys/values share the ln1 output
    dx = d_x1 + layernorm_bwd(params, grads, f"{name}.ln1", d_h + d_kv_in, ln1_c)
    return dx, None
