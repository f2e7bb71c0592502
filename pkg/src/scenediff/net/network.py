"""The factorized-attention denoiser and its preconditioning adapter.

The network consumes a fixed (B, A, T, F) feature tensor built from
sinusoidal encodings of the noisy latent states, the clean observed states,
the scenario-time index and the noise level, concatenated with raw context
channels. The trunk alternates per-agent time attention, per-timestep agent
attention and cross-attention over lane embeddings; padded slots are never
attended to.
"""

from __future__ import annotations

import numpy as np

from ..diffusion import precondition
from . import layers
from .config import NetworkConfig
from .encoding import sinusoid_encode


class ScoreNetwork:
    """All learnable weights plus forward/backward passes."""

    def __init__(self, config: NetworkConfig, rng=None, params=None):
        self.config = config
        if params is not None:
            self.params = params
            self._validate_shapes()
            return
        if rng is None:
            rng = np.random.default_rng(0)
        p = {}
        c = config
        # residual-branch outputs are down-scaled for depth stability
        out_scale = np.sqrt(1.0 / c.feature_dim) / np.sqrt(2.0 * len(c.layer_pattern))
        layers.mlp_init(p, "in_mlp", (c.input_dim, c.input_hidden, c.feature_dim), rng)
        map_dims = (30,) + (c.map_hidden,) * (c.map_layers - 1) + (c.feature_dim,)
        layers.mlp_init(p, "map_mlp", map_dims, rng)
        for i, kind in enumerate(c.layer_pattern):
            layers.block_init(
                p, f"blk{i}", c.feature_dim, c.ffn_dim, rng,
                cross=(kind == "map"), out_scale=out_scale,
            )
        layers.layernorm_init(p, "final_ln", c.feature_dim)
        layers.mlp_init(p, "out_mlp", (c.feature_dim, c.out_hidden, 3), rng)
        self.params = p

    def _validate_shapes(self):
        ref = ScoreNetwork(self.config, rng=np.random.default_rng(0))
        if set(ref.params) != set(self.params):
            missing = set(ref.params) ^ set(self.params)
            raise ValueError(f"parameter names do not match config: {missing}")
        for k, v in ref.params.items():
            if self.params[k].shape != v.shape:
                raise ValueError(
                    f"parameter {k} has shape {self.params[k].shape}, "
                    f"expected {v.shape}"
                )

    def param_count(self):
        return sum(v.size for v in self.params.values())

    def zero_like_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # ---- input embedding ------------------------------------------------

    def encode_inputs(self, x_lat_in, x_obs_in, ctx, tau):
        """Concatenated sinusoidal encodings + context -> (B, A, T, D_in).

        The noise level enters as c_noise(tau) = ln(tau)/4, the denoiser's
        conditioning input; encoding raw tau would alias at sampling noise
        levels far outside the training distribution.
        """
        c = self.config
        B, A, T, _ = x_lat_in.shape
        enc_lat = sinusoid_encode(x_lat_in, c.state_spec).reshape(B, A, T, -1)
        enc_obs = sinusoid_encode(x_obs_in, c.state_spec).reshape(B, A, T, -1)
        t_idx = np.arange(T, dtype=np.float64)
        enc_t = np.broadcast_to(
            sinusoid_encode(t_idx, c.time_spec)[None, None], (B, A, T, c.time_enc_dim)
        )
        c_noise = 0.25 * np.log(np.asarray(tau, dtype=np.float64))
        enc_tau = np.broadcast_to(
            sinusoid_encode(c_noise, c.tau_spec)[:, None, None, :],
            (B, A, T, c.tau_enc_dim),
        )
        return np.concatenate([enc_lat, enc_obs, enc_t, enc_tau, ctx], axis=-1)

    # ---- forward / backward ---------------------------------------------

    def forward(self, x_lat_in, x_obs_in, valid, ctx, tau, map_feat, map_valid,
                want_cache=False):
        """Run F_theta.

        x_lat_in, x_obs_in: (B, A, T, 3) pre-scaled and zero-padded inputs;
        valid: (B, A, T); ctx: (B, A, T, ctx_dim); tau: (B,);
        map_feat: (B, L, 30); map_valid: (B, L).
        Returns (B, A, T, 3) estimates (plus a cache when requested).
        """
        c = self.config
        p = self.params
        B, A, T, _ = x_lat_in.shape
        L = map_feat.shape[1]

        feats = self.encode_inputs(x_lat_in, x_obs_in, ctx, tau)
        h, in_c = layers.mlp_fwd(p, "in_mlp", feats, 2)
        m, map_c = layers.mlp_fwd(p, "map_mlp", map_feat, c.map_layers)

        blk_caches = []
        for i, kind in enumerate(c.layer_pattern):
            name = f"blk{i}"
            if kind == "time":
                x2 = h.reshape(B * A, T, c.feature_dim)
                kv_valid = valid.reshape(B * A, T)
                x2, cache = layers.block_fwd(p, name, x2, kv_valid, c.num_heads)
                h = x2.reshape(B, A, T, c.feature_dim)
            elif kind == "agent":
                x2 = h.transpose(0, 2, 1, 3).reshape(B * T, A, c.feature_dim)
                kv_valid = valid.transpose(0, 2, 1).reshape(B * T, A)
                x2, cache = layers.block_fwd(p, name, x2, kv_valid, c.num_heads)
                h = x2.reshape(B, T, A, c.feature_dim).transpose(0, 2, 1, 3)
            else:  # map cross-attention
                x2 = h.reshape(B, A * T, c.feature_dim)
                x2, cache = layers.block_fwd(
                    p, name, x2, map_valid, c.num_heads, kv=m
                )
                h = x2.reshape(B, A, T, c.feature_dim)
            blk_caches.append(cache)

        hf, fln_c = layers.layernorm_fwd(p, "final_ln", h)
        out, out_c = layers.mlp_fwd(p, "out_mlp", hf, 2)
        if not want_cache:
            return out
        cache = {
            "shape": (B, A, T, L),
            "in": in_c,
            "map": map_c,
            "blocks": blk_caches,
            "final_ln": fln_c,
            "out": out_c,
            "valid": valid,
            "map_valid": map_valid,
        }
        return out, cache

    def backward(self, d_out, cache):
        """Gradients of every parameter given dLoss/dF. Returns a grads dict."""
        c = self.config
        p = self.params
        B, A, T, L = cache["shape"]
        valid = cache["valid"]
        grads = {}

        d_hf = layers.mlp_bwd(p, grads, "out_mlp", d_out, cache["out"])
        d_h = layers.layernorm_bwd(p, grads, "final_ln", d_hf, cache["final_ln"])

        d_m = np.zeros((B, L, c.feature_dim))
        for i in reversed(range(len(c.layer_pattern))):
            kind = c.layer_pattern[i]
            name = f"blk{i}"
            blk_cache = cache["blocks"][i]
            if kind == "time":
                d2 = d_h.reshape(B * A, T, c.feature_dim)
                d2, _ = layers.block_bwd(p, grads, name, d2, blk_cache)
                d_h = d2.reshape(B, A, T, c.feature_dim)
            elif kind == "agent":
                d2 = d_h.transpose(0, 2, 1, 3).reshape(B * T, A, c.feature_dim)
                d2, _ = layers.block_bwd(p, grads, name, d2, blk_cache)
                d_h = d2.reshape(B, T, A, c.feature_dim).transpose(0, 2, 1, 3)
            else:
                d2 = d_h.reshape(B, A * T, c.feature_dim)
                d2, dkv = layers.block_bwd(p, grads, name, d2, blk_cache)
                d_h = d2.reshape(B, A, T, c.feature_dim)
                d_m = d_m + dkv

        layers.mlp_bwd(p, grads, "map_mlp", d_m, cache["map"])
        layers.mlp_bwd(p, grads, "in_mlp", d_h, cache["in"])
        # input encodings carry no parameters; stop here
        for k, v in self.params.items():
            if k not in grads:
                grads[k] = np.zeros_like(v)
        return grads


class NetDenoiser:
    """Preconditioned denoiser D = c_skip * x_lat + c_out * F_theta(c_in * x_lat, ...).

    Observed slots pass through clean; invalid slots are zero.
    """

    def __init__(self, network: ScoreNetwork, diffusion_config):
        self.network = network
        self.dconfig = diffusion_config

    def _prepare(self, batch, x, tau):
        tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
        if tau.shape[0] == 1 and x.shape[0] > 1:
            tau = np.repeat(tau, x.shape[0])
        co = precondition(tau, self.dconfig.sigma_data)
        latent = (batch.valid & ~batch.observed)[..., None]
        obs3 = batch.observed[..., None]
        x_lat = np.where(latent, x, 0.0)
        x_obs = np.where(obs3, x, 0.0)
        bc = (slice(None),) + (None,) * (x.ndim - 1)
        x_lat_in = x_lat * co.c_in[bc]
        return tau, co, latent, obs3, x_lat, x_obs, x_lat_in

    def denoise(self, batch, x, tau, want_cache=False):
        tau, co, latent, obs3, x_lat, x_obs, x_lat_in = self._prepare(batch, x, tau)
        bc = (slice(None),) + (None,) * (x.ndim - 1)
        ret = self.network.forward(
            x_lat_in, x_obs, batch.valid, batch.ctx, tau,
            batch.map_feat, batch.map_valid, want_cache=want_cache,
        )
        F, cache = ret if want_cache else (ret, None)
        D_lat = co.c_skip[bc] * x_lat + co.c_out[bc] * F
        D = np.where(obs3, x, np.where(latent, D_lat, 0.0))
        if not want_cache:
            return D
        return D, {"net": cache, "co": co, "latent": latent, "bc": bc}

    def backward(self, dD, cache):
        """Parameter gradients given dLoss/dD (only latent slots count)."""
        co, latent, bc = cache["co"], cache["latent"], cache["bc"]
        dF = np.where(latent, dD, 0.0) * co.c_out[bc]
        return self.network.backward(dF, cache["net"])

    def as_denoise_fn(self, batch):
        return lambda x, tau: self.denoise(batch, x, tau)

    def as_score_fn(self, batch):
        def score_fn(x, tau):
            D = self.denoise(batch, x, tau)
            t2 = float(tau) ** 2
            return (D - x) / t2

        return score_fn
