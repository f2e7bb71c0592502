"""Packing normalized scenes into padded network batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .roadgraph import POLYLINE_LEN
from .scene import ego_normalize


@dataclass
class SceneBatch:
    """Padded arrays for one network call; everything in the scaled ego frame.

    x0: (B, A, T, 3) clean states (zeros outside valid)
    valid, observed: (B, A, T) bool, observed implies valid
    ctx: (B, A, T, C) context channels
        [vx, vy, length, width, size_flag, observed_flag]; velocities are
        zeroed outside the observed set (unknown at sampling time)
    map_feat: (B, L, 30) flattened polyline coords + pad flags
    map_valid: (B, L) real-polyline flags
    """

    x0: np.ndarray
    valid: np.ndarray
    observed: np.ndarray
    ctx: np.ndarray
    map_feat: np.ndarray
    map_valid: np.ndarray

    @property
    def batch_size(self):
        return self.x0.shape[0]

    def latent(self):
        return self.valid & ~self.observed


def context_channels(ctx, observed):
    """(A, T, 6) raw context block for one scene."""
    A, T, _ = ctx.velocity.shape
    out = np.zeros((A, T, 6))
    out[..., 0:2] = np.where(observed[..., None], ctx.velocity, 0.0)
    if ctx.has_size:
        out[..., 2] = ctx.length[:, None]
        out[..., 3] = ctx.width[:, None]
        out[..., 4] = 1.0
    out[..., 5] = observed
    return out


def polyline_features(graph):
    """(L, 30) per-polyline input: 10 points + 10 pad flags, flattened."""
    pts, pad = graph.to_arrays()
    L = pts.shape[0]
    feat = np.zeros((L, 3 * POLYLINE_LEN))
    if L:
        feat[:, : 2 * POLYLINE_LEN] = pts.reshape(L, -1)
        feat[:, 2 * POLYLINE_LEN :] = pad
    return feat


def pack_scenes(entries):
    """Build a SceneBatch from (scene, mask, ctx, graph) tuples.

    Scenes share the horizon T; agent and polyline counts are padded to the
    batch maximum with invalid slots.
    """
    if not entries:
        raise ValueError("empty batch")
    T = entries[0][0].horizon
    max_a = max(e[0].agent_count for e in entries)
    feats = [polyline_features(e[3]) for e in entries]
    max_l = max(f.shape[0] for f in feats)
    B = len(entries)

    x0 = np.zeros((B, max_a, T, 3))
    valid = np.zeros((B, max_a, T), dtype=bool)
    observed = np.zeros((B, max_a, T), dtype=bool)
    ctx = np.zeros((B, max_a, T, 6))
    map_feat = np.zeros((B, max_l, 30))
    map_valid = np.zeros((B, max_l), dtype=bool)

    for i, (scene, mask, c, _) in enumerate(entries):
        if scene.horizon != T:
            raise ValueError("scenes in a batch must share the horizon")
        mask.validate_against(scene)
        a = scene.agent_count
        x0[i, :a] = scene.states
        valid[i, :a] = scene.valid
        observed[i, :a] = mask.observed
        ctx[i, :a] = context_channels(c, mask.observed)
        f = feats[i]
        map_feat[i, : f.shape[0]] = f
        map_valid[i, : f.shape[0]] = True
    return SceneBatch(x0, valid, observed, ctx, map_feat, map_valid)


def normalize_entry(scene, mask, ctx, graph, ego_index, t_obs, scales):
    """Ego-normalize a world-frame scene plus its map for the network."""
    norm, frame, nctx = ego_normalize(scene, ego_index, t_obs, scales, ctx=ctx)
    ngraph = graph.transformed(frame)
    return (norm, mask, nctx, ngraph), frame
