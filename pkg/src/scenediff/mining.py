"""Cut-in mining: label trajectory pairs from footprint-overlap heuristics.

A pair (ego, other) is a positive cut-in when some future state of the other
agent overlaps a future state of the ego within a 3-second lead window
(t_ego - 3s < t_other < t_ego), unless the other agent's initial state
already overlaps the ego trajectory (plain lane following). Non-positives
whose closest approach is under 5 m are negatives; everything else is
dropped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels

LEAD_WINDOW_S = 3.0
NEGATIVE_DISTANCE_M = 5.0


@dataclass
class CutInExample:
    """One mined trajectory pair with extents; label set by the miner only."""

    ego_states: np.ndarray  # (T, 3) world frame
    ego_valid: np.ndarray  # (T,)
    other_states: np.ndarray
    other_valid: np.ndarray
    ego_size: tuple  # (length, width) m
    other_size: tuple
    label: int  # 1 positive cut-in, 0 negative
    meta: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "ego_states": self.ego_states.tolist(),
            "ego_valid": self.ego_valid.astype(int).tolist(),
            "other_states": self.other_states.tolist(),
            "other_valid": self.other_valid.astype(int).tolist(),
            "ego_size": list(self.ego_size),
            "other_size": list(self.other_size),
            "label": int(self.label),
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            np.asarray(d["ego_states"], dtype=np.float64),
            np.asarray(d["ego_valid"], dtype=bool),
            np.asarray(d["other_states"], dtype=np.float64),
            np.asarray(d["other_valid"], dtype=bool),
            tuple(d["ego_size"]),
            tuple(d["other_size"]),
            int(d["label"]),
            d.get("meta", {}),
        )


def write_examples_jsonl(path, examples):
    with open(path, "w") as f:
        for ex in examples:
            f.write(json.dumps(ex.to_json()) + "\n")


def read_examples_jsonl(path):
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                out.append(CutInExample.from_json(json.loads(line)))
    return out


def footprint_corners(states, length, width):
    """Oriented rectangle corners (N, 4, 2) for states (N, 3)."""
    states = np.asarray(states, dtype=np.float64)
    c, s = np.cos(states[:, 2]), np.sin(states[:, 2])
    fwd = np.stack([c, s], axis=1) * (length / 2.0)
    left = np.stack([-s, c], axis=1) * (width / 2.0)
    ctr = states[:, :2]
    return np.stack(
        [ctr + fwd + left, ctr + fwd - left, ctr - fwd - left, ctr - fwd + left],
        axis=1,
    )


def label_pair(ego_states, ego_valid, other_states, other_valid,
               ego_size, other_size, dt,
               lead_window_s=LEAD_WINDOW_S, negative_distance=NEGATIVE_DISTANCE_M):
    """Classify one ordered pair; returns 1 (positive), 0 (negative) or None."""
    if ego_size is None or other_size is None:
        raise ValueError("cut-in mining needs agent extents")
    te = np.nonzero(np.asarray(ego_valid, dtype=bool))[0]
    to = np.nonzero(np.asarray(other_valid, dtype=bool))[0]
    if te.size == 0 or to.size == 0:
        return None

    ce = footprint_corners(ego_states[te], *ego_size)
    co = footprint_corners(other_states[to], *other_size)
    overlap = kernels.rect_overlap_matrix(ce, co)  # (|te|, |to|)

    # lead-window band: t_ego - 3s < t_other < t_ego, strict on both sides
    dt_steps = (te[:, None] - to[None, :]) * dt
    band = (dt_steps > 0.0) & (dt_steps < lead_window_s)
    candidate = bool((overlap & band).any())

    if candidate:
        # drop lane-following: other's initial state overlapping any ego state
        lane_follow = bool(kernels.rect_overlap_matrix(ce, co[:1]).any())
        if not lane_follow:
            return 1
    # negative: closest center distance under threshold at any step pair
    diff = ego_states[te, None, :2] - other_states[None, to, :2]
    min_dist = float(np.sqrt((diff**2).sum(-1)).min())
    return 0 if min_dist < negative_distance else None


def mine_cutins(worlds, pairs="all"):
    """Mine labeled examples from generated worlds.

    ``pairs``: 'all' scans every ordered agent pair; 'ego' pairs the scene
    ego with each other agent. Returns a list of CutInExample.
    """
    out = []
    for wi, w in enumerate(worlds):
        scene, ctx, meta = w.scene, w.context, w.meta
        if not ctx.has_size:
            raise ValueError("cut-in mining needs agent extents in the context")
        A = scene.agent_count
        if pairs == "ego":
            pair_iter = [(meta["ego_index"], b) for b in range(A) if b != meta["ego_index"]]
        else:
            pair_iter = [(a, b) for a in range(A) for b in range(A) if a != b]
        for a, b in pair_iter:
            label = label_pair(
                scene.states[a], scene.valid[a], scene.states[b], scene.valid[b],
                (ctx.length[a], ctx.width[a]), (ctx.length[b], ctx.width[b]),
                scene.dt,
            )
            if label is None:
                continue
            out.append(
                CutInExample(
                    scene.states[a].copy(), scene.valid[a].copy(),
                    scene.states[b].copy(), scene.valid[b].copy(),
                    (float(ctx.length[a]), float(ctx.width[a])),
                    (float(ctx.length[b]), float(ctx.width[b])),
                    label,
                    meta={"scene": wi, "ego": int(a), "other": int(b)},
                )
            )
    return out
