"""Synthetic driving worlds: desk-scale training corpora with known behaviors.

Each generated scene is a small multi-lane world (straight / curved / merge /
intersection geometry) populated by an ego agent, one "featured" actor whose
maneuver is drawn from the configured behavior mix, and lane-following
background traffic. Trajectories are built from arc-length parametrized lane
paths with smooth lateral blends, so speeds stay bounded and headings follow
the direction of motion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .roadgraph import build_roadgraph
from .scene import ContextFeatures, SceneTensor, wrap_angle

FAMILIES = ("straight", "curved", "merge", "intersection")
BEHAVIORS = ("lane_follow", "lane_change", "cut_in", "yield", "turn")

# geometry families able to host each maneuver
_COMPAT = {
    "lane_follow": FAMILIES,
    "lane_change": ("straight", "curved", "merge"),
    "cut_in": ("straight", "merge"),
    "yield": FAMILIES,
    "turn": ("intersection",),
}


def _normalized(probs, names, kind):
    w = np.array([float(probs.get(n, 0.0)) for n in names])
    if (w < 0).any():
        raise ValueError(f"{kind} probabilities must be non-negative")
    if w.sum() <= 0:
        raise ValueError(f"{kind} probabilities sum to zero")
    return dict(zip(names, w / w.sum()))


@dataclass
class SynthWorldConfig:
    families: dict = field(
        default_factory=lambda: {
            "straight": 0.35,
            "curved": 0.25,
            "merge": 0.2,
            "intersection": 0.2,
        }
    )
    behaviors: dict = field(
        default_factory=lambda: {
            "lane_follow": 0.3,
            "lane_change": 0.2,
            "cut_in": 0.2,
            "yield": 0.15,
            "turn": 0.15,
        }
    )
    agent_count: tuple = (2, 6)
    speed: tuple = (5.0, 11.0)
    speed_jitter: float = 0.4
    horizon: int = 40
    dt: float = 0.1
    lane_width: float = 3.5
    car_length: tuple = (4.2, 5.0)
    car_width: tuple = (1.8, 2.1)
    dropout: float = 0.15  # chance a background agent has a partial track

    def __post_init__(self):
        self.families = _normalized(self.families, FAMILIES, "family")
        self.behaviors = _normalized(self.behaviors, BEHAVIORS, "behavior")
        lo, hi = self.agent_count
        if not (1 <= lo <= hi):
            raise ValueError(f"bad agent_count range {self.agent_count}")
        lo, hi = self.speed
        if not (0 < lo <= hi):
            raise ValueError(f"bad speed range {self.speed}")
        if self.horizon < 2 or self.dt <= 0:
            raise ValueError("horizon must be >= 2 and dt > 0")
        if self.lane_width <= 0:
            raise ValueError("lane_width must be positive")
        for b, p in self.behaviors.items():
            if p > 0 and not any(self.families[f] > 0 for f in _COMPAT[b]):
                raise ValueError(
                    f"behavior {b!r} has weight but no compatible geometry family"
                )


@dataclass
class GeneratedWorld:
    roadgraph: object
    scene: SceneTensor
    context: ContextFeatures
    meta: dict


class _Path:
    """Arc-length parametrized dense polyline with normals."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=np.float64)
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        self.s = np.concatenate([[0.0], np.cumsum(seg)])
        self.length = float(self.s[-1])

    def pos_at(self, s):
        s = np.clip(s, 0.0, self.length)
        x = np.interp(s, self.s, self.points[:, 0])
        y = np.interp(s, self.s, self.points[:, 1])
        return np.stack([x, y], axis=-1)

    def tangent_at(self, s):
        eps = 1e-3
        p0 = self.pos_at(np.asarray(s) - eps)
        p1 = self.pos_at(np.asarray(s) + eps)
        d = p1 - p0
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        return d / np.maximum(n, 1e-12)

    def normal_at(self, s):
        t = self.tangent_at(s)
        return np.stack([-t[..., 1], t[..., 0]], axis=-1)


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _dense_line(p0, p1, step=0.5):
    n = max(int(np.ceil(np.linalg.norm(np.asarray(p1) - np.asarray(p0)) / step)), 2)
    return np.linspace(p0, p1, n)


def _dense_arc(center, radius, a0, a1, step=0.5):
    n = max(int(np.ceil(abs(a1 - a0) * radius / step)), 2)
    ang = np.linspace(a0, a1, n)
    return np.stack(
        [center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)], axis=1
    )


def _build_geometry(family, cfg, rng):
    """Returns (lane paths, extra map centerlines, turn connectors)."""
    lw = cfg.lane_width
    half = 80.0
    lanes, connectors = [], []
    if family == "straight":
        n_lanes = int(rng.integers(2, 4))
        for i in range(n_lanes):
            y = (i - (n_lanes - 1) / 2.0) * lw
            lanes.append(_Path(_dense_line([-half, y], [half, y])))
    elif family == "curved":
        n_lanes = 2
        radius = float(rng.uniform(28.0, 60.0))
        sweep = min(2.6, 2 * half / radius)
        for i in range(n_lanes):
            r = radius + (i - (n_lanes - 1) / 2.0) * lw
            pts = _dense_arc([0.0, radius], r, -np.pi / 2 - sweep / 2, -np.pi / 2 + sweep / 2)
            lanes.append(_Path(pts))
    elif family == "merge":
        # two through lanes plus a ramp blending into the rightmost lane
        for i in range(2):
            y = i * lw
            lanes.append(_Path(_dense_line([-half, y], [half, y])))
        xs = np.linspace(-half, half, 320)
        blend = 1.0 - _smoothstep((xs + half) / (0.55 * 2 * half))
        ys = -lw * 1.0 * blend
        lanes.append(_Path(np.stack([xs, ys], axis=1)))
    elif family == "intersection":
        # east-west and south-north single roads crossing at the origin
        lanes.append(_Path(_dense_line([-half, 0.0], [half, 0.0])))
        lanes.append(_Path(_dense_line([0.0, -half], [0.0, half])))
        # right/left turn connectors from the EW road onto the NS road
        r_right, r_left = 8.0, 12.0
        approach = _dense_line([-half, 0.0], [-r_right, 0.0])
        arc = _dense_arc([-r_right, -r_right], r_right, np.pi / 2, 0.0)
        exit_ = _dense_line([0.0, -r_right], [0.0, -half])
        connectors.append(_Path(np.concatenate([approach, arc[1:], exit_[1:]])))
        approach = _dense_line([-half, 0.0], [-r_left, 0.0])
        arc = _dense_arc([-r_left, r_left], r_left, -np.pi / 2, 0.0)
        exit_ = _dense_line([0.0, r_left], [0.0, half])
        connectors.append(_Path(np.concatenate([approach, arc[1:], exit_[1:]])))
    else:  # pragma: no cover
        raise ValueError(f"unknown family {family}")
    return lanes, connectors


def _speed_profile(v0, cfg, T, rng):
    v = np.full(T, v0)
    if cfg.speed_jitter > 0:
        amp = rng.uniform(0.0, cfg.speed_jitter)
        phase = rng.uniform(0.0, 2 * np.pi)
        freq = rng.uniform(0.2, 0.6)
        v = v + amp * np.sin(phase + freq * np.arange(T) * cfg.dt * 2 * np.pi)
    return np.clip(v, 0.3, None)


def _rollout(path, s0, speeds, lateral, cfg):
    """Positions + headings for an agent tracking `path` with lateral offsets."""
    T = speeds.shape[0]
    ds = speeds * cfg.dt
    s = s0 + np.concatenate([[0.0], np.cumsum(ds[:-1])])
    pos = path.pos_at(s) + lateral[:, None] * path.normal_at(s)
    head = np.zeros(T)
    d = np.diff(pos, axis=0)
    head[:-1] = np.arctan2(d[:, 1], d[:, 0])
    head[-1] = head[-2] if T > 1 else 0.0
    # degenerate (near-zero) displacements inherit the previous heading
    small = np.linalg.norm(d, axis=1) < 1e-6
    for t in np.nonzero(small)[0]:
        if t > 0:
            head[t] = head[t - 1]
        else:
            tang = path.tangent_at(s0)
            head[t] = np.arctan2(tang[1], tang[0])
    states = np.concatenate([pos, wrap_angle(head)[:, None]], axis=1)
    return states, s


def _lateral_blend(T, dt, t_start, duration, off0, off1):
    t = np.arange(T) * dt
    u = (t - t_start) / max(duration, 1e-6)
    return off0 + (off1 - off0) * _smoothstep(u)


def _place_agent(rng, path, speed, T, dt, taken, min_gap=10.0):
    """Draw a start offset leaving min_gap to same-path agents."""
    travel = speed * T * dt
    lo, hi = 4.0, max(path.length - travel - 4.0, 6.0)
    for _ in range(24):
        s0 = float(rng.uniform(lo, hi))
        if all(abs(s0 - o) >= min_gap for o in taken):
            return s0
    return float(rng.uniform(lo, hi))


def generate_world(config, rng):
    """Generate one synthetic world; deterministic in (config, rng state)."""
    cfg = config
    T, dt = cfg.horizon, cfg.dt

    names = list(cfg.behaviors)
    probs = np.array([cfg.behaviors[n] for n in names])
    featured = names[rng.choice(len(names), p=probs)]
    fam_names = [f for f in _COMPAT[featured] if cfg.families[f] > 0]
    fam_probs = np.array([cfg.families[f] for f in fam_names])
    family = fam_names[rng.choice(len(fam_names), p=fam_probs / fam_probs.sum())]

    lanes, connectors = _build_geometry(family, cfg, rng)
    n_agents = int(rng.integers(cfg.agent_count[0], cfg.agent_count[1] + 1))
    if n_agents < 1:
        raise ValueError("config yields zero agents")
    if not lanes:
        raise ValueError("geometry has no lanes for agents")

    states = np.zeros((n_agents, T, 3))
    valid = np.ones((n_agents, T), dtype=bool)
    behaviors = ["lane_follow"] * n_agents
    taken_per_lane = {i: [] for i in range(len(lanes) + len(connectors))}

    # --- ego (agent 0): lane follower on a through lane
    if featured == "cut_in":
        # keep the ego on a lane with a real neighbor to merge from
        ego_lane_i = int(rng.integers(0, min(2, len(lanes))))
    else:
        ego_lane_i = int(rng.integers(0, len(lanes)))
    ego_speed = float(rng.uniform(*cfg.speed))
    ego_path = lanes[ego_lane_i]
    ego_s0 = _place_agent(rng, ego_path, ego_speed, T, dt, taken_per_lane[ego_lane_i])
    taken_per_lane[ego_lane_i].append(ego_s0)
    ego_speeds = _speed_profile(ego_speed, cfg, T, rng)
    states[0], ego_s = _rollout(ego_path, ego_s0, ego_speeds, np.zeros(T), cfg)

    actor_index = None
    cutin_pair = None
    if n_agents >= 2:
        actor_index = 1
        behaviors[1] = featured
        states[1] = _featured_actor(
            featured, cfg, rng, lanes, connectors, ego_lane_i, ego_s, ego_speeds, taken_per_lane
        )
        if featured == "cut_in":
            cutin_pair = (0, 1)

    # --- background traffic (same-lane agents share a similar speed so
    # followers do not drive through leaders)
    lane_speed = {ego_lane_i: ego_speed}
    for a in range(2, n_agents):
        li = int(rng.integers(0, len(lanes)))
        base = lane_speed.setdefault(li, float(rng.uniform(*cfg.speed)))
        sp = float(np.clip(base + rng.uniform(-0.5, 0.5), *cfg.speed))
        s0 = _place_agent(rng, lanes[li], sp, T, dt, taken_per_lane[li])
        taken_per_lane[li].append(s0)
        states[a], _ = _rollout(lanes[li], s0, _speed_profile(sp, cfg, T, rng), np.zeros(T), cfg)
        if rng.random() < cfg.dropout:
            span = int(rng.integers(max(8, T // 4), T))
            start = int(rng.integers(0, T - span + 1))
            valid[a] = False
            valid[a, start : start + span] = True

    # random rigid motion of the whole world
    ang = float(rng.uniform(-np.pi, np.pi))
    off = rng.uniform(-30.0, 30.0, size=2)
    rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    states[..., :2] = states[..., :2] @ rot.T + off
    states[..., 2] = wrap_angle(states[..., 2] + ang)

    centerlines = [p.points for p in lanes] + [p.points for p in connectors]
    centerlines = [c @ rot.T + off for c in centerlines]
    graph = build_roadgraph(centerlines)

    states[~valid] = 0.0
    scene = SceneTensor(states, valid, dt)

    vel = np.zeros((n_agents, T, 2))
    vel[:, :-1] = np.diff(scene.positions, axis=1) / dt
    vel[:, -1] = vel[:, -2]
    # forward differences are garbage wherever the next step is invalid
    for a in range(n_agents):
        for t in range(T):
            if valid[a, t] and (t + 1 >= T or not valid[a, t + 1]):
                vel[a, t] = vel[a, t - 1] if t > 0 and valid[a, t - 1] else 0.0
    vel[~valid] = 0.0
    ctx = ContextFeatures(
        velocity=vel,
        length=rng.uniform(*cfg.car_length, size=n_agents),
        width=rng.uniform(*cfg.car_width, size=n_agents),
        agent_type=np.zeros(n_agents, dtype=np.int64),
    )
    meta = {
        "family": family,
        "behaviors": behaviors,
        "featured": featured,
        "ego_index": 0,
        "actor_index": actor_index,
        "cutin_pair": cutin_pair,
    }
    return GeneratedWorld(graph, scene, ctx, meta)


def _featured_actor(
    featured, cfg, rng, lanes, connectors, ego_lane_i, ego_s, ego_speeds, taken
):
    T, dt = cfg.horizon, cfg.dt
    lw = cfg.lane_width

    if featured == "turn":
        path = connectors[int(rng.integers(0, len(connectors)))]
        sp = float(rng.uniform(*cfg.speed)) * 0.8
        # start so the arc is traversed inside the horizon
        turn_s = 80.0 - 12.0  # approach length up to the arc start
        s0 = turn_s - sp * dt * rng.uniform(0.3 * T, 0.7 * T)
        s0 = float(np.clip(s0, 2.0, path.length - sp * T * dt - 2.0))
        states, _ = _rollout(path, s0, _speed_profile(sp, cfg, T, rng), np.zeros(T), cfg)
        return states

    if featured == "cut_in":
        # merge into the ego lane a short gap ahead of the ego, timed so the
        # ego reaches the merge point within the horizon (and within 3 s)
        ego_path = lanes[ego_lane_i]
        sides = [s for s in (1.0, -1.0) if 0 <= ego_lane_i + s < len(lanes)]
        side_sign = sides[int(rng.integers(0, len(sides)))] if sides else 1.0
        v_e = float(ego_speeds.mean())
        v_a = float(np.clip(v_e * rng.uniform(0.95, 1.15), *cfg.speed))
        t_end = (T - 1) * dt
        t_m_hi = min(2.8, t_end - 1.0, t_end - 0.3 - 3.2 / max(v_e, 1.0))
        t_m = float(rng.uniform(1.6, max(1.61, t_m_hi)))
        dur = float(rng.uniform(1.0, min(1.8, t_m - 0.3)))
        gap_lo = 3.0 + max(0.0, v_a - v_e) * dur
        gap_hi = min((t_end - t_m - 0.3) * v_e, 0.8 * 3.0 * v_e)
        gap = float(rng.uniform(gap_lo, max(gap_hi, gap_lo + 0.5)))
        k_m = min(int(round(t_m / dt)), T - 2)
        s_merge = ego_s[k_m] + gap
        s0 = s_merge - v_a * t_m
        speeds = _speed_profile(v_a, cfg, T, rng)
        lateral = _lateral_blend(T, dt, t_m - dur, dur, side_sign * lw, 0.0)
        states, _ = _rollout(ego_path, s0, speeds, lateral, cfg)
        return states

    if featured == "lane_change":
        li = int(rng.integers(0, len(lanes)))
        target = li + 1 if li + 1 < len(lanes) else li - 1
        off1 = (target - li) * lw
        sp = float(rng.uniform(*cfg.speed))
        s0 = _place_agent(rng, lanes[li], sp, T, dt, taken[li])
        taken[li].append(s0)
        t_start = float(rng.uniform(0.4, max(0.5, (T - 4) * dt - 2.2)))
        dur = float(rng.uniform(1.6, 2.4))
        lateral = _lateral_blend(T, dt, t_start, dur, 0.0, off1)
        states, _ = _rollout(lanes[li], s0, _speed_profile(sp, cfg, T, rng), lateral, cfg)
        return states

    if featured == "yield":
        li = int(rng.integers(0, len(lanes)))
        v0 = float(rng.uniform(*cfg.speed))
        s0 = _place_agent(rng, lanes[li], v0, T, dt, taken[li])
        taken[li].append(s0)
        t_y = float(rng.uniform(0.4, max(0.5, (T - 6) * dt - 1.5)))
        f = float(rng.uniform(0.15, 0.4))
        u = _smoothstep((np.arange(T) * dt - t_y) / 1.5)
        speeds = v0 * (1.0 - (1.0 - f) * u)
        states, _ = _rollout(lanes[li], s0, speeds, np.zeros(T), cfg)
        return states

    # lane_follow
    li = int(rng.integers(0, len(lanes)))
    sp = float(rng.uniform(*cfg.speed))
    s0 = _place_agent(rng, lanes[li], sp, T, dt, taken[li])
    taken[li].append(s0)
    states, _ = _rollout(lanes[li], s0, _speed_profile(sp, cfg, T, rng), np.zeros(T), cfg)
    return states
