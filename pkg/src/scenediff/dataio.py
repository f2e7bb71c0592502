"""Scene/map JSON schemas (versioned) and the corpus container.

Scene JSON v1:
    {"version": 1, "dt": s, "ego_id": int,
     "agents": [{"id": int, "type": int?, "length": m?, "width": m?,
                 "states": [{"t": int, "x": m, "y": m, "heading": rad,
                             "vx": m/s, "vy": m/s, "valid": bool}, ...]}]}
Map JSON v1:
    {"version": 1, "polylines": [{"points": [[x, y] * 10],
                                  "pad": [bool * 10]}]}

Corpora are stored as one compressed npz of padded arrays plus a JSON
manifest carrying the generator config, the seed and the fitted feature
scales.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .roadgraph import POLYLINE_LEN, RoadGraph
from .scene import ContextFeatures, FeatureScales, SceneTensor
from .worldgen import BEHAVIORS, FAMILIES, GeneratedWorld, SynthWorldConfig

SCENE_SCHEMA_VERSION = 1
MAP_SCHEMA_VERSION = 1
CORPUS_VERSION = 1


def scene_to_json(scene, ctx=None, ego_index=0):
    agents = []
    A, T = scene.valid.shape
    for a in range(A):
        entry = {"id": int(a), "states": []}
        if ctx is not None and ctx.has_size:
            entry["length"] = float(ctx.length[a])
            entry["width"] = float(ctx.width[a])
        if ctx is not None and ctx.has_type:
            entry["type"] = int(ctx.agent_type[a])
        for t in range(T):
            x, y, h = scene.states[a, t]
            vx, vy = (0.0, 0.0) if ctx is None else map(float, ctx.velocity[a, t])
            entry["states"].append(
                {
                    "t": int(t),
                    "x": float(x),
                    "y": float(y),
                    "heading": float(h),
                    "vx": vx,
                    "vy": vy,
                    "valid": bool(scene.valid[a, t]),
                }
            )
        agents.append(entry)
    return {
        "version": SCENE_SCHEMA_VERSION,
        "dt": scene.dt,
        "ego_id": int(ego_index),
        "agents": agents,
    }


def scene_from_json(doc):
    """Returns (scene, ctx, ego_index). Raises ValueError on schema issues."""
    if doc.get("version") != SCENE_SCHEMA_VERSION:
        raise ValueError(f"unsupported scene schema version {doc.get('version')}")
    agents = doc.get("agents")
    if not agents:
        raise ValueError("scene needs at least one agent")
    T = len(agents[0]["states"])
    A = len(agents)
    states = np.zeros((A, T, 3))
    valid = np.zeros((A, T), dtype=bool)
    vel = np.zeros((A, T, 2))
    has_size = all("length" in a and "width" in a for a in agents)
    length = np.zeros(A)
    width = np.zeros(A)
    atype = np.zeros(A, dtype=np.int64)
    has_type = all("type" in a for a in agents)
    for i, a in enumerate(agents):
        if len(a["states"]) != T:
            raise ValueError("all agents must share the horizon")
        for s in a["states"]:
            t = int(s["t"])
            if not 0 <= t < T:
                raise ValueError(f"state index {t} outside horizon {T}")
            states[i, t] = (s["x"], s["y"], s["heading"])
            vel[i, t] = (s.get("vx", 0.0), s.get("vy", 0.0))
            valid[i, t] = bool(s["valid"])
        if has_size:
            length[i], width[i] = float(a["length"]), float(a["width"])
        if has_type:
            atype[i] = int(a["type"])
    scene = SceneTensor(states, valid, float(doc["dt"]))
    vel[~valid] = 0.0
    ctx = ContextFeatures(
        velocity=vel,
        length=length if has_size else None,
        width=width if has_size else None,
        agent_type=atype if has_type else None,
    )
    ego = int(doc.get("ego_id", 0))
    if not 0 <= ego < A:
        raise ValueError(f"ego_id {ego} out of range")
    return scene, ctx, ego


def map_to_json(graph):
    pts, pad = graph.to_arrays()
    return {
        "version": MAP_SCHEMA_VERSION,
        "polylines": [
            {"points": pts[i].tolist(), "pad": pad[i].astype(bool).tolist()}
            for i in range(pts.shape[0])
        ],
    }


def map_from_json(doc):
    if doc.get("version") != MAP_SCHEMA_VERSION:
        raise ValueError(f"unsupported map schema version {doc.get('version')}")
    polys = doc.get("polylines", [])
    pts = np.zeros((len(polys), POLYLINE_LEN, 2))
    pad = np.ones((len(polys), POLYLINE_LEN), dtype=bool)
    for i, p in enumerate(polys):
        pts[i] = np.asarray(p["points"], dtype=np.float64)
        pad[i] = np.asarray(p["pad"], dtype=bool)
    return RoadGraph.from_arrays(pts, pad)


@dataclass
class Corpus:
    """Padded scene arrays + manifest; indexable into scene objects."""

    states: np.ndarray  # (N, A, T, 3)
    valid: np.ndarray  # (N, A, T)
    velocity: np.ndarray  # (N, A, T, 2)
    length: np.ndarray  # (N, A)
    width: np.ndarray  # (N, A)
    agent_count: np.ndarray  # (N,)
    behavior: np.ndarray  # (N, A) int codes into BEHAVIORS
    family: np.ndarray  # (N,) int codes into FAMILIES
    actor_index: np.ndarray  # (N,) -1 when absent
    map_points: np.ndarray  # (N, L, 10, 2)
    map_pad: np.ndarray  # (N, L, 10)
    map_count: np.ndarray  # (N,)
    dt: float
    manifest: dict

    def __len__(self):
        return self.states.shape[0]

    def __getitem__(self, i):
        a = int(self.agent_count[i])
        scene = SceneTensor(self.states[i, :a], self.valid[i, :a], self.dt)
        ctx = ContextFeatures(
            velocity=self.velocity[i, :a],
            length=self.length[i, :a],
            width=self.width[i, :a],
            agent_type=np.zeros(a, dtype=np.int64),
        )
        m = int(self.map_count[i])
        graph = RoadGraph.from_arrays(self.map_points[i, :m], self.map_pad[i, :m])
        actor = int(self.actor_index[i])
        meta = {
            "ego_index": 0,
            "actor_index": None if actor < 0 else actor,
            "family": FAMILIES[int(self.family[i])],
            "behaviors": [BEHAVIORS[int(b)] for b in self.behavior[i, :a]],
            "featured": BEHAVIORS[int(self.behavior[i, 1])] if a > 1 else None,
            "cutin_pair": (0, actor)
            if actor >= 0 and a > 1 and BEHAVIORS[int(self.behavior[i, 1])] == "cut_in"
            else None,
        }
        return scene, ctx, graph, meta

    def world(self, i):
        scene, ctx, graph, meta = self[i]
        return GeneratedWorld(graph, scene, ctx, meta)

    @property
    def scales(self):
        return FeatureScales.from_dict(self.manifest["scales"])


def build_corpus(worlds, config: SynthWorldConfig, seed, scales):
    n = len(worlds)
    max_a = max(w.scene.agent_count for w in worlds)
    max_l = max(len(w.roadgraph) for w in worlds)
    T = config.horizon

    c = Corpus(
        states=np.zeros((n, max_a, T, 3)),
        valid=np.zeros((n, max_a, T), dtype=bool),
        velocity=np.zeros((n, max_a, T, 2)),
        length=np.zeros((n, max_a)),
        width=np.zeros((n, max_a)),
        agent_count=np.zeros(n, dtype=np.int64),
        behavior=np.zeros((n, max_a), dtype=np.int64),
        family=np.zeros(n, dtype=np.int64),
        actor_index=np.full(n, -1, dtype=np.int64),
        map_points=np.zeros((n, max_l, POLYLINE_LEN, 2)),
        map_pad=np.ones((n, max_l, POLYLINE_LEN), dtype=bool),
        map_count=np.zeros(n, dtype=np.int64),
        dt=config.dt,
        manifest={
            "version": CORPUS_VERSION,
            "seed": int(seed),
            "count": n,
            "config": {
                "families": config.families,
                "behaviors": config.behaviors,
                "agent_count": list(config.agent_count),
                "speed": list(config.speed),
                "speed_jitter": config.speed_jitter,
                "horizon": config.horizon,
                "dt": config.dt,
                "lane_width": config.lane_width,
                "car_length": list(config.car_length),
                "car_width": list(config.car_width),
                "dropout": config.dropout,
            },
            "scales": scales.as_dict(),
        },
    )
    for i, w in enumerate(worlds):
        a = w.scene.agent_count
        c.states[i, :a] = w.scene.states
        c.valid[i, :a] = w.scene.valid
        c.velocity[i, :a] = w.context.velocity
        c.length[i, :a] = w.context.length
        c.width[i, :a] = w.context.width
        c.agent_count[i] = a
        c.behavior[i, :a] = [BEHAVIORS.index(b) for b in w.meta["behaviors"]]
        c.family[i] = FAMILIES.index(w.meta["family"])
        c.actor_index[i] = -1 if w.meta["actor_index"] is None else w.meta["actor_index"]
        pts, pad = w.roadgraph.to_arrays()
        c.map_points[i, : pts.shape[0]] = pts
        c.map_pad[i, : pts.shape[0]] = pad
        c.map_count[i] = pts.shape[0]
    return c


def save_corpus(directory, corpus):
    os.makedirs(directory, exist_ok=True)
    arrays = {
        k: getattr(corpus, k)
        for k in (
            "states", "valid", "velocity", "length", "width", "agent_count",
            "behavior", "family", "actor_index", "map_points", "map_pad",
            "map_count",
        )
    }
    np.savez_compressed(os.path.join(directory, "corpus.npz"), **arrays)
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump({**corpus.manifest, "dt": corpus.dt}, f, indent=2, sort_keys=True)


def load_corpus(directory):
    with open(os.path.join(directory, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest.get("version") != CORPUS_VERSION:
        raise ValueError(f"unsupported corpus version {manifest.get('version')}")
    with np.load(os.path.join(directory, "corpus.npz")) as z:
        arrays = {k: z[k] for k in z.files}
    dt = float(manifest.pop("dt"))
    return Corpus(dt=dt, manifest=manifest, **arrays)


def generate_corpus(config, n_scenes, seed, t_obs=None, fit_scales_on=2000,
                    target_std=0.5):
    """Generate worlds, fit feature scales at the training anchor, and pack."""
    from .scene import fit_feature_scales
    from .worldgen import generate_world

    rng = np.random.default_rng(seed)
    worlds = [generate_world(config, rng) for _ in range(n_scenes)]
    if t_obs is None:
        t_obs = max(2, config.horizon // 4)
    sample = worlds[: min(fit_scales_on, len(worlds))]
    scales = fit_feature_scales(
        [w.scene for w in sample],
        [w.meta["ego_index"] for w in sample],
        t_obs,
        target_std=target_std,
    )
    corpus = build_corpus(worlds, config, seed, scales)
    corpus.manifest["t_obs"] = int(t_obs)
    return corpus
