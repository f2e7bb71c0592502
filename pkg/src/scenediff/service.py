"""HTTP JSON service for sampling, editing and metrics.

All request/response bodies use the documented scene/map JSON schemas;
responses echo the seed so any result can be reproduced and branched.
The loaded checkpoint lives in one immutable snapshot; concurrent requests
share it read-only and a reload installs a fresh snapshot atomically.
"""

from __future__ import annotations

import json
import logging
from typing import Optional

import numpy as np

try:
    from fastapi import FastAPI, Request
    from fastapi.exceptions import RequestValidationError
    from fastapi.responses import JSONResponse
    from pydantic import BaseModel, Field

    _HAS_FASTAPI = True
except ImportError:  # pragma: no cover
    _HAS_FASTAPI = False

from . import kernels
from .batching import normalize_entry, pack_scenes
from .dataio import load_corpus, map_from_json, map_to_json, scene_from_json, scene_to_json
from .editing import EditRequest, sdedit
from .guidance import CutInClassifier, GuidanceSpec, build_score_fn
from .metrics import min_ade_fde, scene_min_ade_fde
from .pipeline import sample_world
from .scene import ObservationMask, SceneTensor, ego_denormalize, ego_normalize

log = logging.getLogger(__name__)


# --- helpers shared with the CLI -------------------------------------------


def run_edit(denoiser, scales, scene, mask, ctx, graph, ego_index, t_obs,
             tau_edit, seed=0, num_steps=None):
    """World-frame stochastic-differential edit; returns the edited scene."""
    entry, frame = normalize_entry(scene, mask, ctx, graph, ego_index, t_obs, scales)
    batch = pack_scenes([entry])
    score_fn = build_score_fn(denoiser, batch, None)
    req = EditRequest(
        guide_states=batch.x0,
        observed=batch.observed,
        valid=batch.valid,
        tau_edit=tau_edit,
        seed=seed,
    )
    out = sdedit(score_fn, req, denoiser.dconfig, num_steps=num_steps)
    edited = SceneTensor(out[0, : scene.agent_count], scene.valid, scene.dt)
    return ego_denormalize(edited, frame)


def classifier_training_arrays(examples, scales, t_obs):
    """Normalize mined pairs into the scaled pair-ego frame for training.

    Returns (arrays dict, labels, latent step mask). Pairs whose ego is not
    valid at the anchor step are skipped.
    """
    T = examples[0].ego_states.shape[0]
    egos, others, evs, ovs, labels = [], [], [], [], []
    for ex in examples:
        if not ex.ego_valid[t_obs - 1]:
            continue
        pair = SceneTensor(
            np.stack([ex.ego_states, ex.other_states]),
            np.stack([ex.ego_valid, ex.other_valid]),
            dt=0.1,
        )
        norm, _ = ego_normalize(pair, 0, t_obs, scales)
        egos.append(norm.states[0])
        others.append(norm.states[1])
        evs.append(ex.ego_valid)
        ovs.append(ex.other_valid)
        labels.append(ex.label)
    if not egos:
        raise ValueError("no usable pairs (ego never valid at the anchor step)")
    arrays = {
        "ego": np.stack(egos),
        "other": np.stack(others),
        "ego_valid": np.stack(evs),
        "other_valid": np.stack(ovs),
    }
    latent_steps = np.zeros(T, dtype=bool)
    latent_steps[t_obs:] = True
    return arrays, np.asarray(labels), latent_steps


def save_classifier(path, clf, report=None):
    header = {"horizon": clf.horizon, "hidden": clf.hidden, "report": report}
    np.savez(path, header=json.dumps(header),
             **{f"param/{k}": v for k, v in clf.params.items()})


def load_classifier(path):
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    return CutInClassifier(header["horizon"], hidden=header["hidden"], params=params)


# --- request/response models ------------------------------------------------

if _HAS_FASTAPI:

    class MaskSpec(BaseModel):
        type: str = "predictive"
        t_obs: Optional[int] = None
        observed: Optional[list] = None

    class GoalSpec(BaseModel):
        agent: int
        t: int
        x: float
        y: float
        heading: Optional[float] = None

    class GuidanceBody(BaseModel):
        cfg_weight: float = 1.0
        alpha: float = 0.0
        goals: list[GoalSpec] = Field(default_factory=list)
        classifier_pair: Optional[tuple[int, int]] = None

    class SampleBody(BaseModel):
        scene: dict
        map: dict
        mask: MaskSpec = Field(default_factory=MaskSpec)
        t_obs: int = 10
        num_samples: int = Field(default=1, ge=1, le=128)
        steps: int = Field(default=50, ge=2, le=512)
        seed: int = 0
        guidance: Optional[GuidanceBody] = None

    class EditBody(BaseModel):
        guide_scene: dict
        map: dict
        mask: MaskSpec = Field(default_factory=MaskSpec)
        t_obs: int = 10
        tau_edit: float = 0.8
        steps: int = Field(default=50, ge=2, le=512)
        seed: int = 0

    class MetricsBody(BaseModel):
        samples: list[dict]
        truth: dict
        t_obs: int = 10


def _mask_from_spec(scene, spec, default_t_obs):
    if spec.observed is not None:
        grid = np.asarray(spec.observed, dtype=bool)
        mask = ObservationMask(grid)
        mask.validate_against(scene)
        return mask
    if spec.type != "predictive":
        raise ValueError(f"unknown mask type {spec.type!r}")
    t_obs = spec.t_obs if spec.t_obs is not None else default_t_obs
    if not 0 < t_obs <= scene.horizon:
        raise ValueError(f"mask t_obs {t_obs} outside horizon")
    return ObservationMask.predictive(scene, t_obs)


class Snapshot:
    """Immutable bundle served to all requests."""

    def __init__(self, denoiser=None, scales=None, dist=None, corpus=None,
                 classifier=None, checkpoint_path=None):
        self.denoiser = denoiser
        self.scales = scales
        self.dist = dist
        self.corpus = corpus
        self.classifier = classifier
        self.checkpoint_path = checkpoint_path

    @property
    def ready(self):
        return self.denoiser is not None


def load_snapshot(checkpoint=None, corpus_dir=None, classifier=None):
    from .net.network import NetDenoiser
    from .net.training import load_checkpoint

    denoiser = scales = dist = corpus = clf = None
    if checkpoint:
        try:
            net, dcfg, scales, dist, _ = load_checkpoint(checkpoint)
            denoiser = NetDenoiser(net, dcfg)
        except FileNotFoundError:
            log.warning("checkpoint %s not found; serving without a model",
                        checkpoint)
    if corpus_dir:
        try:
            corpus = load_corpus(corpus_dir)
        except FileNotFoundError:
            log.warning("corpus %s not found", corpus_dir)
    if classifier:
        clf = load_classifier(classifier)
    return Snapshot(denoiser, scales, dist, corpus, clf, checkpoint)


def create_app(checkpoint=None, corpus_dir=None, classifier=None, snapshot=None):
    if not _HAS_FASTAPI:  # pragma: no cover
        raise RuntimeError("fastapi is not installed")
    app = FastAPI(title="scenediff", version="0.1.0")
    app.state.snapshot = snapshot or load_snapshot(checkpoint, corpus_dir, classifier)

    @app.exception_handler(RequestValidationError)
    async def _schema_error(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    @app.exception_handler(ValueError)
    async def _value_error(request: Request, exc: ValueError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    def _need_model():
        snap = app.state.snapshot
        if not snap.ready:
            return None
        return snap

    def _no_model():
        return JSONResponse(status_code=409,
                            content={"detail": "no checkpoint loaded"})

    @app.get("/health")
    def health():
        snap = app.state.snapshot
        return {
            "status": "ok",
            "model_loaded": snap.ready,
            "kernel_backend": kernels.active_backend(),
            "scenes": 0 if snap.corpus is None else len(snap.corpus),
        }

    @app.get("/scene/{scene_id}")
    def get_scene(scene_id: int):
        snap = app.state.snapshot
        if snap.corpus is None:
            return JSONResponse(status_code=409, content={"detail": "no corpus loaded"})
        if not 0 <= scene_id < len(snap.corpus):
            return JSONResponse(status_code=404, content={"detail": "scene not found"})
        scene, ctx, graph, meta = snap.corpus[scene_id]
        return {
            "scene": scene_to_json(scene, ctx, meta["ego_index"]),
            "map": map_to_json(graph),
            "meta": {k: v for k, v in meta.items() if k != "behaviors"},
        }

    @app.post("/sample")
    def post_sample(body: SampleBody):
        snap = _need_model()
        if snap is None:
            return _no_model()
        scene, ctx, ego = scene_from_json(body.scene)
        graph = map_from_json(body.map)
        mask = _mask_from_spec(scene, body.mask, body.t_obs)
        guidance = None
        if body.guidance is not None and (body.guidance.goals or
                                          body.guidance.alpha != 0.0):
            guidance = _build_guidance(body.guidance, scene, mask, snap)
        samples, _ = sample_world(
            snap.denoiser, scene, mask, ctx, graph, ego, body.t_obs,
            snap.scales, num_samples=body.num_samples, num_steps=body.steps,
            seed=body.seed, guidance=guidance,
        )
        return {
            "seed": body.seed,
            "steps": body.steps,
            "samples": [
                scene_to_json(SceneTensor(s, scene.valid, scene.dt), ctx, ego)
                for s in samples
            ],
        }

    def _build_guidance(g: GuidanceBody, scene, mask, snap):
        A, T = scene.valid.shape
        cond_mask = np.zeros((A, T), dtype=bool)
        cond_values = np.zeros((A, T, 3))
        for goal in g.goals:
            if not 0 <= goal.agent < A or not 0 <= goal.t < T:
                raise ValueError("goal outside the scene grid")
            cond_mask[goal.agent, goal.t] = True
            heading = goal.heading
            if heading is None:
                heading = scene.states[goal.agent, goal.t, 2]
            cond_values[goal.agent, goal.t] = (goal.x, goal.y, heading)
        mode = "none"
        if g.goals and g.alpha != 0.0:
            mode = "both"
        elif g.goals:
            mode = "classifier_free"
        elif g.alpha != 0.0:
            mode = "classifier"
        if mode in ("classifier", "both") and snap.classifier is None:
            raise ValueError("no classifier loaded for classifier guidance")
        return GuidanceSpec(
            mode=mode,
            cfg_weight=g.cfg_weight,
            alpha=g.alpha,
            cond_mask=cond_mask if g.goals else None,
            cond_values=cond_values if g.goals else None,
            classifier=snap.classifier if mode in ("classifier", "both") else None,
            classifier_pair=g.classifier_pair or (0, 1),
        )

    @app.post("/edit")
    def post_edit(body: EditBody):
        snap = _need_model()
        if snap is None:
            return _no_model()
        scene, ctx, ego = scene_from_json(body.guide_scene)
        graph = map_from_json(body.map)
        mask = _mask_from_spec(scene, body.mask, body.t_obs)
        if not 0.0 < body.tau_edit <= snap.denoiser.dconfig.sigma_max:
            raise ValueError(
                f"tau_edit must lie in (0, {snap.denoiser.dconfig.sigma_max}]"
            )
        edited = run_edit(
            snap.denoiser, snap.scales, scene, mask, ctx, graph, ego,
            body.t_obs, tau_edit=body.tau_edit, seed=body.seed,
            num_steps=body.steps,
        )
        return {
            "seed": body.seed,
            "tau_edit": body.tau_edit,
            "edited": scene_to_json(edited, ctx, ego),
        }

    @app.post("/metrics")
    def post_metrics(body: MetricsBody):
        truth, _, _ = scene_from_json(body.truth)
        preds = []
        for doc in body.samples:
            s, _, _ = scene_from_json(doc)
            if s.states.shape != truth.states.shape:
                raise ValueError("sample shape does not match truth")
            preds.append(s.states)
        if not preds:
            raise ValueError("need at least one sample")
        samples = np.stack(preds)
        mask = ObservationMask.predictive(truth, body.t_obs)
        eval_mask = truth.valid & ~mask.observed
        per_agent = {}
        ades, fdes = [], []
        for a in range(truth.agent_count):
            if not eval_mask[a].any():
                continue
            ade, fde = min_ade_fde(samples, truth.states, eval_mask, a)
            per_agent[str(a)] = {"minADE": ade, "minFDE": fde}
            ades.append(ade)
            fdes.append(fde)
        scene_ade, scene_fde = scene_min_ade_fde(samples, truth.states, eval_mask)
        return {
            "minADE": float(np.mean(ades)),
            "minFDE": float(np.mean(fdes)),
            "minSceneADE": scene_ade,
            "minSceneFDE": scene_fde,
            "per_agent": per_agent,
            "K": int(samples.shape[0]),
        }

    return app
