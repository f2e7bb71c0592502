"""Scene tensors, ego-frame normalization, and observation-mask sampling.

A scene is the joint state of A agents over T steps: positions (x, y) in
meters and heading in radians, with a validity grid for agents that are not
tracked at every step. An observation mask splits the valid states into an
observed conditioning set and the latent states the generator produces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TASK_NAMES = (
    "predictive",
    "goal_conditioned",
    "agent_conditioned",
    "ego_conditioned",
    "windowed",
    "upsampling",
    "imputation",
)

# Training task weights before normalization (they deliberately sum to 110;
# normalized proportionally on construction).
DEFAULT_TASK_WEIGHTS = {
    "predictive": 50.0,
    "goal_conditioned": 25.0,
    "agent_conditioned": 10.0,
    "ego_conditioned": 10.0,
    "windowed": 5.0,
    "upsampling": 5.0,
    "imputation": 5.0,
}


def wrap_angle(theta):
    """Wrap angles into (-pi, pi]."""
    theta = np.asarray(theta, dtype=np.float64)
    w = np.mod(theta, 2.0 * np.pi)
    w = np.where(w > np.pi, w - 2.0 * np.pi, w)
    return w if w.ndim else float(w)


@dataclass(frozen=True)
class AgentState:
    """Single agent state: planar position in meters, heading in radians."""

    x: float
    y: float
    heading: float

    def __post_init__(self):
        if not np.all(np.isfinite([self.x, self.y, self.heading])):
            raise ValueError("agent state fields must be finite")
        object.__setattr__(self, "heading", float(wrap_angle(self.heading)))

    def as_array(self):
        return np.array([self.x, self.y, self.heading], dtype=np.float64)


class SceneTensor:
    """Joint agent states, shape (A, T, 3), with an (A, T) validity grid.

    Invalid cells hold the zero state and are excluded from losses and
    metrics everywhere downstream.
    """

    __slots__ = ("states", "valid", "dt")

    def __init__(self, states, valid, dt):
        states = np.asarray(states, dtype=np.float64)
        valid = np.asarray(valid, dtype=bool)
        if states.ndim != 3 or states.shape[-1] != 3:
            raise ValueError(f"states must be (A, T, 3), got {states.shape}")
        if valid.shape != states.shape[:2]:
            raise ValueError(
                f"valid grid {valid.shape} does not match states {states.shape[:2]}"
            )
        if states.shape[0] < 1 or states.shape[1] < 1:
            raise ValueError("scene needs at least one agent and one step")
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        if not np.all(np.isfinite(states[valid])):
            raise ValueError("valid states must be finite")
        states = states.copy()
        states[~valid] = 0.0
        self.states = states
        self.valid = valid
        self.dt = float(dt)

    @property
    def agent_count(self):
        return self.states.shape[0]

    @property
    def horizon(self):
        return self.states.shape[1]

    @property
    def positions(self):
        return self.states[..., :2]

    @property
    def headings(self):
        return self.states[..., 2]

    def copy(self):
        return SceneTensor(self.states.copy(), self.valid.copy(), self.dt)

    def state_at(self, agent, t):
        if not self.valid[agent, t]:
            raise ValueError(f"agent {agent} is not valid at step {t}")
        x, y, h = self.states[agent, t]
        return AgentState(x, y, h)

    def allclose(self, other, atol=1e-9):
        return (
            np.array_equal(self.valid, other.valid)
            and np.allclose(self.states, other.states, atol=atol, rtol=0.0)
            and self.dt == other.dt
        )


class ObservationMask:
    """Boolean (A, T) grid marking states given as clean conditioning."""

    __slots__ = ("observed",)

    def __init__(self, observed):
        observed = np.asarray(observed, dtype=bool)
        if observed.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {observed.shape}")
        self.observed = observed

    @classmethod
    def none(cls, scene):
        return cls(np.zeros((scene.agent_count, scene.horizon), dtype=bool))

    @classmethod
    def full(cls, scene):
        return cls(scene.valid.copy())

    @classmethod
    def predictive(cls, scene, t_obs):
        observed = np.zeros_like(scene.valid)
        observed[:, :t_obs] = scene.valid[:, :t_obs]
        return cls(observed)

    def validate_against(self, scene):
        if self.observed.shape != scene.valid.shape:
            raise ValueError(
                f"mask shape {self.observed.shape} does not match scene "
                f"{scene.valid.shape}"
            )
        bad = self.observed & ~scene.valid
        if bad.any():
            a, t = np.argwhere(bad)[0]
            raise ValueError(f"mask observes invalid state (agent {a}, t {t})")

    def latent(self, scene):
        """Valid-but-unobserved grid."""
        return scene.valid & ~self.observed

    def union(self, other):
        return ObservationMask(self.observed | other.observed)

    def count(self):
        return int(self.observed.sum())


@dataclass
class StateSet:
    """Sparse set of (agent, t) -> state entries, used for scene partitions
    and for extra conditioning states."""

    agent_idx: np.ndarray
    t_idx: np.ndarray
    states: np.ndarray

    def __len__(self):
        return self.agent_idx.shape[0]

    @classmethod
    def empty(cls):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), np.zeros((0, 3)))

    @classmethod
    def from_grid(cls, states, mask):
        a, t = np.nonzero(mask)
        return cls(a, t, states[a, t])

    def to_mask(self, shape):
        m = np.zeros(shape, dtype=bool)
        m[self.agent_idx, self.t_idx] = True
        return ObservationMask(m)

    def scatter_into(self, grid):
        grid[self.agent_idx, self.t_idx] = self.states
        return grid


def partition(scene, mask):
    """Split a scene's valid states into (observed, latent) state sets."""
    mask.validate_against(scene)
    obs = StateSet.from_grid(scene.states, mask.observed)
    lat = StateSet.from_grid(scene.states, mask.latent(scene))
    return obs, lat


def reassemble(scene_like, x_obs, x_lat):
    """Inverse of partition: scatter both state sets onto a zero grid."""
    grid = np.zeros_like(scene_like.states)
    x_obs.scatter_into(grid)
    x_lat.scatter_into(grid)
    return SceneTensor(grid, scene_like.valid.copy(), scene_like.dt)


@dataclass(frozen=True)
class FeatureScales:
    """Dataset-level multipliers taking ego-frame features to unit spread.

    Positions share one isotropic scale (anisotropic scaling would distort
    rotated geometry); heading gets its own. Both are fitted so the pooled
    std of each group is ``target_std`` over a normalized corpus.
    """

    pos_scale: float = 1.0
    heading_scale: float = 1.0
    target_std: float = 0.5

    def __post_init__(self):
        if not (self.pos_scale > 0 and self.heading_scale > 0):
            raise ValueError("scales must be positive")

    def as_dict(self):
        return {
            "pos_scale": self.pos_scale,
            "heading_scale": self.heading_scale,
            "target_std": self.target_std,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["pos_scale"], d["heading_scale"], d.get("target_std", 0.5))


IDENTITY_SCALES = FeatureScales(1.0, 1.0)


@dataclass(frozen=True)
class EgoFrame:
    """Similarity transform tying a scene (and its map) to the ego anchor."""

    origin: tuple
    rotation: float
    scales: FeatureScales = IDENTITY_SCALES

    def rotation_matrix(self):
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        return np.array([[c, -s], [s, c]])

    def apply_positions(self, pos):
        """World positions (..., 2) -> normalized frame."""
        rel = np.asarray(pos, dtype=np.float64) - np.asarray(self.origin)
        rot = self.rotation_matrix().T  # rotate by -rotation
        return (rel @ rot.T) * self.scales.pos_scale

    def invert_positions(self, pos):
        rot = self.rotation_matrix()
        return (np.asarray(pos, dtype=np.float64) / self.scales.pos_scale) @ rot.T + np.asarray(
            self.origin
        )

    def apply_headings_unwrapped(self, headings_unwrapped):
        return (headings_unwrapped - self.rotation) * self.scales.heading_scale

    def invert_headings(self, headings_scaled):
        return wrap_angle(headings_scaled / self.scales.heading_scale + self.rotation)

    def apply_velocities(self, vel):
        rot = self.rotation_matrix().T
        return (np.asarray(vel, dtype=np.float64) @ rot.T) * self.scales.pos_scale

    def invert_velocities(self, vel):
        rot = self.rotation_matrix()
        return (np.asarray(vel, dtype=np.float64) / self.scales.pos_scale) @ rot.T


@dataclass
class ContextFeatures:
    """Unmodelled per-agent features fed to the denoiser as conditioning."""

    velocity: np.ndarray  # (A, T, 2) m/s
    length: np.ndarray | None = None  # (A,) m
    width: np.ndarray | None = None  # (A,) m
    agent_type: np.ndarray | None = None  # (A,) int codes

    def __post_init__(self):
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        if self.velocity.ndim != 3 or self.velocity.shape[-1] != 2:
            raise ValueError(f"velocity must be (A, T, 2), got {self.velocity.shape}")
        for name in ("length", "width", "agent_type"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v)
                if v.shape != (self.velocity.shape[0],):
                    raise ValueError(f"{name} must be (A,), got {v.shape}")
                setattr(self, name, v)

    @property
    def has_size(self):
        return self.length is not None and self.width is not None

    @property
    def has_type(self):
        return self.agent_type is not None

    @classmethod
    def zeros(cls, agent_count, horizon):
        return cls(velocity=np.zeros((agent_count, horizon, 2)))

    def copy(self):
        return ContextFeatures(
            self.velocity.copy(),
            None if self.length is None else self.length.copy(),
            None if self.width is None else self.width.copy(),
            None if self.agent_type is None else self.agent_type.copy(),
        )


def unwrap_headings(headings, valid):
    """Unwrap ±pi jumps along each agent's valid timeline.

    Returns a full (A, T) array; invalid cells are left untouched. The
    continuous values can leave (-pi, pi]; wrap_angle restores the originals.
    """
    out = np.array(headings, dtype=np.float64, copy=True)
    for a in range(headings.shape[0]):
        idx = np.nonzero(valid[a])[0]
        if idx.size > 1:
            out[a, idx] = np.unwrap(headings[a, idx])
    return out


def ego_normalize(scene, ego_index, t_obs, scales=IDENTITY_SCALES, ctx=None):
    """Express a scene in the ego anchor frame, scaled for diffusion.

    The frame is centered on the ego agent's state at step ``t_obs - 1`` and
    rotated so its heading there is zero; positions and headings are then
    multiplied by the dataset scales. Heading trajectories are unwrapped
    before scaling so discontinuities at ±pi never enter the diffused
    features.

    Returns (normalized scene, EgoFrame[, normalized ctx]).
    """
    if not 0 <= ego_index < scene.agent_count:
        raise ValueError(f"ego index {ego_index} out of range")
    anchor_t = t_obs - 1
    if not 0 <= anchor_t < scene.horizon:
        raise ValueError(f"anchor step {anchor_t} outside horizon {scene.horizon}")
    if not scene.valid[ego_index, anchor_t]:
        raise ValueError(
            f"ego agent {ego_index} is not valid at anchor step {anchor_t}"
        )
    ox, oy, oh = scene.states[ego_index, anchor_t]
    frame = EgoFrame(origin=(float(ox), float(oy)), rotation=float(oh), scales=scales)

    states = np.zeros_like(scene.states)
    states[..., :2] = frame.apply_positions(scene.positions)
    unwrapped = unwrap_headings(scene.headings, scene.valid)
    states[..., 2] = frame.apply_headings_unwrapped(unwrapped)
    states[~scene.valid] = 0.0
    out = SceneTensor(states, scene.valid.copy(), scene.dt)
    if ctx is None:
        return out, frame
    nctx = ctx.copy()
    nctx.velocity = frame.apply_velocities(ctx.velocity)
    if ctx.has_size:
        nctx.length = ctx.length * scales.pos_scale
        nctx.width = ctx.width * scales.pos_scale
    return out, frame, nctx


def ego_denormalize(scene, frame):
    """Invert ego_normalize back to the world frame (headings wrapped)."""
    states = np.zeros_like(scene.states)
    states[..., :2] = frame.invert_positions(scene.positions)
    states[..., 2] = frame.invert_headings(scene.headings)
    states[~scene.valid] = 0.0
    return SceneTensor(states, scene.valid.copy(), scene.dt)


def normalize_roadgraph_points(points, frame):
    """Map polyline points (..., 2) with the same frame as agent states."""
    return frame.apply_positions(points)


def fit_feature_scales(scenes, ego_indices, t_obs, target_std=0.5):
    """Fit pos/heading scales so pooled stds hit target_std after normalization.

    Pools centered-and-rotated (unscaled) features over every valid cell of
    the corpus; x and y share one scale to keep the transform isotropic.
    """
    pos_vals = []
    head_vals = []
    for scene, ego in zip(scenes, ego_indices):
        norm, _ = ego_normalize(scene, ego, t_obs, IDENTITY_SCALES)
        pos_vals.append(norm.positions[norm.valid].ravel())
        head_vals.append(norm.headings[norm.valid].ravel())
    pos = np.concatenate(pos_vals)
    head = np.concatenate(head_vals)
    pos_std = float(pos.std())
    head_std = float(head.std())
    if pos_std <= 0 or head_std <= 0:
        raise ValueError("degenerate corpus: zero spread in features")
    return FeatureScales(
        pos_scale=target_std / pos_std,
        heading_scale=target_std / head_std,
        target_std=target_std,
    )


@dataclass(frozen=True)
class TaskDistribution:
    """Distribution over training observation-mask tasks.

    Weights are normalized to sum to 1 on construction; ``t_obs`` is the
    observed-history length in steps shared by all tasks.
    """

    t_obs: int
    weights: dict = field(default_factory=lambda: dict(DEFAULT_TASK_WEIGHTS))

    def __post_init__(self):
        if set(self.weights) - set(TASK_NAMES):
            raise ValueError(f"unknown tasks: {set(self.weights) - set(TASK_NAMES)}")
        w = np.array([float(self.weights.get(n, 0.0)) for n in TASK_NAMES])
        if (w < 0).any() or w.sum() <= 0:
            raise ValueError("weights must be non-negative with positive sum")
        if not isinstance(self.t_obs, (int, np.integer)) or self.t_obs <= 0:
            raise ValueError(f"t_obs must be a positive integer, got {self.t_obs}")
        object.__setattr__(
            self, "weights", {n: float(v / w.sum()) for n, v in zip(TASK_NAMES, w)}
        )

    def probabilities(self):
        return np.array([self.weights[n] for n in TASK_NAMES])

    def sample_task(self, rng):
        return TASK_NAMES[rng.choice(len(TASK_NAMES), p=self.probabilities())]


def _choose_agents(scene, count, rng):
    candidates = np.nonzero(scene.valid.any(axis=1))[0]
    if candidates.size == 0:
        raise ValueError("scene has no valid agents")
    # fewer agents than the task asks for: condition on all available
    k = min(count, candidates.size)
    return rng.choice(candidates, size=k, replace=False)


def _task_mask(task, dist, scene, ego_index, rng):
    A, T = scene.valid.shape
    t_obs = dist.t_obs
    if not t_obs < T:
        raise ValueError(f"t_obs={t_obs} must be < horizon {T}")
    observed = np.zeros((A, T), dtype=bool)
    observed[:, :t_obs] = True

    if task == "goal_conditioned":
        for a in _choose_agents(scene, 3, rng):
            tv = np.nonzero(scene.valid[a])[0]
            observed[a, tv[-1]] = True
    elif task == "agent_conditioned":
        for a in _choose_agents(scene, 3, rng):
            observed[a, :] = True
    elif task == "ego_conditioned":
        observed[ego_index, :] = True
    elif task == "windowed":
        t_start = int(rng.integers(0, t_obs))
        observed[:] = False
        observed[:, : t_start + 1] = True
        observed[:, t_start + t_obs + 1 :] = True
    elif task == "upsampling":
        stride = max(T // t_obs, 1)
        offset = int(rng.integers(0, stride))
        observed[:] = False
        observed[:, offset::stride] = True
    elif task == "imputation":
        observed = rng.random((A, T)) < (t_obs / T)
    elif task != "predictive":
        raise ValueError(f"unknown task {task!r}")
    return observed


def sample_observation_mask(dist, scene, rng, ego_index=0, return_task=False):
    """Draw a training observation mask from the task distribution.

    Every mask is intersected with the scene's validity grid so that
    observed implies valid.
    """
    if not scene.valid.any():
        raise ValueError("scene has no valid states")
    task = dist.sample_task(rng)
    observed = _task_mask(task, dist, scene, ego_index, rng) & scene.valid
    mask = ObservationMask(observed)
    return (mask, task) if return_task else mask
