"""scenediff: joint traffic-scenario generation with score-based diffusion.

One model over the agents x time state tensor, conditioned on arbitrary
observation masks, lane-center maps and per-agent context, with
classifier-free and classifier guidance plus stochastic-differential
scenario editing.
"""

from .diffusion import DiffusionConfig, precondition, perturb, score_from_denoiser
from .scene import (
    AgentState,
    ContextFeatures,
    EgoFrame,
    FeatureScales,
    ObservationMask,
    SceneTensor,
    TaskDistribution,
    ego_denormalize,
    ego_normalize,
    partition,
    sample_observation_mask,
)
from .roadgraph import Polyline, RoadGraph, split_and_pad
from .worldgen import SynthWorldConfig, generate_world

__version__ = "0.1.0"

__all__ = [
    "AgentState",
    "ContextFeatures",
    "DiffusionConfig",
    "EgoFrame",
    "FeatureScales",
    "ObservationMask",
    "Polyline",
    "RoadGraph",
    "SceneTensor",
    "SynthWorldConfig",
    "TaskDistribution",
    "ego_denormalize",
    "ego_normalize",
    "generate_world",
    "partition",
    "perturb",
    "precondition",
    "sample_observation_mask",
    "score_from_denoiser",
    "split_and_pad",
    "__version__",
]
