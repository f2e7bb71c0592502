"""Experiment configuration: one JSON document for the whole pipeline."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .diffusion import DiffusionConfig
from .metrics import GmmConfig
from .net.config import NetworkConfig
from .net.training import TrainConfig
from .scene import DEFAULT_TASK_WEIGHTS, TaskDistribution
from .worldgen import SynthWorldConfig


@dataclass
class ExperimentConfig:
    corpus_dir: str = "corpus"
    checkpoint: str = "checkpoint.npz"
    report: str = "report.json"
    n_scenes: int = 20000
    seed: int = 0
    t_obs: int = 10
    task_weights: dict = field(default_factory=lambda: dict(DEFAULT_TASK_WEIGHTS))
    worldgen: dict = field(default_factory=dict)
    diffusion: dict = field(default_factory=dict)
    network: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    gmm: dict = field(default_factory=dict)

    def world_config(self):
        return SynthWorldConfig(**self.worldgen)

    def diffusion_config(self):
        return DiffusionConfig(**self.diffusion)

    def network_config(self):
        if self.network:
            base = NetworkConfig.desk().as_dict()
            base.update(self.network)
            return NetworkConfig.from_dict(base)
        return NetworkConfig.desk()

    def train_config(self):
        kw = dict(self.train)
        if "betas" in kw:
            kw["betas"] = tuple(kw["betas"])
        return TrainConfig(**kw)

    def gmm_config(self):
        return GmmConfig(**self.gmm)

    def task_distribution(self):
        return TaskDistribution(t_obs=self.t_obs, weights=self.task_weights)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(f.read())

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json() + "\n")
