"""Denoiser network configuration."""

from __future__ import annotations

from dataclasses import dataclass, field

LAYER_KINDS = ("time", "agent", "map")

# sinusoidal period ranges per input feature group
STATE_PERIODS = (0.01, 10.0)
SCENARIO_TIME_PERIODS = (1.0, 100.0)
DIFFUSION_TIME_PERIODS = (0.1, 10000.0)


@dataclass(frozen=True)
class EncodingSpec:
    """Sinusoidal encoding: dim/2 periods geometrically spaced in
    [min_period, max_period]."""

    min_period: float
    max_period: float
    dim: int

    def __post_init__(self):
        if not self.min_period < self.max_period:
            raise ValueError("min_period must be < max_period")
        if self.dim < 2 or self.dim % 2 != 0:
            raise ValueError("encoding dim must be even and >= 2")


@dataclass
class NetworkConfig:
    """Factorized-attention denoiser hyperparameters.

    The trunk alternates time / agent self-attention with roadgraph
    cross-attention per ``layer_pattern``; time layers are over-represented
    (smoother trajectories).
    """

    feature_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    layer_pattern: tuple = ("time", "time", "agent", "map", "time", "agent")
    state_enc_dim: int = 16
    time_enc_dim: int = 16
    tau_enc_dim: int = 16
    input_hidden: int = 64
    map_hidden: int = 64
    map_layers: int = 4
    out_hidden: int = 64
    ctx_dim: int = 6
    desk_scale: bool = True

    def __post_init__(self):
        if self.feature_dim % self.num_heads != 0:
            raise ValueError("feature_dim must be divisible by num_heads")
        if not self.layer_pattern:
            raise ValueError("layer pattern must be non-empty")
        bad = set(self.layer_pattern) - set(LAYER_KINDS)
        if bad:
            raise ValueError(f"unknown layer kinds {bad}")
        for kind in LAYER_KINDS:
            if kind not in self.layer_pattern:
                raise ValueError(f"layer pattern must include a {kind!r} layer")

    @property
    def state_spec(self):
        return EncodingSpec(*STATE_PERIODS, self.state_enc_dim)

    @property
    def time_spec(self):
        return EncodingSpec(*SCENARIO_TIME_PERIODS, self.time_enc_dim)

    @property
    def tau_spec(self):
        return EncodingSpec(*DIFFUSION_TIME_PERIODS, self.tau_enc_dim)

    @property
    def input_dim(self):
        return 6 * self.state_enc_dim + self.time_enc_dim + self.tau_enc_dim + self.ctx_dim

    @classmethod
    def desk(cls):
        return cls()

    @classmethod
    def full_size(cls):
        """Paper-scale preset: 15 layers, 256-d features, 1024-d FFN."""
        block = ("time", "time", "agent", "time", "map")
        return cls(
            feature_dim=256,
            num_heads=4,
            ffn_dim=1024,
            layer_pattern=block * 3,
            state_enc_dim=256,
            time_enc_dim=256,
            tau_enc_dim=256,
            input_hidden=256,
            map_hidden=256,
            map_layers=4,
            out_hidden=256,
            desk_scale=False,
        )

    @classmethod
    def tiny(cls):
        """Gradient-check scale."""
        return cls(
            feature_dim=16,
            num_heads=2,
            ffn_dim=32,
            layer_pattern=("time", "agent", "map"),
            state_enc_dim=4,
            time_enc_dim=4,
            tau_enc_dim=4,
            input_hidden=16,
            map_hidden=16,
            map_layers=2,
            out_hidden=16,
        )

    def as_dict(self):
        d = self.__dict__.copy()
        d["layer_pattern"] = list(self.layer_pattern)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["layer_pattern"] = tuple(d["layer_pattern"])
        return cls(**d)
