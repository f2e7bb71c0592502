from .config import EncodingSpec, NetworkConfig
from .encoding import sinusoid_encode
from .network import ScoreNetwork, NetDenoiser
from .training import TrainConfig, train, save_checkpoint, load_checkpoint
from .gradcheck import grad_check

__all__ = [
    "EncodingSpec",
    "NetworkConfig",
    "sinusoid_encode",
    "ScoreNetwork",
    "NetDenoiser",
    "TrainConfig",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "grad_check",
]
