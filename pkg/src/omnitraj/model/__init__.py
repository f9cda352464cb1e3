"""OmniTraj network, its configuration and batching."""
from .batch import Batch, collate
from .config import FPS_VARIANTS, ModelConfig
from .network import FpsCond, HorizonError, OmniTraj, Prediction, TokenBatch, init_params

__all__ = [
    "Batch",
    "FPS_VARIANTS",
    "FpsCond",
    "HorizonError",
    "ModelConfig",
    "OmniTraj",
    "Prediction",
    "TokenBatch",
    "collate",
    "init_params",
]
