from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from ..numerics import ConfigError, config_digest
from ..trajstore import CueKind

FPS_VARIANTS = ("none", "mlp_sum", "mlp_token", "film", "codebook")


def _default_masks():
    return {"modality": 0.3, "spatial": 0.5, "temporal": 0.75}


def _default_elements():
    return {"P3": 17, "P2": 17, "B3": 1, "B2": 1}


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    cme_layers: int = 6
    hie_layers: int = 4
    pid_decoder_layers: int = 2
    n_modes: int = 20
    max_t_obs: int = 16
    max_t_pred: int = 20
    cues_enabled: tuple = ("T",)
    fps_variant: str = "mlp_sum"
    mask_ratios: dict = field(default_factory=_default_masks)
    n_ctx_queries: int = 8
    fps_reference: float = 25.0
    codebook_keys: tuple = (5.0, 2.5)
    cue_elements: dict = field(default_factory=_default_elements)
    use_hie: bool = True
    use_decoder: bool = True
    use_ca: bool = True
    seed: int = 0

    def __post_init__(self):
        self.cues_enabled = tuple(CueKind(c).value for c in self.cues_enabled)
        self.codebook_keys = tuple(float(k) for k in self.codebook_keys)
        self.mask_ratios = {**_default_masks(), **dict(self.mask_ratios)}
        self.cue_elements = {**_default_elements(), **dict(self.cue_elements)}
        self.validate()

    def validate(self):
        if self.d_model < 2 or self.d_model % 2:
            raise ConfigError("d_model must be a positive even integer")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_modes < 1:
            raise ConfigError("n_modes must be >= 1")
        if min(self.cme_layers, self.hie_layers, self.pid_decoder_layers, self.n_ctx_queries) < 0:
            raise ConfigError("layer and query counts must be >= 0")
        if self.max_t_obs < 2 or self.max_t_pred < 1:
            raise ConfigError("max_t_obs must be >= 2 and max_t_pred >= 1")
        if "T" not in self.cues_enabled:
            raise ConfigError("the trajectory cue T must be enabled")
        if self.fps_variant not in FPS_VARIANTS:
            raise ConfigError(f"fps_variant must be one of {FPS_VARIANTS}, got {self.fps_variant!r}")
        if self.fps_variant == "codebook" and not self.codebook_keys:
            raise ConfigError("codebook variant needs at least one codebook key")
        for name, r in self.mask_ratios.items():
            if name not in ("modality", "spatial", "temporal"):
                raise ConfigError(f"unknown mask ratio {name!r}")
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"mask ratio {name} must lie in [0, 1]")
        if self.fps_reference <= 0:
            raise ConfigError("fps_reference must be positive")
        if not self.use_decoder and self.use_ca:
            raise ConfigError("cross-attention needs the decoder (use_decoder=False, use_ca=True)")

    def to_dict(self):
        d = asdict(self)
        d["cues_enabled"] = list(self.cues_enabled)
        d["codebook_keys"] = list(self.codebook_keys)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config key: {unknown[0]}")
        return cls(**d)

    def digest(self):
        return config_digest(self.to_dict())

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)
