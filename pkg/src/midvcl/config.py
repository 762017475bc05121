"""Training configuration and its JSON document form."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .encoder import EncoderConfig
from .errors import InvalidInputError
from .losses import LossConfig
from .prototypes import ClusteringSpec

SCHEMA_VERSION = 1
METHODS = ("infonce", "pcl", "spcl", "reflcl", "shadcl", "midvcl")
PROTO_METHODS = ("pcl", "spcl", "midvcl")
MASK_METHODS = ("spcl", "midvcl")
INTRINSIC_METHODS = ("reflcl", "shadcl", "midvcl")


@dataclass(frozen=True)
class AugmentationPolicy:
    """Photometric + geometric pipeline for the query/key image views.

    Silhouettes and intrinsic images never pass through it; they are only
    resized and normalised.
    """

    crop_scale: tuple = (0.6, 1.0)
    crop_ratio: tuple = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    grayscale_p: float = 0.2
    blur_p: float = 0.5
    blur_sigma: tuple = (0.1, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "crop_scale", tuple(self.crop_scale))
        object.__setattr__(self, "crop_ratio", tuple(self.crop_ratio))
        object.__setattr__(self, "blur_sigma", tuple(self.blur_sigma))


def _desk_clustering():
    return ClusteringSpec(k_list=(4, 8), concentration_mean=0.1)


def _desk_encoder():
    return EncoderConfig(embed_dim=64)


DEFAULT_SWITCH_FRACTION = 0.25


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines a pretraining run.

    Defaults are the desk-scale settings used for the synthetic shape/texture
    experiments: a 64-d embedding, K in {4, 8} and prototype concentrations
    scaled to mean 0.1.
    """

    method: str = "infonce"
    epochs: int = 60
    switch_epoch: int | None = None
    switch_method: str | None = None
    batch_size: int = 32
    learning_rate: float = 0.2
    lr_schedule: str = "cosine"
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    momentum_m: float = 0.99
    seed: int = 0
    deterministic: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    clustering: ClusteringSpec = field(default_factory=_desk_clustering)
    encoder: EncoderConfig = field(default_factory=_desk_encoder)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidInputError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.epochs < 0:
            raise InvalidInputError("epochs must be non-negative")
        if self.switch_epoch is not None and self.switch_method is None:
            raise InvalidInputError("switch_epoch needs a switch_method")
        if self.switch_method is not None and self.switch_epoch is None:
            object.__setattr__(self, "switch_epoch", max(1, round(DEFAULT_SWITCH_FRACTION * self.epochs)))
        if self.switch_epoch is not None:
            if not 0 < self.switch_epoch < self.epochs:
                raise InvalidInputError("switch_epoch must lie strictly between 0 and epochs")
            if self.switch_method not in METHODS:
                raise InvalidInputError(f"unknown switch method {self.switch_method!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise InvalidInputError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be positive")
        if self.loss.queue_size < self.batch_size:
            raise InvalidInputError("queue_size must be at least batch_size")

    def method_at(self, epoch):
        """Loss recipe for a 1-based epoch number."""
        if self.switch_epoch is not None and epoch > self.switch_epoch:
            return self.switch_method
        return self.method

    def methods(self):
        return {self.method_at(e) for e in range(1, self.epochs + 1)} or {self.method}

    def to_dict(self):
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise InvalidInputError(f"unsupported config schema version {version}")
        nested = {"loss": LossConfig, "clustering": ClusteringSpec,
                  "encoder": EncoderConfig, "augmentation": AugmentationPolicy}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        for key, kind in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = kind(**d[key])
        return cls(**d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_overrides(self, overrides):
        """Apply flat ``section.key`` overrides, e.g. ``{"loss.temperature_tau": 0.1}``."""
        top, nested = {}, {}
        for key, value in overrides.items():
            if "." in key:
                section, name = key.split(".", 1)
                nested.setdefault(section, {})[name] = value
            else:
                top[key] = value
        cfg = self
        for section, values in nested.items():
            cfg = replace(cfg, **{section: replace(getattr(cfg, section), **values)})
        return replace(cfg, **top) if top else cfg
