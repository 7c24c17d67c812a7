"""Experiment configuration with a strict JSON schema."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import DataConfig
from .donor import DonorConfig
from .errors import ConfigError
from .raster import RasterConfig

MIXES = ("unpaired_only", "paired_only", "hybrid")
MASKINGS = ("donor", "patch")


@dataclass
class DropoutConfig:
    p_all: float = 0.05
    p_tex: float = 0.3
    p_face: float = 0.3
    p_pose: float = 0.1


@dataclass
class SamplerConfig:
    steps: int = 50
    scheme: str = "euler"


@dataclass
class ExperimentConfig:
    mix: str = "hybrid"
    paired_ratio: float | None = None  # None: proportional to manifest sizes
    steps: int = 400
    batch: int = 4
    resolution: int = 64
    width: int = 16
    lr: float = 1e-4
    masking: str = "donor"
    ckpt_every: int = 100
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    raster: RasterConfig = field(default_factory=RasterConfig)
    donor: DonorConfig = field(default_factory=DonorConfig)
    dropout: DropoutConfig = field(default_factory=DropoutConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def validate(self):
        if self.mix not in MIXES:
            raise ConfigError(f"mix must be one of {MIXES}, got {self.mix!r}")
        if self.masking not in MASKINGS:
            raise ConfigError(f"masking must be one of {MASKINGS}, got {self.masking!r}")
        if self.paired_ratio is not None and not 0.0 <= self.paired_ratio <= 1.0:
            raise ConfigError("paired_ratio must lie in [0, 1]")
        if self.resolution < 8 or self.resolution & (self.resolution - 1):
            raise ConfigError("resolution must be a power of two >= 8")
        if self.steps < 0 or self.batch < 1:
            raise ConfigError("steps must be >= 0 and batch >= 1")
        if self.sampler.scheme not in ("euler", "heun") or self.sampler.steps < 1:
            raise ConfigError("sampler needs steps >= 1 and scheme euler|heun")
        d = self.dropout
        if min(d.p_all, d.p_tex, d.p_face, d.p_pose) < 0 or d.p_all + d.p_tex + d.p_face + d.p_pose > 1:
            raise ConfigError("dropout probabilities must be nonnegative and sum to at most 1")
        self.data.validate()
        return self

    def to_json(self):
        return dataclasses.asdict(self)


_NESTED = {
    "data": DataConfig,
    "raster": RasterConfig,
    "donor": DonorConfig,
    "dropout": DropoutConfig,
    "sampler": SamplerConfig,
}


def _strict(cls, payload, where):
    if not isinstance(payload, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return payload


def config_from_dict(payload):
    _strict(ExperimentConfig, payload, "config")
    kwargs = {}
    for key, value in payload.items():
        if key in _NESTED:
            value = _NESTED[key](**_strict(_NESTED[key], value, key))
        kwargs[key] = value
    try:
        cfg = ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def load_config(path):
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(payload)
