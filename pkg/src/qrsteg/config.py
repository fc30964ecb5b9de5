"""Run configuration: dataclasses plus a flat INI-style file format.

One ``[run]`` key, ``profile``, selects the desk or paper defaults; every other
section (``[model]``, ``[train]``, ``[distortion]``, ``[loss]``) overrides
individual fields.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Union

from .distortion import DistortionConfig
from .objectives import LossWeights


@dataclass
class ModelConfig:
    image_side: int = 224
    patch_size: int = 16
    token_dim: int = 768
    mlp_dim: int = 2048
    heads: int = 8
    tokenizer_depth: int = 2
    aacb_count: int = 4
    alpha_init: float = 0.01
    share_tokenizers: bool = False
    iqrt_on: bool = True
    itf_on: bool = True
    cross_attn_on: bool = True
    iqrt_blocks: int = 2
    iqrt_hidden: int = 32
    qr_version: int = 5
    qr_module_px: int = 5
    # kernel of the per-module scan; 1 samples module centres only
    scan_kernel: int = 5
    scan_threshold: float = 0.02
    # binarisation threshold when reading a restored code
    read_threshold: float = 0.5

    def __post_init__(self):
        if self.image_side % self.patch_size:
            raise ValueError("image_side must be divisible by patch_size")
        if self.aacb_count < 1:
            raise ValueError("aacb_count must be >= 1")


@dataclass
class TrainConfig:
    batch_size: int = 8
    iterations: int = 50_000
    lr_initial: float = 1e-4
    lr_decay: float = 0.9
    lr_floor: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    grad_clip: float = 5.0
    seed: int = 0
    checkpoint_every: int = 0
    cond_limit: float = 1e6

    def __post_init__(self):
        if self.lr_floor > self.lr_initial:
            raise ValueError("lr_floor must not exceed lr_initial")
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")


PROFILES = ("desk", "paper")


@dataclass
class RunConfig:
    profile: str = "paper"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    distortion: DistortionConfig = field(default_factory=DistortionConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    @classmethod
    def for_profile(cls, profile: str) -> "RunConfig":
        if profile == "paper":
            return cls()
        if profile == "desk":
            return cls(
                profile="desk",
                model=ModelConfig(image_side=64, patch_size=8, token_dim=192, mlp_dim=512, aacb_count=2,
                                  scan_kernel=1),
                train=TrainConfig(iterations=500, lr_initial=1e-3, lr_decay=0.99, lr_floor=1e-4),
            )
        raise ValueError(f"unknown profile {profile!r}; expected one of {PROFILES}")

    def to_dict(self) -> dict:
        return {
            "run": {"profile": self.profile},
            "model": asdict(self.model),
            "train": asdict(self.train),
            "distortion": asdict(self.distortion),
            "loss": asdict(self.loss),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        base = cls.for_profile(data.get("run", {}).get("profile", "paper"))
        return replace(
            base,
            model=_update(base.model, data.get("model", {})),
            train=_update(base.train, data.get("train", {})),
            distortion=_update(base.distortion, data.get("distortion", {})),
            loss=_update(base.loss, data.get("loss", {})),
        )

    def to_ini(self) -> str:
        lines = []
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            for key, value in values.items():
                if isinstance(value, (tuple, list)):
                    value = ", ".join(str(v) for v in value)
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_ini())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        parser = configparser.ConfigParser()
        with open(path) as fh:
            parser.read_file(fh)
        return cls.from_dict({s: dict(parser[s]) for s in parser.sections()})


def _coerce(value, current):
    if isinstance(value, list) and isinstance(current, tuple):
        return tuple(type(c)(v) for c, v in zip(current, value))
    if not isinstance(value, str):
        return value
    if isinstance(current, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(float(value))
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        return tuple(type(c)(v.strip()) for c, v in zip(current, value.split(",")))
    return value


def _update(obj, overrides: dict):
    known = {f.name for f in fields(obj)}
    unknown = set(overrides) - known
    if unknown:
        raise KeyError(f"unknown {type(obj).__name__} keys: {sorted(unknown)}")
    return replace(obj, **{k: _coerce(v, getattr(obj, k)) for k, v in overrides.items()})
