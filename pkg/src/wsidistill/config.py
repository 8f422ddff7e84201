"""Configuration dataclasses and the TOML config file loader.

A config file has the sections ``[data]``, ``[views]``, ``[model]``,
``[train]``, ``[adapter]`` and ``[probe]``; every key maps onto a field of the
matching dataclass below. Missing keys keep their defaults.
"""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


VARIANTS = {
    "tiny": dict(depth=6, embed_dim=192, heads=3),
    "small": dict(depth=12, embed_dim=384, heads=6),
    "base": dict(depth=12, embed_dim=768, heads=12),
}


@dataclass
class DataConfig:
    root: str = "data/synthetic"
    level: int = 0
    sample_mode: str = "uniform"  # "uniform" | "tile"
    samples_per_slide: int = 4
    num_workers: int = 0

    def validate(self) -> None:
        if self.sample_mode not in ("uniform", "tile"):
            raise ConfigError(f"unknown sample_mode {self.sample_mode!r}")
        if self.samples_per_slide < 1:
            raise ConfigError("samples_per_slide must be >= 1")


@dataclass
class ViewConfig:
    global_size: int = 224
    local_size: int = 96
    n_local: int = 6
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.4)
    augment: bool = True
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1  # max rotation, fraction of a full turn
    base_gray_p: float = 0.2
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    # strong transforms of the color view
    color_brightness: float = 0.8
    color_saturation: float = 0.8
    color_hue: float = 0.5
    channel_perm_p: float = 0.5
    gray_p: float = 0.2
    mask_ratio: float = 0.3
    shuffle_grid: int = 4
    multiscale_level: int = 1
    multiscale_size: int = 256
    # view toggles, used by the ablations
    multiscale: bool = True
    color_view: bool = True
    shuffle_view: bool = True
    mim_view: bool = True

    def validate(self) -> None:
        if self.n_local < 1:
            raise ConfigError("n_local must be >= 1")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError("mask_ratio must lie in [0, 1]")
        if self.shuffle_grid <= 0:
            raise ConfigError("shuffle_grid must be positive")
        for lo, hi in (self.global_scale, self.local_scale):
            if not 0.0 < lo <= hi <= 1.0:
                raise ConfigError("crop scale ranges must satisfy 0 < lo <= hi <= 1")
        if self.multiscale_level < 1:
            raise ConfigError("multiscale_level must be >= 1")


@dataclass
class EncoderConfig:
    variant_name: str = "tiny"
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 192
    depth: int = 6
    heads: int = 3
    mlp_ratio: float = 4.0
    head_hidden: int = 2048
    head_bottleneck: int = 256
    out_dim: int = 1024
    projector_hidden: int = 512

    @classmethod
    def variant(cls, name: str, **overrides: Any) -> "EncoderConfig":
        if name not in VARIANTS:
            raise ConfigError(f"unknown encoder variant {name!r}")
        return cls(variant_name=name, **{**VARIANTS[name], **overrides})

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads")


@dataclass
class TrainConfig:
    batch_size: int = 64
    base_lr: float = 0.0005
    min_lr: float = 0.0
    epochs: int = 100
    warmup_epochs: int = 10
    tau_s: float = 0.1
    tau_t: float = 0.07
    tau_t_start: float = 0.04
    lambda0: float = 0.996
    loss_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    centering: bool = True
    center_momentum: float = 0.9
    weight_decay: float = 0.04
    clip_grad: float = 3.0
    main_reduction: str = "mean"  # "mean" | "sum"
    masked_in_main: bool = False
    dtype: str = "float32"
    seed: int = 0

    def validate(self) -> None:
        if min(self.tau_s, self.tau_t, self.tau_t_start) <= 0:
            raise ConfigError("temperatures must be positive")
        if not 0.0 <= self.lambda0 <= 1.0:
            raise ConfigError("lambda0 must lie in [0, 1]")
        if self.main_reduction not in ("mean", "sum"):
            raise ConfigError("main_reduction must be 'mean' or 'sum'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if len(self.loss_weights) != 4:
            raise ConfigError("loss_weights needs exactly four entries")
        if self.warmup_epochs > self.epochs:
            raise ConfigError("warmup_epochs exceeds epochs")


@dataclass
class AdapterConfig:
    beta: float = 5.5
    alpha: float = 1.0
    alpha_prime: float = 1.0
    rank: int = 8
    finetune_epochs: int = 50
    finetune_lr: float = 1e-3
    logit_scale: float = 10.0

    def validate(self) -> None:
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if self.alpha < 0 or self.alpha_prime < 0:
            raise ConfigError("mixing weights must be non-negative")
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")


@dataclass
class ProbeConfig:
    kind: str = "linear"  # "linear" | "mil"
    epochs: int = 500
    lr: float = 0.01
    l2: float = 1e-4
    patience: int = 50
    val_fraction: float = 0.25
    test_fraction: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("probe lr must be positive")
        if self.kind not in ("linear", "mil"):
            raise ConfigError(f"unknown probe kind {self.kind!r}")


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    views: ViewConfig = field(default_factory=ViewConfig)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def validate(self) -> "Config":
        for section in (self.data, self.views, self.model, self.train, self.adapter, self.probe):
            section.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def training_hash(self) -> str:
        """Hash of the sections that determine a training trajectory."""
        payload = {k: asdict(getattr(self, k)) for k in ("views", "model", "train")}
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


_SECTIONS = {
    "data": DataConfig,
    "views": ViewConfig,
    "model": EncoderConfig,
    "train": TrainConfig,
    "adapter": AdapterConfig,
    "probe": ProbeConfig,
}


def _build(cls, values: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys for [{cls.__name__}]: {sorted(unknown)}")
    kwargs = {}
    for key, value in values.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(raw: dict) -> Config:
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    parts = {}
    for name, cls in _SECTIONS.items():
        section = dict(raw.get(name, {}))
        if name == "model" and "variant_name" in section:
            variant = section["variant_name"]
            if variant not in VARIANTS:
                raise ConfigError(f"unknown encoder variant {variant!r}")
            section = {**VARIANTS[variant], **section}
        parts[name] = _build(cls, section)
    return Config(**parts).validate()


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config().validate()
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


def with_seed(cfg: Config, seed: int) -> Config:
    return replace(cfg, train=replace(cfg.train, seed=seed), probe=replace(cfg.probe, seed=seed))
