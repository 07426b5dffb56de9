"""Configuration dataclasses and the TOML-based config file format.

A config file has the sections ``model``, ``train``, ``data``, ``synth``,
``augment``, ``ablation`` and ``eval``. Values given on the command line as
``section.key=value`` override the file, which overrides the defaults below.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .errors import ConfigError

MODALITIES = ("t1c", "flairc", "adc")
TASKS = ("invasion", "meningioma")


@dataclass(frozen=True)
class Ablation:
    """Toggles for the task-common branch, contrastive loss and auxiliary heads."""

    tc: bool = True
    l_con: bool = True
    aux: bool = True

    def __post_init__(self):
        if self.l_con and not self.tc:
            raise ConfigError("ablation: l_con requires tc (contrastive loss needs the task-common branch)")


# Table-3 rows: (name, TC, L_con, Aux)
ABLATION_ROWS = {
    "Baseline1": Ablation(tc=False, l_con=False, aux=False),
    "Baseline2": Ablation(tc=True, l_con=False, aux=False),
    "Baseline3": Ablation(tc=True, l_con=True, aux=False),
    "Baseline4": Ablation(tc=True, l_con=False, aux=True),
    "Proposed": Ablation(tc=True, l_con=True, aux=True),
}


@dataclass(frozen=True)
class ModelConfig:
    encoder_scale: str = "full"
    in_shape: tuple[int, int, int] = (128, 128, 24)
    feature_channels: int = 512
    embed_dim: int = 128
    num_tasks: int = 2
    dropout_rate: float = 0.5
    warmup_epochs: int = 30
    alpha: float = 1.0
    beta: float = 0.7
    temperature: float = 0.07
    seed: int = 0
    ablation: Ablation = field(default_factory=Ablation)
    # "common": main head sees G_k (+) G_c ; "aligned": G_k (+) G_{c,k}
    main_input: str = "common"
    # "2x2x2": isotropic 3D kernel ; "2x2": 2x2x1 kernel applied per depth slice
    fuse_kernel: str = "2x2x2"
    main_hidden: tuple[int, ...] = (256, 32)
    aux_hidden: tuple[int, ...] = (512, 256, 32)

    def __post_init__(self):
        object.__setattr__(self, "in_shape", tuple(int(v) for v in self.in_shape))
        object.__setattr__(self, "main_hidden", tuple(int(v) for v in self.main_hidden))
        object.__setattr__(self, "aux_hidden", tuple(int(v) for v in self.aux_hidden))
        if isinstance(self.ablation, dict):
            object.__setattr__(self, "ablation", Ablation(**self.ablation))
        if self.encoder_scale not in ("full", "tiny"):
            raise ConfigError(f"model.encoder_scale must be 'full' or 'tiny', got {self.encoder_scale!r}")
        if len(self.in_shape) != 3 or min(self.in_shape) < 1:
            raise ConfigError(f"model.in_shape must be three positive sizes, got {self.in_shape}")
        if self.feature_channels < 1 or self.embed_dim < 1:
            raise ConfigError("model.feature_channels and model.embed_dim must be positive")
        if self.embed_dim > self.feature_channels:
            raise ConfigError(f"model.embed_dim ({self.embed_dim}) must not exceed feature_channels ({self.feature_channels})")
        if self.num_tasks != 2:
            raise ConfigError("model.num_tasks is fixed at 2")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ConfigError("model.dropout_rate must lie in [0, 1]")
        if self.warmup_epochs < 0:
            raise ConfigError("model.warmup_epochs must be non-negative")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("model.alpha and model.beta must be non-negative")
        if not self.temperature > 0:
            raise ConfigError("model.temperature must be positive")
        if self.main_input not in ("common", "aligned"):
            raise ConfigError(f"model.main_input must be 'common' or 'aligned', got {self.main_input!r}")
        if self.fuse_kernel not in ("2x2x2", "2x2"):
            raise ConfigError(f"model.fuse_kernel must be '2x2x2' or '2x2', got {self.fuse_kernel!r}")

    @classmethod
    def tiny(cls, **kwargs) -> "ModelConfig":
        """Desk-scale preset: reduced encoder on 32x32x8 volumes."""
        defaults = dict(encoder_scale="tiny", in_shape=(32, 32, 8), feature_channels=16, embed_dim=8)
        defaults.update(kwargs)
        return cls(**defaults)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    @property
    def encoder_widths(self) -> tuple[int, int, int, int]:
        c = self.feature_channels
        if self.encoder_scale == "full":
            return (64, 128, 256, c)
        return (max(c // 4, 1), max(c // 2, 1), c, c)

    @property
    def encoder_blocks(self) -> tuple[int, int, int, int]:
        # ResNet34 stage depths at full scale.
        return (3, 4, 6, 3) if self.encoder_scale == "full" else (1, 1, 1, 1)

    def feature_map_shape(self) -> tuple[int, int, int]:
        """Spatial size (h, w, d) of each per-modality feature map."""
        h, w, d = self.in_shape
        # stem: kernel (7,7,3), stride (2,2,3), padding (3,3,0)
        h, w = (h + 6 - 7) // 2 + 1, (w + 6 - 7) // 2 + 1
        d = (d - 3) // 3 + 1
        if self.encoder_scale == "full":
            # max-pool: kernel 3, stride (2,2,1), padding 1
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        for _ in range(3):
            # strided 3x3x3 conv, padding 1, stride (2,2,1)
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        return h, w, d


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    flip_prob: float = 0.5
    noise_sigma: float = 0.01
    crop_fraction: float = 0.9
    crop: bool = True


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-3
    weight_decay: float = 1e-3
    epochs: int = 100
    batch_size: int = 8
    baseline_mode: str = "proposed"
    seeds: tuple[int, ...] = (0,)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval_every: int = 1
    threshold: float = 0.5
    deterministic: bool = True

    def __post_init__(self):
        if isinstance(self.model, dict):
            object.__setattr__(self, "model", model_config_from_dict(self.model))
        if isinstance(self.augment, dict):
            object.__setattr__(self, "augment", AugmentConfig(**self.augment))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.lr > 0:
            raise ConfigError("train.lr must be positive")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be non-negative")
        if self.epochs < 0:
            raise ConfigError("train.epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be positive")
        if self.baseline_mode not in ("proposed", "efmt", "mfmt"):
            raise ConfigError(f"train.baseline_mode must be proposed/efmt/mfmt, got {self.baseline_mode!r}")

    @property
    def ablation(self) -> Ablation:
        return self.model.ablation

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    unknown = set(d) - {f.name for f in dataclasses.fields(ModelConfig)}
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    if "ablation" in d and isinstance(d["ablation"], dict):
        d["ablation"] = Ablation(**d["ablation"])
    return ModelConfig(**d)


def to_plain(obj: Any) -> Any:
    """Dataclasses -> nested dicts of TOML-representable values."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def model_config_to_text(config: ModelConfig) -> str:
    return tomli_w.dumps(to_plain(config))


def model_config_from_text(text: str) -> ModelConfig:
    return model_config_from_dict(tomli.loads(text))


# --- config files ----------------------------------------------------------

DEFAULT_SECTIONS: dict[str, dict[str, Any]] = {
    "model": to_plain(ModelConfig.tiny()),
    "train": {k: v for k, v in to_plain(TrainConfig()).items() if k not in ("model", "augment")},
    "augment": to_plain(AugmentConfig()),
    "data": {"manifest": "", "train_fraction": 0.5, "split_seed": 0, "preprocess": True, "standardize": True},
    "synth": {
        "n_samples": 200,
        "shape": [32, 32, 8],
        "prevalence_grade": 0.3,
        "prevalence_invasion": 0.1,
        "signal_common": 1.0,
        "signal_grade": 0.5,
        "signal_invasion": 0.5,
        "noise_sigma": 1.0,
        "seed": 0,
        "pattern_seed": 0,
    },
    "ablation": {"rows": list(ABLATION_ROWS), "parallel": 1},
    "eval": {"checkpoint": "", "split": "test", "threshold": 0.5},
}
DEFAULT_SECTIONS["train"]["batch_size"] = 16
DEFAULT_SECTIONS["model"].pop("ablation")
DEFAULT_SECTIONS["ablation"].update(to_plain(Ablation()))


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in base.items()}
    for key, value in update.items():
        if key not in out:
            raise ConfigError(f"unknown config key: {where}{key}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key} must be a section")
            out[key] = _merge(out[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def parse_value(text: str) -> Any:
    """Interpret an override value with TOML scalar/array syntax, falling back to a bare string."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    cfg = _merge(cfg, {})
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config key: {key}")
            node = node[p]
        if parts[-1] not in node or isinstance(node[parts[-1]], dict):
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = parse_value(raw.strip())
    return cfg


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> dict:
    """Resolve defaults < file < overrides into one nested dict."""
    cfg = _merge(DEFAULT_SECTIONS, {})
    if path:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_cfg = tomli.loads(path.read_text(encoding="utf-8"))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        cfg = _merge(cfg, file_cfg)
    return apply_overrides(cfg, list(overrides))


def dump_config(cfg: dict) -> str:
    return tomli_w.dumps(cfg)


def resolve_model_config(cfg: dict) -> ModelConfig:
    d = dict(cfg["model"])
    d["ablation"] = Ablation(**{k: cfg["ablation"][k] for k in ("tc", "l_con", "aux")})
    try:
        return model_config_from_dict(d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def resolve_train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(model=resolve_model_config(cfg), augment=AugmentConfig(**cfg["augment"]), **cfg["train"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
