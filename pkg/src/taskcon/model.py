"""Multi-modal multi-task network with task-specific / task-common disentanglement.

Layout of :class:`TaskContrastNet`::

    t1c    -> encoder.t1c    -> F_T \
    flairc -> encoder.flairc -> F_F  > concat -> fuse.{inv,men,common} -> G_i, G_m, G_c
    adc    -> encoder.adc    -> F_A /
    G_c -> align.{invasion,meningioma}     -> G_ci, G_cm
    G_i, G_m -> project.{invasion,meningioma} -> Ghat_i, Ghat_m
    (G_i, G_c) -> main.invasion ; (G_m, G_c) -> main.meningioma
    G_i -> aux.invasion ; G_m -> aux.meningioma

Volumes are laid out as ``(batch, modality, h, w, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import MODALITIES, TASKS, ModelConfig, model_config_from_text, model_config_to_text
from .errors import ConfigError, NumericError

BASELINE_MODES = ("proposed", "efmt", "mfmt")


@dataclass
class FeatureBundle:
    F_T: Optional[torch.Tensor] = None
    F_F: Optional[torch.Tensor] = None
    F_A: Optional[torch.Tensor] = None
    G_i: Optional[torch.Tensor] = None
    G_m: Optional[torch.Tensor] = None
    G_c: Optional[torch.Tensor] = None
    G_ci: Optional[torch.Tensor] = None
    G_cm: Optional[torch.Tensor] = None
    Ghat_i: Optional[torch.Tensor] = None
    Ghat_m: Optional[torch.Tensor] = None

    def present(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in vars(self).items() if v is not None}


@dataclass
class ModelOutputs:
    main_logits_inv: torch.Tensor
    main_logits_men: torch.Tensor
    aux_logits_inv: Optional[torch.Tensor] = None
    aux_logits_men: Optional[torch.Tensor] = None
    features: Optional[FeatureBundle] = None

    def positive_probs(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Softmax probability of class 1 from the main heads, per task."""
        return (F.softmax(self.main_logits_inv, dim=-1)[..., 1],
                F.softmax(self.main_logits_men, dim=-1)[..., 1])


def _check_finite(t: torch.Tensor, where: str) -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NumericError(f"non-finite activations after {where}")
    return t


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=(1, 1, 1)):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm3d(cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(cout)
        if cin != cout or tuple(stride) != (1, 1, 1):
            self.downsample = nn.Sequential(
                nn.Conv3d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm3d(cout)
            )
        else:
            self.downsample = None
        self.relu1 = nn.ReLU()
        self.relu2 = nn.ReLU()

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu1(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu2(out + identity)


class ResidualEncoder3d(nn.Module):
    """3D ResNet feature extractor without the classification tail.

    At full scale this is ResNet34 (3, 4, 6, 3 basic blocks). Depth is strided
    once by 3 in the stem and never again, in-plane axes are halved by the
    stem, the max-pool (full scale only) and stages 2-4, so a 128x128x24
    volume becomes a 4x4x8 map.
    """

    def __init__(self, in_channels: int, widths, blocks, use_maxpool: bool):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv3d(in_channels, widths[0], (7, 7, 3), stride=(2, 2, 3), padding=(3, 3, 0), bias=False),
            nn.BatchNorm3d(widths[0]),
            nn.ReLU(),
        )
        self.pool = nn.MaxPool3d(3, stride=(2, 2, 1), padding=1) if use_maxpool else nn.Identity()
        cin = widths[0]
        for i, (cout, n) in enumerate(zip(widths, blocks)):
            stride = (1, 1, 1) if i == 0 else (2, 2, 1)
            layers = [BasicBlock(cin, cout, stride)]
            layers += [BasicBlock(cout, cout) for _ in range(n - 1)]
            setattr(self, f"stage{i + 1}", nn.Sequential(*layers))
            cin = cout
        self.out_channels = cin

    def forward(self, x, name="encoder"):
        x = _check_finite(self.pool(self.stem(x)), f"{name}.stem")
        for i in range(1, 5):
            x = _check_finite(getattr(self, f"stage{i}")(x), f"{name}.stage{i}")
        return x


def mlp(in_dim: int, hidden, out_dim: int, dropout: float) -> nn.Sequential:
    layers = []
    d = in_dim
    for h in hidden:
        layers += [nn.Linear(d, h), nn.ReLU(), nn.Dropout(dropout)]
        d = h
    layers.append(nn.Linear(d, out_dim))
    return nn.Sequential(*layers)


def init_weights(module: nn.Module, seed: int) -> None:
    """Seeded He-normal init; zero biases; unit/zero batch-norm affine."""
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu", generator=gen)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm3d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def _task_key(task: str) -> str:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    return task


def _modality_key(role: str) -> str:
    key = role.lower().replace("_", "").replace("-", "")
    if key not in MODALITIES:
        raise ValueError(f"unknown modality {role!r}; expected one of T1C, FLAIR_C, ADC")
    return key


class TaskContrastNet(nn.Module):
    """The proposed network; ``config.ablation`` removes branches structurally."""

    mode = "proposed"

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c, e = config.feature_channels, config.embed_dim
        ab = config.ablation
        fm = config.feature_map_shape()
        kernel = (2, 2, 2) if config.fuse_kernel == "2x2x2" else (2, 2, 1)
        if any(s < k for s, k in zip(fm, kernel)):
            raise ConfigError(f"feature map {fm} from in_shape {config.in_shape} is smaller than the fusion kernel {kernel}")

        self.encoder = nn.ModuleDict({
            m: ResidualEncoder3d(1, config.encoder_widths, config.encoder_blocks, config.encoder_scale == "full")
            for m in MODALITIES
        })
        heads = ["inv", "men"] + (["common"] if ab.tc else [])
        self.fuse = nn.ModuleDict({k: nn.Conv3d(3 * c, c, kernel) for k in heads})
        if ab.tc:
            self.align = nn.ModuleDict({t: nn.Linear(c, e) for t in TASKS})
        if ab.l_con:
            self.project = nn.ModuleDict({t: nn.Linear(c, e) for t in TASKS})
        if not ab.tc:
            main_in = c
        elif config.main_input == "common":
            main_in = 2 * c
        else:
            main_in = c + e
        self.main = nn.ModuleDict({t: mlp(main_in, config.main_hidden, 2, config.dropout_rate) for t in TASKS})
        if ab.aux:
            self.aux = nn.ModuleDict({t: mlp(c, config.aux_hidden, 2, config.dropout_rate) for t in TASKS})
        init_weights(self, config.seed)

    # -- individual stages -------------------------------------------------

    def encode_modality(self, volume: torch.Tensor, modality_role: str) -> torch.Tensor:
        """(N, h, w, d) or (N, 1, h, w, d) volume -> (N, C, h', w', d') map."""
        key = _modality_key(modality_role)
        if volume.dim() == 4:
            volume = volume.unsqueeze(1)
        if tuple(volume.shape[2:]) != self.config.in_shape:
            raise ConfigError(f"volume shape {tuple(volume.shape[2:])} does not match in_shape {self.config.in_shape}")
        return self.encoder[key](volume, name=f"encoder.{key}")

    def fuse_and_disentangle(self, f_t, f_f, f_a):
        if not (f_t.shape == f_f.shape == f_a.shape):
            raise ValueError(f"feature maps differ in shape: {tuple(f_t.shape)}, {tuple(f_f.shape)}, {tuple(f_a.shape)}")
        fused = torch.cat([f_t, f_f, f_a], dim=1)
        out = []
        for k in ("inv", "men", "common"):
            if k in self.fuse:
                out.append(self.fuse[k](fused).mean(dim=(2, 3, 4)))
            else:
                out.append(None)
        return tuple(out)

    def align_common(self, g_c: torch.Tensor, task: str) -> torch.Tensor:
        if not self.config.ablation.tc:
            raise ConfigError("align_common unavailable: task-common branch disabled")
        return self.align[_task_key(task)](g_c)

    def project_specific(self, g_k: torch.Tensor, task: str) -> torch.Tensor:
        if not self.config.ablation.l_con:
            raise ConfigError("project_specific unavailable: contrastive loss disabled")
        return self.project[_task_key(task)](g_k)

    def predict_main(self, task_specific: torch.Tensor, common: Optional[torch.Tensor], task: str) -> torch.Tensor:
        head = self.main[_task_key(task)]
        x = task_specific if common is None else torch.cat([task_specific, common], dim=-1)
        if x.shape[-1] != head[0].in_features:
            raise ValueError(f"main head for {task} expects {head[0].in_features} inputs, got {x.shape[-1]}")
        return head(x)

    def predict_aux(self, task_specific: torch.Tensor, task: str) -> torch.Tensor:
        if not self.config.ablation.aux:
            raise ConfigError("predict_aux unavailable: auxiliary branch disabled")
        head = self.aux[_task_key(task)]
        if task_specific.shape[-1] != head[0].in_features:
            raise ValueError(f"aux head for {task} expects {head[0].in_features} inputs, got {task_specific.shape[-1]}")
        return head(task_specific)

    # -- composition -------------------------------------------------------

    def forward(self, x: torch.Tensor) -> ModelOutputs:
        if x.dim() != 5 or x.shape[1] != 3:
            raise ConfigError(f"expected input of shape (N, 3, h, w, d), got {tuple(x.shape)}")
        ab = self.config.ablation
        fb = FeatureBundle()
        fb.F_T, fb.F_F, fb.F_A = (self.encode_modality(x[:, i:i + 1], m) for i, m in enumerate(MODALITIES))
        try:
            fb.G_i, fb.G_m, fb.G_c = self.fuse_and_disentangle(fb.F_T, fb.F_F, fb.F_A)
        except (RuntimeError, ValueError) as exc:
            raise type(exc)(f"fuse_and_disentangle: {exc}") from exc
        for name in ("G_i", "G_m", "G_c"):
            if getattr(fb, name) is not None:
                _check_finite(getattr(fb, name), f"fuse ({name})")
        if ab.tc:
            fb.G_ci = self.align_common(fb.G_c, "invasion")
            fb.G_cm = self.align_common(fb.G_c, "meningioma")
        if ab.l_con:
            fb.Ghat_i = self.project_specific(fb.G_i, "invasion")
            fb.Ghat_m = self.project_specific(fb.G_m, "meningioma")
        if not ab.tc:
            common_i = common_m = None
        elif self.config.main_input == "common":
            common_i = common_m = fb.G_c
        else:
            common_i, common_m = fb.G_ci, fb.G_cm
        out = ModelOutputs(
            main_logits_inv=self.predict_main(fb.G_i, common_i, "invasion"),
            main_logits_men=self.predict_main(fb.G_m, common_m, "meningioma"),
            features=fb,
        )
        if ab.aux:
            out.aux_logits_inv = self.predict_aux(fb.G_i, "invasion")
            out.aux_logits_men = self.predict_aux(fb.G_m, "meningioma")
        return out


class EarlyFusionBaseline(nn.Module):
    """EFMT: one encoder over the channel-stacked modalities, two classifiers."""

    mode = "efmt"

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.feature_channels
        self.encoder = ResidualEncoder3d(3, config.encoder_widths, config.encoder_blocks, config.encoder_scale == "full")
        self.head = nn.ModuleDict({t: mlp(c, config.aux_hidden, 2, config.dropout_rate) for t in TASKS})
        init_weights(self, config.seed)

    def forward(self, x):
        if x.dim() != 5 or x.shape[1] != 3 or tuple(x.shape[2:]) != self.config.in_shape:
            raise ConfigError(f"expected input (N, 3, {self.config.in_shape}), got {tuple(x.shape)}")
        g = self.encoder(x, name="encoder").mean(dim=(2, 3, 4))
        return ModelOutputs(self.head["invasion"](g), self.head["meningioma"](g), features=FeatureBundle())


class MiddleFusionBaseline(nn.Module):
    """MFMT: three encoders, pooled features concatenated (3C), two classifiers."""

    mode = "mfmt"

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.feature_channels
        self.encoder = nn.ModuleDict({
            m: ResidualEncoder3d(1, config.encoder_widths, config.encoder_blocks, config.encoder_scale == "full")
            for m in MODALITIES
        })
        self.head = nn.ModuleDict({t: mlp(3 * c, config.aux_hidden, 2, config.dropout_rate) for t in TASKS})
        init_weights(self, config.seed)

    def forward(self, x):
        if x.dim() != 5 or x.shape[1] != 3 or tuple(x.shape[2:]) != self.config.in_shape:
            raise ConfigError(f"expected input (N, 3, {self.config.in_shape}), got {tuple(x.shape)}")
        maps = [self.encoder[m](x[:, i:i + 1], name=f"encoder.{m}") for i, m in enumerate(MODALITIES)]
        g = torch.cat([f.mean(dim=(2, 3, 4)) for f in maps], dim=-1)
        fb = FeatureBundle(F_T=maps[0], F_F=maps[1], F_A=maps[2])
        return ModelOutputs(self.head["invasion"](g), self.head["meningioma"](g), features=fb)


def build_baseline(mode: str, config: ModelConfig) -> nn.Module:
    if mode == "efmt":
        return EarlyFusionBaseline(config)
    if mode == "mfmt":
        return MiddleFusionBaseline(config)
    raise ConfigError(f"unknown baseline mode {mode!r}; expected 'efmt' or 'mfmt'")


def build_model(config: ModelConfig, mode: str = "proposed") -> nn.Module:
    if mode == "proposed":
        return TaskContrastNet(config)
    return build_baseline(mode, config)


def forward_sample(model: nn.Module, sample, mode: str = "eval") -> ModelOutputs:
    """Run one :class:`taskcon.data.MultiModalSample` through ``model``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    dtype = next(model.parameters()).dtype
    x = torch.stack([torch.as_tensor(sample.volumes[m], dtype=dtype) for m in MODALITIES]).unsqueeze(0)
    if mode == "eval":
        with torch.no_grad():
            return model(x)
    return model(x)


def parameter_groups(model: nn.Module) -> dict[str, list[torch.nn.Parameter]]:
    """Parameters keyed by head, e.g. ``encoder.t1c``, ``fuse.common``, ``aux.invasion``."""
    groups: dict[str, list] = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] in ("encoder", "fuse", "align", "project", "main", "aux", "head") \
            and isinstance(getattr(model, parts[0]), nn.ModuleDict) else parts[0]
        groups.setdefault(key, []).append(p)
    return groups


def parameters_disjoint(model: nn.Module) -> bool:
    seen: dict[int, str] = {}
    for group, params in parameter_groups(model).items():
        for p in params:
            ptr = p.data_ptr()
            if ptr in seen and seen[ptr] != group:
                return False
            seen[ptr] = group
    return True


# --- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    """Weights plus the config and epoch counter needed to rebuild a model."""

    config: ModelConfig
    state: dict
    epoch: int = 0
    mode: str = "proposed"

    @classmethod
    def from_model(cls, model: nn.Module, epoch: int) -> "Checkpoint":
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(model.config, state, epoch, model.mode)

    def build(self) -> nn.Module:
        model = build_model(self.config, self.mode)
        first = next(iter(self.state.values()), None)
        if first is not None and first.is_floating_point():
            model = model.to(first.dtype)
        verify_state(model, self.state)
        model.load_state_dict(self.state)
        model.eval()
        return model

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "tensors": self.state,
            "config": model_config_to_text(self.config),
            "epoch": int(self.epoch),
            "mode": self.mode,
        }, path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        blob = torch.load(Path(path), map_location="cpu", weights_only=True)
        for key in ("tensors", "config", "epoch", "mode"):
            if key not in blob:
                raise ConfigError(f"{path}: checkpoint lacks '{key}'")
        ckpt = cls(model_config_from_text(blob["config"]), blob["tensors"], int(blob["epoch"]), blob["mode"])
        verify_state(build_model(ckpt.config, ckpt.mode), ckpt.state)
        return ckpt


def verify_state(model: nn.Module, state: dict) -> None:
    expected = model.state_dict()
    missing = sorted(set(expected) - set(state))
    extra = sorted(set(state) - set(expected))
    if missing or extra:
        raise ConfigError(f"checkpoint keys do not match model: missing={missing[:5]} unexpected={extra[:5]}")
    for k, v in expected.items():
        if tuple(state[k].shape) != tuple(v.shape):
            raise ConfigError(f"checkpoint tensor {k} has shape {tuple(state[k].shape)}, expected {tuple(v.shape)}")
