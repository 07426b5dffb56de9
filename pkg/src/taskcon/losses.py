"""Task-aware contrastive losses, classification losses and the weighted objective."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ConfigError, NumericError

TERMS = ("cls_inv", "cls_men", "con_inv", "con_men", "aux_inv", "aux_men")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def cosine_similarity(a, b, names=("a", "b")) -> torch.Tensor:
    """Cosine similarity along the last axis.

    Unlike ``F.cosine_similarity`` this refuses zero-norm inputs instead of
    clamping the norm with an epsilon.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"length mismatch: {names[0]} has {a.shape[-1]}, {names[1]} has {b.shape[-1]}")
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    for name, n in zip(names, (na, nb)):
        if bool((n == 0).any()):
            raise ValueError(f"cosine similarity undefined: {name} has zero norm")
    sim = (a * b).sum(-1) / (na * nb)
    return sim.clamp(-1.0, 1.0)


def contrastive_loss(anchor, positive, negative, temperature: float) -> torch.Tensor:
    """-log softmax weight of the positive among {positive, negative}.

    Works on single vectors or on batches (leading axes); returns one loss per
    anchor.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    s_pos = cosine_similarity(anchor, positive, ("anchor", "positive")) / temperature
    s_neg = cosine_similarity(anchor, negative, ("anchor", "negative")) / temperature
    logits = torch.stack([s_pos, s_neg], dim=-1)
    return torch.logsumexp(logits, dim=-1) - s_pos


def classification_loss(logits, labels) -> torch.Tensor:
    """Per-sample softmax cross-entropy for two-class logits."""
    logits = _as_tensor(logits)
    labels = torch.as_tensor(labels)
    if labels.dtype.is_floating_point and bool((labels != labels.round()).any()):
        raise ValueError("labels must be 0 or 1")
    labels = labels.long()
    if bool(((labels != 0) & (labels != 1)).any()):
        raise ValueError(f"labels must be 0 or 1, got {labels.unique().tolist()}")
    if logits.shape[-1] != 2:
        raise ValueError(f"expected two logits per sample, got shape {tuple(logits.shape)}")
    if logits.dim() == 1:
        return F.cross_entropy(logits.unsqueeze(0), labels.reshape(1), reduction="none")[0]
    return F.cross_entropy(logits, labels, reduction="none")


@dataclass
class LossReport:
    """Batch-mean loss terms and the weighted total.

    Terms removed by the ablation config are stored as 0.0 and listed in
    ``absent``. ``objective`` keeps the differentiable total and is not
    serialized.
    """

    cls_inv: float = 0.0
    cls_men: float = 0.0
    con_inv: float = 0.0
    con_men: float = 0.0
    aux_inv: float = 0.0
    aux_men: float = 0.0
    total: float = 0.0
    contrastive_active: bool = False
    alpha: float = 1.0
    beta: float = 0.7
    absent: tuple[str, ...] = ()
    objective: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def recompose(self) -> float:
        con = (self.con_inv + self.con_men) if self.contrastive_active else 0.0
        return self.cls_inv + self.cls_men + self.alpha * con + self.beta * (self.aux_inv + self.aux_men)

    def to_dict(self) -> dict:
        d = {t: getattr(self, t) for t in TERMS}
        d.update(total=self.total, contrastive_active=self.contrastive_active, absent=list(self.absent))
        return d

    @classmethod
    def mean(cls, reports: list["LossReport"], weights: list[float]) -> "LossReport":
        """Sample-weighted average of per-batch reports (one epoch)."""
        if not reports:
            raise ValueError("no reports to average")
        wsum = float(sum(weights))
        vals = {t: sum(getattr(r, t) * w for r, w in zip(reports, weights)) / wsum for t in TERMS + ("total",)}
        head = reports[0]
        return cls(**vals, contrastive_active=head.contrastive_active, alpha=head.alpha, beta=head.beta,
                   absent=head.absent)


def _check(name: str, value: torch.Tensor) -> None:
    if not bool(torch.isfinite(value).all()):
        raise NumericError(f"loss term {name} is not finite")


def total_loss(outputs, labels_inv, labels_grade, config: ModelConfig, epoch: int,
               baseline: bool = False) -> LossReport:
    """Weighted multi-task objective for one batch.

    ``outputs`` is a :class:`taskcon.model.ModelOutputs`. The contrastive
    terms enter only once ``epoch >= config.warmup_epochs`` (0-based epochs).
    Baseline models (EFMT/MFMT) carry only the two classification terms.
    """
    if epoch < 0:
        raise ConfigError(f"epoch must be non-negative, got {epoch}")
    ab = config.ablation
    use_con = ab.l_con and not baseline
    use_aux = ab.aux and not baseline
    active = use_con and epoch >= config.warmup_epochs

    per_sample = {}
    per_sample["cls_inv"] = classification_loss(outputs.main_logits_inv, labels_inv)
    per_sample["cls_men"] = classification_loss(outputs.main_logits_men, labels_grade)
    absent = []
    if use_con:
        f = outputs.features
        per_sample["con_inv"] = contrastive_loss(f.G_ci, f.Ghat_i, f.Ghat_m, config.temperature)
        per_sample["con_men"] = contrastive_loss(f.G_cm, f.Ghat_m, f.Ghat_i, config.temperature)
    else:
        absent += ["con_inv", "con_men"]
    if use_aux:
        per_sample["aux_inv"] = classification_loss(outputs.aux_logits_inv, labels_inv)
        per_sample["aux_men"] = classification_loss(outputs.aux_logits_men, labels_grade)
    else:
        absent += ["aux_inv", "aux_men"]

    for name, value in per_sample.items():
        _check(name, value)

    total = per_sample["cls_inv"] + per_sample["cls_men"]
    if active:
        total = total + config.alpha * (per_sample["con_inv"] + per_sample["con_men"])
    if use_aux:
        total = total + config.beta * (per_sample["aux_inv"] + per_sample["aux_men"])
    objective = total.mean()
    _check("total", objective)

    means = {name: float(v.detach().mean()) for name, v in per_sample.items()}
    return LossReport(
        **means,
        total=float(objective.detach()),
        contrastive_active=active,
        alpha=config.alpha,
        beta=config.beta,
        absent=tuple(absent),
        objective=objective,
    )


def l2_penalty(parameters, weight_decay: float) -> torch.Tensor:
    """``weight_decay / 2 * sum ||theta||^2``; its gradient is ``weight_decay * theta``."""
    params = [p for p in parameters if p.requires_grad]
    if not params:
        return torch.zeros(())
    sq = sum((p * p).sum() for p in params)
    return 0.5 * weight_decay * sq


def single_negative_bound(temperature: float) -> float:
    """Supremum of the contrastive loss with one negative: log(1 + e^{2/tau})."""
    x = 2.0 / temperature
    return x + math.log1p(math.exp(-x))
