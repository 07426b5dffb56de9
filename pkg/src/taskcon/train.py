"""Training loop, evaluation and the ablation harness."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import ABLATION_ROWS, TASKS, Ablation, TrainConfig
from .data import MultiModalSample, augment, stack, stratified_split
from .errors import NumericError, TrainingError
from .losses import LossReport, l2_penalty, total_loss
from .metrics import METRIC_LABELS, METRIC_NAMES, MetricReport, evaluate_task
from .model import Checkpoint, build_model

log = logging.getLogger(__name__)


@dataclass
class EpochRecord:
    epoch: int
    loss: LossReport
    l2: float
    eval: Optional[dict[str, MetricReport]] = None
    seconds: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {"epoch": self.epoch, "loss": self.loss.to_dict(), "l2": self.l2,
             "eval": None if self.eval is None else {t: r.to_dict() for t, r in self.eval.items()}}
        if include_timing:
            d["seconds"] = self.seconds
        return d


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_auc: float = -math.inf
    best_checkpoint: Optional[Checkpoint] = field(default=None, repr=False)

    def __len__(self):
        return len(self.records)

    def to_ndjson(self, include_timing: bool = False) -> str:
        """One JSON object per epoch. Wall-clock time is left out by default so
        that logs of deterministic runs compare equal byte for byte."""
        return "".join(json.dumps(r.to_dict(include_timing), sort_keys=True) + "\n" for r in self.records)

    def timing_ndjson(self) -> str:
        return "".join(json.dumps({"epoch": r.epoch, "seconds": r.seconds}) + "\n" for r in self.records)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_ndjson(), encoding="utf-8")
        return path

    @property
    def losses(self) -> list[float]:
        return [r.loss.total for r in self.records]


def configure_determinism(enabled: bool) -> None:
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _to_tensors(samples, dtype):
    x, inv, grade = stack(samples)
    return torch.as_tensor(x, dtype=dtype), torch.as_tensor(inv), torch.as_tensor(grade)


def _check_train_set(train_set: Sequence[MultiModalSample]) -> None:
    if not train_set:
        raise TrainingError("training set is empty")
    for name, labels in (("grade", [s.label_grade for s in train_set]),
                         ("invasion", [s.label_invasion for s in train_set])):
        if len(set(labels)) < 2:
            raise TrainingError(f"training set has a single {name} class")


def train(config: TrainConfig, train_set: Sequence[MultiModalSample],
          eval_set: Sequence[MultiModalSample] = (), seed: Optional[int] = None,
          out_dir=None, dtype=torch.float32) -> tuple[Checkpoint, TrainHistory]:
    """Train one model; returns the final-epoch checkpoint and the history.

    The run seed (``seed`` or ``config.seeds[0]``) seeds the weights, the
    batch order and the augmentation stream. With ``out_dir`` the final,
    best-by-eval-AUC and (on divergence) last-good checkpoints are written
    under ``out_dir/checkpoints`` together with ``history.ndjson``.
    """
    seed = config.seeds[0] if seed is None else int(seed)
    configure_determinism(config.deterministic)
    model_cfg = config.model.replace(seed=seed)
    baseline = config.baseline_mode != "proposed"
    torch.manual_seed(seed)
    model = build_model(model_cfg, config.baseline_mode).to(dtype)
    history = TrainHistory()
    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = Path(out_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    if config.epochs == 0:
        final = Checkpoint.from_model(model, 0)
        if ckpt_dir:
            final.save(ckpt_dir / "final.ckpt")
            history.write(Path(out_dir) / "history.ndjson")
        return final, history

    _check_train_set(train_set)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng([seed, 17])
    aug_rng = np.random.default_rng([seed, 29])
    last_good = Checkpoint.from_model(model, 0)

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        model.train()
        reports, weights, l2_sum = [], [], 0.0
        for idx in _batches(len(train_set), config.batch_size, rng):
            batch = [train_set[i] for i in idx]
            if config.augment.enabled:
                batch = [augment(s, aug_rng, config.augment) for s in batch]
            x, y_inv, y_grade = _to_tensors(batch, dtype)
            try:
                out = model(x)
                rep = total_loss(out, y_inv, y_grade, model_cfg, epoch, baseline=baseline)
                penalty = l2_penalty(model.parameters(), config.weight_decay)
                objective = rep.objective + penalty
                if not torch.isfinite(objective):
                    raise NumericError("regularized objective is not finite")
            except NumericError as exc:
                if ckpt_dir:
                    last_good.save(ckpt_dir / "last_good.ckpt")
                raise TrainingError(f"diverged at epoch {epoch}: {exc}", last_good=last_good) from exc
            opt.zero_grad(set_to_none=True)
            objective.backward()
            opt.step()
            rep.objective = None
            reports.append(rep)
            weights.append(len(idx))
            l2_sum += float(penalty.detach()) * len(idx)
        epoch_loss = LossReport.mean(reports, weights)
        last_good = Checkpoint.from_model(model, epoch + 1)

        evals = None
        is_last = epoch == config.epochs - 1
        if eval_set and config.eval_every and ((epoch + 1) % config.eval_every == 0 or is_last):
            inv_rep, men_rep = evaluate(model, eval_set, config.threshold)
            evals = {"invasion": inv_rep, "meningioma": men_rep}
            score = np.nanmean([inv_rep.auc, men_rep.auc])
            if np.isfinite(score) and score > history.best_auc:
                history.best_auc = float(score)
                history.best_epoch = epoch
                history.best_checkpoint = last_good
        history.records.append(EpochRecord(epoch, epoch_loss, l2_sum / sum(weights), evals,
                                           time.perf_counter() - t0))
        log.info("epoch %d loss %.4f%s", epoch, epoch_loss.total,
                 "" if evals is None else f" auc {evals['invasion'].auc:.3f}/{evals['meningioma'].auc:.3f}")

    final = last_good
    if ckpt_dir:
        final.save(ckpt_dir / "final.ckpt")
        if history.best_checkpoint is not None:
            history.best_checkpoint.save(ckpt_dir / "best.ckpt")
        history.write(Path(out_dir) / "history.ndjson")
    return final, history


def predict(model, samples: Sequence[MultiModalSample], batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode positive-class probabilities (invasion, grade) from the main heads."""
    model.eval()
    dtype = next(model.parameters()).dtype
    p_inv, p_men = [], []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            x, _, _ = _to_tensors(samples[start:start + batch_size], dtype)
            a, b = model(x).positive_probs()
            p_inv.append(a.double().numpy())
            p_men.append(b.double().numpy())
    return np.concatenate(p_inv), np.concatenate(p_men)


def evaluate(checkpoint, eval_set: Sequence[MultiModalSample], threshold: float = 0.5):
    """MetricReports (invasion, meningioma) for a checkpoint or a model."""
    model = checkpoint.build() if isinstance(checkpoint, Checkpoint) else checkpoint
    shape = tuple(eval_set[0].shape)
    if shape != model.config.in_shape:
        raise TrainingError(f"eval volumes have shape {shape}, checkpoint expects {model.config.in_shape}")
    was_training = model.training
    p_inv, p_men = predict(model, eval_set)
    model.train(was_training)
    y_inv = np.array([s.label_invasion for s in eval_set])
    y_grade = np.array([s.label_grade for s in eval_set])
    return evaluate_task(p_inv, y_inv, threshold), evaluate_task(p_men, y_grade, threshold)


# --- ablation -------------------------------------------------------------

@dataclass
class AblationCell:
    row: str
    seed: int
    reports: Optional[dict[str, MetricReport]] = None
    contrastive_epochs: int = 0
    error: Optional[str] = None


def _run_cell(args):
    row, ablation, seed, config, train_set, eval_set = args
    cfg = config.replace(model=config.model.replace(ablation=ablation))
    try:
        final, history = train(cfg, train_set, (), seed=seed)
        inv, men = evaluate(final, eval_set, cfg.threshold)
    except Exception as exc:  # one failing cell must not stop the grid
        log.exception("ablation cell %s seed %s failed", row, seed)
        return AblationCell(row, seed, error=f"{type(exc).__name__}: {exc}")
    n_con = sum(1 for r in history.records if r.loss.contrastive_active)
    return AblationCell(row, seed, {"invasion": inv, "meningioma": men}, n_con)


@dataclass
class AblationTable:
    rows: dict[str, Ablation]
    cells: list[AblationCell]

    def row_cells(self, row: str) -> list[AblationCell]:
        return [c for c in self.cells if c.row == row]

    def summary(self, row: str) -> dict[str, tuple[float, float, int]]:
        """``task_metric -> (mean, sd, n)`` over successful seeds; sd is NaN for n < 2."""
        ok = [c for c in self.row_cells(row) if c.reports is not None]
        out = {}
        for task in TASKS:
            for m in METRIC_NAMES:
                vals = np.array([getattr(c.reports[task], m) for c in ok], dtype=float)
                vals = vals[np.isfinite(vals)]
                mean = float(vals.mean()) if vals.size else math.nan
                sd = float(vals.std(ddof=1)) if vals.size > 1 else math.nan
                out[f"{task}_{m}"] = (mean, sd, int(vals.size))
        return out

    def mean(self, row: str, task: str, metric: str) -> float:
        return self.summary(row)[f"{task}_{metric}"][0]

    def metric_columns(self) -> list[str]:
        return [f"{t}_{m}" for t in TASKS for m in METRIC_NAMES]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = self.metric_columns()
        w.writerow(["baseline", "TC", "L_con", "Aux", "n_runs", "failed", *cols, *[c + "_sd" for c in cols]])
        for name, ab in self.rows.items():
            s = self.summary(name)
            cells = self.row_cells(name)
            failed = ";".join(f"seed {c.seed}: {c.error}" for c in cells if c.error)
            n_ok = sum(c.reports is not None for c in cells)
            means = ["" if math.isnan(s[c][0]) else f"{s[c][0]:.6f}" for c in cols]
            sds = ["" if math.isnan(s[c][1]) else f"{s[c][1]:.6f}" for c in cols]
            w.writerow([name, int(ab.tc), int(ab.l_con), int(ab.aux), n_ok, failed, *means, *sds])
        return buf.getvalue()

    def render(self) -> str:
        """Plain-text table: one column per configuration, one row per task metric."""
        names = list(self.rows)
        summaries = {n: self.summary(n) for n in names}
        lines = [["", ""] + names]
        for flag, label in (("tc", "TC"), ("l_con", "L_con"), ("aux", "Aux")):
            lines.append(["Ablation", label] + ["x" if not getattr(self.rows[n], flag) else "v" for n in names])
        for task in TASKS:
            for m in METRIC_NAMES:
                row = [task.capitalize(), METRIC_LABELS[m]]
                for n in names:
                    mean, sd, k = summaries[n][f"{task}_{m}"]
                    if math.isnan(mean):
                        row.append("n/a")
                    elif math.isnan(sd):
                        row.append(f"{mean:.4f}")
                    else:
                        row.append(f"{mean:.4f}±{sd:.4f}")
                lines.append(row)
        widths = [max(len(r[i]) for r in lines) for i in range(len(lines[0]))]
        text = "\n".join("  ".join(c.ljust(wd) for c, wd in zip(r, widths)).rstrip() for r in lines)
        failures = [c for c in self.cells if c.error]
        if failures:
            text += "\n\nfailed cells:\n" + "\n".join(f"  {c.row} seed {c.seed}: {c.error}" for c in failures)
        if all(len(self.row_cells(n)) < 2 for n in names):
            text += "\n\n(single run per configuration: no standard deviations)"
        return text + "\n"


def run_ablation(base_config: TrainConfig, dataset: Sequence[MultiModalSample], seeds: Sequence[int],
                 rows: Optional[dict[str, Ablation]] = None, train_fraction: float = 0.5,
                 eval_set: Optional[Sequence[MultiModalSample]] = None, parallel: int = 1) -> AblationTable:
    """Train and evaluate every ablation row for every seed.

    Without ``eval_set`` each seed draws its own stratified train/test split
    of ``dataset`` (the same split for all rows of that seed); otherwise all
    runs train on ``dataset`` and test on ``eval_set``. Runs use the final
    epoch's weights.
    """
    if not seeds:
        raise ValueError("run_ablation needs at least one seed")
    rows = dict(ABLATION_ROWS if rows is None else rows)
    jobs = []
    for seed in seeds:
        if eval_set is None:
            tr, te = stratified_split(dataset, seed=seed, train_fraction=train_fraction)
        else:
            tr, te = list(dataset), list(eval_set)
        for name, ab in rows.items():
            jobs.append((name, ab, int(seed), base_config, tr, te))
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            cells = list(pool.map(_run_cell, jobs))
    else:
        cells = [_run_cell(j) for j in jobs]
    return AblationTable(rows, cells)
