"""``taskcon`` command line: synth, train, eval, ablate, report."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

from .config import (
    ABLATION_ROWS, TASKS, dump_config, load_config, resolve_train_config,
)
from .data import (
    SyntheticSpec, load_manifest, load_samples, strata_counts, stratified_split, synthesize_dataset,
    write_dataset,
)
from .errors import ConfigError, DataError, TaskconError
from .metrics import METRIC_LABELS, METRIC_NAMES, MetricReport
from .model import Checkpoint
from .train import evaluate, run_ablation, train

log = logging.getLogger("taskcon")


def _prepare_out(out) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _write_resolved(out: Path, cfg: dict) -> None:
    (out / "config.resolved").write_text(dump_config(cfg), encoding="utf-8")


def _synth_spec(cfg: dict) -> SyntheticSpec:
    try:
        return SyntheticSpec(**cfg["synth"])
    except TypeError as exc:
        raise ConfigError(f"synth: {exc}") from exc


def _dataset(cfg: dict, in_shape):
    """Samples from ``data.manifest``, or an in-memory synthetic set when no manifest is given."""
    manifest = cfg["data"]["manifest"]
    if not manifest:
        spec = _synth_spec(cfg)
        if spec.shape != tuple(in_shape):
            raise ConfigError(f"synth.shape {spec.shape} differs from model.in_shape {tuple(in_shape)}")
        log.info("no data.manifest given; synthesizing %d samples", spec.n_samples)
        return synthesize_dataset(spec)
    m = load_manifest(manifest, split_seed=cfg["data"]["split_seed"])
    return load_samples(m, target_shape=in_shape if cfg["data"]["preprocess"] else None,
                        preprocess_volumes=cfg["data"]["preprocess"], standardize=cfg["data"]["standardize"])


def _split(cfg: dict, samples):
    return stratified_split(samples, seed=cfg["data"]["split_seed"], train_fraction=cfg["data"]["train_fraction"])


def _write_metrics(out: Path, inv: MetricReport, men: MetricReport) -> None:
    for task, rep in zip(TASKS, (inv, men)):
        (out / f"metrics_{task}.json").write_text(json.dumps(rep.to_dict(), sort_keys=True, indent=2) + "\n")


def _print_metrics(inv: MetricReport, men: MetricReport) -> None:
    for task, rep in zip(TASKS, (inv, men)):
        vals = "  ".join(f"{METRIC_LABELS[m]}={v:.4f}" for m, v in rep.values().items() if not math.isnan(v))
        print(f"{task}: {vals}" + (f"  (undefined: {', '.join(rep.undefined)})" if rep.undefined else ""))


# --- commands ---------------------------------------------------------------------------

def cmd_synth(cfg: dict, out: Path) -> int:
    spec = _synth_spec(cfg)  # validate before touching the disk
    out = _prepare_out(out)
    samples = synthesize_dataset(spec)
    manifest = write_dataset(samples, out)
    _write_resolved(out, cfg)
    counts = strata_counts(samples)
    print(f"wrote {len(samples)} samples to {manifest}")
    print("  ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def cmd_train(cfg: dict, out: Path) -> int:
    tcfg = resolve_train_config(cfg)
    samples = _dataset(cfg, tcfg.model.in_shape)
    tr, te = _split(cfg, samples)
    out = _prepare_out(out)
    _write_resolved(out, cfg)
    final, history = train(tcfg, tr, te, out_dir=out)
    (out / "timing.ndjson").write_text(history.timing_ndjson())
    eval_set = te or tr
    if not te:
        log.warning("empty test split; final metrics are computed on the training set")
    inv, men = evaluate(final, eval_set, tcfg.threshold)
    _write_metrics(out, inv, men)
    print(f"trained {len(history)} epochs on {len(tr)} samples; final-epoch metrics on {len(eval_set)} samples:")
    _print_metrics(inv, men)
    return 0


def cmd_eval(cfg: dict, out: Path) -> int:
    ckpt_path = cfg["eval"]["checkpoint"] or str(Path(out) / "checkpoints" / "final.ckpt")
    if not Path(ckpt_path).is_file():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    ckpt = Checkpoint.load(ckpt_path)
    samples = _dataset(cfg, ckpt.config.in_shape)
    split = cfg["eval"]["split"]
    if split == "all":
        eval_set = samples
    elif split in ("train", "test"):
        tr, te = _split(cfg, samples)
        eval_set = tr if split == "train" else te
    else:
        raise ConfigError(f"eval.split must be train, test or all, got {split!r}")
    if not eval_set:
        raise DataError(f"the {split} split is empty")
    out = _prepare_out(out)
    _write_resolved(out, cfg)
    inv, men = evaluate(ckpt, eval_set, cfg["eval"]["threshold"])
    _write_metrics(out, inv, men)
    _print_metrics(inv, men)
    return 0


def cmd_ablate(cfg: dict, out: Path, parallel: int) -> int:
    tcfg = resolve_train_config(cfg)
    names = list(cfg["ablation"]["rows"])
    unknown = [n for n in names if n not in ABLATION_ROWS]
    if unknown or not names:
        raise ConfigError(f"ablation.rows must name rows from {list(ABLATION_ROWS)}, got {names}")
    samples = _dataset(cfg, tcfg.model.in_shape)
    out = _prepare_out(out)
    _write_resolved(out, cfg)
    table = run_ablation(tcfg, samples, tcfg.seeds, rows={n: ABLATION_ROWS[n] for n in names},
                         train_fraction=cfg["data"]["train_fraction"], parallel=parallel)
    (out / "ablation.csv").write_text(table.to_csv(), encoding="utf-8")
    text = table.render()
    (out / "ablation.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def _read_run(run: Path, threshold):
    resolved = run / "config.resolved"
    if not resolved.is_file():
        raise DataError(f"{run} is not a run directory (no config.resolved)")
    cfg = load_config(resolved)
    if threshold is not None:
        ckpt = Checkpoint.load(run / "checkpoints" / "final.ckpt")
        tr, te = _split(cfg, _dataset(cfg, ckpt.config.in_shape))
        reports = dict(zip(TASKS, evaluate(ckpt, te or tr, threshold)))
    else:
        reports = {}
        for task in TASKS:
            path = run / f"metrics_{task}.json"
            if not path.is_file():
                raise DataError(f"missing {path}")
            d = json.loads(path.read_text())
            missing = [m for m in METRIC_NAMES if m not in d]
            if missing:
                raise DataError(f"{path} has an incompatible metric schema (missing {missing})")
            reports[task] = MetricReport.from_dict(d)
    method = cfg["train"]["baseline_mode"]
    scale = cfg["model"]["encoder_scale"]
    return method, scale, reports


def comparison_table(runs: list[tuple[str, str, dict]]) -> tuple[str, str]:
    """Methods as columns, (task, metric) as rows; returns CSV and plain text."""
    names, seen = [], {}
    for method, scale, _ in runs:
        seen[method] = seen.get(method, 0) + 1
        names.append(method if seen[method] == 1 else f"{method}#{seen[method]}")
    mixed = len({scale for _, scale, _ in runs}) > 1
    heads = [f"{n} [{s}]" if mixed else n for n, (_, s, _) in zip(names, runs)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "metric", *heads])
    lines = [["", "", *heads]]
    for task in TASKS:
        for m in METRIC_NAMES:
            vals = [r[task].values()[m] for _, _, r in runs]
            w.writerow([task, m, *("" if math.isnan(v) else f"{v:.6f}" for v in vals)])
            lines.append([task.capitalize(), METRIC_LABELS[m], *("n/a" if math.isnan(v) else f"{v:.4f}" for v in vals)])
    widths = [max(len(r[i]) for r in lines) for i in range(len(lines[0]))]
    text = "\n".join("  ".join(c.ljust(wd) for c, wd in zip(r, widths)).rstrip() for r in lines) + "\n"
    text += "\nmetrics from each run's final-epoch checkpoint\n"
    if mixed:
        text += "scale in brackets: runs were trained at different model scales\n"
    return buf.getvalue(), text


def cmd_report(run_dirs: list[str], out: Path, threshold) -> int:
    if not run_dirs:
        raise ConfigError("report needs at least one run directory")
    runs = [_read_run(Path(r), threshold) for r in run_dirs]
    csv_text, text = comparison_table(runs)
    out = _prepare_out(out)
    (out / "report.csv").write_text(csv_text, encoding="utf-8")
    (out / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


# --- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taskcon", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, threshold=False):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. train.epochs=5 (repeatable)")
        p.add_argument("--seed", type=int, help="seed for the run (synth: data seed; train/ablate: run seeds)")
        if threshold:
            p.add_argument("--threshold", type=float, help="decision threshold on the positive-class probability")
        return p

    common(sub.add_parser("synth", help="write a synthetic dataset and manifest"))
    common(sub.add_parser("train", help="train one model and evaluate it on the held-out split"))
    common(sub.add_parser("eval", help="evaluate a checkpoint"), threshold=True)
    ab = common(sub.add_parser("ablate", help="run the ablation grid"))
    ab.add_argument("--parallel", type=int, help="number of worker processes")
    rp = sub.add_parser("report", help="compare finished runs side by side")
    rp.add_argument("runs", nargs="+", help="run directories")
    rp.add_argument("--out", required=True)
    rp.add_argument("--threshold", type=float, help="re-evaluate each run's final checkpoint at this threshold")
    return parser


def _resolve(args) -> dict:
    overrides = list(args.overrides)
    if args.seed is not None:
        if args.command == "synth":
            overrides.append(f"synth.seed={args.seed}")
        else:
            overrides.append(f"train.seeds=[{args.seed}]")
    if getattr(args, "threshold", None) is not None:
        overrides += [f"eval.threshold={args.threshold}", f"train.threshold={args.threshold}"]
    if getattr(args, "parallel", None) is not None:
        overrides.append(f"ablation.parallel={args.parallel}")
    cfg = load_config(args.config, overrides)
    resolve_train_config(cfg)  # fail fast on an inconsistent config
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.runs, Path(args.out), args.threshold)
        cfg = _resolve(args)
        out = Path(args.out)
        if args.command == "synth":
            return cmd_synth(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "eval":
            return cmd_eval(cfg, out)
        return cmd_ablate(cfg, out, int(cfg["ablation"]["parallel"]))
    except TaskconError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
