import csv
import hashlib
import json

import numpy as np
import pytest

from taskcon.cli import main


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", root / "ds", "--set", "synth.n_samples=40", "--set", "synth.prevalence_grade=0.5",
               "--set", "synth.prevalence_invasion=0.25", "--set", "synth.signal_common=2.0") == 0
    return root / "ds" / "manifest.csv"


def train_run(out, manifest, *extra):
    return run("train", "--out", out, "--set", f"data.manifest='{manifest}'", "--set", "train.epochs=2", *extra)


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestSynth:
    def test_prevalence_within_three_sigma(self, tmp_path, capsys):
        assert run("synth", "--out", tmp_path / "d", "--set", "synth.shape=[4,4,3]") == 0
        with open(tmp_path / "d" / "manifest.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 200
        n_high = sum(int(r["grade"]) for r in rows)
        n_inv = sum(int(r["invasion"]) for r in rows)
        assert abs(n_high - 60) <= 3 * np.sqrt(200 * 0.3 * 0.7)
        assert abs(n_inv - 20) <= 3 * np.sqrt(200 * 0.1 * 0.9)
        assert "high_invasion=" in capsys.readouterr().out

    def test_zero_samples_writes_nothing(self, tmp_path, capsys):
        assert run("synth", "--out", tmp_path / "d", "--set", "synth.n_samples=0") == 1
        assert not (tmp_path / "d").exists()
        assert "n_samples" in capsys.readouterr().err

    def test_same_seed_same_manifest(self, tmp_path):
        for name in ("a", "b"):
            run("synth", "--out", tmp_path / name, "--seed", 4, "--set", "synth.n_samples=10", "--set", "synth.shape=[4,4,3]")
        assert sha(tmp_path / "a" / "manifest.csv") == sha(tmp_path / "b" / "manifest.csv")
        vols = sorted((tmp_path / "a" / "volumes").iterdir())
        assert all(sha(v) == sha(tmp_path / "b" / "volumes" / v.name) for v in vols)

    def test_inconsistent_prevalence(self, tmp_path):
        assert run("synth", "--out", tmp_path / "d", "--set", "synth.prevalence_invasion=0.5") == 1


class TestTrainEval:
    def test_smoke_and_artifacts(self, tmp_path, dataset):
        out = tmp_path / "run"
        assert train_run(out, dataset) == 0
        for name in ("config.resolved", "history.ndjson", "metrics_invasion.json", "metrics_meningioma.json",
                     "checkpoints/final.ckpt"):
            assert (out / name).exists(), name
        rep = json.loads((out / "metrics_invasion.json").read_text())
        assert set(rep) >= {"auc", "auprc", "mcc", "tp", "undefined"}

    def test_epochs_override(self, tmp_path, dataset):
        assert train_run(tmp_path / "r", dataset, "--set", "train.epochs=1") == 0
        assert len((tmp_path / "r" / "history.ndjson").read_text().splitlines()) == 1

    def test_missing_manifest(self, tmp_path, capsys):
        missing = tmp_path / "absent.csv"
        assert run("train", "--out", tmp_path / "r", "--set", f"data.manifest='{missing}'") == 2
        assert str(missing) in capsys.readouterr().err

    def test_unknown_key(self, tmp_path):
        assert run("train", "--out", tmp_path / "r", "--set", "train.nope=1") == 1

    def test_config_file_and_precedence(self, tmp_path, dataset):
        cfg = tmp_path / "c.toml"
        cfg.write_text(f"[data]\nmanifest = '{dataset}'\n[train]\nepochs = 3\n")
        assert run("train", "--config", cfg, "--out", tmp_path / "r", "--set", "train.epochs=1") == 0
        assert len((tmp_path / "r" / "history.ndjson").read_text().splitlines()) == 1
        assert "epochs = 1" in (tmp_path / "r" / "config.resolved").read_text()

    def test_reproducible_into_fresh_dirs(self, tmp_path, dataset):
        for name in ("a", "b"):
            assert train_run(tmp_path / name, dataset, "--seed", 3) == 0
        for f in ("history.ndjson", "metrics_invasion.json", "metrics_meningioma.json", "config.resolved"):
            assert (tmp_path / "a" / f).read_text() == (tmp_path / "b" / f).read_text()

    def test_resolved_config_reruns_identically(self, tmp_path, dataset):
        assert train_run(tmp_path / "a", dataset) == 0
        assert run("train", "--config", tmp_path / "a" / "config.resolved", "--out", tmp_path / "b") == 0
        assert (tmp_path / "a" / "history.ndjson").read_text() == (tmp_path / "b" / "history.ndjson").read_text()

    def test_eval_threshold(self, tmp_path, dataset):
        train_run(tmp_path / "r", dataset)
        ck = tmp_path / "r" / "checkpoints" / "final.ckpt"
        assert run("eval", "--out", tmp_path / "e", "--set", f"data.manifest='{dataset}'",
                   "--set", f"eval.checkpoint='{ck}'", "--threshold", 0.3) == 0
        rep = json.loads((tmp_path / "e" / "metrics_meningioma.json").read_text())
        assert rep["threshold"] == 0.3
        base = json.loads((tmp_path / "r" / "metrics_meningioma.json").read_text())
        assert rep["auc"] == base["auc"]

    def test_eval_missing_checkpoint(self, tmp_path):
        assert run("eval", "--out", tmp_path / "e") == 1


def ablate(out, *extra):
    return run("ablate", "--out", out, "--set", "synth.n_samples=40", "--set", "synth.prevalence_grade=0.5",
               "--set", "synth.prevalence_invasion=0.25", "--set", "train.epochs=1", *extra)


class TestAblate:
    def test_default_matrix(self, tmp_path):
        assert ablate(tmp_path, "--set", "train.seeds=[0,1]") == 0
        with open(tmp_path / "ablation.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["baseline"] for r in rows] == ["Baseline1", "Baseline2", "Baseline3", "Baseline4", "Proposed"]
        metric_cols = [c for c in rows[0] if c.startswith(("invasion_", "meningioma_")) and not c.endswith("_sd")]
        assert len(metric_cols) == 16
        assert all(r["invasion_auc_sd"] != "" for r in rows)
        assert (tmp_path / "ablation.txt").read_text().startswith(" ")

    def test_single_seed_has_no_sd(self, tmp_path):
        assert ablate(tmp_path, "--seed", 1, "--set", "ablation.rows=['Baseline1','Proposed']") == 0
        with open(tmp_path / "ablation.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert all(r["invasion_auc_sd"] == "" and r["n_runs"] == "1" for r in rows)
        assert "no standard deviations" in (tmp_path / "ablation.txt").read_text()

    def test_custom_matrix(self, tmp_path):
        rows = "['Baseline1','Baseline2','Baseline3','Proposed']"
        assert ablate(tmp_path, "--set", f"ablation.rows={rows}") == 0
        assert len((tmp_path / "ablation.csv").read_text().splitlines()) == 5

    def test_unknown_row(self, tmp_path):
        assert ablate(tmp_path, "--set", "ablation.rows=['Baseline9']") == 1


class TestReport:
    @pytest.fixture(scope="class")
    @classmethod
    def runs(cls, tmp_path_factory, dataset):
        root = tmp_path_factory.mktemp("runs")
        for mode in ("proposed", "efmt", "mfmt"):
            assert train_run(root / mode, dataset, "--set", f"train.baseline_mode='{mode}'") == 0
        return root

    def test_three_methods(self, tmp_path, runs):
        dirs = [runs / m for m in ("proposed", "efmt", "mfmt")]
        assert run("report", *dirs, "--out", tmp_path) == 0
        with open(tmp_path / "report.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["task", "metric", "proposed", "efmt", "mfmt"]
        assert len(rows) == 1 + 16

    def test_single_run(self, tmp_path, runs):
        assert run("report", runs / "efmt", "--out", tmp_path) == 0
        assert next(csv.reader(open(tmp_path / "report.csv"))) == ["task", "metric", "efmt"]

    def test_mixed_scales_annotated(self, tmp_path, runs):
        fake = tmp_path / "full_run"
        fake.mkdir()
        text = (runs / "proposed" / "config.resolved").read_text().replace('encoder_scale = "tiny"',
                                                                           'encoder_scale = "full"')
        (fake / "config.resolved").write_text(text)
        for f in ("metrics_invasion.json", "metrics_meningioma.json"):
            (fake / f).write_text((runs / "proposed" / f).read_text())
        assert run("report", runs / "proposed", fake, "--out", tmp_path / "o") == 0
        header = next(csv.reader(open(tmp_path / "o" / "report.csv")))
        assert header[2:] == ["proposed [tiny]", "proposed#2 [full]"]

    def test_incompatible_schema(self, tmp_path, runs):
        bad = tmp_path / "bad"
        bad.mkdir()
        (bad / "config.resolved").write_text((runs / "efmt" / "config.resolved").read_text())
        (bad / "metrics_invasion.json").write_text(json.dumps({"accuracy": 1.0}))
        (bad / "metrics_meningioma.json").write_text(json.dumps({"accuracy": 1.0}))
        assert run("report", bad, "--out", tmp_path / "o") == 2

    def test_rethreshold(self, tmp_path, runs):
        assert run("report", runs / "proposed", "--out", tmp_path, "--threshold", 0.0) == 0
        rows = {(r[0], r[1]): r[2] for r in csv.reader(open(tmp_path / "report.csv"))}
        assert float(rows[("meningioma", "sensitivity")]) == 1.0
