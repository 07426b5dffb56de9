"""Manifests, volume I/O, preprocessing, augmentation, splits and synthetic data.

Volumes are 3D arrays indexed ``(h, w, d)``; ``d`` is the slice axis.
On disk each volume is a raw little-endian float32 file with a JSON sidecar
(``<name>.json``) holding ``shape``, ``spacing_mm`` and ``dtype``.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .config import MODALITIES, AugmentConfig
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("patient_id", "t1c_path", "flairc_path", "adc_path", "grade", "invasion")
STRATA = ("low", "high_noninvasion", "high_invasion")


@dataclass
class MultiModalSample:
    patient_id: str
    volumes: dict[str, np.ndarray]
    label_grade: int
    label_invasion: int
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        missing = [m for m in MODALITIES if m not in self.volumes]
        if missing:
            raise DataError(f"{self.patient_id}: missing modalities {missing}")
        shapes = {m: self.volumes[m].shape for m in MODALITIES}
        if len(set(shapes.values())) != 1:
            raise DataError(f"{self.patient_id}: modality shapes differ {shapes}")
        if self.label_grade not in (0, 1) or self.label_invasion not in (0, 1):
            raise DataError(f"{self.patient_id}: labels must be 0 or 1")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.volumes[MODALITIES[0]].shape

    @property
    def stratum(self) -> str:
        return stratum_of(self.label_grade, self.label_invasion)


def stratum_of(grade: int, invasion: int) -> str:
    if not grade:
        return "low"
    return "high_invasion" if invasion else "high_noninvasion"


# --- volume files ---------------------------------------------------------------

def save_volume(path, volume: np.ndarray, spacing_mm=(1.0, 1.0, 1.0)) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(volume, dtype="<f4")
    path.write_bytes(arr.tobytes(order="C"))
    sidecar = {"shape": list(arr.shape), "spacing_mm": [float(s) for s in spacing_mm], "dtype": "f32le"}
    sidecar_path(path).write_text(json.dumps(sidecar), encoding="utf-8")
    return path


def sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _read_raw(path: Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    side = sidecar_path(path)
    if not side.is_file():
        raise DataError(f"missing sidecar {side}")
    meta = json.loads(side.read_text(encoding="utf-8"))
    if meta.get("dtype") != "f32le":
        raise DataError(f"{side}: unsupported dtype {meta.get('dtype')!r}")
    shape = tuple(int(s) for s in meta["shape"])
    arr = np.fromfile(path, dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise DataError(f"{path}: {arr.size} values, sidecar shape {shape}")
    return arr.reshape(shape).astype(np.float32), tuple(float(s) for s in meta.get("spacing_mm", (1, 1, 1)))


# Readers keyed by file suffix. A NIfTI/DICOM reader (e.g. via nibabel) would
# be registered here and must return (array indexed (h, w, d), spacing_mm).
VOLUME_READERS: dict[str, Callable[[Path], tuple[np.ndarray, tuple[float, float, float]]]] = {
    ".f32": _read_raw,
    ".raw": _read_raw,
}


def register_reader(suffix: str, reader) -> None:
    VOLUME_READERS[suffix.lower()] = reader


def load_volume(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    path = Path(path)
    reader = VOLUME_READERS.get(path.suffix.lower())
    if reader is None:
        raise DataError(f"{path}: no reader registered for suffix {path.suffix!r}")
    if not path.is_file():
        raise DataError(f"volume file not found: {path}")
    return reader(path)


# --- manifests -----------------------------------------------------------------

@dataclass
class ManifestRow:
    patient_id: str
    paths: dict[str, Path]
    grade: int
    invasion: int

    @property
    def stratum(self) -> str:
        return stratum_of(self.grade, self.invasion)


@dataclass
class DatasetManifest:
    rows: list[ManifestRow]
    split_seed: int = 0
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)


def load_manifest(path, split_seed: int = 0, check_paths: bool = True) -> DatasetManifest:
    """Read and validate a manifest CSV. Relative paths resolve against its folder."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        records = list(reader)
    rows, seen, warnings = [], set(), []
    for lineno, rec in enumerate(records, start=2):
        pid = rec["patient_id"].strip()
        if pid in seen:
            raise DataError(f"{path}:{lineno}: duplicate patient_id {pid!r}")
        seen.add(pid)
        try:
            grade, invasion = int(rec["grade"]), int(rec["invasion"])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: labels must be integers ({exc})") from exc
        if grade not in (0, 1) or invasion not in (0, 1):
            raise DataError(f"{path}:{lineno}: labels must be 0 or 1")
        if invasion and not grade:
            msg = f"{pid}: invasion=1 with grade=0 (invasion is expected only in high grade)"
            log.warning(msg)
            warnings.append(msg)
        paths = {}
        for m in MODALITIES:
            p = Path(rec[f"{m}_path"])
            p = p if p.is_absolute() else path.parent / p
            if check_paths and not p.is_file():
                raise DataError(f"{path}:{lineno}: unresolvable path {p}")
            paths[m] = p
        rows.append(ManifestRow(pid, paths, grade, invasion))
    return DatasetManifest(rows, split_seed, warnings)


def write_manifest(path, rows: Sequence[ManifestRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in rows:
            rel = [_relative(r.paths[m], path.parent) for m in MODALITIES]
            w.writerow([r.patient_id, *rel, r.grade, r.invasion])
    return path


def _relative(p: Path, base: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(base.resolve()))
    except ValueError:
        return str(p)


def load_samples(manifest: DatasetManifest, target_shape=None, preprocess_volumes: bool = True,
                 standardize: bool = True) -> list[MultiModalSample]:
    samples = []
    for row in manifest.rows:
        vols, spacing = {}, (1.0, 1.0, 1.0)
        for m in MODALITIES:
            vol, spacing = load_volume(row.paths[m])
            if preprocess_volumes:
                vol = preprocess(vol, target_shape or vol.shape, standardize=standardize)
            vols[m] = vol
        samples.append(MultiModalSample(row.patient_id, vols, row.grade, row.invasion, spacing))
    return samples


# --- preprocessing ---------------------------------------------------------------

def pad_to_square(volume: np.ndarray) -> np.ndarray:
    """Centered zero padding of the two in-plane axes to a square; depth untouched."""
    h, w = volume.shape[:2]
    s = max(h, w)
    ph, pw = s - h, s - w
    return np.pad(volume, ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)))


def resize(volume: np.ndarray, shape) -> np.ndarray:
    """Trilinear resampling to ``shape``; identity if the shape already matches."""
    shape = tuple(int(s) for s in shape)
    if volume.shape == shape:
        return volume
    t = torch.as_tensor(np.ascontiguousarray(volume), dtype=torch.float64)[None, None]
    return F.interpolate(t, size=shape, mode="trilinear", align_corners=False)[0, 0].numpy()


def standardize_volume(volume: np.ndarray) -> np.ndarray:
    mean = volume.mean()
    std = volume.std()
    if std == 0 or not np.isfinite(std):
        return np.zeros_like(volume)
    return (volume - mean) / std


def preprocess(volume: np.ndarray, target_shape, standardize: bool = True) -> np.ndarray:
    """Pad in-plane to a square, resize to ``target_shape``, then z-score.

    Statistics for z-scoring are taken over the padded, resized volume.
    """
    volume = np.asarray(volume, dtype=np.float64)
    if volume.ndim != 3:
        raise DataError(f"expected a 3D volume, got shape {volume.shape}")
    if volume.size <= 1:
        raise DataError(f"degenerate volume of shape {volume.shape}")
    out = resize(pad_to_square(volume), target_shape)
    if standardize:
        out = standardize_volume(out)
    return out.astype(np.float32)


# --- augmentation ---------------------------------------------------------------

def augment(sample: MultiModalSample, rng: np.random.Generator,
            config: AugmentConfig = AugmentConfig()) -> MultiModalSample:
    """Random in-plane flips, crop-and-resize and additive Gaussian noise.

    One geometric transform is drawn per sample and shared by all modalities;
    noise is drawn per modality with sigma relative to the volume's std.
    """
    if not config.enabled:
        return sample
    flips = [ax for ax in (0, 1) if rng.random() < config.flip_prob]
    shape = sample.shape
    crop = None
    if config.crop and config.crop_fraction < 1.0:
        ext = [max(1, int(round(config.crop_fraction * n))) for n in shape]
        starts = [int(rng.integers(0, n - e + 1)) for n, e in zip(shape, ext)]
        crop = tuple(slice(s, s + e) for s, e in zip(starts, ext))
    vols = {}
    for m in MODALITIES:
        v = np.asarray(sample.volumes[m], dtype=np.float64)
        if flips:
            v = np.flip(v, axis=tuple(flips))
        if crop is not None:
            v = resize(v[crop], shape)
        if config.noise_sigma > 0:
            scale = v.std()
            scale = scale if scale > 0 else 1.0
            v = v + rng.normal(0.0, config.noise_sigma * scale, size=v.shape)
        vols[m] = np.ascontiguousarray(v, dtype=np.float32)
    return MultiModalSample(sample.patient_id, vols, sample.label_grade, sample.label_invasion, sample.spacing_mm)


# --- splits -----------------------------------------------------------------

def stratified_split(items: Sequence, seed: int, train_fraction: float | None = None,
                     train_counts: dict[str, int] | Sequence[int] | None = None):
    """Per-stratum random draw of a training set; the rest is the test set.

    ``items`` are samples or manifest rows (anything with a ``stratum``).
    Strata are low grade, high grade without invasion, high grade with
    invasion. Give either ``train_fraction`` (rounded per stratum) or
    ``train_counts`` (in ``STRATA`` order or keyed by stratum name).
    """
    if (train_fraction is None) == (train_counts is None):
        raise ConfigError("give exactly one of train_fraction or train_counts")
    by_stratum = {s: [] for s in STRATA}
    for idx, item in enumerate(items):
        by_stratum[item.stratum].append(idx)
    empty = [s for s, v in by_stratum.items() if not v]
    if empty:
        raise DataError(f"empty strata: {empty}")
    if train_counts is not None:
        counts = dict(train_counts) if isinstance(train_counts, dict) else dict(zip(STRATA, train_counts))
    else:
        if not 0.0 <= train_fraction <= 1.0:
            raise ConfigError("train_fraction must lie in [0, 1]")
        counts = {s: int(round(train_fraction * len(v))) for s, v in by_stratum.items()}
    rng = np.random.default_rng(seed)
    train_idx = []
    for s in STRATA:
        pool = by_stratum[s]
        k = int(counts.get(s, 0))
        if k > len(pool) or k < 0:
            raise DataError(f"stratum {s} has {len(pool)} members, cannot draw {k}")
        train_idx += [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]
    chosen = set(train_idx)
    train = [items[i] for i in sorted(chosen)]
    test = [items[i] for i in range(len(items)) if i not in chosen]
    if not test:
        log.warning("stratified_split: test set is empty")
    return train, test


# --- synthetic data ---------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int = 200
    shape: tuple[int, int, int] = (32, 32, 8)
    prevalence_grade: float = 0.3
    prevalence_invasion: float = 0.1
    signal_common: float = 1.0
    signal_grade: float = 0.5
    signal_invasion: float = 0.5
    noise_sigma: float = 1.0
    seed: int = 0
    # Patterns are drawn from their own seed so that datasets drawn with
    # different sample seeds carry the same planted signal.
    pattern_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if self.n_samples < 1:
            raise ConfigError("synth.n_samples must be positive")
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ConfigError(f"synth.shape must be three positive sizes, got {self.shape}")
        if not (0 <= self.prevalence_invasion <= self.prevalence_grade <= 1):
            raise ConfigError("need 0 <= prevalence_invasion <= prevalence_grade <= 1 (invasion implies high grade)")
        if min(self.signal_common, self.signal_grade, self.signal_invasion) < 0:
            raise ConfigError("signal amplitudes must be non-negative")
        if not self.noise_sigma > 0:
            raise ConfigError("synth.noise_sigma must be positive")


def _smooth_pattern(rng: np.random.Generator, shape) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=(shape[0] / 8, shape[1] / 8, shape[2] / 8))
    field_ -= field_.mean()
    return field_ / np.sqrt(np.mean(field_ ** 2))


def planted_patterns(spec: SyntheticSpec) -> dict[str, dict[str, np.ndarray]]:
    """Unit-RMS smooth patterns per modality for the common, grade and invasion signals."""
    rng = np.random.default_rng([spec.pattern_seed, 1])
    return {m: {k: _smooth_pattern(rng, spec.shape) for k in ("common", "grade", "invasion")} for m in MODALITIES}


def synthesize_dataset(spec: SyntheticSpec) -> list[MultiModalSample]:
    """Noise volumes with label-dependent planted patterns.

    The common pattern is weighted by ``(grade + invasion) / 2`` and so
    carries information about both labels; the grade and invasion patterns
    are switched on by their own label only.
    """
    patterns = planted_patterns(spec)
    rng = np.random.default_rng([spec.seed, 2])
    p_inv_given_high = spec.prevalence_invasion / spec.prevalence_grade if spec.prevalence_grade else 0.0
    samples = []
    width = len(str(spec.n_samples))
    for i in range(spec.n_samples):
        grade = int(rng.random() < spec.prevalence_grade)
        invasion = int(grade and rng.random() < p_inv_given_high)
        common = 0.5 * (grade + invasion)
        vols = {}
        for m in MODALITIES:
            p = patterns[m]
            v = spec.noise_sigma * rng.standard_normal(spec.shape)
            v += spec.signal_common * common * p["common"]
            v += spec.signal_grade * grade * p["grade"]
            v += spec.signal_invasion * invasion * p["invasion"]
            vols[m] = v.astype(np.float32)
        samples.append(MultiModalSample(f"syn{i:0{width}d}", vols, grade, invasion))
    return samples


def write_dataset(samples: Sequence[MultiModalSample], out_dir) -> Path:
    """Write volumes + sidecars under ``out_dir/volumes`` and ``out_dir/manifest.csv``."""
    out_dir = Path(out_dir)
    rows = []
    for s in samples:
        paths = {}
        for m in MODALITIES:
            paths[m] = save_volume(out_dir / "volumes" / f"{s.patient_id}_{m}.f32", s.volumes[m], s.spacing_mm)
        rows.append(ManifestRow(s.patient_id, paths, s.label_grade, s.label_invasion))
    return write_manifest(out_dir / "manifest.csv", rows)


def stack(samples: Sequence[MultiModalSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(N, 3, h, w, d) float32 volumes, invasion labels, grade labels."""
    x = np.stack([np.stack([s.volumes[m] for m in MODALITIES]) for s in samples]).astype(np.float32)
    inv = np.array([s.label_invasion for s in samples], dtype=np.int64)
    grade = np.array([s.label_grade for s in samples], dtype=np.int64)
    return x, inv, grade


def strata_counts(items) -> dict[str, int]:
    counts = {s: 0 for s in STRATA}
    for it in items:
        counts[it.stratum] += 1
    return counts
