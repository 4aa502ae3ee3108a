"""End-to-end evaluation protocol: corpus, patient folds, GAN augmentation, classifiers, reports.

A run is described by :class:`ExperimentConfig`, read from a flat
``key = value`` text file. The grid is the product of classifier widths,
data conditions and balancing modes; every cell is cross-validated over
patient-disjoint folds and reported as mean and population standard
deviation across the evaluated folds.

Data conditions:
    ``original``               real training fold only.
    ``synthesized``            generated images only (``synthetic_per_class`` per class).
    ``original+synthesized``   real training fold plus the generated images.

Balancing (``none``, ``OVS``, ``UNS``) is applied to the real training fold
before any GAN sees it. GANs are trained on training folds only and cached
per (fold, balancing); every random stream is derived from the master seed
and a descriptor string, so any single cell can be recomputed in isolation.

Outputs (see :func:`emit`): ``report.csv``, ``report.json``,
``config.resolved.txt``, ``att.csv``, ``grid_generated.png``,
``grid_pairs.png`` and ``gan_losses.png``. Inference timings vary from run to
run, so they live in ``att.csv`` and never in the two report files, which
are byte-reproducible.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import platform
import warnings
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .classifier import ClassifierNetwork, TopographyClassifier, build_classifier, measure_att, ClassifierConfig
from .gan import MODES, OBJECTIVES, PROFILES, CGANSynthesizer
from .metrics import confusion_matrix, fid, macro_metrics, mse, psnr, ssim
from .phantom import DEFAULT_COUNTS, DEFAULT_MARGIN, NUM_CLASSES, Dataset, generate_corpus
from .resampling import PatientKFold, balance
from .seeding import derive_rng, derive_seed

logger = logging.getLogger(__name__)

DATA_CONDITIONS = ("original", "synthesized", "original+synthesized")
BALANCING_MODES = ("none", "OVS", "UNS")
METRICS = ("accuracy", "precision", "recall", "f1")
CSV_COLUMNS = (
    "classifier",
    "width",
    "condition",
    "balancing",
    "status",
    "folds",
    *(f"{m}_{s}" for m in METRICS for s in ("mean", "std")),
    "error",
)
QUALITY_COLUMNS = ("n", "ssim", "psnr", "mse", "fid", "classes")
ATT_COLUMNS = ("classifier", "width", "att_mean", "att_std", "n")
REPORT_FILES = ("report.csv", "report.json")
IMAGE_FILES = ("grid_generated.png", "grid_pairs.png", "gan_losses.png")
REFERENCE_QUALITY = {"ssim": 0.872, "psnr": 33.221}
PAIRING_RULE = "nearest same-class real image by MSE"


class ConfigError(ValueError):
    """Raised for unknown keys or invalid values in an experiment config."""


# -- configuration --------------------------------------------------------------------
@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of a run; all keys have defaults.

    List-valued keys take comma-separated values in the config file
    (``widths = 8, 16``). ``classes`` restricts the corpus to a subset of
    labels, which are then renumbered 0..k-1 in the listed order.
    ``max_folds`` evaluates only the first folds of the ``cv_folds`` split
    (0 evaluates all of them).
    """

    master_seed: int = 0
    counts: Tuple[int, ...] = DEFAULT_COUNTS
    classes: Tuple[int, ...] = ()
    margin: float = DEFAULT_MARGIN
    profile: str = "desk"
    conditions: Tuple[str, ...] = ("original", "original+synthesized")
    balancing: Tuple[str, ...] = ("none",)
    widths: Tuple[int, ...] = (8, 16)
    cv_folds: int = 8
    max_folds: int = 0
    synthetic_per_class: int = 400
    gan_mode: str = "per_class"
    gan_epochs: int = 20
    gan_lr: float = 1e-4
    gan_beta1: float = 0.5
    gan_batch_size: int = 8
    gan_init_std: float = 0.02
    gan_objective: str = "nonsaturating"
    gan_class_head: bool = True
    gan_class_weight: float = 1.0
    gan_label_plane: bool = True
    clf_epochs: int = 20
    clf_batch_size: int = 32
    clf_lr: float = 1e-3
    clf_shuffle: bool = True
    quality_samples: int = 100
    timing_images: int = 100
    timing_repetitions: int = 3
    output_dir: str = "results"

    def __post_init__(self):
        checks = [
            (len(self.counts) == NUM_CLASSES and min(self.counts) >= 0, f"counts must be {NUM_CLASSES} non-negative integers"),
            (all(0 <= c < NUM_CLASSES for c in self.classes), f"classes must lie in [0, {NUM_CLASSES})"),
            (len(set(self.classes)) == len(self.classes), "classes must not repeat"),
            (len(self.classes) != 1, "classes must name at least two labels"),
            (self.margin > 0, "margin must be positive"),
            (self.profile in PROFILES, f"profile must be one of {tuple(PROFILES)}"),
            (len(self.conditions) > 0 and set(self.conditions) <= set(DATA_CONDITIONS), f"conditions must be drawn from {DATA_CONDITIONS}"),
            (len(self.balancing) > 0 and set(self.balancing) <= set(BALANCING_MODES), f"balancing must be drawn from {BALANCING_MODES}"),
            (len(self.widths) > 0 and min(self.widths) >= 1, "widths must be positive integers"),
            (self.cv_folds >= 2, "cv_folds must be >= 2"),
            (0 <= self.max_folds <= self.cv_folds, "max_folds must lie in [0, cv_folds]"),
            (self.synthetic_per_class >= 1, "synthetic_per_class must be >= 1"),
            (self.gan_mode in MODES, f"gan_mode must be one of {MODES}"),
            (self.gan_objective in OBJECTIVES, f"gan_objective must be one of {OBJECTIVES}"),
            (self.gan_epochs >= 1 and self.clf_epochs >= 1, "epochs must be >= 1"),
            (self.gan_lr > 0 and self.clf_lr > 0, "learning rates must be positive"),
            (0 <= self.gan_beta1 < 1, "gan_beta1 must lie in [0, 1)"),
            (self.gan_batch_size >= 1 and self.clf_batch_size >= 1, "batch sizes must be >= 1"),
            (self.gan_init_std > 0, "gan_init_std must be positive"),
            (self.quality_samples >= 0, "quality_samples must be >= 0"),
            (self.timing_images == 0 or self.timing_images >= 100, "timing_images must be 0 (disabled) or >= 100"),
            (self.timing_repetitions >= 1, "timing_repetitions must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    @property
    def num_classes(self) -> int:
        return len(self.classes) if self.classes else NUM_CLASSES

    @property
    def evaluated_folds(self) -> int:
        return self.max_folds or self.cv_folds

    # -- text form -----------------------------------------------------------------
    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "ExperimentConfig":
        """Build from raw string values, converting each to the field's type."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _convert(key, raw, fields[key].default)
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        return cls.from_mapping(parse_key_values(text))

    @classmethod
    def from_file(cls, path, overrides: Optional[Mapping[str, str]] = None) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        values = parse_key_values(text)
        values.update(overrides or {})
        return cls.from_mapping(values)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {f.name: _jsonable(getattr(self, f.name)) for f in dataclasses.fields(self)}


def parse_key_values(text: str) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are ignored."""
    values: Dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected key = value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {number}: empty key")
        if key in values:
            raise ConfigError(f"line {number}: duplicate key {key!r}")
        values[key] = value
    return values


_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def _convert(key: str, raw, default):
    """Parse ``raw`` into the type of the field's ``default``."""
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered not in _TRUE | _FALSE:
                raise ValueError(raw)
            return lowered in _TRUE
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [item.strip() for item in raw.split(",") if item.strip()]
            item_type = str if key in ("conditions", "balancing") else int
            return tuple(item_type(item) for item in items)
        return raw
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")
    if isinstance(value, np.generic):
        return _jsonable(value.item())
    return value


# -- report types ---------------------------------------------------------------------
@dataclass
class CellResult:
    """Cross-validated scores of one (classifier width, condition, balancing) cell."""

    classifier: str
    width: int
    condition: str
    balancing: str
    status: str = "ok"
    folds: int = 0
    accuracy_mean: float = math.nan
    accuracy_std: float = math.nan
    precision_mean: float = math.nan
    precision_std: float = math.nan
    recall_mean: float = math.nan
    recall_std: float = math.nan
    f1_mean: float = math.nan
    f1_std: float = math.nan
    error: str = ""

    @property
    def key(self) -> Tuple[int, str, str]:
        return self.width, self.condition, self.balancing

    def row(self) -> dict:
        return {c: getattr(self, c) for c in CSV_COLUMNS}


@dataclass
class QualityResult:
    n: int
    ssim: float
    psnr: float
    mse: float
    fid: float
    classes: int
    pairs: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list, repr=False)

    def row(self) -> dict:
        return {c: getattr(self, c) for c in QUALITY_COLUMNS}


@dataclass
class TimingRow:
    classifier: str
    width: int
    att_mean: float
    att_std: float
    n: int


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    cells: List[CellResult]
    quality: Optional[QualityResult] = None
    timing: List[TimingRow] = field(default_factory=list)
    samples: Dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    gan_histories: Dict[str, object] = field(default_factory=dict, repr=False)

    def cell(self, width: int, condition: str, balancing: str = "none") -> CellResult:
        for c in self.cells:
            if c.key == (width, condition, balancing):
                return c
        raise KeyError((width, condition, balancing))

    def metadata(self) -> dict:
        return {
            "master_seed": self.config.master_seed,
            "profile": self.config.profile,
            "versions": {"topogan": __version__, "numpy": np.__version__, "python": platform.python_version()},
            "seed_derivation": "sha256 of '<master_seed>|<descriptor>', first 8 bytes little-endian",
            "statistics": "mean and population standard deviation over evaluated folds",
            "folds_evaluated": self.config.evaluated_folds,
            "cv_folds": self.config.cv_folds,
            "columns": list(CSV_COLUMNS),
            "quality_pairing": PAIRING_RULE,
            "fid_features": (
                f"global-average-pooled embedding of {classifier_name(self.config.widths[0])} "
                "trained on the fold-0 real training images"
            ),
            "quality_reference": dict(REFERENCE_QUALITY, note="published magnitudes on clinical data; context only, not asserted"),
        }

    def to_json_dict(self) -> dict:
        return {
            "schema_version": 1,
            "metadata": self.metadata(),
            # where the report lands is not part of the experiment, so it stays out of the record
            "config": {k: v for k, v in self.config.to_dict().items() if k != "output_dir"},
            "cells": [{k: _jsonable(v) for k, v in c.row().items()} for c in self.cells],
            "quality": None if self.quality is None else {k: _jsonable(v) for k, v in self.quality.row().items()},
        }


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "metadata", "config", "cells", "quality"],
    "properties": {
        "schema_version": {"const": 1},
        "metadata": {
            "type": "object",
            "required": ["master_seed", "profile", "versions", "folds_evaluated", "columns"],
        },
        "config": {"type": "object"},
        "cells": {
            "type": "array",
            "items": {
                "type": "object",
                "required": list(CSV_COLUMNS),
                "additionalProperties": False,
                "properties": {
                    "classifier": {"type": "string"},
                    "width": {"type": "integer", "minimum": 1},
                    "condition": {"enum": list(DATA_CONDITIONS)},
                    "balancing": {"enum": list(BALANCING_MODES)},
                    "status": {"enum": ["ok", "failed"]},
                    "folds": {"type": "integer", "minimum": 0},
                    "error": {"type": "string"},
                    **{
                        f"{m}_{s}": {"anyOf": [{"type": "number"}, {"enum": ["nan", "inf", "-inf"]}]}
                        for m in METRICS
                        for s in ("mean", "std")
                    },
                },
            },
        },
        "quality": {
            "anyOf": [
                {"type": "null"},
                {
                    "type": "object",
                    "required": list(QUALITY_COLUMNS),
                    "properties": {c: {"anyOf": [{"type": "number"}, {"enum": ["nan", "inf", "-inf"]}]} for c in QUALITY_COLUMNS},
                },
            ]
        },
    },
}


# -- studies --------------------------------------------------------------------------
Sampler = Callable[[int, int, int], np.ndarray]
Embedder = Callable[[np.ndarray], np.ndarray]


def quality_study(sampler: Sampler, real: Dataset, embed: Embedder, n: int = 100, seed: int = 0,
                  classes: Optional[Sequence[int]] = None) -> QualityResult:
    """SSIM, PSNR and MSE against the nearest real image, plus per-class FID.

    ``n`` images are drawn round-robin across ``classes`` (default: every
    class with real images) via ``sampler(count, label, seed)``. Each one is
    paired with the same-class real image of lowest MSE. FID is computed per
    class on ``embed`` outputs and averaged over classes where both sides
    have at least two images. A mean PSNR containing an exact match is
    ``inf``.
    """
    if n < 1:
        raise ValueError(f"quality_study needs n >= 1, got {n}")
    present = [int(c) for c in np.flatnonzero(real.class_counts)]
    classes = present if classes is None else [int(c) for c in classes]
    usable = []
    for c in classes:
        if c in present:
            usable.append(c)
        else:
            warnings.warn(f"quality_study: class {c} has no real images, skipped", stacklevel=2)
    if not usable:
        raise ValueError("quality_study: no class has real images")
    share = [n // len(usable) + (i < n % len(usable)) for i in range(len(usable))]

    ssims, psnrs, mses, fids, pairs = [], [], [], [], []
    for c, count in zip(usable, share):
        if count == 0:
            continue
        fakes = np.asarray(sampler(count, c, derive_seed(seed, f"quality/class={c}")))
        refs = real.images[real.labels == c]
        ref_flat = refs.reshape(len(refs), -1).astype(np.float64)
        for img in fakes:
            dist = ((ref_flat - img.reshape(1, -1).astype(np.float64)) ** 2).mean(axis=1)
            match = refs[int(np.argmin(dist))]
            ssims.append(ssim(match, img))
            psnrs.append(psnr(match, img))
            mses.append(mse(match, img))
            pairs.append((match, img))
        if len(fakes) >= 2 and len(refs) >= 2:
            fids.append(fid(embed(refs), embed(fakes)))
    return QualityResult(
        n=len(mses),
        ssim=float(np.mean(ssims)),
        psnr=float(np.mean(psnrs)),
        mse=float(np.mean(mses)),
        fid=float(np.mean(fids)) if fids else math.nan,
        classes=len(usable),
        pairs=pairs,
    )


def timing_study(models: Mapping[str, ClassifierNetwork], images: np.ndarray, repetitions: int = 3) -> List[TimingRow]:
    """Average per-image inference time for every network in ``models``.

    Raises:
        ValueError: with fewer than 100 images.
    """
    images = np.asarray(images)
    if len(images) < 100:
        raise ValueError(f"timing_study needs at least 100 images, got {len(images)}")
    rows = []
    for name, net in models.items():
        t = measure_att(net, images, repetitions)
        rows.append(TimingRow(name, net.config.width, t.mean, t.std, t.n))
    return rows


# -- the grid ---------------------------------------------------------------------------
def classifier_name(width: int) -> str:
    return f"cnn-w{width}"


def build_corpus(config: ExperimentConfig) -> Dataset:
    counts = list(config.counts)
    if config.classes:
        counts = [n if c in config.classes else 0 for c, n in enumerate(counts)]
    corpus = generate_corpus(counts, seed=config.master_seed, margin=config.margin)
    return corpus.select_classes(config.classes) if config.classes else corpus


def make_synthesizer(config: ExperimentConfig, num_classes: int, seed: int) -> CGANSynthesizer:
    return CGANSynthesizer(
        profile=config.profile,
        mode=config.gan_mode,
        epochs=config.gan_epochs,
        lr=config.gan_lr,
        beta1=config.gan_beta1,
        batch_size=config.gan_batch_size,
        init_std=config.gan_init_std,
        objective=config.gan_objective,
        class_head=config.gan_class_head,
        class_weight=config.gan_class_weight,
        label_plane=config.gan_label_plane,
        num_classes=num_classes,
        random_state=seed,
    )


def make_classifier(config: ExperimentConfig, num_classes: int, width: int, seed: int) -> TopographyClassifier:
    return TopographyClassifier(
        num_classes=num_classes,
        width=width,
        epochs=config.clf_epochs,
        batch_size=config.clf_batch_size,
        lr=config.clf_lr,
        random_state=seed,
        shuffle=config.clf_shuffle,
    )


class _Run:
    """Per-run state: corpus, folds and the (fold, balancing) caches."""

    def __init__(self, config: ExperimentConfig, corpus: Dataset):
        self.config = config
        self.corpus = corpus
        splitter = PatientKFold(config.cv_folds, random_state=derive_seed(config.master_seed, "folds"))
        self.folds = list(splitter.split(groups=corpus.patient_ids))[: config.evaluated_folds]
        self._train: Dict[Tuple[int, str], Dataset] = {}
        self._gans: Dict[Tuple[int, str], object] = {}
        self._synth: Dict[Tuple[int, str], Dataset] = {}
        self.fold0_models: Dict[int, TopographyClassifier] = {}

    def train_set(self, fold: int, balancing: str) -> Dataset:
        key = (fold, balancing)
        if key not in self._train:
            train = self.corpus.subset(self.folds[fold][0])
            rng = derive_rng(self.config.master_seed, f"balance/{balancing}/fold={fold}")
            self._train[key] = balance(train, balancing, rng)
        return self._train[key]

    def gan(self, fold: int, balancing: str) -> CGANSynthesizer:
        key = (fold, balancing)
        if key not in self._gans:
            seed = derive_seed(self.config.master_seed, f"gan/fold={fold}/balancing={balancing}")
            train = self.train_set(fold, balancing)
            try:
                self._gans[key] = make_synthesizer(self.config, self.corpus.num_classes, seed).fit(train.images, train.labels)
            except Exception as exc:  # cached so every dependent cell reports the same failure
                self._gans[key] = exc
        result = self._gans[key]
        if isinstance(result, Exception):
            raise result
        return result

    def synthetic(self, fold: int, balancing: str) -> Dataset:
        key = (fold, balancing)
        if key not in self._synth:
            gan = self.gan(fold, balancing)
            seed = derive_seed(self.config.master_seed, f"synth/fold={fold}/balancing={balancing}")
            classes = np.flatnonzero(self.train_set(fold, balancing).class_counts)
            self._synth[key] = gan.sample_dataset(self.config.synthetic_per_class, seed=seed, classes=classes)
        return self._synth[key]

    def training_data(self, fold: int, condition: str, balancing: str) -> Dataset:
        if condition == "original":
            return self.train_set(fold, balancing)
        if condition == "synthesized":
            return self.synthetic(fold, balancing)
        return Dataset.concat([self.train_set(fold, balancing), self.synthetic(fold, balancing)])

    def run_cell(self, width: int, condition: str, balancing: str) -> CellResult:
        cell = CellResult(classifier_name(width), width, condition, balancing)
        scores = []
        try:
            for fold, (_, test_idx) in enumerate(self.folds):
                train = self.training_data(fold, condition, balancing)
                test = self.corpus.subset(test_idx)
                seed = derive_seed(self.config.master_seed, f"clf/width={width}/condition={condition}/balancing={balancing}/fold={fold}")
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", UserWarning)
                    model = make_classifier(self.config, self.corpus.num_classes, width, seed).fit(train.images, train.labels)
                if fold == 0:
                    self.fold0_models.setdefault(width, model)
                cm = confusion_matrix(model.predict(test.images), test.labels, self.corpus.num_classes)
                scores.append(macro_metrics(cm))
        except Exception as exc:
            logger.warning("cell %s/%s/%s failed: %s", classifier_name(width), condition, balancing, exc)
            cell.status = "failed"
            cell.error = f"{type(exc).__name__}: {exc}"
            cell.folds = len(scores)
            return cell
        values = np.asarray(scores, dtype=np.float64)
        cell.folds = len(scores)
        for j, metric in enumerate(METRICS):
            setattr(cell, f"{metric}_mean", float(values[:, j].mean()))
            setattr(cell, f"{metric}_std", float(values[:, j].std()))
        return cell


def run_experiment(config: ExperimentConfig, cells: Optional[Iterable[Tuple[int, str, str]]] = None,
                   timing: bool = True) -> ExperimentReport:
    """Execute the grid (or only ``cells``) and the quality and timing studies.

    A failing cell is recorded with status ``failed`` and its error message;
    the remaining cells still run.
    """
    corpus = build_corpus(config)
    run = _Run(config, corpus)
    grid = list(product(config.widths, config.conditions, config.balancing)) if cells is None else list(cells)
    results = []
    for width, condition, balancing in grid:
        logger.info("cell %s / %s / %s", classifier_name(width), condition, balancing)
        results.append(run.run_cell(width, condition, balancing))
    report = ExperimentReport(config, results)

    if config.quality_samples > 0:
        _quality_block(run, report)
    if timing and config.timing_images > 0:
        _timing_block(run, report)
    return report


def _quality_block(run: _Run, report: ExperimentReport) -> None:
    config = run.config
    balancing = "none" if "none" in config.balancing else config.balancing[0]
    try:
        gan = run.gan(0, balancing)
        real = run.train_set(0, "none")
        seed = derive_seed(config.master_seed, "quality/embedder")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            embedder = make_classifier(config, run.corpus.num_classes, config.widths[0], seed).fit(real.images, real.labels)
        sample_seed = derive_seed(config.master_seed, "quality/samples")
        report.quality = quality_study(
            lambda n, c, s: gan.sample(n, c, random_state=s), real, embedder.transform, config.quality_samples, sample_seed,
            classes=[int(c) for c in gan.classes_],
        )
        grid_seed = derive_seed(config.master_seed, "grid")
        report.samples = {int(c): gan.sample(8, int(c), random_state=grid_seed) for c in gan.classes_}
        report.gan_histories = {("all" if k is None else f"class {k}"): h for k, h in gan.history_.items()}
    except Exception as exc:
        logger.warning("quality study failed: %s", exc)


def _timing_block(run: _Run, report: ExperimentReport) -> None:
    config = run.config
    test = run.corpus.subset(run.folds[0][1])
    images = test.images
    if len(images) < config.timing_images:
        reps = -(-config.timing_images // max(len(images), 1))
        images = np.concatenate([images] * reps) if len(images) else images
    images = images[: config.timing_images]
    models = {}
    for width in config.widths:
        model = run.fold0_models.get(width)
        net = model.network_ if model is not None else build_classifier(
            ClassifierConfig(run.corpus.num_classes, width), seed=derive_seed(config.master_seed, f"timing/width={width}")
        )
        models[classifier_name(width)] = net
    try:
        report.timing = timing_study(models, images, config.timing_repetitions)
    except ValueError as exc:
        logger.warning("timing study skipped: %s", exc)


# -- emission ---------------------------------------------------------------------------
def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report_csv(report: ExperimentReport, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for cell in report.cells:
            writer.writerow([_fmt(cell.row()[c]) for c in CSV_COLUMNS])
    return path


def read_report_csv(path) -> List[CellResult]:
    """Parse ``report.csv`` back into :class:`CellResult` rows."""
    cells = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected report columns {reader.fieldnames}")
        for row in reader:
            kwargs = {}
            for f in dataclasses.fields(CellResult):
                raw = row[f.name]
                kwargs[f.name] = int(raw) if f.type in ("int", int) else float(raw) if f.type in ("float", float) else raw
            cells.append(CellResult(**kwargs))
    return cells


def write_report_json(report: ExperimentReport, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.to_json_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


def write_att_csv(rows: Sequence[TimingRow], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ATT_COLUMNS)
        for r in rows:
            writer.writerow([r.classifier, r.width, f"{r.att_mean:.4f}", f"{r.att_std:.4f}", r.n])
    return path


def write_quality_csv(quality: QualityResult, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(QUALITY_COLUMNS)
        writer.writerow([_fmt(v) for v in quality.row().values()])
    return path


def image_grid(rows: Sequence[Sequence[np.ndarray]], gap: int = 2) -> np.ndarray:
    """Tile equally sized uint8 images into one array with ``gap`` black pixels between cells."""
    h, w = rows[0][0].shape[:2]
    ncols = max(len(r) for r in rows)
    out = np.zeros((len(rows) * (h + gap) - gap, ncols * (w + gap) - gap, 3), dtype=np.uint8)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            out[i * (h + gap) : i * (h + gap) + h, j * (w + gap) : j * (w + gap) + w] = img
    return out


def _save_png(array: np.ndarray, path: Path) -> None:
    from PIL import Image

    Image.fromarray(array, mode="RGB").save(path)


def plot_gan_losses(histories: Mapping[str, object], path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = max(len(histories), 1)
    fig, axes = plt.subplots(n, 1, figsize=(6, 2.2 * n), squeeze=False)
    for ax, (name, hist) in zip(axes[:, 0], histories.items()):
        ax.plot(hist.d_loss, label="discriminator", linewidth=0.8)
        ax.plot(hist.g_loss, label="generator", linewidth=0.8)
        ax.set_title(f"GAN losses, {name}", fontsize=9)
        ax.set_xlabel("iteration")
        ax.legend(fontsize=7)
    if not histories:
        axes[0, 0].text(0.5, 0.5, "no GAN trained", ha="center", va="center")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def emit(report: ExperimentReport, output_dir, formats: Sequence[str] = ("csv", "json", "png")) -> List[Path]:
    """Write the requested report formats into ``output_dir``.

    Raises:
        OSError: if ``output_dir`` cannot be created or written; the message names the path.
    """
    unknown = set(formats) - {"csv", "json", "png"}
    if unknown:
        raise ValueError(f"unknown output formats {sorted(unknown)}")
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc.strerror or exc}") from exc

    written = [out / "config.resolved.txt"]
    written[0].write_text(report.config.to_text())
    if "csv" in formats:
        written.append(write_report_csv(report, out / "report.csv"))
        if report.quality is not None:
            written.append(write_quality_csv(report.quality, out / "quality.csv"))
    if "json" in formats:
        written.append(write_report_json(report, out / "report.json"))
    if report.timing:
        written.append(write_att_csv(report.timing, out / "att.csv"))
    if "png" in formats:
        blank = np.zeros((64, 64, 3), dtype=np.uint8)
        rows = [list(report.samples[c]) for c in sorted(report.samples)] or [[blank]]
        _save_png(image_grid(rows), out / "grid_generated.png")
        pairs = report.quality.pairs[:8] if report.quality is not None else []
        pair_rows = [[real for real, _ in pairs], [fake for _, fake in pairs]] if pairs else [[blank]]
        _save_png(image_grid(pair_rows), out / "grid_pairs.png")
        plot_gan_losses(report.gan_histories, out / "gan_losses.png")
        written += [out / name for name in IMAGE_FILES]
    return written
