"""Procedural corneal-topography phantoms, corpus assembly and disk I/O.

Eight classes: label = 2 * map_index + condition_index, with maps ordered
sagittal, corneal_thickness, elevation_front, elevation_back and conditions
normal (0), abnormal (1).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .seeding import derive_seed

IMAGE_SIZE = 64
MAP_TYPES = ("sagittal", "corneal_thickness", "elevation_front", "elevation_back")
CONDITIONS = ("normal", "abnormal")
NUM_CLASSES = 8
CLASS_NAMES = tuple(
    f"{cond.capitalize()}_{name}" for name in MAP_TYPES for cond in CONDITIONS
)
# 248 Normal_Sagittal ... 229 Abnormal_Elevation Back
DEFAULT_COUNTS = (248, 460, 338, 548, 765, 167, 693, 229)

LESION_THRESHOLD = 0.35
DEFAULT_MARGIN = 0.3
REAL = "real_phantom"
SYNTHESIZED = "synthesized"

# blue -> green -> yellow -> red
COLORMAP_ANCHORS = np.array(
    [
        [0, 0, 110],
        [0, 40, 230],
        [0, 150, 255],
        [0, 200, 120],
        [40, 210, 0],
        [250, 240, 0],
        [255, 130, 0],
        [200, 0, 0],
    ],
    dtype=np.float64,
)

MANIFEST_COLUMNS = ("path", "class_label", "map_type", "condition", "patient_id", "provenance", "seed")


def class_label(map_type: str, condition: str) -> int:
    return 2 * MAP_TYPES.index(map_type) + CONDITIONS.index(condition)


def decode_label(label: int) -> Tuple[str, str]:
    return MAP_TYPES[label // 2], CONDITIONS[label % 2]


@dataclass(frozen=True)
class PhantomParams:
    map_type: str
    condition: str
    patient_id: int
    severity: float = 0.0
    apex_offset: Tuple[float, float] = (0.0, 0.0)
    lesion_amplitude: float = 0.0
    lesion_sigma: float = 8.0
    bowtie_angle: float = 0.0
    base_curvature: float = 1.0
    texture: float = 0.02

    def __post_init__(self):
        if self.map_type not in MAP_TYPES:
            raise ValueError(f"unknown map type {self.map_type!r}")
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError(f"severity must lie in [0, 1], got {self.severity}")
        if self.lesion_amplitude < 0 or self.lesion_sigma <= 0:
            raise ValueError("lesion amplitude must be >= 0 and sigma > 0")

    @property
    def label(self) -> int:
        return class_label(self.map_type, self.condition)


def lesion_amplitude_for(condition: str, severity: float, margin: float = DEFAULT_MARGIN) -> float:
    """Map a severity in [0, 1] to a lesion amplitude on the correct side of the threshold.

    Normal images stay below ``LESION_THRESHOLD - margin / 2``; abnormal
    images start at ``LESION_THRESHOLD + margin / 2``.
    """
    if not 0 <= margin < 2 * LESION_THRESHOLD:
        raise ValueError(f"margin must lie in [0, {2 * LESION_THRESHOLD}), got {margin}")
    if condition == "normal":
        return severity * (LESION_THRESHOLD - margin / 2)
    return LESION_THRESHOLD + margin / 2 + 0.4 * severity


def sample_params(
    map_type: str,
    condition: str,
    patient_id: int,
    rng: np.random.Generator,
    margin: float = DEFAULT_MARGIN,
    patient_traits: Optional[dict] = None,
) -> PhantomParams:
    """Draw random rendering parameters for one image.

    ``patient_traits`` (curvature, bowtie angle, severity) are shared by all
    maps of one synthetic patient when given.
    """
    traits = patient_traits or draw_patient_traits(condition, rng)
    severity = float(np.clip(traits["severity"] + rng.normal(0, 0.05), 0, 1))
    radius = rng.uniform(0.15, 0.45)
    # keratoconus cones sit mostly in the inferior half
    angle = rng.uniform(0.1 * np.pi, 0.9 * np.pi)
    return PhantomParams(
        map_type=map_type,
        condition=condition,
        patient_id=patient_id,
        severity=severity,
        apex_offset=(float(radius * np.cos(angle) * 32), float(radius * np.sin(angle) * 32)),
        lesion_amplitude=lesion_amplitude_for(condition, severity, margin),
        lesion_sigma=float(rng.uniform(6.0, 10.0)),
        bowtie_angle=traits["bowtie_angle"],
        base_curvature=traits["base_curvature"],
    )


def draw_patient_traits(condition: str, rng: np.random.Generator) -> dict:
    return {
        "severity": float(rng.uniform(0, 1)),
        "bowtie_angle": float(rng.uniform(0, np.pi)),
        "base_curvature": float(rng.normal(1.0, 0.08)),
    }


def _base_field(params: PhantomParams, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    r2 = x * x + y * y
    theta = np.arctan2(y, x)
    c = params.base_curvature
    if params.map_type == "sagittal":
        bowtie = 0.18 * r2 * np.cos(2 * (theta - params.bowtie_angle))
        return 0.45 * c - 0.15 * r2 + bowtie
    if params.map_type == "corneal_thickness":
        return 0.25 * c + 0.55 * r2
    if params.map_type == "elevation_front":
        return 0.45 + 0.2 * c * r2 * np.cos(2 * (theta - params.bowtie_angle))
    return 0.62 - 0.3 * c * r2


_LESION_SIGN = {"sagittal": 1.0, "corneal_thickness": -1.0, "elevation_front": 1.0, "elevation_back": 1.0}


def apply_colormap(field: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] through the 8-anchor colormap to uint8 RGB."""
    f = np.clip(field, 0.0, 1.0)
    stops = np.linspace(0.0, 1.0, len(COLORMAP_ANCHORS))
    rgb = np.stack([np.interp(f, stops, COLORMAP_ANCHORS[:, ch]) for ch in range(3)], axis=-1)
    return np.rint(rgb).astype(np.uint8)


def render_field(params: PhantomParams, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Scalar map in [0, 1] before colormapping; pixels outside the cornea are NaN."""
    coords = (np.arange(IMAGE_SIZE) + 0.5) / IMAGE_SIZE * 2 - 1
    y, x = np.meshgrid(coords, coords, indexing="ij")
    field = _base_field(params, x, y)
    if params.lesion_amplitude > 0:
        dx, dy = params.apex_offset
        sig = params.lesion_sigma / (IMAGE_SIZE / 2)
        cx, cy = dx / (IMAGE_SIZE / 2), dy / (IMAGE_SIZE / 2)
        bump = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sig * sig))
        field = field + _LESION_SIGN[params.map_type] * params.lesion_amplitude * bump
    if rng is not None and params.texture > 0:
        field = field + params.texture * rng.standard_normal(field.shape)
    field = np.where(x * x + y * y <= 0.95**2, field, np.nan)
    return field


def generate_phantom(params: PhantomParams, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Render one 64 x 64 x 3 uint8 topography-like image.

    Without ``rng`` no pixel texture noise is added, so the output is a
    pure function of ``params``.
    """
    field = render_field(params, rng)
    outside = np.isnan(field)
    rgb = apply_colormap(np.nan_to_num(field, nan=0.0))
    rgb[outside] = 0
    return rgb


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray
    class_label: int
    patient_id: int
    provenance: str = REAL
    seed: int = 0

    @property
    def map_type(self) -> str:
        return decode_label(self.class_label)[0]

    @property
    def condition(self) -> str:
        return decode_label(self.class_label)[1]


@dataclass
class Dataset:
    """Column-oriented collection of labeled images.

    ``images`` is N x 64 x 64 x 3 uint8; the other columns have length N.
    """

    images: np.ndarray
    labels: np.ndarray
    patient_ids: np.ndarray
    provenance: np.ndarray = None
    seeds: np.ndarray = None
    master_seed: Optional[int] = None
    num_classes: int = NUM_CLASSES
    paths: List[str] = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.patient_ids = np.asarray(self.patient_ids, dtype=np.int64)
        if self.provenance is None:
            self.provenance = np.full(n, REAL, dtype=object)
        self.provenance = np.asarray(self.provenance, dtype=object)
        if self.seeds is None:
            self.seeds = np.zeros(n, dtype=np.uint64)
        self.seeds = np.asarray(self.seeds, dtype=np.uint64)
        for name in ("labels", "patient_ids", "provenance", "seeds"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has length {len(getattr(self, name))}, expected {n}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(
            self.images[i], int(self.labels[i]), int(self.patient_ids[i]), str(self.provenance[i]), int(self.seeds[i])
        )

    def __iter__(self) -> Iterator[LabeledImage]:
        return (self[i] for i in range(len(self)))

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def patients(self) -> np.ndarray:
        return np.unique(self.patient_ids)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            self.images[index],
            self.labels[index],
            self.patient_ids[index],
            self.provenance[index],
            self.seeds[index],
            self.master_seed,
            self.num_classes,
        )

    def select_classes(self, classes: Sequence[int]) -> "Dataset":
        """Keep only ``classes`` and relabel them 0..len(classes)-1 in the given order."""
        classes = list(classes)
        keep = np.flatnonzero(np.isin(self.labels, classes))
        sub = self.subset(keep)
        remap = np.full(self.num_classes, -1)
        remap[classes] = np.arange(len(classes))
        sub.labels = remap[sub.labels]
        sub.num_classes = len(classes)
        return sub

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        parts = list(parts)
        return Dataset(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.patient_ids for p in parts]),
            np.concatenate([p.provenance for p in parts]),
            np.concatenate([p.seeds for p in parts]),
            parts[0].master_seed,
            max(p.num_classes for p in parts),
        )


def generate_corpus(
    counts: Sequence[int] = DEFAULT_COUNTS,
    seed: int = 0,
    margin: float = DEFAULT_MARGIN,
) -> Dataset:
    """Assemble a phantom corpus with exactly ``counts[c]`` images of class ``c``.

    Patients share one condition. For each condition, patient ``j``
    contributes one image of every map type whose count exceeds ``j``, so
    a patient owns between one and four images.
    """
    counts = [int(c) for c in counts]
    if len(counts) != NUM_CLASSES or min(counts) < 0:
        raise ValueError(f"counts must be {NUM_CLASSES} non-negative integers, got {counts}")

    images, labels, patients, seeds = [], [], [], []
    next_patient = 0
    for ci, condition in enumerate(CONDITIONS):
        per_map = [counts[2 * mi + ci] for mi in range(len(MAP_TYPES))]
        for j in range(max(per_map)):
            pid = next_patient + j
            trait_rng = np.random.default_rng(derive_seed(seed, f"patient/{pid}"))
            traits = draw_patient_traits(condition, trait_rng)
            for mi, map_type in enumerate(MAP_TYPES):
                if j >= per_map[mi]:
                    continue
                image_seed = derive_seed(seed, f"image/{pid}/{map_type}")
                rng = np.random.default_rng(image_seed)
                params = sample_params(map_type, condition, pid, rng, margin, traits)
                images.append(generate_phantom(params, rng))
                labels.append(params.label)
                patients.append(pid)
                seeds.append(image_seed)
        next_patient += max(per_map)

    # class-major order keeps manifests easy to read
    order = np.lexsort((np.asarray(patients), np.asarray(labels))) if labels else np.array([], dtype=int)
    empty = np.zeros((0, IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    return Dataset(
        np.stack(images)[order] if images else empty,
        np.asarray(labels, dtype=np.int64)[order],
        np.asarray(patients, dtype=np.int64)[order],
        seeds=np.asarray(seeds, dtype=np.uint64)[order],
        master_seed=seed,
    )


def normalize(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 N x H x W x 3 -> float N x 3 x H x W in [-1, 1] via x / 127.5 - 1."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    out = images.astype(np.float64) / 127.5 - 1.0
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)).astype(dtype)


def denormalize(batch: np.ndarray) -> np.ndarray:
    """float N x 3 x H x W in [-1, 1] -> uint8 N x H x W x 3, rounded and clamped."""
    batch = np.asarray(batch, dtype=np.float64)
    pixels = np.clip(np.rint((batch + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(pixels.transpose(0, 2, 3, 1))


# -- disk format -----------------------------------------------------------------
def save_corpus(dataset: Dataset, directory: Union[str, Path]) -> Path:
    """Write PNG images plus ``manifest.csv`` (master seed in a ``#`` header line)."""
    from PIL import Image

    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.csv"
    counters = np.zeros(dataset.num_classes, dtype=int)
    with manifest.open("w", newline="") as fh:
        fh.write(f"# master_seed={dataset.master_seed}\n")
        fh.write(f"# num_classes={dataset.num_classes}\n")
        fh.write("# class_label = 2 * map_index + condition_index; maps " + ",".join(MAP_TYPES) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for i in range(len(dataset)):
            label = int(dataset.labels[i])
            rel = f"images/{label}_{counters[label]}.png"
            counters[label] += 1
            Image.fromarray(dataset.images[i], mode="RGB").save(directory / rel)
            map_type, condition = decode_label(label) if dataset.num_classes == NUM_CLASSES else ("", "")
            writer.writerow(
                [rel, label, map_type, condition, int(dataset.patient_ids[i]), dataset.provenance[i], int(dataset.seeds[i])]
            )
    return manifest


def load_corpus(directory: Union[str, Path]) -> Dataset:
    from PIL import Image

    directory = Path(directory)
    master_seed = None
    num_classes = NUM_CLASSES
    rows = []
    with (directory / "manifest.csv").open() as fh:
        lines = []
        for line in fh:
            if line.startswith("# master_seed="):
                value = line.split("=", 1)[1].strip()
                master_seed = None if value == "None" else int(value)
            elif line.startswith("# num_classes="):
                num_classes = int(line.split("=", 1)[1])
            elif not line.startswith("#"):
                lines.append(line)
        rows = list(csv.DictReader(lines))
    images = np.stack([np.asarray(Image.open(directory / r["path"]).convert("RGB")) for r in rows]) if rows else (
        np.zeros((0, IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    )
    ds = Dataset(
        images,
        [int(r["class_label"]) for r in rows],
        [int(r["patient_id"]) for r in rows],
        [r["provenance"] for r in rows],
        [int(r["seed"]) for r in rows],
        master_seed,
        num_classes,
    )
    ds.paths = [r["path"] for r in rows]
    return ds


def with_provenance(dataset: Dataset, provenance: str) -> Dataset:
    out = replace(dataset)
    out.provenance = np.full(len(dataset), provenance, dtype=object)
    return out
