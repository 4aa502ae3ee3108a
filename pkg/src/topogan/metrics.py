"""Classification and image-quality metrics.

Classification scores are computed one-vs-rest from a confusion matrix and
macro-averaged across classes. Image metrics follow the usual definitions:
MSE over all pixels and channels, PSNR against a 255 peak, windowed SSIM on
luminance, and the Fréchet distance between Gaussian fits of embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PEAK = 255.0


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


class BinaryCounts(NamedTuple):
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


class Score(NamedTuple):
    """A metric value plus a flag raised when its denominator was zero."""

    value: float
    degenerate: bool = False


def confusion_matrix(pred, truth, k: int) -> ConfusionMatrix:
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    if pred.shape != truth.shape:
        raise ValueError(f"pred and truth lengths differ: {pred.size} vs {truth.size}")
    for name, arr in (("pred", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"{name} labels must lie in [0, {k})")
    counts = np.bincount(truth * k + pred, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(counts)


def binary_counts(cm: ConfusionMatrix, c: int) -> BinaryCounts:
    """One-vs-rest reduction of ``cm`` for class ``c``."""
    m = cm.counts
    tp = int(m[c, c])
    fp = int(m[:, c].sum()) - tp
    fn = int(m[c, :].sum()) - tp
    tn = int(m.sum()) - tp - fp - fn
    return BinaryCounts(tp, tn, fp, fn)


def _ratio(num: float, den: float) -> Score:
    if den == 0:
        return Score(0.0, True)
    return Score(num / den)


def accuracy(b: BinaryCounts) -> Score:
    return _ratio(b.tp + b.tn, b.tn + b.tp + b.fn + b.fp)


def precision(b: BinaryCounts) -> Score:
    return _ratio(b.tp, b.tp + b.fp)


def recall(b: BinaryCounts) -> Score:
    return _ratio(b.tp, b.tp + b.fn)


def f1(b: BinaryCounts) -> Score:
    return _ratio(2 * b.tp, 2 * b.tp + b.fp + b.fn)


class MacroMetrics(NamedTuple):
    accuracy: float
    precision: float
    recall: float
    f1: float


def macro_metrics(cm: ConfusionMatrix) -> MacroMetrics:
    """Trace accuracy plus unweighted class means of precision, recall and F1.

    Classes whose denominator is zero contribute 0 to the mean.
    """
    if cm.total == 0:
        raise ValueError("macro_metrics: empty confusion matrix")
    per_class = [binary_counts(cm, c) for c in range(cm.k)]
    return MacroMetrics(
        float(np.trace(cm.counts)) / cm.total,
        float(np.mean([precision(b).value for b in per_class])),
        float(np.mean([recall(b).value for b in per_class])),
        float(np.mean([f1(b).value for b in per_class])),
    )


# -- image quality ------------------------------------------------------------
def _check_pair(f, g) -> Tuple[np.ndarray, np.ndarray]:
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if f.shape != g.shape:
        raise ValueError(f"image shapes differ: {f.shape} vs {g.shape}")
    return f, g


def mse(f, g) -> float:
    f, g = _check_pair(f, g)
    d = f - g
    return float(np.mean(d * d))


def psnr(f, g) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    err = mse(f, g)
    if err == 0:
        return float("inf")
    return float(10.0 * np.log10(PEAK**2 / err))


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = PEAK

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    def kernel(self) -> np.ndarray:
        """Normalized 1-D Gaussian taps; the 2-D window is their outer product."""
        r = np.arange(self.window) - (self.window - 1) / 2
        w = np.exp(-(r * r) / (2 * self.sigma**2))
        return w / w.sum()


def to_luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    if img.ndim == 2:
        return img
    raise ValueError(f"expected H x W or H x W x 3 image, got shape {img.shape}")


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable Gaussian-weighted window means at every valid window position."""
    w = len(taps)
    rows = sliding_window_view(img, w, axis=1) @ taps
    return sliding_window_view(rows, w, axis=0) @ taps


def ssim_map(y_t, y_e, params: SsimParams = SsimParams()) -> np.ndarray:
    """Per-window SSIM over all stride-1 window positions fully inside the image."""
    a, b = _check_pair(to_luminance(y_t), to_luminance(y_e))
    if a.shape[0] < params.window or a.shape[1] < params.window:
        raise ValueError(f"image {a.shape} smaller than the {params.window}x{params.window} window")
    taps = params.kernel()
    mu_a = _filter_valid(a, taps)
    mu_b = _filter_valid(b, taps)
    var_a = _filter_valid(a * a, taps) - mu_a * mu_a
    var_b = _filter_valid(b * b, taps) - mu_b * mu_b
    cov = _filter_valid(a * b, taps) - mu_a * mu_b
    c1, c2 = params.c1, params.c2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))


def ssim(y_t, y_e, params: SsimParams = SsimParams()) -> float:
    """Mean structural similarity over the M sliding windows, in [-1, 1]."""
    return float(np.mean(ssim_map(y_t, y_e, params)))


def fid(real_embeddings, fake_embeddings) -> float:
    """Fréchet distance between Gaussian fits of two embedding sets.

    ``|mu_r - mu_f|^2 + Tr(S_r + S_f - 2 (S_r S_f)^(1/2))``. The trace of the
    square root is taken from the eigenvalues of the symmetric matrix
    ``S_r^(1/2) S_f S_r^(1/2)`` (same spectrum as ``S_r S_f``), with
    negative round-off eigenvalues clamped to zero.
    """
    r = np.asarray(real_embeddings, dtype=np.float64)
    f = np.asarray(fake_embeddings, dtype=np.float64)
    if r.ndim != 2 or f.ndim != 2 or r.shape[1] != f.shape[1]:
        raise ValueError(f"embedding sets must be N x E with equal E, got {r.shape} and {f.shape}")
    if len(r) < 2 or len(f) < 2:
        raise ValueError("fid needs at least two rows in each embedding set")
    mu_r, mu_f = r.mean(axis=0), f.mean(axis=0)
    cov_r = np.atleast_2d(np.cov(r, rowvar=False))
    cov_f = np.atleast_2d(np.cov(f, rowvar=False))
    root_r = _psd_sqrt(cov_r)
    inner = root_r @ cov_f @ root_r
    eig = np.linalg.eigvalsh((inner + inner.T) / 2)
    trace_sqrt = np.sqrt(np.clip(eig, 0, None)).sum()
    diff = mu_r - mu_f
    value = diff @ diff + np.trace(cov_r) + np.trace(cov_f) - 2 * trace_sqrt
    return float(max(value, 0.0))


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T
