"""Compact CNN diagnosis classifier trained with Adam on softmax cross-entropy.

Four 3 x 3 stride-2 blocks (conv, batch norm, leaky ReLU 0.2) reduce
64 x 64 inputs to 4 x 4, global average pooling gives the embedding used
for FID, and a dense layer produces class logits.
"""
from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import functional as F
from .autodiff.tensor import Tensor, no_grad
from .phantom import NUM_CLASSES, normalize
from .seeding import check_random_state
from .validation import check_images, check_labels


@dataclass(frozen=True)
class ClassifierConfig:
    num_classes: int = NUM_CLASSES
    width: int = 16
    blocks: int = 4
    kernel: int = 3
    leaky_slope: float = 0.2

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(self.width * 2**i for i in range(self.blocks))

    @property
    def embedding_dim(self) -> int:
        return self.widths[-1]


@dataclass
class ClassifierTrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    shuffle: bool = True


@dataclass
class TrainHistory:
    train_loss: List[float] = field(default_factory=list)
    train_acc: List[float] = field(default_factory=list)
    val_acc: List[float] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "train_acc", "val_acc"])
            for i, row in enumerate(zip(self.train_loss, self.train_acc, self.val_acc)):
                writer.writerow([i + 1, *map(repr, row)])


class ClassifierNetwork(ad.Module):
    def __init__(self, config: ClassifierConfig, dtype=np.float32):
        super().__init__()
        if config.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {config.num_classes}")
        self.config = config
        layers: List[ad.Module] = []
        cin = 3
        for cout in config.widths:
            layers += [
                ad.Conv2d(cin, cout, config.kernel, 2, config.kernel // 2, dtype),
                ad.BatchNorm2d(cout, dtype=dtype),
                ad.Activation("leaky_relu", config.leaky_slope),
            ]
            cin = cout
        layers.append(ad.GlobalAvgPool())
        self.body = ad.Sequential(*layers)
        self.head = ad.Dense(cin, config.num_classes, dtype)

    def embed(self, x: Tensor) -> Tensor:
        return self.body(x)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.body(x))


def build_classifier(config: ClassifierConfig = ClassifierConfig(), seed=0, dtype=np.float32) -> ClassifierNetwork:
    """He-normal initialized network; identical seeds give identical weights."""
    net = ClassifierNetwork(config, dtype)
    rng = check_random_state(seed)
    for name, p in net.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "weight":
            fan_in = int(np.prod(p.shape[1:])) if p.ndim == 4 else p.shape[0]
            p.data[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=p.shape)
    return net


def _forward_logits(net: ClassifierNetwork, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    net.eval()
    outs = []
    with no_grad():
        for start in range(0, len(x), batch_size):
            outs.append(net(Tensor(x[start : start + batch_size])).data)
    return np.concatenate(outs) if outs else np.zeros((0, net.config.num_classes), dtype=np.float32)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def train_classifier(
    net: ClassifierNetwork,
    X: np.ndarray,
    y: np.ndarray,
    config: ClassifierTrainConfig = ClassifierTrainConfig(),
    X_val: Optional[np.ndarray] = None,
    y_val: Optional[np.ndarray] = None,
) -> Tuple[ClassifierNetwork, TrainHistory]:
    """Minimize softmax cross-entropy with Adam; ``X`` is normalized N x 3 x 64 x 64."""
    if len(X) == 0:
        raise ValueError("train_classifier: empty training set")
    rng = np.random.default_rng(config.seed)
    opt = ad.Adam(net.parameters(), lr=config.lr)
    history = TrainHistory()
    n = len(X)
    for _ in range(config.epochs):
        net.train()
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                # batch norm needs two samples; a trailing singleton batch is skipped
                continue
            opt.zero_grad()
            logits = net(Tensor(X[idx]))
            loss = F.softmax_cross_entropy(logits, y[idx])
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == y[idx]).sum())
        history.train_loss.append(loss_sum / n)
        history.train_acc.append(correct / n)
        if X_val is not None and len(X_val):
            history.val_acc.append(float((_forward_logits(net, X_val).argmax(axis=1) == y_val).mean()))
        else:
            history.val_acc.append(float("nan"))
    net.eval()
    return net, history


class Prediction(NamedTuple):
    labels: np.ndarray
    probabilities: np.ndarray


def predict_batch(net: ClassifierNetwork, images) -> Prediction:
    """Argmax labels and softmax probabilities for uint8 N x 64 x 64 x 3 images."""
    probs = softmax_rows(_forward_logits(net, normalize(check_images(images))))
    return Prediction(probs.argmax(axis=1), probs)


def extract_embeddings(net: ClassifierNetwork, images, batch_size: int = 256) -> np.ndarray:
    """Post-pool, pre-dense activations, N x embedding_dim."""
    x = normalize(check_images(images))
    net.eval()
    outs = []
    with no_grad():
        for start in range(0, len(x), batch_size):
            outs.append(net.embed(Tensor(x[start : start + batch_size])).data)
    return np.concatenate(outs).astype(np.float64)


class Timing(NamedTuple):
    mean: float
    std: float
    n: int


def measure_att(net: ClassifierNetwork, images, repetitions: int = 5) -> Timing:
    """Average per-image inference time in seconds.

    Every image is pushed through the network alone, ``repetitions`` times,
    after one untimed warm-up pass over the whole set.
    """
    if repetitions < 1:
        raise ValueError(f"repetitions must be >= 1, got {repetitions}")
    x = normalize(check_images(images))
    net.eval()
    timings = []
    with no_grad():
        for i in range(len(x)):
            net(Tensor(x[i : i + 1]))
        for _ in range(repetitions):
            for i in range(len(x)):
                start = time.perf_counter()
                net(Tensor(x[i : i + 1]))
                timings.append(time.perf_counter() - start)
    timings = np.asarray(timings)
    return Timing(float(timings.mean()), float(timings.std()), len(timings))


class TopographyClassifier(ClassifierMixin, BaseEstimator, TransformerMixin):
    """sklearn-compatible wrapper around :class:`ClassifierNetwork`.

    ``fit`` takes uint8 images N x 64 x 64 x 3 and integer labels;
    ``transform`` returns the embedding used for FID.
    """

    def __init__(self, num_classes=NUM_CLASSES, width=16, epochs=20, batch_size=32, lr=1e-3, random_state=0, shuffle=True):
        self.num_classes = num_classes
        self.width = width
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state
        self.shuffle = shuffle

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X)
        y = check_labels(y, self.num_classes, len(X))
        missing = np.flatnonzero(np.bincount(y, minlength=self.num_classes) == 0)
        self.warnings_ = []
        if len(missing):
            msg = f"classes absent from training data: {missing.tolist()}"
            self.warnings_.append(msg)
            warnings.warn(msg, stacklevel=2)
        seed = int(self.random_state or 0)
        self.network_ = build_classifier(ClassifierConfig(self.num_classes, self.width), seed=seed)
        xv = yv = None
        if X_val is not None and len(X_val):
            xv = normalize(check_images(X_val))
            yv = check_labels(y_val, self.num_classes, len(xv))
        cfg = ClassifierTrainConfig(self.epochs, self.batch_size, self.lr, seed + 1, self.shuffle)
        _, self.history_ = train_classifier(self.network_, normalize(X), y, cfg, xv, yv)
        self.classes_ = np.arange(self.num_classes)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        return _forward_logits(self.network_, normalize(check_images(X))).astype(np.float64)

    def predict_proba(self, X) -> np.ndarray:
        return softmax_rows(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X).argmax(axis=1)

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        return extract_embeddings(self.network_, X)

    @property
    def n_parameters_(self) -> int:
        check_is_fitted(self, "network_")
        return self.network_.num_parameters()

    def save(self, directory) -> Path:
        check_is_fitted(self, "network_")
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        ad.save_weights(self.network_, directory / "classifier.bin")
        (directory / "classifier.json").write_text(json.dumps({"params": self.get_params()}, indent=2, sort_keys=True))
        self.history_.to_csv(directory / "history.csv")
        return directory

    @classmethod
    def load(cls, directory) -> "TopographyClassifier":
        directory = Path(directory)
        est = cls(**json.loads((directory / "classifier.json").read_text())["params"])
        est.network_ = ClassifierNetwork(ClassifierConfig(est.num_classes, est.width))
        ad.load_weights(est.network_, directory / "classifier.bin")
        est.network_.eval()
        est.classes_ = np.arange(est.num_classes)
        est.history_ = TrainHistory()
        est.warnings_ = []
        return est
