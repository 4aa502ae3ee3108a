"""Conditional GAN for 64 x 64 x 3 topography images.

The generator projects a 100-d uniform noise vector to a 4 x 4 seed volume
and up-samples it with four stride-2, 5 x 5 transposed convolutions
(4 -> 8 -> 16 -> 32 -> 64) ending in tanh. The discriminator mirrors it with
four stride-2, 5 x 5 convolutions and two heads reading the same features:
a sigmoid real/fake score and class logits.

Two regimes are supported: ``per_class`` trains an independent GAN for every
class label, ``conditional`` trains one GAN whose generator receives the
one-hot label next to the noise and whose discriminator sees the label as an
extra constant input plane.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import functional as F
from .autodiff.tensor import Tensor, no_grad
from .phantom import NUM_CLASSES, SYNTHESIZED, Dataset, denormalize, normalize
from .seeding import check_random_state, derive_seed
from .validation import check_images, check_labels

logger = logging.getLogger(__name__)

Z_DIM = 100
PROFILES = {
    "desk": (128, (64, 32, 16, 3)),
    "full": (1024, (512, 256, 128, 3)),
}
OBJECTIVES = ("nonsaturating", "saturating")
MODES = ("per_class", "conditional")


@dataclass(frozen=True)
class GeneratorConfig:
    z_dim: int = Z_DIM
    base_channels: int = 128
    channel_schedule: Tuple[int, ...] = (64, 32, 16, 3)
    kernel: int = 5
    stride: int = 2
    output_pad: int = 1
    num_classes: int = NUM_CLASSES
    conditional: bool = False

    @classmethod
    def from_profile(cls, profile: str = "desk", **kwargs) -> "GeneratorConfig":
        base, schedule = PROFILES[profile]
        return cls(base_channels=base, channel_schedule=schedule, **kwargs)

    def __post_init__(self):
        if len(self.channel_schedule) != 4 or self.channel_schedule[-1] != 3:
            raise ValueError("channel_schedule needs four stages ending at 3 channels")


@dataclass(frozen=True)
class DiscriminatorConfig:
    channel_schedule: Tuple[int, ...] = (16, 32, 64, 128)
    kernel: int = 5
    stride: int = 2
    leaky_slope: float = 0.2
    num_classes: int = NUM_CLASSES
    class_head: bool = True
    conditional: bool = False
    label_plane: bool = True

    @property
    def uses_label_plane(self) -> bool:
        return self.conditional and self.label_plane

    @classmethod
    def from_profile(cls, profile: str = "desk", **kwargs) -> "DiscriminatorConfig":
        base, schedule = PROFILES[profile]
        mirrored = tuple(reversed((base,) + schedule[:-1]))
        return cls(channel_schedule=mirrored, **kwargs)


@dataclass
class GanTrainConfig:
    epochs: int = 20
    lr: float = 1e-4
    beta1: float = 0.5
    init_std: float = 0.02
    batch_size: int = 8
    mode: str = "per_class"
    objective: str = "nonsaturating"
    class_head: bool = True
    class_weight: float = 1.0
    label_plane: bool = True
    profile: str = "desk"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.beta1 < 1:
            raise ValueError(f"beta1 must lie in [0, 1), got {self.beta1}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {tuple(PROFILES)}, got {self.profile!r}")


@dataclass
class GanHistory:
    """Per-iteration batch means recorded during training."""

    d_loss: List[float] = field(default_factory=list)
    g_loss: List[float] = field(default_factory=list)
    d_real: List[float] = field(default_factory=list)
    d_fake: List[float] = field(default_factory=list)

    def append(self, d_loss, g_loss, d_real, d_fake):
        self.d_loss.append(float(d_loss))
        self.g_loss.append(float(g_loss))
        self.d_real.append(float(d_real))
        self.d_fake.append(float(d_fake))

    def __len__(self):
        return len(self.d_loss)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iteration", "d_loss", "g_loss", "d_real", "d_fake"])
            for i, row in enumerate(zip(self.d_loss, self.g_loss, self.d_real, self.d_fake)):
                writer.writerow([i, *map(repr, row)])


# -- networks -------------------------------------------------------------------
class Generator(ad.Module):
    def __init__(self, config: GeneratorConfig = GeneratorConfig(), dtype=np.float32):
        super().__init__()
        self.config = config
        c = config
        in_dim = c.z_dim + (c.num_classes if c.conditional else 0)
        layers: List[ad.Module] = [
            ad.Dense(in_dim, 4 * 4 * c.base_channels, dtype),
            ad.Reshape(c.base_channels, 4, 4),
            ad.BatchNorm2d(c.base_channels, dtype=dtype),
            ad.Activation("relu"),
        ]
        cin = c.base_channels
        pad = (c.kernel - 1) // 2
        for i, cout in enumerate(c.channel_schedule):
            layers.append(ad.ConvTranspose2d(cin, cout, c.kernel, c.stride, pad, c.output_pad, dtype))
            if i < len(c.channel_schedule) - 1:
                layers += [ad.BatchNorm2d(cout, dtype=dtype), ad.Activation("relu")]
            cin = cout
        layers.append(ad.Activation("tanh"))
        self.net = ad.Sequential(*layers)

    def _input(self, z, labels) -> Tensor:
        z = np.asarray(z.data if isinstance(z, Tensor) else z)
        if z.ndim != 2 or z.shape[1] != self.config.z_dim:
            raise ValueError(f"noise must be N x {self.config.z_dim}, got {z.shape}")
        if self.config.conditional:
            if labels is None:
                raise ValueError("conditional generator needs labels")
            onehot = np.eye(self.config.num_classes, dtype=z.dtype)[np.asarray(labels, dtype=int)]
            z = np.concatenate([z, onehot], axis=1)
        return Tensor(z.astype(self.net[0].weight.dtype, copy=False))

    def forward(self, z, labels=None) -> Tensor:
        return self.net(self._input(z, labels))

    def stage_shapes(self, z, labels=None) -> List[Tuple[int, int]]:
        """Spatial size after the projection and after each up-sampling layer."""
        outs = self.net.forward_stages(self._input(z, labels))
        return [o.shape[2:] for layer, o in zip(self.net.layers, outs) if isinstance(layer, (ad.Reshape, ad.ConvTranspose2d))]


class Discriminator(ad.Module):
    def __init__(self, config: DiscriminatorConfig = DiscriminatorConfig(), dtype=np.float32):
        super().__init__()
        self.config = config
        c = config
        cin = 3 + (1 if c.uses_label_plane else 0)
        pad = (c.kernel - 1) // 2
        layers: List[ad.Module] = []
        for cout in c.channel_schedule:
            layers += [
                ad.Conv2d(cin, cout, c.kernel, c.stride, pad, dtype),
                ad.BatchNorm2d(cout, dtype=dtype),
                ad.Activation("leaky_relu", c.leaky_slope),
            ]
            cin = cout
        layers.append(ad.Flatten())
        self.features = ad.Sequential(*layers)
        n_features = cin * 4 * 4
        self.adv_head = ad.Dense(n_features, 1, dtype)
        self.class_head = ad.Dense(n_features, c.num_classes, dtype) if c.class_head else None

    def _input(self, images, labels) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
        expected = (3, 64, 64)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ValueError(f"discriminator expects N x 3 x 64 x 64 images, got {x.shape}")
        if self.config.uses_label_plane:
            if labels is None:
                raise ValueError("conditional discriminator needs labels")
            k = self.config.num_classes
            level = 2.0 * np.asarray(labels, dtype=np.float64) / max(k - 1, 1) - 1.0
            plane = np.broadcast_to(level.reshape(-1, 1, 1, 1), (x.shape[0], 1, 64, 64)).astype(x.dtype)
            x = F.concat([x, Tensor(plane)], axis=1)
        return x

    def forward(self, images, labels=None) -> Tuple[Tensor, Optional[Tensor]]:
        h = self.features(self._input(images, labels))
        adv = F.sigmoid(self.adv_head(h)).reshape(-1)
        logits = self.class_head(h) if self.class_head is not None else None
        return adv, logits

    def stage_shapes(self, images, labels=None) -> List[Tuple[int, int]]:
        outs = self.features.forward_stages(self._input(images, labels))
        return [o.shape[2:] for layer, o in zip(self.features.layers, outs) if isinstance(layer, ad.Conv2d)]


def build_generator(profile="desk", conditional=False, num_classes=NUM_CLASSES, dtype=np.float32) -> Generator:
    return Generator(GeneratorConfig.from_profile(profile, conditional=conditional, num_classes=num_classes), dtype)


def build_discriminator(
    profile="desk", conditional=False, num_classes=NUM_CLASSES, class_head=True, dtype=np.float32, label_plane=True
) -> Discriminator:
    cfg = DiscriminatorConfig.from_profile(
        profile, conditional=conditional, num_classes=num_classes, class_head=class_head, label_plane=label_plane
    )
    return Discriminator(cfg, dtype)


def init_weights(network: ad.Module, std: float = 0.02, rng=None) -> ad.Module:
    """Draw every dense/convolution weight from N(0, std^2) and zero every bias.

    Batch-normalization scale and shift keep their identity values (1, 0).
    """
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    rng = check_random_state(rng)
    for name, p in network.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "weight":
            p.data[...] = rng.normal(0.0, std, size=p.shape)
        elif leaf == "bias":
            p.data[...] = 0
    return network


def sample_noise(batch: int, rng, z_dim: int = Z_DIM, dtype=np.float32) -> np.ndarray:
    """``batch`` noise vectors drawn uniformly from [-1, 1]."""
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    return check_random_state(rng).uniform(-1.0, 1.0, size=(batch, z_dim)).astype(dtype)


# -- losses -----------------------------------------------------------------------
def _as_prob_tensor(p) -> Tensor:
    t = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=np.float64))
    if t.size == 0:
        raise ValueError("adversarial loss on an empty batch")
    return t


def discriminator_loss(d_real, d_fake) -> Tensor:
    """-mean ln D(x) - mean ln(1 - D(G(z)))."""
    return F.binary_cross_entropy(_as_prob_tensor(d_real), 1.0) + F.binary_cross_entropy(_as_prob_tensor(d_fake), 0.0)


def generator_loss(d_fake, objective: str = "nonsaturating") -> Tensor:
    """-mean ln D(G(z)) (nonsaturating) or mean ln(1 - D(G(z))) (saturating)."""
    d_fake = _as_prob_tensor(d_fake)
    if objective == "nonsaturating":
        return F.binary_cross_entropy(d_fake, 1.0)
    if objective == "saturating":
        return -F.binary_cross_entropy(d_fake, 0.0)
    raise ValueError(f"unknown objective {objective!r}")


def adversarial_losses(d_real, d_fake, objective: str = "nonsaturating") -> Tuple[Tensor, Tensor]:
    """(discriminator loss, generator loss) for probability batches clamped to [eps, 1 - eps]."""
    return discriminator_loss(d_real, d_fake), generator_loss(d_fake, objective)


# -- training ---------------------------------------------------------------------
@dataclass
class GanRun:
    generator: Generator
    discriminator: Discriminator
    history: GanHistory
    label: Optional[int]
    seed: int


def _train_pair(
    images: np.ndarray,
    labels: np.ndarray,
    config: GanTrainConfig,
    seed: int,
    num_classes: int,
    conditional: bool,
    callback: Optional[Callable[[int, Generator, GanHistory], None]] = None,
) -> Tuple[Generator, Discriminator, GanHistory]:
    rng = np.random.default_rng(seed)
    gen = build_generator(config.profile, conditional, num_classes)
    disc = build_discriminator(config.profile, conditional, num_classes, config.class_head, label_plane=config.label_plane)
    init_weights(gen, config.init_std, rng)
    init_weights(disc, config.init_std, rng)
    opt_g = ad.Adam(gen.parameters(), lr=config.lr, beta1=config.beta1)
    opt_d = ad.Adam(disc.parameters(), lr=config.lr, beta1=config.beta1)
    history = GanHistory()
    n = len(images)
    use_class = config.class_head and config.class_weight > 0

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            m = len(idx)
            real = Tensor(images[idx])
            y = labels[idx]
            y_joint = np.concatenate([y, y]) if conditional else None
            z = sample_noise(m, rng)
            fake = gen(z, y if conditional else None)

            # Real and fake rows share one discriminator batch so that batch
            # norm statistics are common to both; normalizing them separately
            # hides any global offset between the two distributions.
            opt_d.zero_grad()
            d_all, logits_all = disc(F.concat([real, fake.detach()], axis=0), y_joint)
            d_real, d_fake = d_all[:m], d_all[m:]
            loss_d = discriminator_loss(d_real, d_fake)
            if use_class:
                loss_d = loss_d + F.softmax_cross_entropy(logits_all[:m], y) * config.class_weight
            loss_d.backward()
            opt_d.step()

            # generator step through the updated discriminator, same joint layout
            opt_g.zero_grad()
            with disc.frozen():
                d_all_g, logits_all_g = disc(F.concat([real, fake], axis=0), y_joint)
                loss_g = generator_loss(d_all_g[m:], config.objective)
                if use_class:
                    loss_g = loss_g + F.softmax_cross_entropy(logits_all_g[m:], y) * config.class_weight
                loss_g.backward()
            opt_g.step()

            history.append(loss_d.item(), loss_g.item(), d_real.data.mean(), d_fake.data.mean())
        if callback is not None:
            callback(epoch, gen, history)
        logger.debug("gan epoch %d: d_loss=%.4f g_loss=%.4f", epoch, history.d_loss[-1], history.g_loss[-1])
    gen.eval()
    disc.eval()
    return gen, disc, history


def train_cgan(
    dataset: Dataset,
    config: GanTrainConfig = GanTrainConfig(),
    target_class: Optional[int] = None,
) -> Dict[Optional[int], GanRun]:
    """Train GANs on ``dataset`` under ``config``.

    In ``per_class`` mode one GAN is trained per class present in the data
    (or only ``target_class`` when given), each seeded with
    ``derive_seed(config.seed, "gan/class=<c>")``. In ``conditional`` mode a
    single GAN is trained on every image and stored under key ``None``.

    Raises:
        ValueError: if the requested class (or the dataset) has no images.
    """
    images = normalize(dataset.images)
    labels = dataset.labels
    k = dataset.num_classes
    if config.mode == "conditional":
        if len(images) == 0:
            raise ValueError("train_cgan: empty dataset")
        seed = derive_seed(config.seed, "gan/conditional")
        gen, disc, hist = _train_pair(images, labels, config, seed, k, conditional=True)
        return {None: GanRun(gen, disc, hist, None, seed)}

    classes = [target_class] if target_class is not None else [int(c) for c in np.flatnonzero(dataset.class_counts)]
    runs = {}
    for c in classes:
        members = np.flatnonzero(labels == c)
        if len(members) == 0:
            raise ValueError(f"train_cgan: class {c} has no images")
        seed = derive_seed(config.seed, f"gan/class={c}")
        gen, disc, hist = _train_pair(images[members], labels[members], config, seed, k, conditional=False)
        runs[c] = GanRun(gen, disc, hist, c, seed)
    return runs


def generate_images(generator: Generator, n: int, label: Optional[int], seed, batch_size: int = 64) -> np.ndarray:
    """n uint8 images from ``generator`` in eval mode."""
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    rng = check_random_state(seed)
    generator.eval()
    out = []
    with no_grad():
        for start in range(0, n, batch_size):
            m = min(batch_size, n - start)
            z = sample_noise(m, rng)
            labels = np.full(m, label) if generator.config.conditional else None
            out.append(denormalize(generator(z, labels).data))
    return np.concatenate(out)


def synthesize(generator: Generator, n: int, label: int, seed: int = 0, num_classes: int = NUM_CLASSES) -> Dataset:
    """n labeled synthetic images (patient id -1, provenance ``synthesized``)."""
    images = generate_images(generator, n, label, seed)
    return Dataset(
        images,
        np.full(n, label),
        np.full(n, -1),
        np.full(n, SYNTHESIZED, dtype=object),
        np.full(n, seed, dtype=np.uint64),
        num_classes=num_classes,
    )


# -- estimator ---------------------------------------------------------------------
class CGANSynthesizer(BaseEstimator):
    """Estimator wrapper: ``fit`` trains the GAN(s), ``sample`` draws labeled images.

    Parameters mirror :class:`GanTrainConfig`. ``X`` is an N x 64 x 64 x 3
    uint8 array and ``y`` holds integer labels in ``[0, num_classes)``.
    """

    def __init__(
        self,
        profile="desk",
        mode="per_class",
        epochs=20,
        lr=1e-4,
        beta1=0.5,
        batch_size=8,
        init_std=0.02,
        objective="nonsaturating",
        class_head=True,
        class_weight=1.0,
        label_plane=True,
        num_classes=NUM_CLASSES,
        random_state=0,
    ):
        self.profile = profile
        self.mode = mode
        self.epochs = epochs
        self.lr = lr
        self.beta1 = beta1
        self.batch_size = batch_size
        self.init_std = init_std
        self.objective = objective
        self.class_head = class_head
        self.class_weight = class_weight
        self.label_plane = label_plane
        self.num_classes = num_classes
        self.random_state = random_state

    def _config(self) -> GanTrainConfig:
        return GanTrainConfig(
            epochs=self.epochs,
            lr=self.lr,
            beta1=self.beta1,
            init_std=self.init_std,
            batch_size=self.batch_size,
            mode=self.mode,
            objective=self.objective,
            class_head=self.class_head,
            class_weight=self.class_weight,
            label_plane=self.label_plane,
            profile=self.profile,
            seed=int(self.random_state or 0),
        )

    def fit(self, X, y, target_class=None):
        X = check_images(X)
        y = check_labels(y, self.num_classes, len(X))
        data = Dataset(X, y, np.arange(len(X)), num_classes=self.num_classes)
        self.runs_ = train_cgan(data, self._config(), target_class)
        self.classes_ = np.array(sorted(c for c in self.runs_ if c is not None)) if self.mode == "per_class" else np.flatnonzero(data.class_counts)
        return self

    @property
    def generators_(self) -> Dict[Optional[int], Generator]:
        check_is_fitted(self, "runs_")
        return {c: run.generator for c, run in self.runs_.items()}

    @property
    def history_(self) -> Dict[Optional[int], GanHistory]:
        check_is_fitted(self, "runs_")
        return {c: run.history for c, run in self.runs_.items()}

    def generator_for(self, label: int) -> Generator:
        check_is_fitted(self, "runs_")
        if self.mode == "conditional":
            return self.runs_[None].generator
        if label not in self.runs_:
            raise KeyError(f"no generator trained for class {label}")
        return self.runs_[label].generator

    def sample(self, n: int, label: int, random_state=None) -> np.ndarray:
        """n uint8 images of class ``label``."""
        return generate_images(self.generator_for(label), n, label, random_state)

    def sample_dataset(self, n_per_class: int, seed: int = 0, classes: Optional[Sequence[int]] = None) -> Dataset:
        classes = self.classes_ if classes is None else classes
        parts = [
            synthesize(self.generator_for(int(c)), n_per_class, int(c), derive_seed(seed, f"synth/class={int(c)}"), self.num_classes)
            for c in classes
        ]
        return Dataset.concat(parts)

    # -- persistence --------------------------------------------------------------
    def save(self, directory) -> Path:
        """Write ``generator_<key>.bin``/``discriminator_<key>.bin`` containers and ``gan.json``."""
        check_is_fitted(self, "runs_")
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        keys = []
        for key, run in self.runs_.items():
            tag = "all" if key is None else str(key)
            ad.save_weights(run.generator, directory / f"generator_{tag}.bin")
            ad.save_weights(run.discriminator, directory / f"discriminator_{tag}.bin")
            run.history.to_csv(directory / f"history_{tag}.csv")
            keys.append({"key": key, "seed": run.seed})
        meta = {"params": self.get_params(), "runs": keys}
        (directory / "gan.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "CGANSynthesizer":
        directory = Path(directory)
        meta = json.loads((directory / "gan.json").read_text())
        est = cls(**meta["params"])
        conditional = est.mode == "conditional"
        runs = {}
        for entry in meta["runs"]:
            key = entry["key"]
            tag = "all" if key is None else str(key)
            gen = build_generator(est.profile, conditional, est.num_classes)
            disc = build_discriminator(est.profile, conditional, est.num_classes, est.class_head, label_plane=est.label_plane)
            ad.load_weights(gen, directory / f"generator_{tag}.bin")
            ad.load_weights(disc, directory / f"discriminator_{tag}.bin")
            gen.eval()
            disc.eval()
            runs[key] = GanRun(gen, disc, GanHistory(), key, entry["seed"])
        est.runs_ = runs
        est.classes_ = np.array(sorted(k for k in runs if k is not None)) if not conditional else np.arange(est.num_classes)
        return est


def gan_config_dict(config: GanTrainConfig) -> dict:
    return asdict(config)
