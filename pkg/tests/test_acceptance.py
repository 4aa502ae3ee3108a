"""Acceptance criteria A1 to A8, each at its stated tolerance and runtime budget.

Every test records a one-line summary through ``record_property("detail", ...)``;
``conftest.py`` prints one PASS/FAIL line per criterion at the end of the run.
"""
import math
import time

import numpy as np
import pytest

from topogan import autodiff as ad
from topogan import cli
from topogan import experiment as E
from topogan import gan as G
from topogan import metrics as M
from topogan.autodiff import functional as F
from topogan.autodiff.tensor import Tensor
from topogan.classifier import ClassifierConfig, TopographyClassifier, build_classifier
from topogan.phantom import DEFAULT_COUNTS, Dataset, denormalize, generate_corpus, normalize
from topogan.resampling import kfold_patient_split, oversample, undersample
from topogan.seeding import derive_rng

from oracles import count_oracle, gaussian_cloud, naive_mse, naive_ssim, safe_div


def t64(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def probs64(rng, n):
    return Tensor(rng.uniform(0.05, 0.95, size=n), requires_grad=True)


# -- A1 -------------------------------------------------------------------------------------
def _a1_cases():
    """Builders returning (scalar function, inputs) for one random float64 instance."""

    def conv(rng):
        x, w, b = t64(rng, 2, 3, 7, 7), t64(rng, 4, 3, 3, 3), t64(rng, 4)
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        out_shape = F.conv2d(x, w, b, stride, pad).shape
        r = rng.normal(size=out_shape)
        return (lambda: (F.conv2d(x, w, b, stride, pad) * r).sum()), [x, w, b]

    def tconv(rng):
        x, w, b = t64(rng, 2, 3, 4, 4), t64(rng, 3, 2, 5, 5), t64(rng, 2)
        r = rng.normal(size=F.transposed_conv2d(x, w, b, 2, 2, 1).shape)
        return (lambda: (F.transposed_conv2d(x, w, b, 2, 2, 1) * r).sum()), [x, w, b]

    def bn(rng):
        x, g, b = t64(rng, 4, 3, 3, 3), t64(rng, 3), t64(rng, 3)
        r = rng.normal(size=x.shape)
        return (lambda: (F.batchnorm2d(x, g, b) * r).sum()), [x, g, b]

    def dense(rng):
        x, w, b = t64(rng, 3, 5), t64(rng, 5, 4), t64(rng, 4)
        r = rng.normal(size=(3, 4))
        return (lambda: (F.dense(x, w, b) * r).sum()), [x, w, b]

    def act(kind):
        def build(rng):
            x = t64(rng, 4, 6)
            r = rng.normal(size=x.shape)
            return (lambda: (F.activation(x, kind) * r).sum()), [x]

        return build

    def bce(rng):
        p = probs64(rng, 8)
        target = rng.integers(0, 2, 8).astype(np.float64)
        return (lambda: F.binary_cross_entropy(p, target)), [p]

    def adversarial(rng):
        d_real, d_fake = probs64(rng, 6), probs64(rng, 6)
        return (lambda: G.discriminator_loss(d_real, d_fake) + G.generator_loss(d_fake) * 0.5), [d_real, d_fake]

    def softmax_ce(rng):
        logits = t64(rng, 5, 8)
        target = rng.integers(0, 8, 5)
        return (lambda: F.softmax_cross_entropy(logits, target)), [logits]

    cases = {"conv2d": conv, "transposed_conv2d": tconv, "batchnorm2d": bn, "dense": dense}
    cases.update({f"activation:{k}": act(k) for k in ("relu", "leaky_relu", "tanh", "sigmoid", "softmax")})
    cases.update({"bce": bce, "adversarial_losses": adversarial, "softmax_cross_entropy": softmax_ce})
    return cases


@pytest.mark.criterion("A1")
def test_a1_gradient_correctness(record_property):
    start = time.perf_counter()
    worst = {}
    for name, build in _a1_cases().items():
        rng = np.random.default_rng(sum(map(ord, name)))
        errors = []
        for _ in range(5):
            fn, inputs = build(rng)
            errors.append(ad.grad_check(fn, inputs, h=1e-5, max_coords=64, rng=rng))
        worst[name] = max(errors)
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    record_property("detail", f"max rel err {worst[top]:.2e} ({top}) over {len(worst)} ops x 5 instances, {elapsed:.1f}s")
    assert all(err < 1e-4 for err in worst.values()), worst
    assert elapsed < 60


# -- A2 -------------------------------------------------------------------------------------
@pytest.mark.criterion("A2")
def test_a2_metric_oracles(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {"mse": 0.0, "psnr": 0.0, "ssim": 0.0}
    for _ in range(100):
        n = int(rng.integers(1, 150))
        pred, truth = rng.integers(0, 8, n), rng.integers(0, 8, n)
        cm = M.confusion_matrix(pred, truth, 8)
        ref = np.zeros((8, 8), dtype=int)
        for p, t in zip(pred, truth):
            ref[t, p] += 1
        assert np.array_equal(cm.counts, ref)
        for c in range(8):
            tp, tn, fp, fn = count_oracle(pred, truth, c)
            b = M.binary_counts(cm, c)
            assert M.accuracy(b).value == (tp + tn) / (tn + tp + fn + fp)
            assert M.precision(b).value == safe_div(tp, tp + fp)
            assert M.recall(b).value == safe_div(tp, tp + fn)
            assert M.f1(b).value == safe_div(2 * tp, 2 * tp + fp + fn)

        f, g = rng.integers(0, 256, (2, 8, 8, 3), dtype=np.uint8)
        mse_ref = naive_mse(f, g)
        worst["mse"] = max(worst["mse"], abs(M.mse(f, g) - mse_ref))
        worst["psnr"] = max(worst["psnr"], abs(M.psnr(f, g) - 10 * math.log10(255.0**2 / mse_ref)))

        a, b = rng.integers(0, 256, (2, 16, 16, 3), dtype=np.uint8)
        worst["ssim"] = max(worst["ssim"], abs(M.ssim(a, b) - naive_ssim(a, b)))

    x = rng.normal(size=(500, 8))
    fid_self = M.fid(x, x)
    mu_r, mu_f = np.array([0.0, 1.0, -1.0]), np.array([0.5, 0.0, -1.0])
    var_r, var_f = np.array([1.0, 2.0, 0.5]), np.array([0.25, 2.0, 1.5])
    closed = float(((mu_r - mu_f) ** 2).sum() + ((np.sqrt(var_r) - np.sqrt(var_f)) ** 2).sum())
    fid_gap = abs(M.fid(gaussian_cloud(rng, mu_r, var_r, 10_000), gaussian_cloud(rng, mu_f, var_f, 10_000)) - closed)
    elapsed = time.perf_counter() - start
    record_property(
        "detail",
        f"mse {worst['mse']:.1e}, psnr {worst['psnr']:.1e}, ssim {worst['ssim']:.1e}, "
        f"FID(A,A) {fid_self:.1e}, diag-FID gap {fid_gap:.1e}, {elapsed:.1f}s",
    )
    assert worst["mse"] <= 1e-12 and worst["psnr"] <= 1e-12 and worst["ssim"] < 1e-9
    assert fid_self < 1e-6 and fid_gap < 1e-3
    assert elapsed < 120


# -- A3 -------------------------------------------------------------------------------------
@pytest.mark.criterion("A3")
def test_a3_balancing_exactness(record_property):
    start = time.perf_counter()
    corpus = generate_corpus(DEFAULT_COUNTS, seed=0)
    over = oversample(corpus, np.random.default_rng(1))
    under = undersample(corpus, np.random.default_rng(2))
    folds = kfold_patient_split(corpus, 8, seed=3)
    test_sets = [set(corpus.patient_ids[te].tolist()) for _, te in folds]
    disjoint = all(not (test_sets[i] & test_sets[j]) for i in range(8) for j in range(i + 1, 8))
    exhaustive = np.array_equal(np.sort(np.concatenate([te for _, te in folds])), np.arange(len(corpus)))
    elapsed = time.perf_counter() - start
    record_property(
        "detail",
        f"OVS {over.class_counts.tolist()[0]}x8={len(over)}, UNS {under.class_counts.tolist()[0]}x8={len(under)}, "
        f"folds disjoint={disjoint} exhaustive={exhaustive}, {elapsed:.1f}s",
    )
    assert over.class_counts.tolist() == [765] * 8 and len(over) == 6120
    assert under.class_counts.tolist() == [167] * 8 and len(under) == 1336
    assert disjoint and exhaustive
    assert elapsed < 30


# -- A4 -------------------------------------------------------------------------------------
A4_PER_CLASS = 256
A4_SEEDS = (0, 1, 2)


@pytest.mark.slow
@pytest.mark.criterion("A4")
def test_a4_cgan_conditioning(record_property):
    """Conditional desk GAN on sagittal normal vs abnormal, judged by a real-data classifier."""
    start = time.perf_counter()
    corpus = generate_corpus([A4_PER_CLASS, A4_PER_CLASS, 0, 0, 0, 0, 0, 0], seed=0).select_classes([0, 1])
    judge = TopographyClassifier(num_classes=2, random_state=0).fit(corpus.images, corpus.labels)
    per_seed = []
    for seed in A4_SEEDS:
        gan = G.CGANSynthesizer(num_classes=2, mode="conditional", epochs=20, random_state=seed)
        gan.fit(corpus.images, corpus.labels)
        hits = [float((judge.predict(gan.sample(A4_PER_CLASS, c, random_state=100 + seed)) == c).mean()) for c in (0, 1)]
        per_seed.append(hits)
    medians = np.median(np.asarray(per_seed), axis=0)
    elapsed = time.perf_counter() - start
    record_property(
        "detail",
        "per-seed intended-class fractions "
        + " ".join(f"({a:.2f},{b:.2f})" for a, b in per_seed)
        + f", median ({medians[0]:.2f},{medians[1]:.2f}), {elapsed / 60:.1f} min",
    )
    assert np.all(medians >= 0.8)
    assert elapsed <= 15 * 60


# -- A5 -------------------------------------------------------------------------------------
A5_MARGIN = 0.05
A5_REAL_PER_CLASS = 40
A5_SYNTH_PER_CLASS = 400
A5_GAN_EPOCHS = 100


def _a5_single_seed(seed):
    corpus = generate_corpus([240, 240, 0, 0, 0, 0, 0, 0], seed=seed, margin=A5_MARGIN).select_classes([0, 1])
    rng = derive_rng(seed, "a5/split")
    train_idx = np.concatenate([rng.permutation(np.flatnonzero(corpus.labels == c))[:A5_REAL_PER_CLASS] for c in (0, 1)])
    test_idx = np.setdiff1d(np.arange(len(corpus)), train_idx)
    train, test = corpus.subset(train_idx), corpus.subset(test_idx)
    assert not set(train.patient_ids.tolist()) & set(test.patient_ids.tolist())
    gan = G.CGANSynthesizer(num_classes=2, mode="conditional", epochs=A5_GAN_EPOCHS, random_state=seed)
    gan.fit(train.images, train.labels)
    augmented = Dataset.concat([train, gan.sample_dataset(A5_SYNTH_PER_CLASS, seed=seed)])
    scores = []
    for data in (train, augmented):
        model = TopographyClassifier(num_classes=2, random_state=seed).fit(data.images, data.labels)
        scores.append(model.score(test.images, test.labels))
    return scores


@pytest.mark.slow
@pytest.mark.criterion("A5")
def test_a5_augmentation_direction(record_property):
    start = time.perf_counter()
    results = [_a5_single_seed(seed) for seed in (0, 1, 2)]
    diffs = [100 * (aug - real) for real, aug in results]
    median = float(np.median(diffs))
    elapsed = time.perf_counter() - start
    record_property(
        "detail",
        "real/augmented acc "
        + " ".join(f"{r:.3f}/{a:.3f}" for r, a in results)
        + f", median change {median:+.1f} pp, {elapsed / 60:.1f} min",
    )
    assert median >= -2.0
    assert elapsed <= 30 * 60


# -- A6 -------------------------------------------------------------------------------------
@pytest.mark.criterion("A6")
def test_a6_loss_identities(record_property):
    start = time.perf_counter()
    loss_d, _ = G.adversarial_losses(np.full(16, 0.5), np.full(16, 0.5))
    equilibrium_gap = abs(loss_d.item() - 2 * math.log(2))
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        d_real, d_fake = rng.uniform(0.001, 0.999, (2, int(rng.integers(1, 64))))
        loss_d, _ = G.adversarial_losses(d_real, d_fake)
        ref = F.binary_cross_entropy(Tensor(d_real), 1.0).item() + F.binary_cross_entropy(Tensor(d_fake), 0.0).item()
        worst = max(worst, abs(loss_d.item() - ref))
    elapsed = time.perf_counter() - start
    record_property("detail", f"|loss_D - 2 ln 2| = {equilibrium_gap:.1e}, BCE identity gap {worst:.1e}, {elapsed:.2f}s")
    assert equilibrium_gap <= 1e-12 and worst <= 1e-12
    assert elapsed < 5


# -- A7 -------------------------------------------------------------------------------------
A7_CONFIG = """\
counts = 12, 12, 0, 0, 0, 0, 0, 0
classes = 0, 1
cv_folds = 2
max_folds = 1
widths = 4
conditions = original+synthesized
gan_epochs = 1
clf_epochs = 2
synthetic_per_class = 6
quality_samples = 4
timing_images = 0
"""


@pytest.mark.criterion("A7")
def test_a7_determinism(tmp_path, record_property):
    config = tmp_path / "a7.txt"
    config.write_text(A7_CONFIG)
    start = time.perf_counter()
    for name in ("first", "second"):
        assert cli.main(["run", "--config", str(config), "--seed", "17", "--out", str(tmp_path / name)]) == 0
    elapsed = time.perf_counter() - start
    same = {f: (tmp_path / "first" / f).read_bytes() == (tmp_path / "second" / f).read_bytes() for f in E.REPORT_FILES}
    record_property("detail", f"byte-identical {same}, two runs of one cell in {elapsed:.1f}s")
    assert all(same.values())


# -- A8 -------------------------------------------------------------------------------------
@pytest.mark.criterion("A8")
def test_a8_round_trips(tmp_path, record_property):
    start = time.perf_counter()
    values = np.arange(256, dtype=np.uint8).reshape(1, 16, 16, 1).repeat(3, axis=-1)
    pixels_ok = np.array_equal(denormalize(normalize(values)), values)

    rng = np.random.default_rng(8)
    x = rng.uniform(-1, 1, (3, 3, 64, 64)).astype(np.float32)
    weights_ok = True
    for net, rebuild, call in (
        (build_classifier(ClassifierConfig(2, 8), seed=1), lambda: build_classifier(ClassifierConfig(2, 8)), lambda n: n(Tensor(x))),
        (G.init_weights(G.build_generator(), 0.02, 1), G.build_generator, lambda n: n(G.sample_noise(3, 5))),
        (G.init_weights(G.build_discriminator(), 0.02, 2), G.build_discriminator, lambda n: n(x)[0]),
    ):
        net.train()
        call(net)  # move batch-norm running statistics away from their defaults
        net.eval()
        path = tmp_path / "w.bin"
        ad.save_weights(net, path)
        clone = rebuild()
        ad.load_weights(clone, path)
        clone.eval()
        weights_ok &= call(clone).data.tobytes() == call(net).data.tobytes()

    cells = [
        E.CellResult("cnn-w4", 4, "original", "none", "ok", 8, *rng.uniform(0, 1, 8).tolist()),
        E.CellResult("cnn-w8", 8, "synthesized", "OVS", "failed", 3, error="RuntimeError: boom, with comma"),
    ]
    report = E.ExperimentReport(E.ExperimentConfig(), cells)
    E.write_report_csv(report, tmp_path / "report.csv")
    parsed = E.read_report_csv(tmp_path / "report.csv")
    csv_ok = all(
        all((a == b) or (isinstance(a, float) and math.isnan(a) and math.isnan(b)) for a, b in zip(p.row().values(), c.row().values()))
        for p, c in zip(parsed, cells)
    ) and len(parsed) == len(cells)
    elapsed = time.perf_counter() - start
    record_property("detail", f"pixels {pixels_ok}, weights {weights_ok}, report csv {csv_ok}, {elapsed:.1f}s")
    assert pixels_ok and weights_ok and csv_ok
    assert elapsed < 30
