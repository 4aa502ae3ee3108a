import math

import numpy as np
import pytest

from topogan import gan as G
from topogan.autodiff.tensor import Tensor
from topogan.phantom import generate_corpus


@pytest.fixture(scope="module")
def tiny_pair():
    ds = generate_corpus([8, 8, 0, 0, 0, 0, 0, 0], seed=0).select_classes([0, 1])
    return ds.images, ds.labels


class TestNetworks:
    def test_generator_doubles_to_64(self):
        gen = G.build_generator("desk")
        z = G.sample_noise(2, 0)
        assert gen.stage_shapes(z) == [(4, 4), (8, 8), (16, 16), (32, 32), (64, 64)]
        out = gen(z)
        assert out.shape == (2, 3, 64, 64)
        assert out.data.min() >= -1 and out.data.max() <= 1

    def test_generator_wrong_noise_rejected(self):
        with pytest.raises(ValueError, match="noise"):
            G.build_generator()(np.zeros((2, 50)))

    def test_conditional_generator_needs_labels(self):
        with pytest.raises(ValueError, match="labels"):
            G.build_generator(conditional=True)(G.sample_noise(1, 0))

    def test_generator_deterministic(self):
        gen = G.init_weights(G.build_generator(), 0.02, 1).eval()
        z = G.sample_noise(3, 2)
        assert gen(z).data.tobytes() == gen(z).data.tobytes()

    def test_discriminator_halves_to_4(self):
        disc = G.build_discriminator("desk")
        x = np.zeros((2, 3, 64, 64), np.float32)
        assert disc.stage_shapes(x) == [(32, 32), (16, 16), (8, 8), (4, 4)]
        adv, logits = disc(x)
        assert adv.shape == (2,) and logits.shape == (2, 8)

    def test_discriminator_scores_in_open_interval(self):
        disc = G.init_weights(G.build_discriminator(), 0.02, 0).eval()
        x = np.random.default_rng(0).uniform(-1, 1, (4, 3, 64, 64)).astype(np.float32)
        adv, _ = disc(x)
        assert np.all((adv.data > 0) & (adv.data < 1))

    def test_duplicate_rows_identical_scores(self):
        disc = G.init_weights(G.build_discriminator(), 0.02, 0).eval()
        row = np.random.default_rng(1).uniform(-1, 1, (1, 3, 64, 64)).astype(np.float32)
        adv, logits = disc(np.concatenate([row, row]))
        assert adv.data[0] == adv.data[1]
        np.testing.assert_array_equal(logits.data[0], logits.data[1])

    def test_discriminator_wrong_shape_rejected(self):
        with pytest.raises(ValueError):
            G.build_discriminator()(np.zeros((1, 3, 32, 32), np.float32))

    def test_label_plane_adds_input_channel(self):
        with_plane = G.build_discriminator(conditional=True, num_classes=2)
        without = G.build_discriminator(conditional=True, num_classes=2, label_plane=False)
        assert with_plane.features[0].weight.shape[1] == 4
        assert without.features[0].weight.shape[1] == 3

    def test_full_profile_schedule(self):
        assert G.GeneratorConfig.from_profile("full").base_channels == 1024
        assert G.DiscriminatorConfig.from_profile("full").channel_schedule == (128, 256, 512, 1024)


class TestInitAndNoise:
    def test_weight_statistics(self):
        gen = G.init_weights(G.build_generator(), 0.02, np.random.default_rng(0))
        weights = np.concatenate([p.data.ravel() for n, p in gen.named_parameters() if n.endswith("weight") and p.ndim > 1])
        assert weights.size >= 10**5
        assert abs(weights.mean()) < 0.001
        assert abs(weights.std() - 0.02) < 0.002

    def test_biases_zero_and_bn_identity(self):
        gen = G.init_weights(G.build_generator(), 0.02, 0)
        for name, p in gen.named_parameters():
            if name.endswith("bias") or name.endswith("beta"):
                assert not np.any(p.data)
            if name.endswith("gamma"):
                assert np.all(p.data == 1)

    def test_init_deterministic(self):
        a = G.init_weights(G.build_discriminator(), 0.02, 5)
        b = G.init_weights(G.build_discriminator(), 0.02, 5)
        assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a.parameters(), b.parameters()))

    def test_nonpositive_std_rejected(self):
        with pytest.raises(ValueError):
            G.init_weights(G.build_generator(), 0.0)

    def test_noise_range_and_shape(self):
        z = G.sample_noise(32, 0)
        assert z.shape == (32, 100)
        assert z.min() >= -1 and z.max() <= 1

    def test_noise_mean(self):
        assert abs(G.sample_noise(1000, 1).mean()) < 0.01

    def test_noise_deterministic(self):
        assert np.array_equal(G.sample_noise(4, 9), G.sample_noise(4, 9))


class TestLosses:
    def test_equilibrium(self):
        d, g = G.adversarial_losses(np.full(5, 0.5), np.full(5, 0.5))
        assert abs(d.item() - 2 * math.log(2)) < 1e-12
        assert abs(g.item() - math.log(2)) < 1e-12

    def test_perfect_discriminator(self):
        eps = 1e-9
        assert G.discriminator_loss(np.full(3, 1 - eps), np.full(3, eps)).item() < 1e-6

    def test_saturating_closed_form(self):
        assert G.generator_loss(np.array([0.5]), "saturating").item() == pytest.approx(math.log(0.5), abs=1e-12)

    def test_matches_bce_definition(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            r, f = rng.uniform(0.01, 0.99, (2, 16))
            ref = -np.mean(np.log(r)) - np.mean(np.log(1 - f))
            assert abs(G.discriminator_loss(r, f).item() - ref) < 1e-12

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            G.discriminator_loss(np.array([]), np.array([0.5]))

    def test_unknown_objective(self):
        with pytest.raises(ValueError):
            G.generator_loss(np.array([0.5]), "wasserstein")


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kwargs", [{"epochs": 0}, {"lr": 0}, {"batch_size": 0}, {"beta1": 1.0}, {"mode": "x"}, {"objective": "x"}, {"profile": "x"}]
    )
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(ValueError):
            G.GanTrainConfig(**kwargs)


class TestTraining:
    def test_ranges_and_finite_losses(self, tiny_pair):
        X, y = tiny_pair
        gan = G.CGANSynthesizer(num_classes=2, mode="conditional", epochs=2, random_state=0).fit(X, y)
        hist = gan.history_[None]
        assert len(hist) == 4
        assert np.all(np.isfinite(hist.d_loss)) and np.all(np.isfinite(hist.g_loss))
        assert all(0 < v < 1 for v in hist.d_real + hist.d_fake)

    def test_deterministic_histories(self, tiny_pair):
        X, y = tiny_pair
        a = G.CGANSynthesizer(num_classes=2, epochs=1, random_state=3).fit(X, y)
        b = G.CGANSynthesizer(num_classes=2, epochs=1, random_state=3).fit(X, y)
        assert a.history_[0].d_loss == b.history_[0].d_loss
        assert a.sample(2, 1, random_state=0).tobytes() == b.sample(2, 1, random_state=0).tobytes()

    def test_per_class_one_generator_per_class(self):
        ds = generate_corpus([2] * 8, seed=0)
        gan = G.CGANSynthesizer(epochs=1, random_state=0).fit(ds.images, ds.labels)
        assert sorted(gan.generators_) == list(range(8))

    def test_empty_target_class_rejected(self, tiny_pair):
        X, y = tiny_pair
        with pytest.raises(ValueError, match="no images"):
            G.CGANSynthesizer(num_classes=3, epochs=1).fit(X, y, target_class=2)

    def test_partial_last_batch(self, tiny_pair):
        X, y = tiny_pair
        gan = G.CGANSynthesizer(num_classes=2, epochs=1, batch_size=5, random_state=0).fit(X, y)
        assert len(gan.history_[0]) == 2

    def test_callback_once_per_epoch(self, tiny_pair):
        X, y = tiny_pair
        seen = []
        cfg = G.GanTrainConfig(epochs=2, batch_size=8)
        G._train_pair(G.normalize(X), y, cfg, 0, 2, conditional=True, callback=lambda e, g, h: seen.append((e, len(h))))
        assert seen == [(0, 2), (1, 4)]


@pytest.fixture(scope="module")
def fitted(tiny_pair):
    X, y = tiny_pair
    return G.CGANSynthesizer(num_classes=2, mode="conditional", epochs=1, random_state=0).fit(X, y)


class TestSynthesis:
    def test_sample_labels_and_shape(self, fitted):
        ds = fitted.sample_dataset(5, seed=0)
        assert ds.images.shape == (10, 64, 64, 3) and ds.images.dtype == np.uint8
        assert ds.class_counts.tolist() == [5, 5]
        assert set(ds.provenance) == {"synthesized"}

    def test_constant_label(self, fitted):
        ds = G.synthesize(fitted.generator_for(1), 7, 1, seed=0, num_classes=2)
        assert np.all(ds.labels == 1) and len(ds) == 7

    def test_different_seeds_differ(self, fitted):
        assert np.abs(fitted.sample(2, 0, 1).astype(int) - fitted.sample(2, 0, 2).astype(int)).max() > 0

    def test_nonpositive_n_rejected(self, fitted):
        with pytest.raises(ValueError):
            fitted.sample(0, 0)

    def test_save_load_bit_identical(self, fitted, tmp_path):
        fitted.save(tmp_path)
        back = G.CGANSynthesizer.load(tmp_path)
        assert back.get_params() == fitted.get_params()
        assert back.sample(3, 1, random_state=4).tobytes() == fitted.sample(3, 1, random_state=4).tobytes()
        for (_, a), (_, b) in zip(fitted.runs_[None].discriminator.state_dict().items(), back.runs_[None].discriminator.state_dict().items()):
            assert a.tobytes() == b.tobytes()

    def test_unknown_class_rejected(self, tiny_pair):
        X, y = tiny_pair
        gan = G.CGANSynthesizer(num_classes=2, epochs=1, random_state=0).fit(X[y == 0], y[y == 0])
        with pytest.raises(KeyError):
            gan.sample(1, 1)

    def test_sklearn_params(self):
        params = G.CGANSynthesizer(lr=3e-4).get_params()
        assert params["lr"] == 3e-4 and params["mode"] == "per_class"
