import numpy as np
import pytest
from sklearn.base import clone

from topogan import classifier as C
from topogan.autodiff.tensor import Tensor
from topogan.phantom import generate_corpus


@pytest.fixture(scope="module")
def separable():
    """Sagittal normal vs abnormal with a wide lesion margin; even patients train, odd test."""
    ds = generate_corpus([200, 200, 0, 0, 0, 0, 0, 0], seed=11, margin=0.6).select_classes([0, 1])
    train = ds.subset(np.flatnonzero(ds.patient_ids % 2 == 0))
    test = ds.subset(np.flatnonzero(ds.patient_ids % 2 == 1))
    return train, test


@pytest.fixture(scope="module")
def small_fit(separable):
    train, _ = separable
    return C.TopographyClassifier(num_classes=2, width=4, epochs=1, random_state=0).fit(train.images, train.labels)


class TestNetwork:
    def test_logit_width(self):
        net = C.build_classifier(C.ClassifierConfig(num_classes=8))
        assert net(Tensor(np.zeros((2, 3, 64, 64), np.float32))).shape == (2, 8)

    def test_finite_on_zero_image(self):
        net = C.build_classifier().eval()
        assert np.all(np.isfinite(net(Tensor(np.zeros((1, 3, 64, 64), np.float32))).data))

    def test_same_seed_same_weights(self):
        a, b = C.build_classifier(seed=4), C.build_classifier(seed=4)
        assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a.parameters(), b.parameters()))

    def test_default_widths(self):
        cfg = C.ClassifierConfig()
        assert cfg.widths == (16, 32, 64, 128) and cfg.embedding_dim == 128

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            C.build_classifier(C.ClassifierConfig(num_classes=1))


class TestTraining:
    def test_separable_phantom_learned_quickly(self, separable):
        train, test = separable
        accs = []
        for seed in range(3):
            model = C.TopographyClassifier(num_classes=2, epochs=5, random_state=seed).fit(train.images, train.labels)
            accs.append(model.score(test.images, test.labels))
        assert np.median(accs) >= 0.99

    def test_bit_identical_weights(self, separable):
        train, _ = separable
        fit = lambda: C.TopographyClassifier(num_classes=2, width=4, epochs=1, random_state=2).fit(train.images, train.labels)
        a, b = fit(), fit()
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.network_.state_dict().values(), b.network_.state_dict().values()))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            C.TopographyClassifier().fit(np.zeros((0, 64, 64, 3), np.uint8), np.zeros(0, int))

    def test_absent_class_warns(self, separable):
        train, _ = separable
        keep = train.labels == 0
        with pytest.warns(UserWarning, match="absent"):
            model = C.TopographyClassifier(num_classes=2, width=4, epochs=1).fit(train.images[keep], train.labels[keep])
        assert model.warnings_

    def test_history_lengths(self, small_fit):
        assert len(small_fit.history_.train_loss) == 1


class TestInference:
    def test_probabilities_sum_to_one(self, small_fit, separable):
        _, test = separable
        probs = small_fit.predict_proba(test.images[:10])
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_duplicate_rows(self, small_fit, separable):
        _, test = separable
        batch = np.stack([test.images[0], test.images[0]])
        assert small_fit.predict(batch)[0] == small_fit.predict(batch)[1]
        emb = small_fit.transform(batch)
        np.testing.assert_array_equal(emb[0], emb[1])

    def test_embedding_shape(self, small_fit, separable):
        _, test = separable
        assert small_fit.transform(test.images[:3]).shape == (3, 32)

    def test_class_embeddings_differ(self, small_fit, separable):
        _, test = separable
        emb = small_fit.transform(test.images)
        gap = emb[test.labels == 0].mean(axis=0) - emb[test.labels == 1].mean(axis=0)
        assert np.linalg.norm(gap) > 0

    def test_bad_shape_rejected(self, small_fit):
        with pytest.raises(ValueError):
            small_fit.predict(np.zeros((2, 32, 32, 3), np.uint8))

    def test_unfitted_rejected(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            C.TopographyClassifier().predict(np.zeros((1, 64, 64, 3), np.uint8))

    def test_predict_batch_agrees(self, small_fit, separable):
        _, test = separable
        pred = C.predict_batch(small_fit.network_, test.images[:5])
        np.testing.assert_array_equal(pred.labels, small_fit.predict(test.images[:5]))


class TestPersistenceAndApi:
    def test_save_load_bit_identical(self, small_fit, separable, tmp_path):
        _, test = separable
        small_fit.save(tmp_path)
        back = C.TopographyClassifier.load(tmp_path)
        assert back.decision_function(test.images).tobytes() == small_fit.decision_function(test.images).tobytes()
        assert (tmp_path / "history.csv").read_text().startswith("epoch,train_loss")

    def test_clone_and_params(self):
        est = C.TopographyClassifier(width=8, lr=5e-4)
        copy = clone(est)
        assert copy.get_params() == est.get_params()
        assert copy.set_params(width=4).width == 4


class TestTiming:
    def test_mean_over_all_timings(self, separable):
        _, test = separable
        net = C.build_classifier(C.ClassifierConfig(2, 4))
        t = C.measure_att(net, test.images[:20], repetitions=5)
        assert t.n == 100 and t.mean > 0 and t.std >= 0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            C.measure_att(C.build_classifier(), np.zeros((0, 64, 64, 3), np.uint8))

    def test_wider_is_not_faster(self, separable):
        _, test = separable
        images = test.images[:30]
        narrow = C.build_classifier(C.ClassifierConfig(2, 4))
        wide = C.build_classifier(C.ClassifierConfig(2, 32))
        ratios = [C.measure_att(wide, images, 1).mean / C.measure_att(narrow, images, 1).mean for _ in range(3)]
        assert np.median(ratios) >= 1.0
