import json
import math

import numpy as np
import pytest

from config import HeadConfig, OpenSetConfig
from errors import CheckpointError, OpenSetError, ShapeError, TrainingError, UnknownClassError
from openset import (
    GAUSSIANS_FORMAT,
    REJECTED_LABEL,
    ClassGaussian,
    acceptance_rates,
    class_index,
    fit_class_gaussians,
    likelihood,
    load_gaussians,
    load_mlp,
    predict,
    predict_batch,
    reject_decision,
    save_gaussians,
    save_mlp,
    train_mlp,
)


def clusters(rng, n_classes=3, per_class=20, dim=8, spread=0.05):
    centers = np.eye(dim)[:n_classes]
    emb = np.concatenate([c + spread * rng.standard_normal((per_class, dim)) for c in centers])
    labels = np.repeat([f"c{i}" for i in range(n_classes)], per_class)
    return emb, labels


@pytest.fixture
def head_cfg():
    return HeadConfig(hidden_units=16, learning_rate=0.01, max_iter=500)


class TestMLP:
    def test_fits_separable_clusters(self, rng, head_cfg):
        emb, labels = clusters(rng)
        model = train_mlp(emb, labels, head_cfg)
        pred, probs = predict_batch(model, emb)
        assert (pred == labels).mean() == 1.0
        assert probs.shape == (60, 3)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
        assert model.classes == ("c0", "c1", "c2")
        assert model.input_dim == 8

    def test_single_prediction(self, rng, head_cfg):
        emb, labels = clusters(rng)
        model = train_mlp(emb, labels, head_cfg)
        label, probs = predict(model, emb[25])
        assert label == "c1"
        assert probs.argmax() == class_index(model, "c1")

    def test_wrong_width(self, rng, head_cfg):
        emb, labels = clusters(rng)
        model = train_mlp(emb, labels, head_cfg)
        with pytest.raises(ShapeError):
            predict_batch(model, np.zeros((2, 5)))

    def test_bad_training_input(self, rng, head_cfg):
        emb, labels = clusters(rng)
        with pytest.raises(TrainingError):
            train_mlp(emb, labels[:-1], head_cfg)
        with pytest.raises(TrainingError):
            train_mlp(emb[:20], labels[:20], head_cfg)

    def test_unknown_class(self, rng, head_cfg):
        emb, labels = clusters(rng)
        with pytest.raises(UnknownClassError):
            class_index(train_mlp(emb, labels, head_cfg), "heron")

    def test_save_and_load(self, tmp_path, rng, head_cfg):
        emb, labels = clusters(rng)
        model = train_mlp(emb, labels, head_cfg)
        loaded = load_mlp(save_mlp(model, tmp_path / "head.joblib"))
        assert loaded.classes == model.classes
        np.testing.assert_array_equal(predict_batch(loaded, emb)[1], predict_batch(model, emb)[1])

    def test_load_errors(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_mlp(tmp_path / "none.joblib")
        bad = tmp_path / "bad.joblib"
        bad.write_bytes(b"garbage")
        with pytest.raises(CheckpointError):
            load_mlp(bad)


def hand_gaussians():
    train = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    train_labels = ["a", "a", "b", "b"]
    val = np.array([[1.0, 0.1], [1.0, 0.3], [0.0, 1.2], [0.0, 1.2]])
    val_labels = ["a", "a", "b", "b"]
    return fit_class_gaussians(train, train_labels, val, val_labels)


class TestGaussians:
    def test_hand_computed(self):
        g = hand_gaussians()["a"]
        np.testing.assert_allclose(g.mean_embedding, [1.0, 0.0])
        assert g.mu == pytest.approx(0.2)
        assert g.sigma2 == pytest.approx(0.01)
        assert (g.n_train, g.n_val) == (2, 2)

    def test_variance_floor(self):
        g = hand_gaussians()["b"]
        assert g.mu == pytest.approx(0.2)
        assert g.sigma2 == 1e-8

    def test_too_few_validation_examples(self):
        train = np.zeros((4, 2))
        with pytest.raises(OpenSetError, match="'b'"):
            fit_class_gaussians(train, ["a", "a", "b", "b"], np.zeros((3, 2)), ["a", "a", "b"])

    def test_likelihood_peak(self):
        g = ClassGaussian("a", np.zeros(2), 0.2, 0.01)
        assert likelihood(0.2, g) == 1.0
        assert likelihood(0.2 + g.sigma, g) == pytest.approx(math.exp(-0.5))


class TestRejection:
    gaussians = {"a": ClassGaussian("a", np.zeros(2), 0.2, 0.01)}

    def test_accept_at_mean_distance(self):
        decision = reject_decision(np.array([0.2, 0.0]), "a", self.gaussians)
        assert decision.accepted
        assert decision.likelihood == pytest.approx(1.0)

    def test_reject_far(self):
        decision = reject_decision(np.array([3.0, 4.0]), "a", self.gaussians)
        assert decision.rejected
        assert decision.distance == pytest.approx(5.0)

    def test_boundary_is_accepted(self):
        d = 0.2 + 0.1 * math.sqrt(2.0 * math.log(2.0))
        decision = reject_decision(np.array([d, 0.0]), "a", self.gaussians, threshold=0.5)
        assert decision.likelihood == pytest.approx(0.5, abs=1e-12)
        assert decision.accepted

    def test_unknown_prediction(self):
        with pytest.raises(UnknownClassError):
            reject_decision(np.zeros(2), "b", self.gaussians)

    def test_wrong_dimension(self):
        with pytest.raises(ShapeError):
            reject_decision(np.zeros(3), "a", self.gaussians)

    def test_acceptance_rates(self):
        emb = np.array([[0.2, 0.0], [0.0, 0.2], [3.0, 0.0], [0.0, 3.0]])
        assert acceptance_rates(self.gaussians, emb, ["a"] * 4) == {"a": 0.5}

    def test_in_class_acceptance_near_gaussian_mass(self):
        rng = np.random.default_rng(17)
        dim, n = 8, 500
        center = np.eye(dim)[0]
        offset = 0.3 * np.eye(dim)[1]
        train = np.stack([center + offset, center - offset])

        def ring(size):
            directions = rng.standard_normal((size, dim))
            directions /= np.linalg.norm(directions, axis=1, keepdims=True)
            return center + rng.normal(1.0, 0.1, size=(size, 1)) * directions

        val = ring(n)
        gaussians = fit_class_gaussians(train, ["a", "a"], val, ["a"] * n)
        expected = math.erf(math.sqrt(math.log(2.0)))  # mass within sigma * sqrt(2 ln 2)
        assert expected == pytest.approx(0.761, abs=1e-3)
        assert acceptance_rates(gaussians, val, ["a"] * n)["a"] == pytest.approx(expected, abs=0.10)
        assert acceptance_rates(gaussians, ring(n), ["a"] * n)["a"] == pytest.approx(expected, abs=0.10)

    def test_sentinel_spelling(self):
        assert REJECTED_LABEL == "REJECED_OUTLIER"


class TestGaussianFiles:
    def test_save_and_load(self, tmp_path):
        gaussians = hand_gaussians()
        path = save_gaussians(gaussians, tmp_path / "g.json", OpenSetConfig(likelihood_threshold=0.4))
        doc = json.loads(path.read_text())
        assert doc["format"] == GAUSSIANS_FORMAT
        assert doc["likelihood_threshold"] == 0.4
        assert [c["label"] for c in doc["classes"]] == ["a", "b"]

        loaded = load_gaussians(path)
        for label, g in gaussians.items():
            assert loaded[label].mu == g.mu
            assert loaded[label].sigma2 == g.sigma2
            np.testing.assert_array_equal(loaded[label].mean_embedding, g.mean_embedding)

    def test_malformed(self, tmp_path):
        with pytest.raises(OpenSetError):
            load_gaussians(tmp_path / "none.json")
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"format": "other"}))
        with pytest.raises(OpenSetError):
            load_gaussians(bad)
