import copy
import json

import numpy as np
import pytest
import torch

import trainer
from config import BaselineTrainConfig
from conftest import separable_features
from errors import TrainingDiverged, TrainingError, UnknownClassError, WrongHeadError
from msnet import build_network, embed_array, softmax_forward
from trainer import TrainLog, param_groups, smoothed_loss, train_baseline, train_metric
from triplets import Triplet, available_minibatches


def _states_equal(a, b) -> bool:
    return all(torch.equal(a[k], b[k]) for k in a)


class TestMetricTraining:
    def test_log_and_margin(self, tmp_path, tiny_cfg, tiny_features):
        handle = build_network(tiny_cfg.network, seed=0)
        log_path = tmp_path / "train.jsonl"
        handle, log = train_metric(handle, tiny_features, tiny_cfg.metric, log_path, progress=False)

        iterations = min(
            tiny_cfg.metric.minibatches_per_epoch,
            available_minibatches(tiny_features.labels, tiny_cfg.metric.examples_per_class),
        )
        assert len(log.records) == tiny_cfg.metric.epochs * iterations
        assert len(log.epochs) == tiny_cfg.metric.epochs
        for field in ("epoch", "iteration", "loss", "mined", "alpha", "groups"):
            assert field in log.records[0]
        alphas = log.alphas()
        assert all(b >= a for a, b in zip(alphas, alphas[1:]))
        assert tiny_cfg.metric.alpha_init <= min(alphas) and max(alphas) <= tiny_cfg.metric.alpha_cap

        lines = log_path.read_text().splitlines()
        assert [json.loads(line) for line in lines] == log.records
        assert TrainLog.read_jsonl(log_path).mined_counts() == log.mined_counts()
        assert handle.meta["iterations"] == len(log.records)
        assert not handle.module.training

        norms = np.linalg.norm(embed_array(handle, tiny_features.tensors), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-5)

    def test_same_seed_same_run(self, tiny_cfg, tiny_features):
        runs = []
        for _ in range(2):
            handle = build_network(tiny_cfg.network, seed=0)
            handle, log = train_metric(handle, tiny_features, tiny_cfg.metric, progress=False)
            runs.append((handle, log))
        assert runs[0][1].records == runs[1][1].records
        assert _states_equal(runs[0][0].module.state_dict(), runs[1][0].module.state_dict())

    def test_zero_triplet_epoch_at_cap_converges(self, tiny_cfg, tiny_features, monkeypatch):
        monkeypatch.setattr(trainer, "mine_semi_hard", lambda *a, **k: [])
        cfg = tiny_cfg.metric.model_copy(update={"alpha_init": 0.6, "epochs": 1})
        handle = build_network(tiny_cfg.network, seed=0)
        before = copy.deepcopy(handle.module.state_dict())
        handle, log = train_metric(handle, tiny_features, cfg, progress=False)
        assert log.converged
        assert log.converged_epoch == 1
        assert set(log.alphas()) == {0.6}
        assert all(r["groups"] == 0 for r in log.records)
        assert _states_equal(before, handle.module.state_dict())

    def test_no_convergence_below_cap(self, tiny_cfg, tiny_features, monkeypatch):
        monkeypatch.setattr(trainer, "mine_semi_hard", lambda *a, **k: [])
        cfg = tiny_cfg.metric.model_copy(update={"epochs": 1})
        _, log = train_metric(build_network(tiny_cfg.network), tiny_features, cfg, progress=False)
        assert not log.converged

    def test_needs_two_classes(self, tiny_cfg, tiny_features):
        one_class = tiny_features.subset(tiny_features.labels == "class_0")
        with pytest.raises(TrainingError):
            train_metric(build_network(tiny_cfg.network), one_class, tiny_cfg.metric, progress=False)

    def test_wrong_head(self, tiny_cfg, tiny_features):
        cfg = tiny_cfg.network.model_copy(update={"head": "softmax", "n_classes": 3})
        with pytest.raises(WrongHeadError):
            train_metric(build_network(cfg), tiny_features, tiny_cfg.metric, progress=False)

    def test_divergence_writes_diagnostic(self, tmp_path, tiny_cfg, tiny_features, monkeypatch):
        monkeypatch.setattr(trainer, "mine_semi_hard", lambda *a, **k: [Triplet(0, 1, 3, 0.1, 0.2)])
        monkeypatch.setattr(trainer, "triplet_loss", lambda out, idx, alpha: out.sum() * float("nan"))
        diag = tmp_path / "net.diverged.pt"
        with pytest.raises(TrainingDiverged) as err:
            train_metric(build_network(tiny_cfg.network), tiny_features, tiny_cfg.metric, diag_path=diag, progress=False)
        assert err.value.checkpoint_path == diag
        assert diag.exists()


class TestHelpers:
    def test_bias_is_not_decayed(self, tiny_cfg):
        groups = param_groups(build_network(tiny_cfg.network).module, 1e-4)
        assert groups[0]["weight_decay"] == 1e-4 and groups[1]["weight_decay"] == 0.0
        n_bias = sum(1 for name, _ in build_network(tiny_cfg.network).module.named_parameters() if name.endswith("bias"))
        assert len(groups[1]["params"]) == n_bias

    def test_smoothed_loss(self):
        out = smoothed_loss([1.0, 3.0, 5.0, 7.0], window=2)
        np.testing.assert_allclose(out, [1.0, 2.0, 4.0, 6.0])


class TestBaselineTraining:
    def test_selects_an_epoch(self, tmp_path, tiny_cfg, tiny_features):
        train = tiny_features.subset(np.arange(len(tiny_features)) % 4 != 0)
        val = tiny_features.subset(np.arange(len(tiny_features)) % 4 == 0)
        cfg = tiny_cfg.network.model_copy(update={"head": "softmax", "n_classes": 3})
        handle = build_network(cfg, classes=tuple(train.classes))
        handle, log = train_baseline(handle, train, val, tiny_cfg.baseline, tmp_path / "b.jsonl", progress=False)
        assert log.selected_epoch in range(1, tiny_cfg.baseline.epochs + 1)
        assert len(log.epochs) == tiny_cfg.baseline.epochs
        best = min(e["val_loss"] for e in log.epochs)
        assert handle.meta["val_loss"] == pytest.approx(best)
        assert (tmp_path / "b.jsonl").exists()

    def test_separable_classes_fit_perfectly(self, tiny_cfg):
        features = separable_features(tiny_cfg.network.input_shape, n_classes=2, per_class=8, seed=3)
        cfg = tiny_cfg.network.model_copy(update={"head": "softmax", "n_classes": 2})
        handle = build_network(cfg, seed=1, classes=tuple(features.classes))
        train_cfg = BaselineTrainConfig(batch_size=4, epochs=80, learning_rate=3e-3)
        handle, log = train_baseline(handle, features, features, train_cfg, progress=False)
        predicted = np.array(handle.classes)[softmax_forward(handle, features.tensors).argmax(axis=1)]
        assert (predicted == features.labels).all()
        assert log.epochs[log.selected_epoch - 1]["val_loss"] == min(e["val_loss"] for e in log.epochs)

    def test_unknown_validation_class(self, tiny_cfg, tiny_features):
        cfg = tiny_cfg.network.model_copy(update={"head": "softmax", "n_classes": 2})
        handle = build_network(cfg, classes=("class_0", "class_1"))
        train = tiny_features.subset(tiny_features.labels != "class_2")
        with pytest.raises(UnknownClassError):
            train_baseline(handle, train, tiny_features, tiny_cfg.baseline, progress=False)

    def test_metric_network_rejected(self, tiny_cfg, tiny_features):
        with pytest.raises(WrongHeadError):
            train_baseline(build_network(tiny_cfg.network), tiny_features, None, tiny_cfg.baseline, progress=False)
