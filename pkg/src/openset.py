"""Embedding-space classification and Gaussian open-set rejection.

The MLP (one 256-unit ReLU layer, Adam, L2 1e-4) classifies embeddings.
Each class also gets a univariate Gaussian over the distances of its
validation embeddings to the mean training embedding; a test example whose
peak-normalized likelihood under its predicted class falls below 0.5 is
rejected as an outlier.
"""
from __future__ import annotations

import json
import logging
import math
import os
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import joblib
import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.neural_network import MLPClassifier

from config import HeadConfig, OpenSetConfig
from errors import CheckpointError, OpenSetError, ShapeError, TrainingError, UnknownClassError

logger = logging.getLogger(__name__)

MLP_FORMAT = "mlp-head/1"
GAUSSIANS_FORMAT = "class-gaussians/1"
REJECTED_LABEL = "REJECED_OUTLIER"
LIKELIHOOD_TOL = 1e-9


@dataclass
class MLPModel:
    classifier: MLPClassifier
    classes: tuple[str, ...]
    config: HeadConfig

    @property
    def input_dim(self) -> int:
        return int(self.classifier.n_features_in_)


@dataclass(frozen=True, eq=False)
class ClassGaussian:
    class_label: str
    mean_embedding: np.ndarray
    mu: float
    sigma2: float
    n_train: int = 0
    n_val: int = 0

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)


@dataclass(frozen=True)
class OpenSetDecision:
    accepted: bool
    distance: float
    likelihood: float

    @property
    def rejected(self) -> bool:
        return not self.accepted


def _matrix(embeddings) -> np.ndarray:
    arr = np.asarray(
        embeddings if isinstance(embeddings, np.ndarray)
        else np.stack([getattr(e, "values", e) for e in embeddings]),
        dtype=np.float64,
    )
    if arr.ndim == 1:
        arr = arr[None]
    return arr


def train_mlp(train_embeddings, labels: Sequence[str], cfg: Optional[HeadConfig] = None) -> MLPModel:
    cfg = cfg or HeadConfig()
    X = _matrix(train_embeddings)
    y = np.asarray([str(l) for l in labels], dtype=object)
    if len(y) != X.shape[0]:
        raise TrainingError(f"{len(y)} labels for {X.shape[0]} embeddings")
    if len(np.unique(y)) < 2:
        raise TrainingError("MLP head needs at least two classes")
    clf = MLPClassifier(
        hidden_layer_sizes=(cfg.hidden_units,),
        activation="relu",
        solver="adam",
        alpha=cfg.l2,
        learning_rate="constant",
        learning_rate_init=cfg.learning_rate,
        max_iter=cfg.max_iter,
        random_state=cfg.seed,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        clf.fit(X, y)
    logger.info("MLP head trained on %d embeddings, %d classes, %d iterations", len(y), len(clf.classes_), clf.n_iter_)
    return MLPModel(classifier=clf, classes=tuple(str(c) for c in clf.classes_), config=cfg)


def predict_batch(model: MLPModel, embeddings) -> tuple[np.ndarray, np.ndarray]:
    X = _matrix(embeddings)
    if X.shape[1] != model.input_dim:
        raise ShapeError(f"embedding width {X.shape[1]} does not match the MLP input {model.input_dim}")
    probs = model.classifier.predict_proba(X)
    labels = np.asarray(model.classes, dtype=object)[probs.argmax(axis=1)]
    return labels, probs


def predict(model: MLPModel, embedding) -> tuple[str, np.ndarray]:
    vec = np.asarray(getattr(embedding, "values", embedding), dtype=np.float64)
    if vec.ndim != 1:
        raise ShapeError(f"predict takes one embedding, got shape {vec.shape}")
    labels, probs = predict_batch(model, vec[None])
    return str(labels[0]), probs[0]


def class_index(model: MLPModel, label: str) -> int:
    try:
        return model.classes.index(label)
    except ValueError:
        raise UnknownClassError(f"unknown class {label!r}; trained on {list(model.classes)}") from None


def save_mlp(model: MLPModel, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    joblib.dump(
        {"format": MLP_FORMAT, "classes": list(model.classes), "config": model.config.model_dump(), "model": model.classifier},
        tmp,
    )
    os.replace(tmp, path)
    return path


def load_mlp(path: Path) -> MLPModel:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Missing MLP checkpoint {path}")
    try:
        payload = joblib.load(path)
    except Exception as e:
        raise CheckpointError(f"{path}: unreadable MLP checkpoint ({type(e).__name__}: {e})") from e
    if not isinstance(payload, dict) or payload.get("format") != MLP_FORMAT:
        raise CheckpointError(f"{path}: not a {MLP_FORMAT} file")
    return MLPModel(
        classifier=payload["model"],
        classes=tuple(payload["classes"]),
        config=HeadConfig.model_validate(payload["config"]),
    )


def fit_class_gaussians(
    train_embeddings,
    train_labels: Sequence[str],
    val_embeddings,
    val_labels: Sequence[str],
    sigma2_floor: float = 1e-8,
) -> dict[str, ClassGaussian]:
    """Per class: mean training embedding and an MLE Gaussian over validation distances."""
    X_train, X_val = _matrix(train_embeddings), _matrix(val_embeddings)
    y_train = np.asarray([str(l) for l in train_labels], dtype=object)
    y_val = np.asarray([str(l) for l in val_labels], dtype=object)
    classes = sorted(set(y_train.tolist()))
    too_small = [c for c in classes if int((y_val == c).sum()) < 2]
    if too_small:
        raise OpenSetError(f"classes with fewer than 2 validation embeddings: {too_small}")

    gaussians = {}
    for c in classes:
        mean = X_train[y_train == c].mean(axis=0)
        d = np.linalg.norm(X_val[y_val == c] - mean, axis=1)
        mu = float(d.mean())
        sigma2 = max(float(np.mean((d - mu) ** 2)), sigma2_floor)
        gaussians[c] = ClassGaussian(c, mean, mu, sigma2, int((y_train == c).sum()), len(d))
    return gaussians


def likelihood(distance: float, gaussian: ClassGaussian) -> float:
    """Peak-normalized Gaussian likelihood, 1 at d = mu."""
    return math.exp(-((distance - gaussian.mu) ** 2) / (2.0 * gaussian.sigma2))


def reject_decision(
    embedding,
    predicted_label: str,
    gaussians: Mapping[str, ClassGaussian],
    threshold: float = 0.5,
) -> OpenSetDecision:
    """Reject when the likelihood falls below ``threshold``; the boundary is accepted."""
    if predicted_label not in gaussians:
        raise UnknownClassError(f"no Gaussian fitted for class {predicted_label!r}")
    g = gaussians[predicted_label]
    vec = np.asarray(getattr(embedding, "values", embedding), dtype=np.float64)
    if vec.shape != g.mean_embedding.shape:
        raise ShapeError(f"embedding shape {vec.shape} does not match class mean {g.mean_embedding.shape}")
    d = float(np.linalg.norm(vec - g.mean_embedding))
    ell = likelihood(d, g)
    return OpenSetDecision(accepted=ell >= threshold - LIKELIHOOD_TOL, distance=d, likelihood=ell)


def acceptance_rates(
    gaussians: Mapping[str, ClassGaussian],
    embeddings,
    labels: Sequence[str],
    threshold: float = 0.5,
) -> dict[str, float]:
    """Fraction of each class's own embeddings accepted under its Gaussian."""
    X = _matrix(embeddings)
    labels = [str(l) for l in labels]
    rates = {}
    for c in sorted(set(labels)):
        if c not in gaussians:
            continue
        rows = [i for i, l in enumerate(labels) if l == c]
        accepted = sum(reject_decision(X[i], c, gaussians, threshold).accepted for i in rows)
        rates[c] = accepted / len(rows)
    return rates


def save_gaussians(gaussians: Mapping[str, ClassGaussian], path: Path, cfg: Optional[OpenSetConfig] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": GAUSSIANS_FORMAT,
        "likelihood_threshold": (cfg or OpenSetConfig()).likelihood_threshold,
        "classes": [
            {
                "label": g.class_label,
                "mean_embedding": [float(v) for v in g.mean_embedding],
                "mu": g.mu,
                "sigma2": g.sigma2,
                "n_train": g.n_train,
                "n_val": g.n_val,
            }
            for _, g in sorted(gaussians.items())
        ],
    }
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2), encoding="utf-8")
    os.replace(tmp, path)
    return path


def load_gaussians(path: Path) -> dict[str, ClassGaussian]:
    path = Path(path)
    if not path.exists():
        raise OpenSetError(f"Missing Gaussians file {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        if doc.get("format") != GAUSSIANS_FORMAT:
            raise ValueError(f"not a {GAUSSIANS_FORMAT} file")
        return {
            c["label"]: ClassGaussian(
                c["label"], np.asarray(c["mean_embedding"], dtype=np.float64),
                float(c["mu"]), float(c["sigma2"]), int(c.get("n_train", 0)), int(c.get("n_val", 0)),
            )
            for c in doc["classes"]
        }
    except (ValueError, KeyError, TypeError) as e:
        raise OpenSetError(f"{path}: malformed Gaussians file ({e})") from e
