"""Splitting, scoring and evaluation of the trained pipeline."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support
from tqdm import tqdm

from audio_features import FeatureSet
from config import PipelineConfig, config_echo
from errors import EvaluationError, SplitError, UnknownClassError
from msnet import NetworkHandle, build_network, embed_array, softmax_forward
from openset import (
    REJECTED_LABEL,
    ClassGaussian,
    MLPModel,
    acceptance_rates,
    class_index,
    predict_batch,
    reject_decision,
    train_mlp,
)
from reporting import robust_read_csv
from trainer import TrainLog, train_metric

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
SPLIT_RATIOS = (0.50, 0.15, 0.35)
MIN_CLASS_SIZE = 3
SEGMENT_SEP = "__s"
ABLATION_MODES = ("three-channel", "mel-only")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


@dataclass(frozen=True, eq=False)
class SplitAssignment:
    """example_id -> split name, per-class stratified."""

    assignment: dict[str, str]
    labels: dict[str, str]
    ratios: tuple[float, float, float] = SPLIT_RATIOS
    seed: int = 0

    def ids(self, split: str) -> list[str]:
        return sorted(i for i, s in self.assignment.items() if s == split)

    def split_of(self, example_id: str) -> Optional[str]:
        """Split of an example or, for segment ids ``<id>__sNNN``, of its recording."""
        if example_id in self.assignment:
            return self.assignment[example_id]
        return self.assignment.get(example_id.rsplit(SEGMENT_SEP, 1)[0])

    def to_frame(self) -> pd.DataFrame:
        ids = sorted(self.assignment)
        return pd.DataFrame({
            "example_id": ids,
            "label": [self.labels[i] for i in ids],
            "split": [self.assignment[i] for i in ids],
        })

    def counts(self) -> pd.DataFrame:
        df = self.to_frame()
        table = df.groupby(["label", "split"]).size().unstack(fill_value=0)
        return table.reindex(columns=list(SPLITS), fill_value=0)


def _manifest_pairs(manifest) -> tuple[list[str], list[str]]:
    if isinstance(manifest, pd.DataFrame):
        label_col = "class_label" if "class_label" in manifest.columns else "label"
        return manifest["example_id"].astype(str).tolist(), manifest[label_col].astype(str).tolist()
    if isinstance(manifest, FeatureSet):
        return [str(i) for i in manifest.example_ids], [str(l) for l in manifest.labels]
    ids, labels = zip(*manifest) if manifest else ((), ())
    return [str(i) for i in ids], [str(l) for l in labels]


def stratified_split(manifest, ratios: Sequence[float] = SPLIT_RATIOS, seed: int = 0) -> SplitAssignment:
    """Per-class random partition; |train| = round(r0*n), |val| = round(r1*n), rest test.

    Rounding is half-up. Classes are visited in sorted order and members in
    sorted id order before shuffling, so the result depends only on the
    (id, label) pairs and the seed.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"split ratios must be three values summing to 1, got {ratios}")
    ids, labels = _manifest_pairs(manifest)
    if not ids:
        raise SplitError("empty manifest")
    if len(set(ids)) != len(ids):
        raise SplitError("duplicate example ids in manifest")

    by_class: dict[str, list[str]] = {}
    for i, l in zip(ids, labels):
        by_class.setdefault(l, []).append(i)
    small = sorted(c for c, members in by_class.items() if len(members) < MIN_CLASS_SIZE)
    if small:
        raise SplitError(f"classes with fewer than {MIN_CLASS_SIZE} examples: {small}")

    rng = np.random.default_rng(seed)
    assignment = {}
    for c in sorted(by_class):
        members = sorted(by_class[c])
        n = len(members)
        n_train = round_half_up(ratios[0] * n)
        n_val = min(round_half_up(ratios[1] * n), n - n_train)
        order = rng.permutation(n)
        for rank, k in enumerate(order):
            split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
            assignment[members[k]] = split
    return SplitAssignment(assignment, dict(zip(ids, labels)), ratios, seed)


def split_from_frame(df: pd.DataFrame, seed: int = 0) -> SplitAssignment:
    bad = sorted(set(df["split"]) - set(SPLITS))
    if bad:
        raise SplitError(f"unknown split names {bad}")
    label_col = "class_label" if "class_label" in df.columns else "label"
    ids = df["example_id"].astype(str).tolist()
    return SplitAssignment(
        dict(zip(ids, df["split"].astype(str))),
        dict(zip(ids, df[label_col].astype(str))),
        SPLIT_RATIOS,
        seed,
    )


def write_split_csv(split: SplitAssignment, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    split.to_frame().to_csv(path, index=False)
    return path


def read_split_csv(path: Path) -> SplitAssignment:
    path = Path(path)
    if not path.exists():
        raise SplitError(f"Missing split file {path}")
    df = robust_read_csv(path, {"example_id", "label", "split"})
    missing = {"example_id", "label", "split"} - set(df.columns)
    if missing:
        raise SplitError(f"{path.name}: missing columns {sorted(missing)}")
    return split_from_frame(df)


def select_split(features: FeatureSet, split: SplitAssignment, name: str) -> FeatureSet:
    mask = np.array([split.split_of(str(i)) == name for i in features.example_ids], dtype=bool)
    return features.subset(mask)


def _check_lengths(predictions, truth) -> tuple[list[str], list[str]]:
    predictions = [str(p) for p in predictions]
    truth = [str(t) for t in truth]
    if not truth:
        raise EvaluationError("empty input")
    if len(predictions) != len(truth):
        raise EvaluationError(f"{len(predictions)} predictions for {len(truth)} truth labels")
    return predictions, truth


def per_class_scores(predictions, truth) -> pd.DataFrame:
    """Precision, recall and F1 for every truth class; undefined values score 0."""
    predictions, truth = _check_lengths(predictions, truth)
    classes = sorted(set(truth))
    precision, recall, f1, support = precision_recall_fscore_support(
        truth, predictions, labels=classes, average=None, zero_division=0
    )
    return pd.DataFrame({
        "label": classes,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "support": support.astype(int),
    })


def macro_f1(predictions, truth) -> float:
    """Unweighted mean of per-class F1 over the classes present in ``truth``."""
    return float(per_class_scores(predictions, truth)["f1"].mean())


def confusion_frame(predictions, truth) -> pd.DataFrame:
    predictions, truth = _check_lengths(predictions, truth)
    classes = sorted(set(truth))
    extra = sorted(set(predictions) - set(classes))
    cols = classes + extra
    cm = confusion_matrix(truth, predictions, labels=cols)
    df = pd.DataFrame(cm[: len(classes)], index=pd.Index(classes, name="truth"), columns=cols)
    return df


@dataclass
class EvalReport:
    macro_f1: float
    per_class: pd.DataFrame
    confusion: pd.DataFrame
    n_test: int
    macro_f1_with_rejection: Optional[float] = None
    rejected_in_set: Optional[float] = None
    rejection_accuracy: Optional[float] = None
    n_outliers: Optional[int] = None
    acceptance_rates: dict = field(default_factory=dict)
    model: str = "metric"
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "n_test": self.n_test,
            "macro_f1": self.macro_f1,
            "macro_f1_with_rejection": self.macro_f1_with_rejection,
            "rejected_in_set": self.rejected_in_set,
            "rejection_accuracy": self.rejection_accuracy,
            "n_outliers": self.n_outliers,
            "per_class": self.per_class.to_dict(orient="records"),
            "acceptance_rates": dict(sorted(self.acceptance_rates.items())),
            "confusion_labels": list(self.confusion.columns),
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=float)

    def write(self, path: Path, confusion_path: Optional[Path] = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        if confusion_path is not None:
            self.confusion.to_csv(confusion_path)
        return path


def _report(predictions, truth, **kwargs) -> EvalReport:
    return EvalReport(
        macro_f1=macro_f1(predictions, truth),
        per_class=per_class_scores(predictions, truth),
        confusion=confusion_frame(predictions, truth),
        n_test=len(truth),
        **kwargs,
    )


def evaluate(
    network: Optional[NetworkHandle],
    mlp: Optional[MLPModel],
    features: FeatureSet,
    split: Optional[SplitAssignment] = None,
    gaussians: Optional[Mapping[str, ClassGaussian]] = None,
    outliers: Optional[FeatureSet] = None,
    cfg: Optional[PipelineConfig] = None,
) -> EvalReport:
    """Embed the test examples, classify with the MLP and optionally reject.

    Rejection never changes a predicted label; it only replaces it with the
    outlier sentinel. ``rejection_accuracy`` is the fraction of ``outliers``
    rejected.
    """
    if network is None or mlp is None:
        raise EvaluationError("missing component: evaluation needs a metric network and an MLP head")
    if outliers is not None and not gaussians:
        raise EvaluationError("missing component: outlier evaluation needs fitted class Gaussians")
    cfg = cfg or PipelineConfig()
    threshold = cfg.openset.likelihood_threshold
    test = select_split(features, split, "test") if split is not None else features
    if len(test) == 0:
        raise EvaluationError("no test examples in the split")
    truth = [str(l) for l in test.labels]
    for label in sorted(set(truth)):
        class_index(mlp, label)

    emb = embed_array(network, test.tensors)
    preds, _ = predict_batch(mlp, emb)
    preds = [str(p) for p in preds]
    extra = {"config": config_echo(cfg)}

    if gaussians:
        decisions = [reject_decision(e, p, gaussians, threshold) for e, p in zip(emb, preds)]
        with_rejection = [p if d.accepted else REJECTED_LABEL for p, d in zip(preds, decisions)]
        extra.update(
            macro_f1_with_rejection=macro_f1(with_rejection, truth),
            rejected_in_set=float(np.mean([d.rejected for d in decisions])),
            acceptance_rates=acceptance_rates(gaussians, emb, truth, threshold),
        )
    if outliers is not None:
        if len(outliers) == 0:
            raise EvaluationError("outlier set is empty")
        out_emb = embed_array(network, outliers.tensors)
        out_preds, _ = predict_batch(mlp, out_emb)
        rejected = [reject_decision(e, str(p), gaussians, threshold).rejected for e, p in zip(out_emb, out_preds)]
        extra.update(rejection_accuracy=float(np.mean(rejected)), n_outliers=len(outliers))

    report = _report(preds, truth, **extra)
    logger.info("evaluated %d test examples: macro F1 %.4f", report.n_test, report.macro_f1)
    return report


def evaluate_baseline(
    network: NetworkHandle,
    features: FeatureSet,
    split: Optional[SplitAssignment] = None,
    cfg: Optional[PipelineConfig] = None,
) -> EvalReport:
    if network is None:
        raise EvaluationError("missing component: baseline network")
    test = select_split(features, split, "test") if split is not None else features
    if len(test) == 0:
        raise EvaluationError("no test examples in the split")
    truth = [str(l) for l in test.labels]
    unknown = sorted(set(truth) - set(network.classes))
    if unknown:
        raise UnknownClassError(f"test classes unknown to the baseline network: {unknown}")
    probs = softmax_forward(network, test.tensors)
    preds = [network.classes[k] for k in probs.argmax(axis=1)]
    return _report(preds, truth, model="baseline", config=config_echo(cfg or PipelineConfig()))


def embedding_columns(dim: int) -> list[str]:
    return [f"e{i:03d}" for i in range(dim)]


def export_embeddings(network: NetworkHandle, features: FeatureSet, path: Path) -> Path:
    """TSV of example_id, label and the embedding at full precision."""
    emb = embed_array(network, features.tensors).astype(np.float64)
    df = pd.DataFrame(emb, columns=embedding_columns(emb.shape[1]))
    df.insert(0, "label", [str(l) for l in features.labels])
    df.insert(0, "example_id", [str(i) for i in features.example_ids])
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(path, sep="\t", index=False, float_format="%.17g")
    except OSError as e:
        raise EvaluationError(f"cannot write embeddings to {path} ({e})") from e
    return path


def read_embeddings(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, sep="\t", dtype={"example_id": str, "label": str}, keep_default_na=False)


def train_pipeline(
    features: FeatureSet,
    split: SplitAssignment,
    cfg: PipelineConfig,
    seed: Optional[int] = None,
    progress: bool = False,
) -> tuple[NetworkHandle, MLPModel, TrainLog]:
    """Metric network plus MLP head on the training split."""
    seed = cfg.seed if seed is None else seed
    train = select_split(features, split, "train")
    if len(train) == 0:
        raise EvaluationError("no training examples in the split")
    handle = build_network(cfg.network, seed=seed)
    handle, log = train_metric(handle, train, cfg.metric.model_copy(update={"seed": seed}), progress=progress)
    mlp = train_mlp(embed_array(handle, train.tensors), train.labels, cfg.head.model_copy(update={"seed": seed}))
    return handle, mlp, log


def run_ablation(
    features: FeatureSet,
    split: SplitAssignment,
    cfg: PipelineConfig,
    seeds: Sequence[int],
    modes: Sequence[str] = ABLATION_MODES,
    progress: bool = True,
) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Repeat the full training per input mode and seed; macro F1 per run plus a summary."""
    unknown = sorted(set(modes) - set(ABLATION_MODES))
    if unknown:
        raise EvaluationError(f"unknown ablation modes {unknown}")
    rows = []
    jobs = [(mode, s) for mode in modes for s in seeds]
    for mode, s in tqdm(jobs, desc="ablation runs", unit="run", disable=not progress):
        data = features.mel_only() if mode == "mel-only" else features
        handle, mlp, log = train_pipeline(data, split, cfg, seed=int(s))
        report = evaluate(handle, mlp, data, split, cfg=cfg)
        rows.append({
            "mode": mode,
            "seed": int(s),
            "macro_f1": report.macro_f1,
            "converged": log.converged,
            "final_alpha": handle.meta.get("margin"),
        })
        logger.info("ablation %s seed %d: macro F1 %.4f", mode, s, report.macro_f1)
    runs = pd.DataFrame(rows, columns=["mode", "seed", "macro_f1", "converged", "final_alpha"])
    summary = (
        runs.groupby("mode", sort=False)["macro_f1"]
        .agg(
            runs="count",
            median="median",
            q1=lambda x: x.quantile(0.25),
            q3=lambda x: x.quantile(0.75),
            min="min",
            max="max",
        )
        .reset_index()
    )
    return runs, summary
