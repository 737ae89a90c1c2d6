"""Classify examples (or exported embeddings) with optional open-set rejection."""
from pathlib import Path

import numpy as np
import pandas as pd

from config import PipelineConfig
from errors import ManifestError
from evaluation import read_embeddings, read_split_csv, select_split
from feature_store import load_store_features
from msnet import embed_array, load_checkpoint
from openset import REJECTED_LABEL, load_gaussians, load_mlp, predict_batch, reject_decision
from reporting import assert_condition, finish_acceptance, print_summary, print_table, processed_dir

SPLIT_FILENAME = "split.csv"
CHECKPOINT_FILENAME = "msnet_metric.pt"
HEAD_FILENAME = "mlp_head.joblib"
GAUSSIANS_FILENAME = "class_gaussians.json"
OUT_FILENAME = "predictions.csv"


def add_arguments(parser) -> None:
    parser.add_argument("--reject", action="store_true", help="apply open-set rejection")
    parser.add_argument("--embeddings", type=Path, default=None, help="classify an exported embedding TSV instead")
    parser.add_argument("--store", type=Path, default=None)
    parser.add_argument("--split", type=Path, default=None)
    parser.add_argument("--subset", default="test", help="split to classify; 'all' for the whole store")
    parser.add_argument("--network", type=Path, default=None)
    parser.add_argument("--head", type=Path, default=None)
    parser.add_argument("--gaussians", type=Path, default=None)
    parser.add_argument("--out", type=Path, default=None)


def _inputs(args, cfg: PipelineConfig, pdir: Path) -> tuple[np.ndarray, list[str], list[str]]:
    if args.embeddings is not None:
        if not args.embeddings.exists():
            raise ManifestError(f"Missing {args.embeddings}")
        df = read_embeddings(args.embeddings)
        cols = [c for c in df.columns if c not in ("example_id", "label")]
        return df[cols].to_numpy(dtype=np.float64), df["example_id"].tolist(), df["label"].tolist()
    handle = load_checkpoint(args.network or pdir / CHECKPOINT_FILENAME)
    features = load_store_features(cfg, args.store)
    if args.subset != "all":
        features = select_split(features, read_split_csv(args.split or pdir / SPLIT_FILENAME), args.subset)
    return embed_array(handle, features.tensors), list(features.example_ids), list(features.labels)


def run(args, cfg: PipelineConfig) -> int:
    pdir = processed_dir()
    out_path = args.out or pdir / OUT_FILENAME
    model = load_mlp(args.head or pdir / HEAD_FILENAME)
    gaussians = load_gaussians(args.gaussians or pdir / GAUSSIANS_FILENAME) if args.reject else None

    emb, ids, labels = _inputs(args, cfg, pdir)
    preds, probs = predict_batch(model, emb)
    df = pd.DataFrame({
        "example_id": ids,
        "label": labels,
        "predicted": [str(p) for p in preds],
        "probability": probs.max(axis=1),
    })
    if gaussians is not None:
        decisions = [
            reject_decision(e, p, gaussians, cfg.openset.likelihood_threshold) for e, p in zip(emb, df["predicted"])
        ]
        df["distance"] = [d.distance for d in decisions]
        df["likelihood"] = [d.likelihood for d in decisions]
        df["accepted"] = [d.accepted for d in decisions]
        df["predicted"] = df["predicted"].where(df["accepted"], REJECTED_LABEL)

    out_path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(out_path, index=False)

    n_rejected = int((df["predicted"] == REJECTED_LABEL).sum())
    labelled = df["label"] != ""
    failures: list[str] = []
    assert_condition(len(df) > 0, "Nothing to classify", failures)
    assert_condition(bool(np.allclose(probs.sum(axis=1), 1.0)), "Class probabilities do not sum to 1", failures)

    print_summary("6", "Classification", [
        ("Examples", f"{len(df):,}"),
        ("Rejection", "on" if gaussians is not None else "off"),
        ("Rejected", n_rejected),
        ("Accuracy (labelled)", f"{(df.loc[labelled, 'predicted'] == df.loc[labelled, 'label']).mean():.3f}"
         if labelled.any() else "n/a"),
        ("Saved to", out_path),
    ])
    print_table("Predictions", df)
    return finish_acceptance("6", failures)


def main() -> None:
    from cli import run_stage
    run_stage(["classify"])


if __name__ == "__main__":
    main()
