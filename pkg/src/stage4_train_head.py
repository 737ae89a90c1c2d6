"""Train the MLP classifier on metric embeddings."""
from pathlib import Path

import numpy as np

from config import PipelineConfig
from evaluation import read_split_csv, select_split
from feature_store import load_store_features
from msnet import embed_array, load_checkpoint
from openset import predict_batch, save_mlp, train_mlp
from reporting import assert_condition, finish_acceptance, print_summary, processed_dir

SPLIT_FILENAME = "split.csv"
CHECKPOINT_FILENAME = "msnet_metric.pt"
HEAD_FILENAME = "mlp_head.joblib"


def add_arguments(parser) -> None:
    parser.add_argument("--store", type=Path, default=None)
    parser.add_argument("--split", type=Path, default=None)
    parser.add_argument("--network", type=Path, default=None, help="metric network checkpoint")
    parser.add_argument("--out", type=Path, default=None)


def run(args, cfg: PipelineConfig) -> int:
    pdir = processed_dir()
    out_path = args.out or pdir / HEAD_FILENAME
    handle = load_checkpoint(args.network or pdir / CHECKPOINT_FILENAME)
    features = load_store_features(cfg, args.store)
    split = read_split_csv(args.split or pdir / SPLIT_FILENAME)
    train = select_split(features, split, "train")

    emb = embed_array(handle, train.tensors)
    model = train_mlp(emb, train.labels, cfg.head)
    save_mlp(model, out_path)

    preds, probs = predict_batch(model, emb)
    train_acc = float(np.mean(preds == train.labels))

    failures: list[str] = []
    assert_condition(set(model.classes) == set(train.classes), "Head classes differ from training classes", failures)
    assert_condition(bool(np.allclose(probs.sum(axis=1), 1.0)), "Class probabilities do not sum to 1", failures)

    print_summary("4", "MLP head", [
        ("Train embeddings", f"{len(train):,}"),
        ("Embedding width", emb.shape[1]),
        ("Classes", len(model.classes)),
        ("Hidden units", cfg.head.hidden_units),
        ("Iterations", model.classifier.n_iter_),
        ("Train accuracy", f"{train_acc:.3f}"),
        ("Saved to", out_path),
    ])
    return finish_acceptance("4", failures)


def main() -> None:
    from cli import run_stage
    run_stage(["train", "head"])


if __name__ == "__main__":
    main()
