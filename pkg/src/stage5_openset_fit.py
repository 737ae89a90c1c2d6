"""Fit per-class distance Gaussians for open-set rejection."""
from pathlib import Path

import pandas as pd

from config import PipelineConfig
from evaluation import read_split_csv, select_split
from feature_store import load_store_features
from msnet import embed_array, load_checkpoint
from openset import acceptance_rates, fit_class_gaussians, save_gaussians
from reporting import assert_condition, finish_acceptance, print_summary, print_table, processed_dir

SPLIT_FILENAME = "split.csv"
CHECKPOINT_FILENAME = "msnet_metric.pt"
GAUSSIANS_FILENAME = "class_gaussians.json"


def add_arguments(parser) -> None:
    parser.add_argument("--store", type=Path, default=None)
    parser.add_argument("--split", type=Path, default=None)
    parser.add_argument("--network", type=Path, default=None)
    parser.add_argument("--out", type=Path, default=None)


def run(args, cfg: PipelineConfig) -> int:
    pdir = processed_dir()
    out_path = args.out or pdir / GAUSSIANS_FILENAME
    handle = load_checkpoint(args.network or pdir / CHECKPOINT_FILENAME)
    features = load_store_features(cfg, args.store)
    split = read_split_csv(args.split or pdir / SPLIT_FILENAME)
    train = select_split(features, split, "train")
    val = select_split(features, split, "val")

    train_emb = embed_array(handle, train.tensors)
    val_emb = embed_array(handle, val.tensors)
    gaussians = fit_class_gaussians(train_emb, train.labels, val_emb, val.labels, cfg.openset.sigma2_floor)
    save_gaussians(gaussians, out_path, cfg.openset)
    rates = acceptance_rates(gaussians, val_emb, val.labels, cfg.openset.likelihood_threshold)

    table = pd.DataFrame([
        {"label": g.class_label, "n_train": g.n_train, "n_val": g.n_val, "mu": g.mu, "sigma": g.sigma,
         "val_accept_rate": rates.get(g.class_label)}
        for g in gaussians.values()
    ])
    failures: list[str] = []
    assert_condition(all(g.sigma2 >= cfg.openset.sigma2_floor for g in gaussians.values()), "Variance below floor", failures)
    assert_condition(set(gaussians) == set(train.classes), "Gaussians do not cover every training class", failures)

    print_summary("5", "Open-set fit", [
        ("Classes", len(gaussians)),
        ("Validation embeddings", f"{len(val):,}"),
        ("Likelihood threshold", cfg.openset.likelihood_threshold),
        ("Mean val acceptance", f"{table['val_accept_rate'].mean():.3f}"),
        ("Saved to", out_path),
    ])
    print_table("Class Gaussians", table, limit=20)
    return finish_acceptance("5", failures)


def main() -> None:
    from cli import run_stage
    run_stage(["openset", "fit"])


if __name__ == "__main__":
    main()
