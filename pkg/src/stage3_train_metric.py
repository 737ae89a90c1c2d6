"""Train the multiscale CNN with dynamic-margin triplet loss."""
from pathlib import Path

import numpy as np

from config import PipelineConfig, config_echo
from evaluation import read_split_csv, select_split
from feature_store import load_store_features
from msnet import build_network, embed_array, param_count_delta, save_checkpoint
from reporting import assert_condition, finish_acceptance, print_summary, print_table, processed_dir, progress_enabled
from trainer import smoothed_loss, train_metric

SPLIT_FILENAME = "split.csv"
CHECKPOINT_FILENAME = "msnet_metric.pt"
LOG_FILENAME = "metric_train_log.jsonl"


def add_arguments(parser) -> None:
    parser.add_argument("--store", type=Path, default=None)
    parser.add_argument("--split", type=Path, default=None, help="split CSV (default data/processed/split.csv)")
    parser.add_argument("--out", type=Path, default=None, help="checkpoint path")
    parser.add_argument("--log", type=Path, default=None, help="TrainLog JSONL path")


def run(args, cfg: PipelineConfig) -> int:
    pdir = processed_dir()
    out_path = args.out or pdir / CHECKPOINT_FILENAME
    log_path = args.log or out_path.with_name(LOG_FILENAME)
    diag_path = out_path.with_name(out_path.stem + ".diverged.pt")

    features = load_store_features(cfg, args.store)
    split = read_split_csv(args.split or pdir / SPLIT_FILENAME)
    train = select_split(features, split, "train")

    handle = build_network(cfg.network, seed=cfg.metric.seed)
    handle, log = train_metric(handle, train, cfg.metric, log_path, diag_path, progress=progress_enabled(args))
    save_checkpoint(handle, out_path, extra={**handle.meta, "config": config_echo(cfg)})

    frame = log.to_frame()
    losses = frame["loss"].to_numpy(dtype=float)
    alphas = frame["alpha"].to_numpy(dtype=float)
    norms = np.linalg.norm(embed_array(handle, train.tensors[:64]), axis=1)
    counts = param_count_delta(handle)

    failures: list[str] = []
    assert_condition(bool(np.all(np.isfinite(losses))), "Non-finite loss in the training log", failures)
    assert_condition(bool(np.all(np.diff(alphas) >= 0)), "Margin decreased during training", failures)
    assert_condition(
        bool(alphas.min() >= cfg.metric.alpha_init - 1e-12 and alphas.max() <= cfg.metric.alpha_cap + 1e-12),
        "Margin left [alpha_init, alpha_cap]", failures,
    )
    assert_condition(bool(np.all(np.abs(norms - 1.0) < 1e-5)), "Embeddings are not unit-norm", failures)

    print_summary("3", "Metric training", [
        ("Train examples", f"{len(train):,}"),
        ("Classes", len(train.classes)),
        ("Parameters", f"{counts['param_count']:,} ({counts['relative_delta']:+.1%} vs reference)"),
        ("Epochs", cfg.metric.epochs),
        ("Iterations", f"{len(frame):,}"),
        ("Triplets mined", f"{int(frame['mined'].sum()):,}"),
        ("Final margin", f"{alphas[-1]:.2f}"),
        ("Converged epoch", log.converged_epoch if log.converged else "not converged"),
        ("Smoothed final loss", f"{smoothed_loss(losses)[-1]:.4f}"),
        ("Checkpoint", out_path),
        ("Train log", log_path),
    ])
    print_table("Last epochs", log.epoch_frame().tail(10))
    return finish_acceptance("3", failures)


def main() -> None:
    from cli import run_stage
    run_stage(["train", "metric"])


if __name__ == "__main__":
    main()
