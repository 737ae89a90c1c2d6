"""Train the cross-entropy (softmax head) baseline."""
from pathlib import Path

import numpy as np

from config import PipelineConfig, config_echo
from evaluation import read_split_csv, select_split
from feature_store import load_store_features
from msnet import build_network, save_checkpoint
from reporting import assert_condition, finish_acceptance, print_summary, print_table, processed_dir, progress_enabled
from trainer import train_baseline

SPLIT_FILENAME = "split.csv"
CHECKPOINT_FILENAME = "msnet_baseline.pt"
LOG_FILENAME = "baseline_train_log.jsonl"


def add_arguments(parser) -> None:
    parser.add_argument("--store", type=Path, default=None)
    parser.add_argument("--split", type=Path, default=None)
    parser.add_argument("--out", type=Path, default=None)
    parser.add_argument("--log", type=Path, default=None)


def run(args, cfg: PipelineConfig) -> int:
    pdir = processed_dir()
    out_path = args.out or pdir / CHECKPOINT_FILENAME
    log_path = args.log or out_path.with_name(LOG_FILENAME)

    features = load_store_features(cfg, args.store)
    split = read_split_csv(args.split or pdir / SPLIT_FILENAME)
    train = select_split(features, split, "train")
    val = select_split(features, split, "val")

    classes = tuple(train.classes)
    net_cfg = cfg.network.model_copy(update={"head": "softmax", "n_classes": len(classes)})
    handle = build_network(net_cfg, seed=cfg.baseline.seed, classes=classes)
    handle, log = train_baseline(
        handle, train, val, cfg.baseline, log_path,
        out_path.with_name(out_path.stem + ".diverged.pt"), progress=progress_enabled(args),
    )
    save_checkpoint(handle, out_path, extra={**handle.meta, "config": config_echo(cfg)})

    epochs = log.epoch_frame()
    failures: list[str] = []
    assert_condition(bool(np.all(np.isfinite(log.to_frame()["loss"]))), "Non-finite loss in the training log", failures)
    assert_condition(log.selected_epoch is not None, "No epoch was selected", failures)

    print_summary("3b", "Baseline training", [
        ("Train examples", f"{len(train):,}"),
        ("Validation examples", f"{len(val):,}"),
        ("Classes", len(classes)),
        ("Parameters", f"{handle.param_count:,}"),
        ("Epochs", cfg.baseline.epochs),
        ("Selected epoch", log.selected_epoch),
        ("Best val loss", f"{handle.meta['val_loss']:.4f}"),
        ("Checkpoint", out_path),
    ])
    print_table("Last epochs", epochs.tail(10))
    return finish_acceptance("3b", failures)


def main() -> None:
    from cli import run_stage
    run_stage(["train", "baseline"])


if __name__ == "__main__":
    main()
