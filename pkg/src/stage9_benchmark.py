"""End-to-end desk-scale benchmark on the synthetic call dataset.

Closed set: triplet network + MLP against the cross-entropy baseline on
six classes. Open set: the last class is held out of training and used as
the outlier set. Run with ``--config configs/desk.yaml``.
"""
from pathlib import Path
from typing import Optional

import numpy as np

from config import PipelineConfig
from evaluation import (
    evaluate,
    evaluate_baseline,
    select_split,
    stratified_split,
    train_pipeline,
)
from feature_store import load_store_features
from msnet import build_network, embed_array
from openset import fit_class_gaussians
from reporting import assert_condition, finish_acceptance, print_summary, print_table, processed_dir, progress_enabled
from synthetic import PER_CLASS, SYNTH_CLASSES, synth_feature_set
from trainer import train_baseline

F1_TARGET = 0.90
BASELINE_SLACK = 0.02
REJECTION_TARGET = 0.80
REJECTION_F1_DROP = 0.05
REFERENCE_F1 = 0.91
REFERENCE_TOLERANCE = 0.05
REPORT_DIRNAME = "benchmark"


def run_benchmark(cfg: PipelineConfig, per_class: int = PER_CLASS, progress: bool = False) -> dict:
    features = synth_feature_set(cfg.features, seed=cfg.seed, per_class=per_class)
    if cfg.features.mel_only:
        features = features.mel_only()
    split = stratified_split(features, cfg.split.ratios, cfg.split.seed)

    handle, mlp, log = train_pipeline(features, split, cfg, progress=progress)
    metric_report = evaluate(handle, mlp, features, split, cfg=cfg)

    train, val = select_split(features, split, "train"), select_split(features, split, "val")
    classes = tuple(train.classes)
    base_cfg = cfg.network.model_copy(update={"head": "softmax", "n_classes": len(classes)})
    baseline = build_network(base_cfg, seed=cfg.baseline.seed, classes=classes)
    baseline, _ = train_baseline(baseline, train, val, cfg.baseline, progress=progress)
    baseline_report = evaluate_baseline(baseline, features, split, cfg)

    held_out = SYNTH_CLASSES[-1]
    in_set = np.array([l != held_out for l in features.labels], dtype=bool)
    inliers, outliers = features.subset(in_set), features.subset(~in_set)
    open_split = stratified_split(inliers, cfg.split.ratios, cfg.split.seed)
    open_handle, open_mlp, _ = train_pipeline(inliers, open_split, cfg, progress=progress)
    o_train, o_val = select_split(inliers, open_split, "train"), select_split(inliers, open_split, "val")
    gaussians = fit_class_gaussians(
        embed_array(open_handle, o_train.tensors), o_train.labels,
        embed_array(open_handle, o_val.tensors), o_val.labels,
        cfg.openset.sigma2_floor,
    )
    open_report = evaluate(open_handle, open_mlp, inliers, open_split, gaussians, outliers, cfg)

    return {
        "metric_f1": metric_report.macro_f1,
        "baseline_f1": baseline_report.macro_f1,
        "converged": log.converged,
        "final_alpha": handle.meta.get("margin"),
        "open_f1": open_report.macro_f1,
        "open_f1_with_rejection": open_report.macro_f1_with_rejection,
        "rejection_accuracy": open_report.rejection_accuracy,
        "held_out_class": held_out,
        "reports": {"metric": metric_report, "baseline": baseline_report, "openset": open_report},
    }


def run_reference(cfg: PipelineConfig, store_dir: Path, progress: bool = False) -> float:
    features = load_store_features(cfg, store_dir)
    split = stratified_split(features, cfg.split.ratios, cfg.split.seed)
    handle, mlp, _ = train_pipeline(features, split, cfg, progress=progress)
    return evaluate(handle, mlp, features, split, cfg=cfg).macro_f1


def add_arguments(parser) -> None:
    parser.add_argument("--per-class", type=int, default=PER_CLASS)
    parser.add_argument("--reference-store", type=Path, default=None,
                        help="feature store of a full-size reference dataset; skipped when absent")
    parser.add_argument("--out-dir", type=Path, default=None)


def run(args, cfg: PipelineConfig) -> int:
    out_dir = args.out_dir or processed_dir() / REPORT_DIRNAME
    res = run_benchmark(cfg, per_class=args.per_class, progress=progress_enabled(args))
    for name, report in res["reports"].items():
        report.write(out_dir / f"{name}_report.json", out_dir / f"{name}_confusion.csv")

    drop = res["open_f1"] - res["open_f1_with_rejection"]
    failures: list[str] = []
    assert_condition(res["metric_f1"] >= F1_TARGET, f"Triplet macro F1 {res['metric_f1']:.3f} < {F1_TARGET}", failures)
    assert_condition(
        res["metric_f1"] >= res["baseline_f1"] - BASELINE_SLACK,
        f"Triplet macro F1 {res['metric_f1']:.3f} trails the baseline {res['baseline_f1']:.3f}", failures,
    )
    assert_condition(
        res["rejection_accuracy"] >= REJECTION_TARGET,
        f"Rejection accuracy {res['rejection_accuracy']:.3f} < {REJECTION_TARGET}", failures,
    )
    assert_condition(drop <= REJECTION_F1_DROP, f"Rejection costs {drop:.3f} macro F1 (> {REJECTION_F1_DROP})", failures)

    reference: Optional[float] = None
    if args.reference_store is not None and Path(args.reference_store).exists():
        reference = run_reference(cfg, args.reference_store, progress_enabled(args))
        assert_condition(
            abs(reference - REFERENCE_F1) <= REFERENCE_TOLERANCE,
            f"Reference macro F1 {reference:.3f} outside {REFERENCE_F1} +/- {REFERENCE_TOLERANCE}", failures,
        )

    print_summary("9", "Benchmark", [
        ("Classes", len(SYNTH_CLASSES)),
        ("Clips per class", args.per_class),
        ("Triplet macro F1", f"{res['metric_f1']:.4f}"),
        ("Baseline macro F1", f"{res['baseline_f1']:.4f}"),
        ("Margin converged", res["converged"]),
        ("Final margin", res["final_alpha"]),
        ("Held-out class", res["held_out_class"]),
        ("Open-set macro F1", f"{res['open_f1']:.4f}"),
        ("  with rejection", f"{res['open_f1_with_rejection']:.4f}"),
        ("Rejection accuracy", f"{res['rejection_accuracy']:.3f}"),
        ("Reference check", f"{reference:.4f}" if reference is not None else "skipped (no reference store)"),
        ("Reports", out_dir),
    ])
    print_table("Triplet per-class scores", res["reports"]["metric"].per_class)
    return finish_acceptance("9", failures)


def main() -> None:
    from cli import run_stage
    run_stage(["benchmark"])


if __name__ == "__main__":
    main()
