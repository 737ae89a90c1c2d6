"""Evaluate the metric pipeline (and optionally the baseline) on the test split."""
from pathlib import Path

from config import PipelineConfig
from evaluation import evaluate, evaluate_baseline, read_split_csv
from feature_store import load_store_features
from msnet import load_checkpoint
from openset import load_gaussians, load_mlp
from reporting import assert_condition, finish_acceptance, print_summary, print_table, processed_dir

SPLIT_FILENAME = "split.csv"
CHECKPOINT_FILENAME = "msnet_metric.pt"
HEAD_FILENAME = "mlp_head.joblib"
GAUSSIANS_FILENAME = "class_gaussians.json"
REPORT_FILENAME = "eval_report.json"
CONFUSION_FILENAME = "eval_confusion.csv"
BASELINE_REPORT_FILENAME = "eval_report_baseline.json"


def add_arguments(parser) -> None:
    parser.add_argument("--store", type=Path, default=None)
    parser.add_argument("--split", type=Path, default=None)
    parser.add_argument("--network", type=Path, default=None)
    parser.add_argument("--head", type=Path, default=None)
    parser.add_argument("--reject", action="store_true", help="also score with open-set rejection")
    parser.add_argument("--gaussians", type=Path, default=None)
    parser.add_argument("--outlier-store", type=Path, default=None, help="store of out-of-set examples")
    parser.add_argument("--baseline", type=Path, default=None, help="softmax baseline checkpoint to compare")
    parser.add_argument("--out", type=Path, default=None)


def run(args, cfg: PipelineConfig) -> int:
    pdir = processed_dir()
    out_path = args.out or pdir / REPORT_FILENAME
    handle = load_checkpoint(args.network or pdir / CHECKPOINT_FILENAME)
    model = load_mlp(args.head or pdir / HEAD_FILENAME)
    use_rejection = args.reject or args.outlier_store is not None
    gaussians = load_gaussians(args.gaussians or pdir / GAUSSIANS_FILENAME) if use_rejection else None
    features = load_store_features(cfg, args.store)
    outliers = load_store_features(cfg, args.outlier_store) if args.outlier_store is not None else None
    split = read_split_csv(args.split or pdir / SPLIT_FILENAME)

    report = evaluate(handle, model, features, split, gaussians=gaussians, outliers=outliers, cfg=cfg)
    report.write(out_path, out_path.with_name(CONFUSION_FILENAME))

    rows = [
        ("Test examples", f"{report.n_test:,}"),
        ("Macro F1", f"{report.macro_f1:.4f}"),
    ]
    if report.macro_f1_with_rejection is not None:
        rows += [
            ("Macro F1 w/ rejection", f"{report.macro_f1_with_rejection:.4f}"),
            ("In-set rejected", f"{report.rejected_in_set:.3f}"),
        ]
    if report.rejection_accuracy is not None:
        rows.append(("Rejection accuracy", f"{report.rejection_accuracy:.3f} ({report.n_outliers} outliers)"))

    failures: list[str] = []
    assert_condition(0.0 <= report.macro_f1 <= 1.0, "Macro F1 outside [0, 1]", failures)
    if report.rejection_accuracy is not None:
        assert_condition(0.0 <= report.rejection_accuracy <= 1.0, "Rejection accuracy outside [0, 1]", failures)

    if args.baseline is not None:
        base = evaluate_baseline(load_checkpoint(args.baseline), features, split, cfg)
        base.write(out_path.with_name(BASELINE_REPORT_FILENAME))
        rows.append(("Baseline macro F1", f"{base.macro_f1:.4f}"))
    rows.append(("Report", out_path))

    print_summary("7", "Evaluation", rows)
    print_table("Per-class scores", report.per_class, limit=50)
    return finish_acceptance("7", failures)


def main() -> None:
    from cli import run_stage
    run_stage(["eval"])


if __name__ == "__main__":
    main()
