"""Three-channel vs Mel-only ablation over repeated seeds."""
from pathlib import Path

from config import PipelineConfig
from evaluation import ABLATION_MODES, read_split_csv, run_ablation
from feature_store import load_store_features
from reporting import assert_condition, finish_acceptance, print_summary, print_table, processed_dir, progress_enabled

SPLIT_FILENAME = "split.csv"
RUNS_FILENAME = "ablation_runs.csv"
SUMMARY_FILENAME = "ablation_summary.csv"


def add_arguments(parser) -> None:
    parser.add_argument("--store", type=Path, default=None)
    parser.add_argument("--split", type=Path, default=None)
    parser.add_argument("--repeats", type=int, default=None, help="seeds per mode (default from config)")
    parser.add_argument("--modes", nargs="+", choices=ABLATION_MODES, default=list(ABLATION_MODES))
    parser.add_argument("--out-dir", type=Path, default=None)


def run(args, cfg: PipelineConfig) -> int:
    pdir = args.out_dir or processed_dir()
    repeats = args.repeats or cfg.ablation_repeats
    seeds = [cfg.seed + k for k in range(repeats)]
    # the store is read as three-channel; Mel-only runs convert on the fly
    features = load_store_features(cfg.model_copy(update={"features": cfg.features.model_copy(update={"mel_only": False})}), args.store)
    split = read_split_csv(args.split or processed_dir() / SPLIT_FILENAME)

    runs, summary = run_ablation(features, split, cfg, seeds, args.modes, progress=progress_enabled(args))
    pdir.mkdir(parents=True, exist_ok=True)
    runs.to_csv(pdir / RUNS_FILENAME, index=False)
    summary.to_csv(pdir / SUMMARY_FILENAME, index=False)

    failures: list[str] = []
    assert_condition(len(runs) == repeats * len(args.modes), "Missing ablation runs", failures)
    assert_condition(bool(runs["macro_f1"].between(0.0, 1.0).all()), "Macro F1 outside [0, 1]", failures)

    print_summary("7b", "Ablation", [
        ("Modes", ", ".join(args.modes)),
        ("Seeds per mode", repeats),
        ("Runs", len(runs)),
        ("Runs CSV", pdir / RUNS_FILENAME),
        ("Summary CSV", pdir / SUMMARY_FILENAME),
    ])
    print_table("Macro F1 by mode", summary)
    return finish_acceptance("7b", failures)


def main() -> None:
    from cli import run_stage
    run_stage(["ablation"])


if __name__ == "__main__":
    main()
