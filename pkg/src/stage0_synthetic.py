"""Write the desk-scale synthetic dataset (WAV clips and manifest)."""
from pathlib import Path

from config import PipelineConfig
from feature_store import write_manifest
from reporting import assert_condition, finish_acceptance, print_summary, project_root
from synthetic import PER_CLASS, SYNTH_CLASSES, write_dataset

OUT_DIRNAME = "synthetic"
MANIFEST_FILENAME = "manifest.csv"


def add_arguments(parser) -> None:
    parser.add_argument("--out", type=Path, default=None, help="output directory (default data/raw/synthetic)")
    parser.add_argument("--per-class", type=int, default=PER_CLASS)


def run(args, cfg: PipelineConfig) -> int:
    out_dir = args.out or project_root() / "data" / "raw" / OUT_DIRNAME
    df = write_dataset(out_dir, cfg.features, seed=cfg.seed, per_class=args.per_class)
    manifest_path = write_manifest(df, out_dir / MANIFEST_FILENAME)

    counts = df.groupby("class_label").size()
    missing = [p for p in df["audio_path"] if not (out_dir / p).exists()]

    failures: list[str] = []
    assert_condition(len(counts) == len(SYNTH_CLASSES), f"Expected {len(SYNTH_CLASSES)} classes, got {len(counts)}", failures)
    assert_condition(bool((counts == args.per_class).all()), f"Unbalanced classes: {counts.to_dict()}", failures)
    assert_condition(not missing, f"Clips not written: {missing[:5]}", failures)

    print_summary("0", "Synthetic dataset", [
        ("Classes", ", ".join(counts.index)),
        ("Clips per class", args.per_class),
        ("Clips total", f"{len(df):,}"),
        ("Sample rate", f"{cfg.features.sample_rate} Hz"),
        ("Seed", cfg.seed),
        ("Manifest", manifest_path),
    ])
    return finish_acceptance("0", failures)


def main() -> None:
    from cli import run_stage
    run_stage(["synth"])


if __name__ == "__main__":
    main()
