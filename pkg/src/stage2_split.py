"""Stratified train/val/test split of a manifest."""
from pathlib import Path

from config import PipelineConfig
from evaluation import SPLITS, split_from_frame, stratified_split, write_split_csv
from feature_store import INDEX_NAME, FeatureStore, default_store_dir, load_manifest, store_shape
from reporting import assert_condition, finish_acceptance, print_summary, print_table, processed_dir, project_root

MANIFEST_FILENAME = "manifest.csv"
SPLIT_FILENAME = "split.csv"


def add_arguments(parser) -> None:
    parser.add_argument("--manifest", type=Path, default=None, help="manifest CSV (default data/raw/manifest.csv)")
    parser.add_argument("--out", type=Path, default=None, help="split CSV (default data/processed/split.csv)")
    parser.add_argument("--store", type=Path, default=None, help="feature store whose index gets the split column")
    parser.add_argument("--resplit", action="store_true", help="ignore a split column already in the manifest")


def run(args, cfg: PipelineConfig) -> int:
    manifest_path = args.manifest or project_root() / "data" / "raw" / MANIFEST_FILENAME
    manifest = load_manifest(manifest_path)
    if manifest.has_splits and not args.resplit:
        split, source = split_from_frame(manifest.frame, cfg.split.seed), "manifest"
    else:
        split, source = stratified_split(manifest.frame, cfg.split.ratios, cfg.split.seed), "stratified"

    out_path = args.out or processed_dir() / SPLIT_FILENAME
    write_split_csv(split, out_path)

    store_dir = args.store or default_store_dir(cfg)
    store_updated = (Path(store_dir) / INDEX_NAME).exists()
    if store_updated:
        FeatureStore(store_dir, store_shape(cfg.features)).set_splits(split.split_of)

    counts = split.counts()
    failures: list[str] = []
    assert_condition(int(counts.to_numpy().sum()) == len(manifest), "Split does not cover every manifest row", failures)
    assert_condition(set(split.assignment.values()) <= set(SPLITS), "Unknown split names in the assignment", failures)
    assert_condition(bool((counts["train"] > 0).all()), "Some class has no training examples", failures)

    print_summary("2", "Split", [
        ("Manifest", manifest_path),
        ("Source", source),
        ("Ratios", " / ".join(f"{r:.2f}" for r in split.ratios)),
        ("Seed", split.seed),
        ("Examples", f"{len(manifest):,}"),
        *[(f"{name.capitalize()} examples", int(counts[name].sum())) for name in SPLITS],
        ("Store index updated", store_updated),
        ("Saved to", out_path),
    ])
    print_table("Per-class counts", counts.reset_index(), limit=20)
    return finish_acceptance("2", failures)


def main() -> None:
    from cli import run_stage
    run_stage(["split"])


if __name__ == "__main__":
    main()
