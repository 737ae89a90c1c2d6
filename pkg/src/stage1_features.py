"""Extract, ingest or verify three-channel Mel features."""
from pathlib import Path

from config import PipelineConfig
from errors import ManifestError
from feature_store import (
    FeatureStore,
    default_store_dir,
    extract_manifest,
    ingest_precomputed,
    load_manifest,
    store_shape,
)
from reporting import (
    assert_condition,
    finish_acceptance,
    print_summary,
    print_table,
    progress_enabled,
    project_root,
)

MANIFEST_FILENAME = "manifest.csv"


def add_arguments(parser) -> None:
    parser.add_argument("action", choices=["extract", "ingest", "verify"])
    parser.add_argument("--manifest", type=Path, default=None, help="manifest CSV (default data/raw/manifest.csv)")
    parser.add_argument("--store", type=Path, default=None, help="feature store directory")
    parser.add_argument("--jobs", type=int, default=1, help="parallel extraction workers")
    parser.add_argument("--db", action="store_true", help="ingested matrices are already in dB")
    parser.add_argument("--verify", action="store_true", help="check the store after writing")


def _verify(store: FeatureStore, failures: list[str]) -> None:
    report = store.verify()
    print_summary("1", "Store check", [
        ("Indexed examples", f"{report.n_indexed:,}"),
        ("Missing files", len(report.missing_files)),
        ("Size mismatches", len(report.size_mismatches)),
        ("Shape mismatches", len(report.shape_mismatches)),
        ("Duplicate ids", len(report.duplicate_ids)),
        ("Orphan files", len(report.orphan_files)),
    ])
    if not report.ok:
        print_table("Store issues", report.issues(), limit=20)
    assert_condition(report.ok, f"Store check found {len(report.issues())} issue(s) in {store.root}", failures)


def run(args, cfg: PipelineConfig) -> int:
    store_dir = args.store or default_store_dir(cfg)
    store = FeatureStore(store_dir, store_shape(cfg.features))
    failures: list[str] = []

    if args.action == "verify":
        if not store.index_path.exists():
            raise ManifestError(f"Missing {store.index_path}")
        _verify(store, failures)
        return finish_acceptance("1", failures)

    manifest_path = args.manifest or project_root() / "data" / "raw" / MANIFEST_FILENAME
    manifest = load_manifest(manifest_path)
    if args.action == "extract":
        result = extract_manifest(manifest, store, cfg.features, jobs=args.jobs, progress=progress_enabled(args))
    else:
        result = ingest_precomputed(manifest, store, cfg.features, is_db=args.db, progress=progress_enabled(args))

    classes = store.index["label"].nunique()
    print_summary("1", f"Features {args.action}", [
        ("Manifest", manifest_path),
        ("Files", f"{result['files']:,}"),
        ("Examples written", f"{result['examples']:,}"),
        ("Failed files", len(result["failures"])),
        ("Classes in store", classes),
        ("Tensor shape", " x ".join(str(s) for s in store.shape)),
        ("Mel only", cfg.features.mel_only),
        ("Store", store.root),
    ])
    for eid, err in list(result["failures"].items())[:10]:
        print(f"- {eid}: {err}")

    assert_condition(not result["failures"], f"{len(result['failures'])} file(s) could not be processed", failures)
    assert_condition(result["examples"] >= result["files"] - len(result["failures"]),
                     "Fewer examples than readable files", failures)
    if args.verify:
        _verify(store, failures)
    return finish_acceptance("1", failures)


def main() -> None:
    from cli import run_stage
    run_stage(["features"])


if __name__ == "__main__":
    main()
