"""Export embeddings as TSV for external projection (e.g. t-SNE)."""
from pathlib import Path

import numpy as np

from config import PipelineConfig
from evaluation import export_embeddings, read_embeddings, read_split_csv, select_split
from feature_store import load_store_features
from msnet import load_checkpoint
from reporting import assert_condition, finish_acceptance, print_summary, processed_dir

SPLIT_FILENAME = "split.csv"
CHECKPOINT_FILENAME = "msnet_metric.pt"
OUT_FILENAME = "embeddings.tsv"


def add_arguments(parser) -> None:
    parser.add_argument("--store", type=Path, default=None)
    parser.add_argument("--split", type=Path, default=None)
    parser.add_argument("--subset", default="all", help="split to export; 'all' for the whole store")
    parser.add_argument("--network", type=Path, default=None)
    parser.add_argument("--out", type=Path, default=None)


def run(args, cfg: PipelineConfig) -> int:
    pdir = processed_dir()
    out_path = args.out or pdir / OUT_FILENAME
    handle = load_checkpoint(args.network or pdir / CHECKPOINT_FILENAME)
    features = load_store_features(cfg, args.store)
    if args.subset != "all":
        features = select_split(features, read_split_csv(args.split or pdir / SPLIT_FILENAME), args.subset)

    export_embeddings(handle, features, out_path)
    df = read_embeddings(out_path)
    values = df.drop(columns=["example_id", "label"]).to_numpy(dtype=np.float64)
    norms = np.linalg.norm(values, axis=1)

    failures: list[str] = []
    assert_condition(len(df) == len(features), f"Exported {len(df)} rows for {len(features)} examples", failures)
    assert_condition(bool(np.all(np.abs(norms - 1.0) < 1e-5)), "Exported embeddings are not unit-norm", failures)

    print_summary("8", "Embedding export", [
        ("Examples", f"{len(df):,}"),
        ("Dimensions", values.shape[1]),
        ("Max |norm - 1|", f"{np.abs(norms - 1.0).max():.2e}"),
        ("Saved to", out_path),
    ])
    return finish_acceptance("8", failures)


def main() -> None:
    from cli import run_stage
    run_stage(["embed"])


if __name__ == "__main__":
    main()
