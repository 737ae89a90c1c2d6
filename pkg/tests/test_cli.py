import numpy as np
import pandas as pd
import pytest
import soundfile as sf

from cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, build_parser, cli_dispatch
from conftest import TINY_CONFIG, tone
from evaluation import embedding_columns, read_embeddings
from feature_store import FeatureStore, write_manifest
from openset import REJECTED_LABEL

TINY = ["--config", str(TINY_CONFIG), "--no-progress"]


def run(*argv) -> int:
    return cli_dispatch([*TINY, *[str(a) for a in argv]])


def tone_manifest(tmp_path, n=20, sr=44100, seconds=2.0):
    (tmp_path / "audio").mkdir()
    rows = []
    for k in range(n):
        sf.write(tmp_path / "audio" / f"r{k:02d}.wav", tone(400.0 + 50 * k, seconds, sr), sr)
        rows.append((f"r{k:02d}", f"audio/r{k:02d}.wav", "owl" if k % 2 else "wren"))
    df = pd.DataFrame(rows, columns=["example_id", "audio_path", "class_label"])
    return write_manifest(df, tmp_path / "manifest.csv")


class TestUsage:
    def test_no_arguments(self):
        assert cli_dispatch([]) == EXIT_USAGE

    def test_unknown_command(self):
        assert cli_dispatch(["frobnicate"]) == EXIT_USAGE

    def test_missing_config(self, tmp_path):
        assert cli_dispatch(["--config", str(tmp_path / "none.yaml"), "split"]) == EXIT_USAGE

    def test_invalid_config(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("metric:\n  epochs: -3\n")
        assert cli_dispatch(["--config", str(bad), "split"]) == EXIT_USAGE

    def test_global_flags_after_command(self):
        args = build_parser().parse_args(["train", "metric", "--seed", "3", "--mel-only"])
        assert args.seed == 3 and args.mel_only

    def test_missing_manifest_is_data_error(self, tmp_path):
        assert run("split", "--manifest", tmp_path / "none.csv", "--out", tmp_path / "s.csv") == EXIT_DATA


def test_split_is_reproducible(tmp_path):
    rows = [(f"{c}{k}", f"{c}{k}.wav", c) for c in ("owl", "wren") for k in range(10)]
    manifest = write_manifest(pd.DataFrame(rows, columns=["example_id", "audio_path", "class_label"]), tmp_path / "m.csv")
    for name in ("a.csv", "b.csv"):
        code = run("split", "--manifest", manifest, "--seed", 7, "--out", tmp_path / name, "--store", tmp_path / "none")
        assert code == EXIT_OK
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    df = pd.read_csv(tmp_path / "a.csv")
    assert df.groupby("split").size().to_dict() == {"test": 6, "train": 10, "val": 4}


def test_extract_full_size_features(tmp_path):
    manifest = tone_manifest(tmp_path)
    store_dir = tmp_path / "store"
    code = cli_dispatch(["--no-progress", "features", "extract", "--manifest", str(manifest), "--store", str(store_dir)])
    assert code == EXIT_OK
    files = sorted((store_dir / "features").glob("*.f32"))
    assert len(files) == 20
    assert all(f.stat().st_size == 96000 * 4 for f in files)
    assert len(FeatureStore(store_dir, (40, 200, 3))) == 20


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipeline")
    store = d / "store"
    common = ["--store", store, "--split", d / "split.csv"]
    steps = [
        ("synth", "--out", d / "raw", "--per-class", 14),
        ("features", "extract", "--manifest", d / "raw" / "manifest.csv", "--store", store, "--verify"),
        ("split", "--manifest", d / "raw" / "manifest.csv", "--store", store, "--out", d / "split.csv"),
        ("train", "metric", *common, "--out", d / "net.pt"),
        ("train", "head", *common, "--network", d / "net.pt", "--out", d / "head.joblib"),
        ("openset", "fit", *common, "--network", d / "net.pt", "--out", d / "gaussians.json"),
    ]
    codes = [run(*step) for step in steps]
    return d, codes


class TestPipeline:
    def test_stages_pass(self, pipeline):
        d, codes = pipeline
        assert codes == [EXIT_OK] * len(codes)
        for name in ("net.pt", "metric_train_log.jsonl", "head.joblib", "gaussians.json", "split.csv"):
            assert (d / name).exists()
        store = pd.read_parquet(d / "store" / "index.parquet")
        assert len(store) == 84
        assert set(store["split"]) == {"train", "val", "test"}

    def test_classify_and_eval_with_rejection(self, pipeline):
        d, _ = pipeline
        models = ["--network", d / "net.pt", "--head", d / "head.joblib", "--gaussians", d / "gaussians.json"]
        common = ["--store", d / "store", "--split", d / "split.csv"]
        assert run("classify", "--reject", *common, *models, "--out", d / "pred.csv") == EXIT_OK
        preds = pd.read_csv(d / "pred.csv", keep_default_na=False)
        assert len(preds) == 30
        assert {"distance", "likelihood", "accepted"} <= set(preds.columns)

        assert run("eval", "--reject", *common, *models, "--out", d / "report.json") == EXIT_OK
        assert (d / "eval_confusion.csv").exists()

    def test_embed(self, pipeline):
        d, _ = pipeline
        assert run("embed", "--store", d / "store", "--network", d / "net.pt", "--out", d / "emb.tsv") == EXIT_OK
        df = read_embeddings(d / "emb.tsv")
        assert len(df) == 84
        values = df.drop(columns=["example_id", "label"]).to_numpy()
        np.testing.assert_allclose(np.linalg.norm(values, axis=1), 1.0, atol=1e-5)

    def test_far_embedding_is_rejected(self, pipeline, tmp_path):
        d, _ = pipeline
        dim = 8
        far = pd.DataFrame([["far", "x", *([100.0] * dim)]], columns=["example_id", "label", *embedding_columns(dim)])
        far.to_csv(tmp_path / "far.tsv", sep="\t", index=False)
        code = run(
            "classify", "--reject", "--embeddings", tmp_path / "far.tsv",
            "--head", d / "head.joblib", "--gaussians", d / "gaussians.json", "--out", tmp_path / "pred.csv",
        )
        assert code == EXIT_OK
        assert pd.read_csv(tmp_path / "pred.csv")["predicted"].tolist() == [REJECTED_LABEL]

    def test_rerun_is_deterministic(self, pipeline, tmp_path):
        d, _ = pipeline
        manifest = d / "raw" / "manifest.csv"
        for k in range(2):
            out = tmp_path / f"run{k}"
            assert run("split", "--manifest", manifest, "--store", tmp_path / "none", "--out", out / "split.csv") == EXIT_OK
            code = run(
                "train", "metric", "--store", d / "store", "--split", out / "split.csv",
                "--out", out / "net.pt", "--log", out / "log.jsonl",
            )
            assert code == EXIT_OK
        a, b = tmp_path / "run0", tmp_path / "run1"
        assert (a / "split.csv").read_bytes() == (b / "split.csv").read_bytes()
        assert (a / "log.jsonl").read_text() == (b / "log.jsonl").read_text()
        assert (a / "split.csv").read_bytes() == (d / "split.csv").read_bytes()
