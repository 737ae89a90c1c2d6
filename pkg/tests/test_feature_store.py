import numpy as np
import pandas as pd
import pytest
import soundfile as sf

from audio_features import MelExample
from conftest import tone
from errors import CorruptStoreError, ManifestError, ShapeError
from feature_store import (
    FeatureStore,
    decode_feature,
    encode_feature,
    extract_manifest,
    ingest_precomputed,
    load_manifest,
    load_store_features,
    store_shape,
    verify_store,
    write_manifest,
)

SHAPE = (8, 16, 3)


def example(rng, eid, label="owl"):
    return MelExample(rng.uniform(-80.0, 0.0, size=SHAPE).astype(np.float32), label, eid, eid)


class TestCodec:
    def test_bitwise_roundtrip(self, rng):
        x = rng.standard_normal(SHAPE).astype(np.float32)
        x[0, 0, 0] = -0.0
        data = encode_feature(x, SHAPE)
        assert len(data) == 8 * 16 * 3 * 4
        assert decode_feature(data, SHAPE).tobytes() == x.tobytes()

    def test_full_size_file_length(self):
        assert len(encode_feature(np.zeros((40, 200, 3), dtype=np.float32))) == 96000 * 4

    def test_wrong_shape(self):
        with pytest.raises(ShapeError):
            encode_feature(np.zeros((8, 15, 3)), SHAPE)

    def test_truncated(self):
        with pytest.raises(CorruptStoreError, match="corrupt store"):
            decode_feature(b"\x00" * 100, SHAPE)


class TestStore:
    def test_write_and_read(self, tmp_path, rng):
        store = FeatureStore(tmp_path / "store", SHAPE)
        exs = [example(rng, f"rec{k}") for k in range(3)]
        store.write_examples(exs, split_of=lambda ex: "train")
        reopened = FeatureStore(tmp_path / "store", SHAPE)
        assert len(reopened) == 3
        assert "rec1" in reopened
        back = reopened.read_example("rec1")
        np.testing.assert_array_equal(back.tensor, exs[1].tensor)
        assert back.meta["split"] == "train"
        assert reopened.verify().ok

    def test_rewrite_replaces_entry(self, tmp_path, rng):
        store = FeatureStore(tmp_path, SHAPE)
        store.write_example(example(rng, "rec0"))
        newer = example(rng, "rec0", "wren")
        store.write_example(newer)
        assert len(store) == 1
        assert store.read_example("rec0").label == "wren"

    def test_truncated_file(self, tmp_path, rng):
        store = FeatureStore(tmp_path, SHAPE)
        path = store.write_example(example(rng, "rec0"))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(CorruptStoreError, match="corrupt store"):
            store.read_example("rec0")
        assert verify_store(tmp_path, SHAPE).size_mismatches == ["rec0"]

    def test_missing_and_orphan_files(self, tmp_path, rng):
        store = FeatureStore(tmp_path, SHAPE)
        store.write_examples([example(rng, "rec0"), example(rng, "rec1")])
        (tmp_path / "features" / "rec0.f32").unlink()
        (tmp_path / "features" / "stray.f32").write_bytes(b"\x00" * 16)
        report = store.verify()
        assert not report.ok
        assert report.missing_files == ["rec0"]
        assert report.orphan_files == ["features/stray.f32"]
        assert set(report.issues()["issue"]) == {"missing file", "orphan file"}

    def test_splits_and_selection(self, tmp_path, rng):
        store = FeatureStore(tmp_path, SHAPE)
        store.write_examples([example(rng, f"rec{k}__s000") for k in range(4)])
        store.set_splits(lambda eid: "test" if eid.startswith("rec3") else "train")
        assert len(store.load_feature_set("train")) == 3
        assert list(store.load_feature_set("test").example_ids) == ["rec3__s000"]
        with pytest.raises(CorruptStoreError):
            store.load_feature_set("val")

    def test_load_with_mel_only(self, tmp_path, rng, tiny_cfg):
        FeatureStore(tmp_path, SHAPE).write_examples([example(rng, "a"), example(rng, "b")])
        cfg = tiny_cfg.model_copy(update={"features": tiny_cfg.features.model_copy(update={"mel_only": True})})
        features = load_store_features(cfg, tmp_path)
        np.testing.assert_array_equal(features.tensors[..., 2], features.tensors[..., 0])

    def test_missing_index(self, tmp_path, tiny_cfg):
        with pytest.raises(CorruptStoreError, match="Missing"):
            load_store_features(tiny_cfg, tmp_path / "nowhere")


class TestManifest:
    def test_semicolon_manifest(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("example_id;audio_path;class_label\nr1; audio/r1.wav ;owl\n", encoding="utf-8")
        m = load_manifest(path)
        assert m.frame.loc[0, "audio_path"] == "audio/r1.wav"
        assert m.resolve("audio/r1.wav") == tmp_path.resolve() / "audio" / "r1.wav"
        assert not m.has_splits

    @pytest.mark.parametrize(
        "body,match",
        [
            ("example_id,class_label\nr1,owl\n", "missing required columns"),
            ("example_id,audio_path,class_label\nr1,a.wav,owl\nr1,b.wav,owl\n", "duplicate"),
            ("example_id,audio_path,class_label\nr1,a.wav,\n", "empty class_label"),
            ("example_id,audio_path,class_label\n,a.wav,owl\n", "empty example_id"),
        ],
    )
    def test_errors(self, tmp_path, body, match):
        path = tmp_path / "m.csv"
        path.write_text(body, encoding="utf-8")
        with pytest.raises(ManifestError, match=match):
            load_manifest(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "none.csv")


class TestIngestion:
    def test_extract_manifest(self, tmp_path, tiny_cfg):
        sr = tiny_cfg.features.sample_rate
        (tmp_path / "audio").mkdir()
        rows = []
        for k in range(4):
            sf.write(tmp_path / "audio" / f"r{k}.wav", tone(300.0 + 200 * k, 1.2, sr), sr)
            rows.append((f"r{k}", f"audio/r{k}.wav", "owl" if k < 2 else "wren", "train"))
        rows.append(("bad", "audio/bad.wav", "owl", "test"))
        (tmp_path / "audio" / "bad.wav").write_bytes(b"nope")
        path = write_manifest(pd.DataFrame(rows, columns=["example_id", "audio_path", "class_label", "split"]), tmp_path / "m.csv")

        store = FeatureStore(tmp_path / "store", store_shape(tiny_cfg.features))
        result = extract_manifest(load_manifest(path), store, tiny_cfg.features, progress=False)
        assert result["files"] == 5
        assert result["examples"] == 8
        assert list(result["failures"]) == ["bad"]
        assert set(store.index["split"]) == {"train"}
        assert store.verify().ok
        for f in (tmp_path / "store" / "features").glob("*.f32"):
            assert f.stat().st_size == 8 * 16 * 3 * 4

    def test_reextracting_shorter_recording_drops_old_segments(self, tmp_path, tiny_cfg):
        sr = tiny_cfg.features.sample_rate
        (tmp_path / "audio").mkdir()
        wav = tmp_path / "audio" / "r0.wav"
        path = write_manifest(
            pd.DataFrame([("r0", "audio/r0.wav", "owl")], columns=["example_id", "audio_path", "class_label"]),
            tmp_path / "m.csv",
        )
        store = FeatureStore(tmp_path / "store", store_shape(tiny_cfg.features))

        sf.write(wav, tone(500.0, 1.6, sr), sr)
        assert extract_manifest(load_manifest(path), store, tiny_cfg.features, progress=False)["examples"] == 3
        sf.write(wav, tone(500.0, 0.7, sr), sr)
        assert extract_manifest(load_manifest(path), store, tiny_cfg.features, progress=False)["examples"] == 1

        reopened = FeatureStore(tmp_path / "store", store_shape(tiny_cfg.features))
        assert reopened.index["example_id"].tolist() == ["r0__s000"]
        assert [p.name for p in (tmp_path / "store" / "features").glob("*.f32")] == ["r0__s000.f32"]
        assert reopened.verify().ok

    def test_batch_write_keeps_other_sources(self, tmp_path, rng):
        store = FeatureStore(tmp_path, SHAPE)
        store.write_examples([example(rng, "a"), example(rng, "b")], replace_sources=True)
        store.write_examples([example(rng, "b", "wren")], replace_sources=True)
        assert sorted(store.index["example_id"]) == ["a", "b"]
        assert store.read_example("b").label == "wren"

    def test_ingest_precomputed(self, tmp_path, tiny_cfg, rng):
        np.save(tmp_path / "a.npy", rng.uniform(0.0, 1.0, size=(8, 30)))
        np.save(tmp_path / "b.npy", rng.uniform(0.0, 1.0, size=(7, 30)))
        df = pd.DataFrame(
            [("a", "a.npy", "owl"), ("b", "b.npy", "owl")], columns=["example_id", "audio_path", "class_label"]
        )
        path = write_manifest(df, tmp_path / "m.csv")
        store = FeatureStore(tmp_path / "store", SHAPE)
        result = ingest_precomputed(load_manifest(path), store, tiny_cfg.features, progress=False)
        assert result["examples"] == 1
        assert list(result["failures"]) == ["b"]
        tensor = store.read_example("a").tensor
        assert tensor.shape == SHAPE
        np.testing.assert_array_equal(tensor[..., 1], tensor[..., 0])
        assert tensor.max() == pytest.approx(0.0, abs=1e-6)
