"""Dataset manifests and the on-disk feature store.

A store is a directory holding ``index.parquet`` and one raw little-endian
float32 file per example under ``features/``, laid out [mel][frame][channel].
"""
from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from audio_features import FeatureSet, MelExample, extract_file_examples, fit_precomputed
from config import FeatureConfig, N_CHANNELS, N_FRAMES, N_MELS, PipelineConfig
from errors import AudioError, CorruptStoreError, ManifestError, ShapeError
from reporting import processed_dir, robust_read_csv

logger = logging.getLogger(__name__)

MANIFEST_COLS = ["example_id", "audio_path", "class_label"]
MANIFEST_OPTIONAL = ["split", "duration_s"]
INDEX_NAME = "index.parquet"
DATA_DIR = "features"
DATA_SUFFIX = ".f32"
FEATURE_DTYPE = np.dtype("<f4")
INDEX_COLS = ["example_id", "file", "label", "split", "source_id", "shape"]
STORE_SHAPE = (N_MELS, N_FRAMES, N_CHANNELS)


@dataclass(frozen=True, eq=False)
class Manifest:
    frame: pd.DataFrame
    root: Path

    def __len__(self) -> int:
        return len(self.frame)

    def resolve(self, audio_path: str) -> Path:
        p = Path(audio_path)
        return p if p.is_absolute() else self.root / p

    @property
    def has_splits(self) -> bool:
        return "split" in self.frame.columns and bool((self.frame["split"].str.strip() != "").all())


def load_manifest(path: Path) -> Manifest:
    """Read a manifest CSV; paths resolve relative to its directory."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"Missing manifest {path}")
    try:
        df = robust_read_csv(path, set(MANIFEST_COLS + MANIFEST_OPTIONAL))
    except RuntimeError as e:
        raise ManifestError(str(e)) from e
    df.columns = [c.strip() for c in df.columns]
    missing = [c for c in MANIFEST_COLS if c not in df.columns]
    if missing:
        raise ManifestError(f"{path.name}: missing required columns {missing}")
    for col in df.columns:
        df[col] = df[col].astype(str).str.strip()
    if (df["example_id"] == "").any():
        raise ManifestError(f"{path.name}: empty example_id in rows {df.index[df['example_id'] == ''].tolist()[:10]}")
    dupes = sorted(df.loc[df["example_id"].duplicated(), "example_id"].unique().tolist())
    if dupes:
        raise ManifestError(f"{path.name}: duplicate example_id {dupes[:10]}")
    empty = df.loc[df["class_label"] == "", "example_id"].tolist()
    if empty:
        raise ManifestError(f"{path.name}: empty class_label for {empty[:10]}")
    return Manifest(df.reset_index(drop=True), path.resolve().parent)


def write_manifest(df: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = MANIFEST_COLS + [c for c in MANIFEST_OPTIONAL if c in df.columns]
    df[cols].to_csv(path, index=False)
    return path


def encode_feature(tensor: np.ndarray, shape: Sequence[int] = STORE_SHAPE) -> bytes:
    tensor = np.asarray(tensor)
    if tuple(tensor.shape) != tuple(shape):
        raise ShapeError(f"feature tensor shape {tensor.shape} does not match store shape {tuple(shape)}")
    return np.ascontiguousarray(tensor, dtype=FEATURE_DTYPE).tobytes(order="C")


def decode_feature(data: bytes, shape: Sequence[int] = STORE_SHAPE, name: str = "") -> np.ndarray:
    expected = int(np.prod(shape)) * FEATURE_DTYPE.itemsize
    if len(data) != expected:
        raise CorruptStoreError(f"corrupt store: {name or 'feature file'} has {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype=FEATURE_DTYPE).reshape(tuple(shape)).astype(np.float32)


def _shape_str(shape: Sequence[int]) -> str:
    return "x".join(str(int(s)) for s in shape)


def _file_stem(example_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", example_id)


@dataclass
class StoreReport:
    n_indexed: int = 0
    missing_files: list[str] = field(default_factory=list)
    size_mismatches: list[str] = field(default_factory=list)
    shape_mismatches: list[str] = field(default_factory=list)
    duplicate_ids: list[str] = field(default_factory=list)
    orphan_files: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (
            self.missing_files or self.size_mismatches or self.shape_mismatches
            or self.duplicate_ids or self.orphan_files
        )

    def issues(self) -> pd.DataFrame:
        rows = [
            (name, issue)
            for issue, names in [
                ("missing file", self.missing_files),
                ("size mismatch", self.size_mismatches),
                ("shape mismatch", self.shape_mismatches),
                ("duplicate id", self.duplicate_ids),
                ("orphan file", self.orphan_files),
            ]
            for name in names
        ]
        return pd.DataFrame(rows, columns=["item", "issue"])


class FeatureStore:
    def __init__(self, root: Path, shape: Sequence[int] = STORE_SHAPE):
        self.root = Path(root)
        self.shape = tuple(int(s) for s in shape)
        self.index = self._load_index()

    @property
    def index_path(self) -> Path:
        return self.root / INDEX_NAME

    @property
    def n_values(self) -> int:
        return int(np.prod(self.shape))

    def __len__(self) -> int:
        return len(self.index)

    def __contains__(self, example_id: str) -> bool:
        return example_id in set(self.index["example_id"])

    def _load_index(self) -> pd.DataFrame:
        if not self.index_path.exists():
            return pd.DataFrame({c: pd.Series(dtype=str) for c in INDEX_COLS})
        try:
            df = pd.read_parquet(self.index_path)
        except Exception as e:
            raise CorruptStoreError(f"corrupt store: unreadable index {self.index_path} ({e})") from e
        missing = [c for c in INDEX_COLS if c not in df.columns]
        if missing:
            raise CorruptStoreError(f"corrupt store: index lacks columns {missing}")
        return df[INDEX_COLS].astype(str)

    def flush(self) -> None:
        """Write the index to a temporary file and rename it into place."""
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.index_path.with_name(INDEX_NAME + ".tmp")
        self.index.sort_values("example_id").reset_index(drop=True).to_parquet(tmp, index=False)
        os.replace(tmp, self.index_path)

    def _index_row(self, example: MelExample, split: str) -> dict:
        return {
            "example_id": example.example_id,
            "file": f"{DATA_DIR}/{_file_stem(example.example_id)}{DATA_SUFFIX}",
            "label": example.label,
            "split": split,
            "source_id": example.source_id or example.example_id,
            "shape": _shape_str(self.shape),
        }

    def write_example(self, example: MelExample, split: str = "", flush: bool = True) -> Path:
        self.write_examples([example], split_of=lambda _: split, flush=flush)
        return self.root / self._index_row(example, split)["file"]

    def write_examples(
        self,
        examples: Iterable[MelExample],
        split_of: Optional[Callable[[MelExample], str]] = None,
        replace_sources: bool = False,
        flush: bool = True,
    ) -> int:
        """Write feature files and merge their rows into the index in one step.

        Rows with the same example id are replaced. With ``replace_sources``
        every earlier row of a written source_id is dropped and its file
        removed, so a recording re-extracted into fewer segments leaves no
        stale ``__sNNN`` entries.
        """
        examples = list(examples)
        if not examples:
            return 0
        payloads = [encode_feature(ex.tensor, self.shape) for ex in examples]
        new = pd.DataFrame(
            [self._index_row(ex, split_of(ex) if split_of else "") for ex in examples], columns=INDEX_COLS
        ).drop_duplicates("example_id", keep="last")
        shared = new.loc[new["file"].duplicated(keep=False), "example_id"].tolist()
        if shared:
            raise ManifestError(f"example ids {shared} map to the same file")

        stale = self.index["example_id"].isin(new["example_id"])
        if replace_sources:
            stale |= self.index["source_id"].isin(new["source_id"])
        kept = self.index[~stale]
        clash = kept[kept["file"].isin(new["file"])]
        if not clash.empty:
            raise ManifestError(
                f"example ids {clash['example_id'].tolist()} already use the files of {new['example_id'].tolist()[:10]}"
            )

        (self.root / DATA_DIR).mkdir(parents=True, exist_ok=True)
        for ex, data in zip(examples, payloads):
            path = self.root / self._index_row(ex, "")["file"]
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, path)
        for rel in set(self.index.loc[stale, "file"]) - set(new["file"]):
            (self.root / rel).unlink(missing_ok=True)
            logger.debug("removed stale feature file %s", rel)

        self.index = pd.concat([kept, new], ignore_index=True)
        if flush:
            self.flush()
        return len(new)

    def _row(self, example_id: str) -> pd.Series:
        rows = self.index[self.index["example_id"] == example_id]
        if rows.empty:
            raise CorruptStoreError(f"example {example_id!r} is not in the store index")
        return rows.iloc[0]

    def read_example(self, example_id: str) -> MelExample:
        row = self._row(example_id)
        path = self.root / row["file"]
        if not path.exists():
            raise CorruptStoreError(f"corrupt store: indexed file {row['file']} is missing")
        tensor = decode_feature(path.read_bytes(), self.shape, row["file"])
        return MelExample(tensor, row["label"], row["example_id"], row["source_id"], {"split": row["split"]})

    def set_splits(self, split_of: Callable[[str], Optional[str]]) -> None:
        self.index["split"] = [split_of(i) or "" for i in self.index["example_id"]]
        self.flush()

    def load_feature_set(self, split: Optional[str] = None, ids: Optional[Sequence[str]] = None) -> FeatureSet:
        index = self.index.sort_values("example_id")
        if split is not None:
            index = index[index["split"] == split]
        if ids is not None:
            index = index[index["example_id"].isin(set(ids))]
        if index.empty:
            raise CorruptStoreError(f"no examples in the store for split={split!r}")
        return FeatureSet.from_examples([self.read_example(i) for i in index["example_id"]])

    def verify(self) -> StoreReport:
        report = StoreReport(n_indexed=len(self.index))
        report.duplicate_ids = sorted(self.index.loc[self.index["example_id"].duplicated(), "example_id"].unique())
        expected = self.n_values * FEATURE_DTYPE.itemsize
        for _, row in self.index.iterrows():
            path = self.root / row["file"]
            if row["shape"] != _shape_str(self.shape):
                report.shape_mismatches.append(row["example_id"])
            if not path.exists():
                report.missing_files.append(row["example_id"])
            elif path.stat().st_size != expected:
                report.size_mismatches.append(row["example_id"])
        data_dir = self.root / DATA_DIR
        if data_dir.exists():
            indexed = set(self.index["file"])
            report.orphan_files = sorted(
                f"{DATA_DIR}/{p.name}" for p in data_dir.glob(f"*{DATA_SUFFIX}") if f"{DATA_DIR}/{p.name}" not in indexed
            )
        return report


def verify_store(root: Path, shape: Sequence[int] = STORE_SHAPE) -> StoreReport:
    return FeatureStore(root, shape).verify()


def default_store_dir(cfg: PipelineConfig) -> Path:
    return Path(cfg.cache_dir) if cfg.cache_dir else processed_dir() / "feature_store"


def store_shape(cfg: FeatureConfig) -> tuple[int, int, int]:
    return (cfg.n_mels, cfg.n_frames, N_CHANNELS)


def load_store_features(cfg: PipelineConfig, store_dir: Optional[Path] = None) -> FeatureSet:
    """Every example of the configured store; Mel-only mode is applied on load."""
    store = FeatureStore(store_dir or default_store_dir(cfg), store_shape(cfg.features))
    if not store.index_path.exists():
        raise CorruptStoreError(f"Missing {store.index_path}")
    features = store.load_feature_set()
    return features.mel_only() if cfg.features.mel_only else features


def _extract_row(path: Path, example_id: str, label: str, cfg: FeatureConfig) -> tuple[str, list[MelExample], str]:
    try:
        return example_id, extract_file_examples(path, example_id, label, cfg), ""
    except AudioError as e:
        return example_id, [], str(e)


def extract_manifest(
    manifest: Manifest,
    store: FeatureStore,
    cfg: FeatureConfig,
    jobs: int = 1,
    progress: bool = True,
) -> dict:
    """Extract every manifest recording into ``store``; one failure does not stop the rest."""
    rows = manifest.frame
    splits = dict(zip(rows["example_id"], rows["split"])) if "split" in rows.columns else {}
    tasks = (
        delayed(_extract_row)(manifest.resolve(r.audio_path), r.example_id, r.class_label, cfg)
        for r in rows.itertuples(index=False)
    )
    results = Parallel(n_jobs=jobs)(
        tqdm(tasks, total=len(rows), desc="extracting", unit="file", disable=not progress)
    )
    failures = {eid: err for eid, _, err in results if err}
    examples = [ex for _, exs, _ in results for ex in exs]
    store.write_examples(examples, split_of=lambda ex: splits.get(ex.source_id, ""), replace_sources=True)
    for eid, err in failures.items():
        logger.error("%s: %s", eid, err)
    return {"files": len(rows), "examples": len(examples), "failures": failures}


def ingest_precomputed(
    manifest: Manifest,
    store: FeatureStore,
    cfg: FeatureConfig,
    is_db: bool = False,
    progress: bool = True,
) -> dict:
    """Ingest external ``.npy`` Mel matrices (n_mels x N) as three-channel examples."""
    rows = manifest.frame
    splits = dict(zip(rows["example_id"], rows["split"])) if "split" in rows.columns else {}
    failures, examples = {}, []
    for r in tqdm(list(rows.itertuples(index=False)), desc="ingesting", unit="file", disable=not progress):
        path = manifest.resolve(r.audio_path)
        try:
            matrix = np.load(path, allow_pickle=False)
            tensor = fit_precomputed(matrix, cfg, is_db=is_db)
        except (OSError, ValueError, ShapeError) as e:
            failures[r.example_id] = f"{path}: {e}"
            continue
        examples.append(MelExample(tensor, r.class_label, r.example_id, r.example_id, {"precomputed": True}))
    store.write_examples(examples, split_of=lambda ex: splits.get(ex.source_id, ""))
    for eid, err in failures.items():
        logger.error("%s: %s", eid, err)
    return {"files": len(rows), "examples": len(examples), "failures": failures}
