"""Desk-scale synthetic call dataset.

Six signature classes that stay distinguishable after a 40-band Mel
projection. Every clip is generated from its own seeded generator, so a
given (seed, class, index) always yields the same waveform.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd
import soundfile as sf
from scipy import signal

from audio_features import FeatureSet, load_and_segment, mel_three_channel, segment_example_id
from config import FeatureConfig

logger = logging.getLogger(__name__)

PER_CLASS = 50
NOISE_FLOOR = 0.01


def _t(n: int, sr: int) -> np.ndarray:
    return np.arange(n) / float(sr)


def steady_tone(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    f0 = rng.uniform(900.0, 1100.0)
    return np.sin(2 * np.pi * f0 * _t(n, sr) + rng.uniform(0, 2 * np.pi))


def rising_chirp(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    t = _t(n, sr)
    f0, f1 = rng.uniform(1400.0, 1700.0), rng.uniform(4200.0, 4800.0)
    return signal.chirp(t, f0=f0, t1=t[-1], f1=f1, method="linear")


def falling_chirp(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    t = _t(n, sr)
    f0, f1 = rng.uniform(4200.0, 4800.0), rng.uniform(1400.0, 1700.0)
    return signal.chirp(t, f0=f0, t1=t[-1], f1=f1, method="linear")


def noise_bursts(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    sos = signal.butter(4, [2000.0, min(8000.0, 0.45 * sr)], btype="bandpass", fs=sr, output="sos")
    noise = signal.sosfilt(sos, rng.standard_normal(n))
    noise /= np.max(np.abs(noise)) + 1e-12
    gate = np.zeros(n)
    burst = int(0.05 * sr)
    period = max(burst + 1, n // 5)
    for start in range(int(rng.integers(0, period - burst)), n - burst, period):
        gate[start:start + burst] = 1.0
    return noise * gate


def click_train(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    rate = rng.uniform(18.0, 22.0)
    out = np.zeros(n)
    out[np.arange(int(rng.integers(0, sr // 40)), n, int(round(sr / rate)))] = 1.0
    return out


def two_tone_trill(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    t = _t(n, sr)
    lo, hi = rng.uniform(1900.0, 2100.0), rng.uniform(2900.0, 3100.0)
    switch = signal.square(2 * np.pi * rng.uniform(7.0, 9.0) * t) > 0
    return np.where(switch, np.sin(2 * np.pi * hi * t), np.sin(2 * np.pi * lo * t))


SIGNATURES: dict[str, Callable[[np.random.Generator, int, int], np.ndarray]] = {
    "steady_tone": steady_tone,
    "rising_chirp": rising_chirp,
    "falling_chirp": falling_chirp,
    "noise_bursts": noise_bursts,
    "click_train": click_train,
    "two_tone_trill": two_tone_trill,
}
SYNTH_CLASSES = tuple(SIGNATURES)


def synth_clip(label: str, index: int, seed: int, sample_rate: int, seconds: float) -> np.ndarray:
    class_idx = SYNTH_CLASSES.index(label)
    rng = np.random.default_rng([seed, class_idx, index])
    n = int(round(seconds * sample_rate))
    clip = SIGNATURES[label](rng, n, sample_rate)
    clip = rng.uniform(0.3, 0.9) * clip / (np.max(np.abs(clip)) + 1e-12)
    return clip + NOISE_FLOOR * rng.standard_normal(n)


def synth_rows(seed: int, per_class: int = PER_CLASS, classes: Sequence[str] = SYNTH_CLASSES) -> list[tuple[str, str, int]]:
    return [(f"{label}_{k:03d}", label, k) for label in classes for k in range(per_class)]


def write_dataset(
    out_dir: Path,
    cfg: FeatureConfig,
    seed: int = 0,
    per_class: int = PER_CLASS,
    classes: Sequence[str] = SYNTH_CLASSES,
) -> pd.DataFrame:
    """Write one WAV per clip under ``out_dir/audio`` and return the manifest rows."""
    audio_dir = Path(out_dir) / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for example_id, label, k in synth_rows(seed, per_class, classes):
        clip = synth_clip(label, k, seed, cfg.sample_rate, cfg.segment_seconds)
        sf.write(audio_dir / f"{example_id}.wav", clip.astype(np.float32), cfg.sample_rate, subtype="FLOAT")
        rows.append({
            "example_id": example_id,
            "audio_path": f"audio/{example_id}.wav",
            "class_label": label,
            "duration_s": f"{cfg.segment_seconds:g}",
        })
    logger.info("wrote %d synthetic clips to %s", len(rows), audio_dir)
    return pd.DataFrame(rows)


def synth_feature_set(
    cfg: FeatureConfig,
    seed: int = 0,
    per_class: int = PER_CLASS,
    classes: Sequence[str] = SYNTH_CLASSES,
) -> FeatureSet:
    """The same clips as ``write_dataset``, featurized in memory."""
    examples = []
    for example_id, label, k in synth_rows(seed, per_class, classes):
        clip = synth_clip(label, k, seed, cfg.sample_rate, cfg.segment_seconds)
        seg = load_and_segment(clip, cfg.sample_rate, example_id, label, cfg.segment_seconds)[0]
        examples.append(mel_three_channel(seg, mel_only=cfg.mel_only, cfg=cfg, example_id=segment_example_id(example_id, 0)))
    return FeatureSet.from_examples(examples)
