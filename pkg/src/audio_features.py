"""Three-channel Mel features: Mel, harmonic-Mel and percussive-Mel.

Recordings are cut into fixed 2 s segments, analysed with a 20 ms / 50 %
overlap STFT, split into harmonic and percussive parts by median-filter
HPSS, projected on a 40-band Mel filterbank and converted to dB with the
maximum of every channel at 0 dB.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import librosa
import numpy as np
import soundfile as sf
from scipy.ndimage import median_filter

from config import FeatureConfig
from errors import AudioError, ShapeError

logger = logging.getLogger(__name__)

AMIN = 1e-10
CHANNELS = ("mel", "harmonic_mel", "percussive_mel")


@dataclass(frozen=True, eq=False)
class AudioSegment:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""
    class_label: str = ""

    @property
    def duration_s(self) -> float:
        return len(self.samples) / float(self.sample_rate)


@dataclass(frozen=True, eq=False)
class Spectrogram:
    magnitudes: np.ndarray  # [freq_bins, frames], nonnegative
    frame_size_ms: float = 20.0
    overlap: float = 0.5
    fft_size: int = 1024

    @property
    def shape(self) -> tuple[int, int]:
        return self.magnitudes.shape

    def with_magnitudes(self, magnitudes: np.ndarray) -> "Spectrogram":
        return Spectrogram(magnitudes, self.frame_size_ms, self.overlap, self.fft_size)


@dataclass(frozen=True, eq=False)
class MelExample:
    tensor: np.ndarray  # float32 [mel, frame, channel]
    label: str
    example_id: str
    source_id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Stacked MelExamples: tensors [N, mel, frame, channel] with labels and ids."""

    tensors: np.ndarray
    labels: np.ndarray
    example_ids: np.ndarray

    def __post_init__(self):
        if not (len(self.tensors) == len(self.labels) == len(self.example_ids)):
            raise ShapeError("tensors, labels and example ids differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def classes(self) -> list[str]:
        return sorted(np.unique(self.labels).tolist())

    @classmethod
    def from_examples(cls, examples: list[MelExample]) -> "FeatureSet":
        if not examples:
            raise ShapeError("no examples")
        return cls(
            tensors=np.stack([ex.tensor for ex in examples]).astype(np.float32),
            labels=np.array([ex.label for ex in examples], dtype=object),
            example_ids=np.array([ex.example_id for ex in examples], dtype=object),
        )

    def subset(self, selector) -> "FeatureSet":
        return FeatureSet(self.tensors[selector], self.labels[selector], self.example_ids[selector])

    def mel_only(self) -> "FeatureSet":
        return FeatureSet(to_mel_only(self.tensors), self.labels, self.example_ids)


def read_audio(path: Path, target_rate: int) -> np.ndarray:
    """Read a PCM/float WAV as mono float64 at ``target_rate``."""
    try:
        data, sr = sf.read(str(path), dtype="float64", always_2d=True)
    except (RuntimeError, sf.LibsndfileError) as e:
        raise AudioError(f"{path}: corrupt audio ({e})") from e
    mono = data.mean(axis=1)
    if sr != target_rate:
        logger.debug("resampling %s from %d Hz to %d Hz", path, sr, target_rate)
        mono = resample_linear(mono, sr, target_rate)
    return mono


def resample_linear(audio: np.ndarray, orig_rate: int, target_rate: int) -> np.ndarray:
    if orig_rate <= 0 or target_rate <= 0:
        raise AudioError("sample rates must be positive")
    if len(audio) == 0:
        return np.asarray(audio, dtype=np.float64)
    n_out = max(1, int(round(len(audio) * target_rate / orig_rate)))
    t_in = np.arange(len(audio)) / float(orig_rate)
    t_out = np.arange(n_out) / float(target_rate)
    return np.interp(t_out, t_in, audio)


def load_and_segment(
    audio,
    sample_rate: int,
    source_id: str = "",
    class_label: str = "",
    segment_seconds: float = 2.0,
) -> list[AudioSegment]:
    """Cut a recording into non-overlapping fixed-length segments.

    Clips shorter than one segment are repeated cyclically from the
    beginning; the sub-segment tail of longer recordings is discarded.
    """
    if sample_rate <= 0:
        raise AudioError("sample_rate must be positive")
    audio = np.asarray(audio, dtype=np.float64).ravel()
    if audio.size == 0:
        raise AudioError("empty input")
    if not np.all(np.isfinite(audio)):
        raise AudioError("corrupt audio")

    seg_len = int(round(segment_seconds * sample_rate))
    if audio.size < seg_len:
        # np.resize repeats the clip from the beginning
        return [AudioSegment(np.resize(audio, seg_len), sample_rate, source_id, class_label)]

    n_segments = audio.size // seg_len
    return [
        AudioSegment(audio[k * seg_len:(k + 1) * seg_len].copy(), sample_rate, source_id, class_label)
        for k in range(n_segments)
    ]


def stft_magnitude(samples: np.ndarray, cfg: FeatureConfig) -> Spectrogram:
    stft = librosa.stft(
        np.asarray(samples, dtype=np.float64),
        n_fft=cfg.n_fft,
        hop_length=cfg.hop_length,
        win_length=cfg.frame_length,
        window=cfg.window,
        center=True,
        pad_mode="constant",
    )
    return Spectrogram(np.abs(stft), cfg.frame_ms, cfg.overlap, cfg.n_fft)


def hpss(spec: Spectrogram, kernel_size: int = 17, power: float = 2.0) -> tuple[Spectrogram, Spectrogram]:
    """Median-filter harmonic/percussive separation with soft masks.

    Time-direction filtering enhances harmonics, frequency-direction
    filtering enhances percussives. Bins where both filtered maps are zero
    get a 0.5/0.5 mask, so H + P reproduces the input everywhere.
    """
    S = np.asarray(spec.magnitudes)
    if np.any(S < 0):
        raise ShapeError("hpss expects a nonnegative spectrogram")
    if not np.any(S):
        zeros = np.zeros_like(S)
        return spec.with_magnitudes(zeros), spec.with_magnitudes(zeros.copy())
    harm = median_filter(S, size=(1, kernel_size), mode="reflect")
    perc = median_filter(S, size=(kernel_size, 1), mode="reflect")
    mask_h = librosa.util.softmask(harm, perc, power=power, split_zeros=True)
    harmonic = S * mask_h
    percussive = S * (1.0 - mask_h)
    return spec.with_magnitudes(harmonic), spec.with_magnitudes(percussive)


@lru_cache(maxsize=8)
def _mel_basis(sr: int, n_fft: int, n_mels: int, fmin: float, fmax: Optional[float], norm: Optional[str]) -> np.ndarray:
    return librosa.filters.mel(sr=sr, n_fft=n_fft, n_mels=n_mels, fmin=fmin, fmax=fmax, norm=norm)


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    fmax = cfg.fmax if cfg.fmax is not None else cfg.sample_rate / 2.0
    return _mel_basis(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, fmax, cfg.mel_norm)


def fit_frames(x: np.ndarray, n_frames: int) -> np.ndarray:
    """Crop or cyclically repeat the frame axis (axis 1) to ``n_frames``."""
    frames = x.shape[1]
    if frames == n_frames:
        return x
    if frames == 0:
        raise ShapeError("cannot fit an input with zero frames")
    return np.take(x, np.arange(n_frames) % frames, axis=1)


def _check_segment(seg: AudioSegment, cfg: FeatureConfig) -> None:
    if seg.sample_rate != cfg.sample_rate:
        raise AudioError(f"{seg.source_id}: segment at {seg.sample_rate} Hz, features expect {cfg.sample_rate} Hz")
    if len(seg.samples) != cfg.segment_samples:
        raise AudioError(
            f"{seg.source_id}: segment has {len(seg.samples)} samples, expected {cfg.segment_samples}"
        )
    if not np.all(np.isfinite(seg.samples)):
        raise AudioError(f"{seg.source_id}: corrupt audio")


def three_channel_mel_power(seg: AudioSegment, cfg: FeatureConfig, mel_only: bool = False) -> np.ndarray:
    """Linear-domain Mel power, shape [n_mels, n_frames, 3]."""
    _check_segment(seg, cfg)
    spec = stft_magnitude(seg.samples, cfg)
    basis = mel_filterbank(cfg)
    mel = basis @ (spec.magnitudes ** 2)
    if mel_only:
        channels = [mel, mel, mel]
    else:
        harmonic, percussive = hpss(spec, cfg.hpss_kernel, cfg.hpss_power)
        channels = [mel, basis @ (harmonic.magnitudes ** 2), basis @ (percussive.magnitudes ** 2)]
    stacked = np.stack([fit_frames(c, cfg.n_frames) for c in channels], axis=-1)
    return stacked


def power_to_normalized_db(power: np.ndarray, floor_db: float) -> np.ndarray:
    """dB relative to the channel maximum, floored; silent channels become the floor."""
    if not np.any(power > AMIN):
        return np.full(power.shape, floor_db, dtype=np.float64)
    return librosa.power_to_db(power, ref=np.max, amin=AMIN, top_db=-floor_db)


def normalize_channels(power: np.ndarray, floor_db: float) -> np.ndarray:
    out = np.empty(power.shape, dtype=np.float32)
    for c in range(power.shape[-1]):
        out[..., c] = power_to_normalized_db(power[..., c], floor_db)
    return out


def mel_three_channel(
    seg: AudioSegment,
    mel_only: bool = False,
    cfg: Optional[FeatureConfig] = None,
    example_id: Optional[str] = None,
) -> MelExample:
    cfg = cfg or FeatureConfig()
    power = three_channel_mel_power(seg, cfg, mel_only=mel_only)
    tensor = normalize_channels(power, cfg.silence_floor_db)
    return MelExample(
        tensor=tensor,
        label=seg.class_label,
        example_id=example_id or seg.source_id,
        source_id=seg.source_id,
        meta={"mel_only": bool(mel_only)},
    )


def to_mel_only(tensor: np.ndarray) -> np.ndarray:
    """Replace the harmonic and percussive channels by copies of channel 0."""
    out = np.array(tensor, copy=True)
    out[..., 1] = out[..., 0]
    out[..., 2] = out[..., 0]
    return out


def fit_precomputed(matrix: np.ndarray, cfg: FeatureConfig, is_db: bool = False) -> np.ndarray:
    """Turn an external [n_mels x N] Mel matrix into a three-channel tensor.

    Frames are cyclically repeated (or cropped) to ``n_frames``; the single
    channel is copied into all three.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != cfg.n_mels:
        raise ShapeError(f"pre-computed Mel matrix must be {cfg.n_mels} x N, got {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise ShapeError("pre-computed Mel matrix contains NaN/Inf")
    fitted = fit_frames(matrix, cfg.n_frames)
    if is_db:
        db = np.maximum(fitted - fitted.max(), cfg.silence_floor_db)
    else:
        db = power_to_normalized_db(np.maximum(fitted, 0.0), cfg.silence_floor_db)
    return np.repeat(db[..., None], 3, axis=-1).astype(np.float32)


def segment_example_id(example_id: str, k: int) -> str:
    return f"{example_id}__s{k:03d}"


def extract_file_examples(
    path: Path,
    example_id: str,
    label: str,
    cfg: FeatureConfig,
) -> list[MelExample]:
    """Recording on disk -> MelExamples, one per 2 s segment."""
    audio = read_audio(path, cfg.sample_rate)
    try:
        segments = load_and_segment(audio, cfg.sample_rate, example_id, label, cfg.segment_seconds)
    except AudioError as e:
        raise AudioError(f"{path}: {e}") from e
    return [
        mel_three_channel(seg, mel_only=cfg.mel_only, cfg=cfg, example_id=segment_example_id(example_id, k))
        for k, seg in enumerate(segments)
    ]
