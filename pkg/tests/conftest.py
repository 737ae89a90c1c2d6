from pathlib import Path

import numpy as np
import pytest

from audio_features import FeatureSet
from config import FeatureConfig, PipelineConfig, load_config

ROOT = Path(__file__).resolve().parents[1]
TINY_CONFIG = ROOT / "configs" / "tiny.yaml"


def tone(freq: float, seconds: float = 2.0, sr: int = 44100, amp: float = 0.5) -> np.ndarray:
    t = np.arange(int(round(seconds * sr))) / sr
    return amp * np.sin(2 * np.pi * freq * t)


def click_train(rate: float = 20.0, seconds: float = 2.0, sr: int = 44100) -> np.ndarray:
    out = np.zeros(int(round(seconds * sr)))
    out[:: int(round(sr / rate))] = 1.0
    return out


def separable_features(shape, n_classes: int = 3, per_class: int = 8, seed: int = 0) -> FeatureSet:
    """Random dB-like tensors with a class-specific bright Mel band."""
    rng = np.random.default_rng(seed)
    mel, frames, channels = shape
    tensors, labels, ids = [], [], []
    for c in range(n_classes):
        for k in range(per_class):
            x = rng.uniform(-80.0, -60.0, size=shape)
            x[(c * mel) // n_classes, :, :] = rng.uniform(-5.0, 0.0, size=(frames, channels))
            tensors.append(x)
            labels.append(f"class_{c}")
            ids.append(f"class_{c}_{k:03d}")
    return FeatureSet(
        np.stack(tensors).astype(np.float32),
        np.array(labels, dtype=object),
        np.array(ids, dtype=object),
    )


@pytest.fixture
def tiny_cfg() -> PipelineConfig:
    return load_config(TINY_CONFIG)


@pytest.fixture
def tiny_net_cfg(tiny_cfg):
    return tiny_cfg.network


@pytest.fixture
def feature_cfg() -> FeatureConfig:
    return FeatureConfig()


@pytest.fixture
def tiny_features(tiny_cfg) -> FeatureSet:
    return separable_features(tiny_cfg.network.input_shape)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
