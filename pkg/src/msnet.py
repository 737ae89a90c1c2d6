"""Multiscale CNN: three-channel Mel input -> unit-norm embedding or class probabilities.

Wiring: CONV1 -> (MAM -> strided CONV) x 4 -> GAP -> dense stack. Strides act
on the Mel axis only (40 -> 20 -> 10 -> 5 -> 1); the time axis keeps its length.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import ValidationError
from torch import nn

from config import NetworkConfig
from errors import CheckpointError, NetworkConfigError, ShapeError, WrongHeadError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "msnet-checkpoint/1"
REFERENCE_PARAM_COUNT = 1_286_410
PARAM_COUNT_TOLERANCE = 0.10


class ConvReLU(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride=1):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride, padding=kernel_size // 2),
            nn.ReLU(),
        )


class MultiscaleAnalysisModule(nn.Module):
    """Four parallel strands: 1x1, and 1x1-reduce followed by k x k for each k."""

    def __init__(self, in_channels: int, width_1x1: int, reduce: int, strand: int, kernels: Sequence[int]):
        super().__init__()
        self.in_channels = in_channels
        self.strand_1x1 = ConvReLU(in_channels, width_1x1, 1)
        self.strands = nn.ModuleList(
            nn.Sequential(ConvReLU(in_channels, reduce, 1), ConvReLU(reduce, strand, k)) for k in kernels
        )
        self.out_channels = width_1x1 + strand * len(kernels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.strand_1x1(x)] + [s(x) for s in self.strands], dim=1)


def global_average_pool(maps: torch.Tensor) -> torch.Tensor:
    """[N, C, mel, frame] -> [N, C], the mean over both spatial axes."""
    return maps.mean(dim=(2, 3))


class MultiscaleCNN(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        in_channels = config.input_shape[2]
        width = config.conv_filters
        self.conv1 = ConvReLU(in_channels, width, 3)
        self.mams = nn.ModuleList()
        self.bottlenecks = nn.ModuleList()
        for stride in config.mel_strides:
            mam = MultiscaleAnalysisModule(
                width, config.mam_1x1, config.mam_reduce, config.mam_strand, config.mam_kernels
            )
            self.mams.append(mam)
            self.bottlenecks.append(ConvReLU(mam.out_channels, width, 3, stride=(stride, 1)))

        d0, d1, d2 = config.dense_units
        out_units = d2 if config.head == "metric" else config.n_classes
        self.dense = nn.Sequential(
            nn.Dropout(config.dropout),
            nn.Linear(width, d0),
            nn.ReLU(),
            nn.Dropout(config.dropout),
            nn.Linear(d0, d1),
            nn.ReLU(),
            nn.Dropout(config.dropout),
            nn.Linear(d1, out_units),
        )

    def feature_maps(self, x: torch.Tensor) -> torch.Tensor:
        """Maps after the last bottleneck, [N, C, 1, frames] for a full-size input."""
        x = self.conv1(x)
        for mam, bottleneck in zip(self.mams, self.bottlenecks):
            x = bottleneck(mam(x))
        return x

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        return global_average_pool(self.feature_maps(x))

    def project(self, pooled: torch.Tensor) -> torch.Tensor:
        out = self.dense(pooled)
        if self.config.head == "metric":
            return F.normalize(out, p=2, dim=1)
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.project(self.pooled(x))


@dataclass
class NetworkHandle:
    module: MultiscaleCNN
    config: NetworkConfig
    seed: int
    classes: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    @property
    def param_count(self) -> int:
        return count_parameters(self.module)


@dataclass(frozen=True, eq=False)
class Embedding:
    values: np.ndarray
    example_id: str
    label: Optional[str] = None


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def mel_shape_chain(config: NetworkConfig) -> list[int]:
    """Mel-axis length after the input, CONV1 and each strided CONV."""
    n = config.input_shape[0]
    chain = [n, n]
    for stride in config.mel_strides:
        if stride < 1 or n % stride != 0:
            raise NetworkConfigError(
                f"Mel axis of {config.input_shape[0]} bands is not reducible by strides {config.mel_strides}"
            )
        n //= stride
        chain.append(n)
    if n != 1:
        raise NetworkConfigError(
            f"Mel axis of {config.input_shape[0]} bands ends at {n} after strides {config.mel_strides}, expected 1"
        )
    return chain


def build_network(config: NetworkConfig, seed: int = 0, classes: Sequence[str] = ()) -> NetworkHandle:
    mel_shape_chain(config)
    if config.head == "softmax" and classes and len(classes) != config.n_classes:
        raise NetworkConfigError(f"{len(classes)} class labels for a {config.n_classes}-unit softmax head")
    # default torch init: fan-in scaled uniform; seeded without touching the global RNG
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = MultiscaleCNN(config)
    module.eval()
    handle = NetworkHandle(module=module, config=config, seed=seed, classes=tuple(classes))
    logger.debug("built %s-head network with %d parameters", config.head, handle.param_count)
    return handle


def param_count_delta(handle: NetworkHandle) -> dict:
    count = handle.param_count
    delta = count - REFERENCE_PARAM_COUNT
    return {
        "param_count": count,
        "reference": REFERENCE_PARAM_COUNT,
        "delta": delta,
        "relative_delta": delta / REFERENCE_PARAM_COUNT,
        "within_band": abs(delta) <= PARAM_COUNT_TOLERANCE * REFERENCE_PARAM_COUNT,
    }


def trace_shapes(handle: NetworkHandle) -> dict:
    """Run a zero input through the network and record intermediate shapes."""
    module = handle.module
    mel, frames, channels = handle.config.input_shape
    param = next(module.parameters())
    x = torch.zeros(1, channels, mel, frames, dtype=param.dtype)
    shapes = {"input": tuple(x.shape[1:])}
    with torch.no_grad():
        x = module.conv1(x)
        shapes["conv1"] = tuple(x.shape[1:])
        for i, (mam, bottleneck) in enumerate(zip(module.mams, module.bottlenecks), start=1):
            x = mam(x)
            shapes[f"mam{i}"] = tuple(x.shape[1:])
            x = bottleneck(x)
            shapes[f"conv{i + 1}"] = tuple(x.shape[1:])
        pooled = global_average_pool(x)
        shapes["gap"] = tuple(pooled.shape[1:])
        shapes["output"] = tuple(module.dense(pooled).shape[1:])
    return shapes


def _as_array(batch) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        arr = batch
    else:
        batch = list(batch)
        if not batch:
            raise ShapeError("empty batch")
        arr = np.stack([getattr(ex, "tensor", ex) for ex in batch])
    if arr.ndim == 3:
        arr = arr[None]
    if arr.shape[0] == 0:
        raise ShapeError("empty batch")
    return arr


def to_network_input(arr: np.ndarray, config: NetworkConfig, dtype=torch.float32) -> torch.Tensor:
    """[N, mel, frame, channel] array -> [N, channel, mel, frame] tensor."""
    if tuple(arr.shape[1:]) != tuple(config.input_shape):
        raise ShapeError(f"input shape {tuple(arr.shape[1:])} does not match network {config.input_shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError("input contains NaN/Inf")
    return torch.as_tensor(np.ascontiguousarray(arr)).to(dtype).permute(0, 3, 1, 2).contiguous()


def _forward_array(handle: NetworkHandle, arr: np.ndarray, batch_size: int) -> np.ndarray:
    module = handle.module
    dtype = next(module.parameters()).dtype
    was_training = module.training
    module.eval()
    outputs = []
    try:
        with torch.no_grad():
            for start in range(0, arr.shape[0], batch_size):
                x = to_network_input(arr[start:start + batch_size], handle.config, dtype)
                outputs.append(module(x).cpu().numpy())
    finally:
        module.train(was_training)
    return np.concatenate(outputs, axis=0)


def embed_array(handle: NetworkHandle, batch, batch_size: int = 64) -> np.ndarray:
    if handle.config.head != "metric":
        raise WrongHeadError("embedding requires a metric-head network")
    return _forward_array(handle, _as_array(batch), batch_size)


def embed_forward(handle: NetworkHandle, batch) -> list[Embedding]:
    batch = list(batch) if not isinstance(batch, np.ndarray) else batch
    values = embed_array(handle, batch)
    if isinstance(batch, np.ndarray):
        return [Embedding(v, example_id=str(i)) for i, v in enumerate(values)]
    return [
        Embedding(v, example_id=getattr(ex, "example_id", str(i)), label=getattr(ex, "label", None))
        for i, (v, ex) in enumerate(zip(values, batch))
    ]


def softmax_forward(handle: NetworkHandle, batch, batch_size: int = 64) -> np.ndarray:
    if handle.config.head != "softmax":
        raise WrongHeadError("wrong head: softmax_forward requires a softmax-head network")
    logits = _forward_array(handle, _as_array(batch), batch_size).astype(np.float64)
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    return probs / probs.sum(axis=1, keepdims=True)


def mam_forward(mam: MultiscaleAnalysisModule, maps: Union[np.ndarray, torch.Tensor]) -> np.ndarray:
    """Apply one multiscale module to [H, W, C] (or [N, H, W, C]) feature maps."""
    arr = np.asarray(maps.detach().cpu().numpy() if isinstance(maps, torch.Tensor) else maps)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != mam.in_channels:
        raise ShapeError(f"multiscale module expects {mam.in_channels} input channels, got shape {arr.shape}")
    dtype = next(mam.parameters()).dtype
    x = torch.as_tensor(arr).to(dtype).permute(0, 3, 1, 2)
    with torch.no_grad():
        out = mam(x).permute(0, 2, 3, 1).cpu().numpy()
    return out[0] if single else out


def _atomic_torch_save(payload: dict, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def save_checkpoint(handle: NetworkHandle, path: Path, extra: Optional[dict] = None) -> Path:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": handle.config.model_dump(mode="json"),
        "seed": int(handle.seed),
        "classes": list(handle.classes),
        "state_dict": handle.module.state_dict(),
        "extra": dict(extra or {}),
    }
    _atomic_torch_save(payload, path)
    return Path(path)


def load_checkpoint(path: Path, expected_config: Optional[NetworkConfig] = None) -> NetworkHandle:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Missing checkpoint {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({type(e).__name__}: {e})") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    try:
        config = NetworkConfig.model_validate(payload["config"])
    except (KeyError, ValidationError) as e:
        raise CheckpointError(f"{path}: invalid config echo ({e})") from e
    if expected_config is not None and config != expected_config:
        diff = sorted(
            k for k, v in expected_config.model_dump().items() if config.model_dump().get(k) != v
        )
        raise CheckpointError(f"{path}: checkpoint config differs from expected in {diff}")
    handle = build_network(config, int(payload.get("seed", 0)), payload.get("classes", ()))
    try:
        handle.module.load_state_dict(payload["state_dict"], strict=True)
    except (KeyError, RuntimeError) as e:
        raise CheckpointError(f"{path}: weights do not match the config ({e})") from e
    handle.meta = dict(payload.get("extra", {}))
    return handle


def checkpoint_roundtrip(handle: NetworkHandle, path: Path) -> NetworkHandle:
    save_checkpoint(handle, path)
    return load_checkpoint(path, expected_config=handle.config)
