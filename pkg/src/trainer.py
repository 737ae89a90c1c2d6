"""Training loops: dynamic-margin triplet training and the cross-entropy baseline."""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from tqdm import tqdm

from audio_features import FeatureSet
from config import BaselineTrainConfig, MetricTrainConfig
from errors import TrainingDiverged, TrainingError, UnknownClassError, WrongHeadError
from msnet import NetworkHandle, save_checkpoint, to_network_input
from triplets import (
    MarginState,
    available_minibatches,
    build_minibatch,
    mine_semi_hard,
    scheduler_update,
    triplet_groups,
    triplet_loss,
)

logger = logging.getLogger(__name__)

SMOOTHING_WINDOW = 15


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    converged: bool = False
    converged_epoch: Optional[int] = None
    selected_epoch: Optional[int] = None
    wall_clock_s: float = 0.0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame.from_records(self.records)

    def epoch_frame(self) -> pd.DataFrame:
        return pd.DataFrame.from_records(self.epochs)

    def mined_counts(self) -> list[int]:
        return [int(r["mined"]) for r in self.records]

    def alphas(self) -> list[float]:
        return [float(r["alpha"]) for r in self.records]

    @classmethod
    def read_jsonl(cls, path: Path) -> "TrainLog":
        df = pd.read_json(path, orient="records", lines=True)
        return cls(records=df.to_dict(orient="records"))


class _JsonlWriter:
    """One JSON record per line; a no-op without a path."""

    def __init__(self, path: Optional[Path]):
        self.fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(path, "w", encoding="utf-8")

    def write(self, record: dict) -> None:
        if self.fh is not None:
            self.fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


def param_groups(module: torch.nn.Module, weight_decay: float) -> list[dict]:
    """L2 decay on weights only, never on biases."""
    decay, no_decay = [], []
    for name, p in module.named_parameters():
        (decay if name.endswith("weight") else no_decay).append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def smoothed_loss(losses, window: int = SMOOTHING_WINDOW) -> np.ndarray:
    return pd.Series(losses, dtype=float).rolling(window, min_periods=1).mean().to_numpy()


def _diverged(handle: NetworkHandle, diag_path: Optional[Path], message: str, where: dict) -> TrainingDiverged:
    if diag_path is not None:
        save_checkpoint(handle, diag_path, extra={"reason": message, **where})
        logger.error("%s; diagnostic checkpoint written to %s", message, diag_path)
    return TrainingDiverged(message, diag_path)


def _remap_group(group) -> tuple[np.ndarray, np.ndarray]:
    """Unique batch positions used by a triplet group and the triplets re-indexed onto them."""
    flat = np.array([(t.anchor, t.positive, t.negative) for t in group], dtype=np.int64)
    local, inverse = np.unique(flat, return_inverse=True)
    return local, inverse.reshape(flat.shape)


def train_metric(
    handle: NetworkHandle,
    dataset: FeatureSet,
    cfg: MetricTrainConfig,
    log_path: Optional[Path] = None,
    diag_path: Optional[Path] = None,
    progress: bool = True,
) -> tuple[NetworkHandle, TrainLog]:
    """Online semi-hard triplet training with the dynamic margin schedule.

    Each iteration draws a class-balanced mini-batch, mines semi-hard
    triplets at the current margin in inference mode, then feeds them in
    groups of at most ``triplet_batch_cap`` for weight updates. The margin
    state is updated with the mined count after the updates.
    """
    if handle.config.head != "metric":
        raise WrongHeadError("train_metric requires a metric-head network")
    labels = np.asarray(dataset.labels)
    if len(np.unique(labels)) < 2:
        raise TrainingError("metric training needs at least two classes")

    module = handle.module
    dtype = next(module.parameters()).dtype
    optimizer = torch.optim.Adagrad(param_groups(module, cfg.weight_decay), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    state = MarginState.from_config(cfg)
    iterations = min(cfg.minibatches_per_epoch, available_minibatches(labels, cfg.examples_per_class))
    log = TrainLog()
    writer = _JsonlWriter(log_path)
    started = time.perf_counter()
    logger.info(
        "metric training: %d classes, %d examples, %d epochs x %d mini-batches",
        len(np.unique(labels)), len(labels), cfg.epochs, iterations,
    )

    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            step = 0
            for epoch in tqdm(range(1, cfg.epochs + 1), desc="metric epochs", unit="epoch", disable=not progress):
                epoch_counts, epoch_losses = [], []
                for it in range(iterations):
                    plan = build_minibatch(labels, rng, cfg.examples_per_class, cfg.triplet_batch_cap)
                    batch = dataset.tensors[plan.indices]

                    module.eval()
                    with torch.no_grad():
                        emb = module(to_network_input(batch, handle.config, dtype)).cpu().numpy()
                    module.train()

                    alpha_used = state.alpha
                    triplets = mine_semi_hard(emb, plan.labels, alpha_used, cfg.triplet_batch_cap, rng)
                    loss_total, groups = 0.0, 0
                    for group in triplet_groups(triplets, cfg.triplet_batch_cap):
                        local, remapped = _remap_group(group)
                        out = module(to_network_input(batch[local], handle.config, dtype))
                        loss = triplet_loss(out, remapped, alpha_used)
                        if not torch.isfinite(loss):
                            raise _diverged(
                                handle, diag_path, f"non-finite triplet loss at epoch {epoch}, iteration {it}",
                                {"epoch": epoch, "iteration": it},
                            )
                        optimizer.zero_grad()
                        loss.backward()
                        optimizer.step()
                        loss_total += float(loss.item())
                        groups += 1

                    state = scheduler_update(state, len(triplets))
                    record = {
                        "epoch": epoch,
                        "iteration": step,
                        "loss": loss_total,
                        "mined": len(triplets),
                        "alpha_used": alpha_used,
                        "alpha": state.alpha,
                        "groups": groups,
                    }
                    log.records.append(record)
                    writer.write(record)
                    epoch_counts.append(len(triplets))
                    epoch_losses.append(loss_total)
                    step += 1

                summary = {
                    "epoch": epoch,
                    "iterations": iterations,
                    "mined_total": int(sum(epoch_counts)),
                    "mined_mean": float(np.mean(epoch_counts)),
                    "loss_mean": float(np.mean(epoch_losses)),
                    "alpha_end": state.alpha,
                }
                log.epochs.append(summary)
                logger.info(
                    "epoch %d: mined %d triplets, mean loss %.4f, alpha %.2f",
                    epoch, summary["mined_total"], summary["loss_mean"], state.alpha,
                )
                if state.at_cap and summary["mined_total"] == 0 and not log.converged:
                    log.converged = True
                    log.converged_epoch = epoch
                    logger.info("converged at epoch %d: no semi-hard triplets at alpha %.2f", epoch, state.alpha)
    finally:
        writer.close()
        module.eval()

    log.wall_clock_s = time.perf_counter() - started
    handle.meta = {"margin": state.alpha, "converged": log.converged, "iterations": len(log.records)}
    return handle, log


def _class_indices(labels, classes: tuple[str, ...]) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(classes)}
    unknown = sorted({str(l) for l in labels if l not in lookup})
    if unknown:
        raise UnknownClassError(f"labels not known to the network head: {unknown}")
    return np.array([lookup[l] for l in labels], dtype=np.int64)


def _mean_ce(module, tensors: np.ndarray, targets: np.ndarray, config, dtype, batch_size: int) -> float:
    total = 0.0
    module.eval()
    with torch.no_grad():
        for start in range(0, len(targets), batch_size):
            x = to_network_input(tensors[start:start + batch_size], config, dtype)
            y = torch.as_tensor(targets[start:start + batch_size])
            total += float(F.cross_entropy(module(x), y, reduction="sum"))
    return total / max(1, len(targets))


def train_baseline(
    handle: NetworkHandle,
    train: FeatureSet,
    val: Optional[FeatureSet],
    cfg: BaselineTrainConfig,
    log_path: Optional[Path] = None,
    diag_path: Optional[Path] = None,
    progress: bool = True,
) -> tuple[NetworkHandle, TrainLog]:
    """Cross-entropy training; keeps the epoch with the lowest validation loss."""
    if handle.config.head != "softmax":
        raise WrongHeadError("train_baseline requires a softmax-head network")
    if not handle.classes:
        raise TrainingError("softmax network has no class labels attached")
    module = handle.module
    dtype = next(module.parameters()).dtype
    y_train = _class_indices(train.labels, handle.classes)
    y_val = _class_indices(val.labels, handle.classes) if val is not None and len(val) else None
    if y_val is None:
        logger.warning("no validation examples; checkpoint selection falls back to training loss")

    optimizer = torch.optim.Adam(param_groups(module, cfg.weight_decay), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    log = TrainLog()
    writer = _JsonlWriter(log_path)
    best_loss, best_state = float("inf"), None
    started = time.perf_counter()

    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            step = 0
            for epoch in tqdm(range(1, cfg.epochs + 1), desc="baseline epochs", unit="epoch", disable=not progress):
                module.train()
                order = rng.permutation(len(y_train))
                losses, correct = [], 0
                for start in range(0, len(order), cfg.batch_size):
                    idx = order[start:start + cfg.batch_size]
                    x = to_network_input(train.tensors[idx], handle.config, dtype)
                    y = torch.as_tensor(y_train[idx])
                    logits = module(x)
                    loss = F.cross_entropy(logits, y)
                    if not torch.isfinite(loss):
                        raise _diverged(
                            handle, diag_path, f"non-finite cross-entropy at epoch {epoch}",
                            {"epoch": epoch, "iteration": step},
                        )
                    optimizer.zero_grad()
                    loss.backward()
                    optimizer.step()
                    correct += int((logits.argmax(dim=1) == y).sum())
                    record = {"epoch": epoch, "iteration": step, "loss": float(loss.item()), "batch": len(idx)}
                    log.records.append(record)
                    writer.write(record)
                    losses.append(float(loss.item()))
                    step += 1

                train_loss = _mean_ce(module, train.tensors, y_train, handle.config, dtype, cfg.batch_size)
                val_loss = (
                    _mean_ce(module, val.tensors, y_val, handle.config, dtype, cfg.batch_size)
                    if y_val is not None else train_loss
                )
                log.epochs.append({
                    "epoch": epoch,
                    "train_loss": train_loss,
                    "val_loss": val_loss,
                    "train_accuracy": correct / len(y_train),
                })
                if val_loss < best_loss:
                    best_loss = val_loss
                    best_state = copy.deepcopy(module.state_dict())
                    log.selected_epoch = epoch
                logger.info("epoch %d: train loss %.4f, val loss %.4f", epoch, train_loss, val_loss)
    finally:
        writer.close()

    if best_state is not None:
        module.load_state_dict(best_state)
    module.eval()
    log.wall_clock_s = time.perf_counter() - started
    handle.meta = {"selected_epoch": log.selected_epoch, "val_loss": best_loss}
    return handle, log
