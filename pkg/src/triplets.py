"""Triplet machinery for online semi-hard mining with a dynamic margin."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterator, Optional, Sequence, Union

import numpy as np
import torch

from config import MetricTrainConfig
from errors import MiningError

logger = logging.getLogger(__name__)

ALPHA_INIT = 0.2
ALPHA_STEP = 0.05
ALPHA_CAP = 0.6
THRESH = 15
WINDOW = 3
TRIPLET_BATCH_CAP = 50
EXAMPLES_PER_CLASS = 5


class Hardness(str, Enum):
    HARD = "hard"
    SEMI_HARD = "semi-hard"
    SATISFIED = "satisfied"


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int
    d_ap: float
    d_an: float
    hardness: Hardness = Hardness.SEMI_HARD


@dataclass(frozen=True)
class MarginState:
    alpha: float = ALPHA_INIT
    count_list: tuple[int, ...] = ()
    since_update: int = 0  # counts appended since the last increment
    thresh: int = THRESH
    alpha_step: float = ALPHA_STEP
    alpha_cap: float = ALPHA_CAP
    alpha_init: float = ALPHA_INIT

    @classmethod
    def from_config(cls, cfg: MetricTrainConfig) -> "MarginState":
        return cls(
            alpha=cfg.alpha_init,
            thresh=cfg.thresh,
            alpha_step=cfg.alpha_step,
            alpha_cap=cfg.alpha_cap,
            alpha_init=cfg.alpha_init,
        )

    @property
    def at_cap(self) -> bool:
        return self.alpha >= self.alpha_cap - 1e-12


@dataclass(frozen=True, eq=False)
class BatchPlan:
    indices: np.ndarray
    labels: np.ndarray
    by_class: dict
    triplet_batch_cap: int = TRIPLET_BATCH_CAP

    def __len__(self) -> int:
        return len(self.indices)


def _as_matrix(embeddings) -> np.ndarray:
    if isinstance(embeddings, torch.Tensor):
        arr = embeddings.detach().cpu().numpy()
    elif isinstance(embeddings, np.ndarray):
        arr = embeddings
    else:
        embeddings = list(embeddings)
        if not embeddings:
            raise MiningError("no embeddings")
        arr = np.stack([getattr(e, "values", e) for e in embeddings])
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise MiningError(f"expected a non-empty [N, D] embedding matrix, got shape {arr.shape}")
    return arr


def pairwise_sq_distances(embeddings) -> np.ndarray:
    """Squared Euclidean distances; symmetric with an exact zero diagonal."""
    X = _as_matrix(embeddings)
    diff = X[:, None, :] - X[None, :, :]
    D = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(D, 0.0)
    return D


def classify_triplet(d_ap: float, d_an: float, alpha: float) -> Hardness:
    """Hard when the negative is not farther than the positive, semi-hard inside the margin band.

    Boundaries: d_an == d_ap is hard, d_an == d_ap + alpha is satisfied.
    """
    if d_ap < 0 or d_an < 0:
        raise MiningError(f"distances must be nonnegative, got d_ap={d_ap}, d_an={d_an}")
    if alpha <= 0:
        raise MiningError(f"margin must be positive, got {alpha}")
    if d_an <= d_ap:
        return Hardness.HARD
    if d_an < d_ap + alpha:
        return Hardness.SEMI_HARD
    return Hardness.SATISFIED


def semi_hard_mask(distances: np.ndarray, labels: np.ndarray, alpha: float) -> np.ndarray:
    """Boolean [a, p, n] mask of semi-hard triplets over Euclidean distances."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    positive = same & ~np.eye(len(labels), dtype=bool)
    d_ap = distances[:, :, None]
    d_an = distances[:, None, :]
    return positive[:, :, None] & ~same[:, None, :] & (d_an > d_ap) & (d_an < d_ap + alpha)


def mine_semi_hard(
    embeddings,
    labels: Sequence,
    alpha: float,
    cap: int = TRIPLET_BATCH_CAP,
    rng: Union[np.random.Generator, int, None] = None,
) -> list[Triplet]:
    """One semi-hard negative per (anchor, positive) pair that has any.

    The negative is drawn uniformly among the pair's semi-hard candidates.
    ``cap`` only shapes how ``triplet_groups`` later chunks the result.
    """
    if alpha <= 0:
        raise MiningError(f"margin must be positive, got {alpha}")
    if cap < 1:
        raise MiningError("triplet batch cap must be >= 1")
    X = _as_matrix(embeddings)
    labels = np.asarray(labels)
    if len(labels) != X.shape[0]:
        raise MiningError(f"{len(labels)} labels for {X.shape[0]} embeddings")
    if len(np.unique(labels)) < 2:
        return []
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)

    D = np.sqrt(pairwise_sq_distances(X))
    mask = semi_hard_mask(D, labels, alpha)
    triplets = []
    for a, p in np.argwhere(mask.any(axis=2)):
        candidates = np.flatnonzero(mask[a, p])
        n = int(rng.choice(candidates))
        triplets.append(Triplet(int(a), int(p), n, float(D[a, p]), float(D[a, n]), Hardness.SEMI_HARD))
    return triplets


def triplet_groups(triplets: Sequence[Triplet], cap: int = TRIPLET_BATCH_CAP) -> Iterator[list[Triplet]]:
    for start in range(0, len(triplets), cap):
        yield list(triplets[start:start + cap])


def _triplet_index(triplets) -> np.ndarray:
    if isinstance(triplets, np.ndarray):
        return triplets.astype(np.int64).reshape(-1, 3)
    return np.array([(t.anchor, t.positive, t.negative) for t in triplets], dtype=np.int64).reshape(-1, 3)


def triplet_loss(embeddings, triplets, alpha: float):
    """Sum over triplets of max(|a-p|^2 - |a-n|^2 + alpha, 0).

    Torch input returns a differentiable scalar tensor; array input a float.
    """
    as_tensor = isinstance(embeddings, torch.Tensor)
    E = embeddings if as_tensor else torch.as_tensor(_as_matrix(embeddings))
    if len(triplets) == 0:
        zero = E.new_zeros(())
        return zero if as_tensor else 0.0
    idx = torch.as_tensor(_triplet_index(triplets), device=E.device)
    if int(idx.max()) >= E.shape[0] or int(idx.min()) < 0:
        raise MiningError("triplet index outside the embedding batch")
    a, p, n = E[idx[:, 0]], E[idx[:, 1]], E[idx[:, 2]]
    d_ap = (a - p).pow(2).sum(dim=1)
    d_an = (a - n).pow(2).sum(dim=1)
    loss = torch.clamp(d_ap - d_an + alpha, min=0.0).sum()
    return loss if as_tensor else float(loss)


def scheduler_update(state: MarginState, t: int) -> MarginState:
    """Record a mined count; raise the margin after three low counts in a row.

    The three-count window restarts after every increment and alpha never
    exceeds the cap.
    """
    if t < 0:
        raise MiningError(f"mined count must be >= 0, got {t}")
    counts = state.count_list + (int(t),)
    since = state.since_update + 1
    alpha = state.alpha
    if (
        since >= WINDOW
        and not state.at_cap
        and all(c < state.thresh for c in counts[-WINDOW:])
    ):
        alpha = min(round(alpha + state.alpha_step, 10), state.alpha_cap)
        since = 0
        logger.info("margin raised to %.2f after counts %s", alpha, counts[-WINDOW:])
    return replace(state, alpha=alpha, count_list=counts, since_update=since)


def replay_alpha(counts: Sequence[int], state: Optional[MarginState] = None) -> list[float]:
    """Alpha after each update when replaying a count sequence."""
    state = state or MarginState()
    trajectory = []
    for t in counts:
        state = scheduler_update(state, t)
        trajectory.append(state.alpha)
    return trajectory


def build_minibatch(
    labels: Sequence,
    rng: Union[np.random.Generator, int, None] = None,
    per_class: int = EXAMPLES_PER_CLASS,
    triplet_batch_cap: int = TRIPLET_BATCH_CAP,
) -> BatchPlan:
    """Class-balanced batch: ``per_class`` draws for every class.

    Classes with fewer examples are sampled with replacement.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise MiningError("empty dataset")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    by_class = {}
    chunks = []
    for label in sorted(np.unique(labels).tolist()):
        members = np.flatnonzero(labels == label)
        drawn = rng.choice(members, size=per_class, replace=len(members) < per_class)
        by_class[label] = tuple(int(i) for i in drawn)
        chunks.append(drawn)
    indices = np.concatenate(chunks).astype(np.int64)
    return BatchPlan(indices=indices, labels=labels[indices], by_class=by_class, triplet_batch_cap=triplet_batch_cap)


def available_minibatches(labels: Sequence, per_class: int = EXAMPLES_PER_CLASS) -> int:
    labels = np.asarray(labels)
    n_classes = len(np.unique(labels))
    if n_classes == 0:
        return 0
    return max(1, math.ceil(labels.size / (per_class * n_classes)))
