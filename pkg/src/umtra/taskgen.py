"""Episode construction for meta-training and target evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .augment import Primitive, apply_augmentation
from .datasets import LabeledDataset, UnlabeledDataset


@dataclass
class EpisodeTask:
    """One meta-training task: a train split and a validation split.

    Labels are artificial, 0-based.  ``train_index``/``valid_index`` record
    which source samples were drawn (for diagnostics); for UMTRA episodes the
    validation images are augmentations of the train samples so both index
    arrays coincide.
    """

    train_x: np.ndarray
    train_y: np.ndarray
    valid_x: np.ndarray
    valid_y: np.ndarray
    n_way: int
    k_shot: int
    train_index: np.ndarray | None = None
    valid_index: np.ndarray | None = None

    @property
    def train(self):
        return list(zip(self.train_x, self.train_y.tolist()))

    @property
    def valid(self):
        return list(zip(self.valid_x, self.valid_y.tolist()))


@dataclass
class TargetTask:
    """A labeled few-shot task plus a held-out query set to score it."""

    train_x: np.ndarray
    train_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    n_way: int
    k_shot: int
    classes: np.ndarray | None = None


def build_umtra_task(
    u: UnlabeledDataset, n_way: int, aug: Primitive, rng: np.random.Generator
) -> EpisodeTask:
    """Sample ``n_way`` distinct samples; the validation set augments each one."""
    samples = u.samples
    if len(samples) < n_way:
        raise ValueError(f"dataset has {len(samples)} samples, fewer than n_way={n_way}")
    idx = rng.choice(len(samples), size=n_way, replace=False)
    train_x = samples[idx].copy()
    valid_x = np.stack([apply_augmentation(aug, img, rng) for img in train_x])
    labels = np.arange(n_way)
    return EpisodeTask(train_x, labels, valid_x, labels.copy(), n_way, 1, idx, idx.copy())


def _pick_classes(ds: LabeledDataset, n_way: int, per_class: int, rng: np.random.Generator):
    groups = ds.by_class()
    eligible = np.array(sorted(c for c, ix in groups.items() if len(ix) >= per_class))
    if len(eligible) < n_way:
        raise ValueError(
            f"need {n_way} classes with >= {per_class} samples each, only {len(eligible)} available"
        )
    return rng.choice(eligible, size=n_way, replace=False), groups


def build_supervised_task(
    labeled: LabeledDataset, n_way: int, k_shot: int, rng: np.random.Generator
) -> EpisodeTask:
    """Supervised MAML episode: ``n_way`` true classes, disjoint K-shot splits."""
    classes, groups = _pick_classes(labeled, n_way, 2 * k_shot, rng)
    train_idx, valid_idx = [], []
    for c in classes:
        pick = rng.choice(groups[int(c)], size=2 * k_shot, replace=False)
        train_idx.append(pick[:k_shot])
        valid_idx.append(pick[k_shot:])
    train_idx = np.concatenate(train_idx)
    valid_idx = np.concatenate(valid_idx)
    labels = np.repeat(np.arange(n_way), k_shot)
    return EpisodeTask(
        labeled.images[train_idx].copy(),
        labels,
        labeled.images[valid_idx].copy(),
        labels.copy(),
        n_way,
        k_shot,
        train_idx,
        valid_idx,
    )


def sample_target_task(
    labeled: LabeledDataset, n_way: int, k_shot: int, rng: np.random.Generator
) -> TargetTask:
    """K labeled samples per class; every remaining sample of those classes is a query."""
    classes, groups = _pick_classes(labeled, n_way, k_shot + 1, rng)
    tx, ty, qx, qy = [], [], [], []
    for label, c in enumerate(classes):
        members = rng.permutation(groups[int(c)])
        tx.append(members[:k_shot])
        qx.append(members[k_shot:])
        ty += [label] * k_shot
        qy += [label] * (len(members) - k_shot)
    tx, qx = np.concatenate(tx), np.concatenate(qx)
    return TargetTask(
        labeled.images[tx].copy(),
        np.array(ty),
        labeled.images[qx].copy(),
        np.array(qy),
        n_way,
        k_shot,
        classes,
    )


def collision_probability(c: int, m: int, n_way: int) -> float:
    """Probability that ``n_way`` draws without replacement from ``c`` balanced
    classes of ``m`` samples each hit ``n_way`` different classes."""
    if c < 1 or m < 1 or n_way < 1:
        raise ValueError("c, m and n_way must be positive")
    if n_way > c * m:
        raise ValueError(f"cannot draw {n_way} distinct samples from {c * m}")
    if n_way > c:
        return 0.0
    log_p = 0.0
    for i in range(n_way):
        log_p += math.log((c - i) * m) - math.log(c * m - i)
    return math.exp(log_p)


def monte_carlo_collision(
    c: int, m: int, n_way: int, trials: int, rng: np.random.Generator, batch: int = 200_000
) -> tuple[float, float]:
    """Estimate :func:`collision_probability` by simulation; returns (p, stderr)."""
    if n_way > c * m:
        raise ValueError(f"cannot draw {n_way} distinct samples from {c * m}")
    hits = 0
    done = 0
    while done < trials:
        n = min(batch, trials - done)
        draws = rng.integers(0, c * m, size=(n, n_way))
        # redraw rows that repeat a sample index: draws are without replacement
        while True:
            s = np.sort(draws, axis=1)
            dup = (np.diff(s, axis=1) == 0).any(axis=1)
            if not dup.any():
                break
            draws[dup] = rng.integers(0, c * m, size=(int(dup.sum()), n_way))
        cls = np.sort(draws // m, axis=1)
        hits += int((np.diff(cls, axis=1) != 0).all(axis=1).sum())
        done += n
    p = hits / trials
    return p, math.sqrt(max(p * (1 - p), 0.0) / trials)
