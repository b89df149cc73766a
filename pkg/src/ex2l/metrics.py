"""Average / worst-group accuracy and the linear-kernel MMD diagnostic."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import UsageError

PARTITIONS = ("by-label", "by-confounder", "by-env")


@dataclass
class MetricsReport:
    split: str
    aa: float
    wga: float
    group_acc: dict  # group id -> accuracy, non-empty groups only
    group_count: dict  # group id -> example count
    losses: dict = field(default_factory=dict)
    mmd: dict = field(default_factory=dict)
    epoch: Optional[int] = None

    @property
    def score(self) -> float:
        """Checkpoint selection score: mean of WGA and AA."""
        return (self.wga + self.aa) / 2.0


def accuracy_report(preds, y, groups, split: str = "", n_groups: Optional[int] = None) -> MetricsReport:
    preds, y, groups = np.asarray(preds), np.asarray(y), np.asarray(groups)
    if len(y) == 0:
        raise UsageError("accuracy_report on an empty dataset")
    if not (len(preds) == len(y) == len(groups)):
        raise UsageError("predictions, labels and groups must align")
    correct = preds == y
    if n_groups is None:
        n_groups = int(groups.max()) + 1
    acc, count = {}, {}
    for g in range(n_groups):
        mask = groups == g
        count[g] = int(mask.sum())
        if count[g]:
            acc[g] = float(correct[mask].mean())
    return MetricsReport(split, float(correct.mean()), min(acc.values()), acc, count)


def linear_mmd(a, b, scale: bool = True) -> float:
    """Squared distance between mean vectors; divided by the width when ``scale``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if len(a) == 0 or len(b) == 0:
        raise UsageError("linear_mmd needs non-empty batches")
    if a.shape[1] != b.shape[1]:
        raise UsageError(f"latent widths differ: {a.shape[1]} vs {b.shape[1]}")
    diff = a.mean(axis=0) - b.mean(axis=0)
    out = float(diff @ diff)
    return out / a.shape[1] if scale else out


def mmd_by_parts(latents, parts, scale: bool = True) -> float:
    """Mean pairwise linear MMD over the non-empty parts (the single pair when two)."""
    latents, parts = np.asarray(latents), np.asarray(parts)
    keys = [k for k in np.unique(parts)]
    if len(keys) < 2:
        raise UsageError(f"need at least two non-empty parts, got {len(keys)}")
    vals = [linear_mmd(latents[parts == i], latents[parts == j], scale)
            for i, j in itertools.combinations(keys, 2)]
    return float(np.mean(vals))


def mmd_partition_report(latents, y, c, env, partitions=PARTITIONS, scale: bool = True) -> dict:
    columns = {"by-label": y, "by-confounder": c, "by-env": env}
    out = {}
    for name in partitions:
        if name not in columns:
            raise UsageError(f"unknown partition {name!r}; valid: {', '.join(PARTITIONS)}")
        out[name] = mmd_by_parts(latents, columns[name], scale)
    return out
