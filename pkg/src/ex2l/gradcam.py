"""Grad-CAM weights and heatmaps with detached channel weights.

The channel weights are the spatial mean of d(target score)/d(activation),
obtained through :func:`ex2l.autodiff.grad_of`, so they enter the heatmap as
constants.  The activations themselves stay attached, which is what lets a
penalty on the heatmaps move the convolutional parameters.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import DataError, UsageError


@dataclass
class CamWeights:
    alpha: np.ndarray  # (B, K)


def target_logit(logits: ad.Node, target, head: str = "binary") -> ad.Node:
    """Per-sample score for the given class.

    A binary head has one logit per sample; the score for class 0 is its
    negation, so the selected value grows with confidence in ``target``.
    """
    t = np.asarray(target).reshape(-1)
    if head == "binary":
        if np.any((t != 0) & (t != 1)):
            raise DataError("binary target must be 0 or 1")
        s = ad.reshape(logits, (logits.shape[0],))
        sign = np.where(t == 1, 1.0, -1.0).astype(logits.value.dtype)
        return ad.mul(s, sign)
    if head == "multiclass":
        k = logits.shape[1]
        if np.any((t < 0) | (t >= k)):
            raise DataError(f"target index outside [0, {k})")
        return ad.take_rows(logits, t)
    raise UsageError(f"unknown head kind {head!r}")


def head_kind(n_outputs: int) -> str:
    return "binary" if n_outputs == 1 else "multiclass"


def cam_weights(trace, scores: ad.Node) -> CamWeights:
    """Spatial mean of the score gradient at the captured activation.

    ``scores`` holds one value per sample; samples do not interact in the
    forward pass, so one query on their sum yields every per-sample gradient.
    """
    act = trace.activation
    if act.ndim != 4:
        raise UsageError(f"captured activation must be B x K x H x W, got {act.shape}")
    total = scores if scores.size == 1 else ad.sum_(scores)
    g = ad.grad_of(total, act)
    return CamWeights(g.mean(axis=(2, 3)))


def heatmap(trace, weights: CamWeights) -> ad.Node:
    """ReLU(sum_k alpha_k A^k), shape (B, H, W), attached through A only."""
    act = trace.activation
    alpha = np.asarray(weights.alpha, dtype=act.value.dtype)
    if alpha.shape != act.shape[:2]:
        raise UsageError(f"weights shape {alpha.shape} does not match activation {act.shape[:2]}")
    combo = ad.sum_(ad.mul(act, alpha[:, :, None, None]), axis=1)
    return ad.relu(combo)


def gradcam(net, trace, target, head=None) -> ad.Node:
    """Convenience: score selection, weights and heatmap in one call."""
    head = head or head_kind(trace.logits.shape[1])
    scores = target_logit(trace.logits, target, head)
    return heatmap(trace, cam_weights(trace, scores))


def to_pgm_pixels(values) -> np.ndarray:
    """Min-max scale one map to 0..255 (floor); constant maps become zero."""
    v = np.asarray(values.value if isinstance(values, ad.Node) else values, dtype=np.float64)
    if v.ndim != 2:
        raise UsageError(f"expected one H x W map, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DataError("heatmap contains non-finite values")
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.floor(255.0 * (v - lo) / (hi - lo)).astype(np.uint8)


def export_heatmap(values, path) -> None:
    """Write a binary (P5) 8-bit PGM."""
    pixels = to_pgm_pixels(values)
    h, w = pixels.shape
    with open(Path(path), "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise DataError(f"{path}: not a binary PGM")
    w, h, maxval = (int(x) for x in m.groups())
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    body = data[m.end():m.end() + w * h]
    if len(body) != w * h:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)
