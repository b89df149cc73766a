"""Heatmap similarity functions used as the eX2L penalty.

Every kind returns a value that *increases* as the two maps become more
alike, so the trainer always minimises ``lambda_sim * evaluate(...)``.
Distances (MAE, MSE, RMSE, KL, JS divergence, JS distance) are therefore
negated.

Argument order is ``evaluate(fn, label_map, confounder_map)``.  Only KL is
asymmetric: the confounder map is the reference distribution.

Inputs are ``H x W`` or ``B x H x W``, as plain arrays or graph nodes.
Batches reduce to the mean over samples.  Plain-array inputs give a float;
node inputs give a scalar node.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import UsageError

KINDS = ("neg-mae", "neg-mse", "neg-rmse", "soft-iou", "neg-kl", "neg-js-div",
         "neg-jsd", "cosine", "ncc", "ssim", "soft-dice")

# kinds that consume L1-normalised maps instead of raw heatmaps
DISTRIBUTIONAL = frozenset({"neg-kl", "neg-js-div", "neg-jsd", "cosine"})

# -1: the kind is the additive inverse of a distance; +1: already a similarity
SIGN = {k: (-1 if k.startswith("neg-") else 1) for k in KINDS}


@dataclass(frozen=True)
class SimilarityFn:
    kind: str
    epsilon: float = 1e-8
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float | None = None  # None: max over both maps, per sample (differentiable)
    ssim_exponents: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UsageError(f"unknown similarity kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if not self.epsilon > 0:
            raise UsageError("epsilon must be positive")

    def __call__(self, a, b):
        return evaluate(self, a, b)


def _sum_hw(x, keepdims=False):
    return ad.sum_(x, axis=(1, 2), keepdims=keepdims)


def l1_normalize(x, epsilon: float = 1e-8):
    """(v + eps/n) / (sum v + eps) per map: sums to one, all-zero maps go uniform."""
    node = _batched(x)
    n = node.shape[1] * node.shape[2]
    out = ad.div(ad.add(node, epsilon / n), ad.add(_sum_hw(node, keepdims=True), epsilon))
    if isinstance(x, ad.Node):
        return out if x.ndim == 3 else ad.reshape(out, x.shape)
    return out.value.reshape(np.shape(x))


def _batched(x) -> ad.Node:
    node = ad.as_node(np.asarray(x, dtype=np.float64) if not isinstance(x, ad.Node) else x)
    if node.ndim == 2:
        return ad.reshape(node, (1,) + node.shape)
    if node.ndim != 3:
        raise UsageError(f"heatmaps must be H x W or B x H x W, got shape {node.shape}")
    return node


def _kl(p, q):
    """Per-sample sum p * (ln p - ln q); both strictly positive."""
    return _sum_hw(ad.mul(p, ad.sub(ad.log(p), ad.log(q))))


def _js(p, q):
    m = ad.mul(ad.add(p, q), 0.5)
    return ad.mul(ad.add(_kl(p, m), _kl(q, m)), 0.5)


def _centered(x, n):
    mu = ad.div(_sum_hw(x, keepdims=True), float(n))
    return ad.sub(x, mu), ad.reshape(mu, (x.shape[0],))


def _per_sample(fn: SimilarityFn, a: ad.Node, b: ad.Node) -> ad.Node:
    eps = fn.epsilon
    n = a.shape[1] * a.shape[2]
    kind = fn.kind
    if kind in ("neg-mae", "neg-mse", "neg-rmse"):
        d = ad.sub(a, b)
        if kind == "neg-mae":
            return ad.neg(ad.div(_sum_hw(ad.abs_(d)), float(n)))
        mse = ad.div(_sum_hw(ad.square(d)), float(n))
        return ad.neg(mse if kind == "neg-mse" else ad.sqrt(mse))
    if kind == "soft-iou":
        inter = _sum_hw(ad.mul(a, b))
        union = ad.sub(ad.add(_sum_hw(a), _sum_hw(b)), inter)
        return ad.div(inter, ad.add(union, eps))
    if kind == "soft-dice":
        inter = _sum_hw(ad.mul(a, b))
        return ad.div(ad.mul(inter, 2.0), ad.add(ad.add(_sum_hw(a), _sum_hw(b)), eps))
    if kind in DISTRIBUTIONAL:
        p_label = l1_normalize(a, eps)
        p_conf = l1_normalize(b, eps)
        if kind == "neg-kl":
            return ad.neg(_kl(p_conf, p_label))
        if kind == "neg-js-div":
            return ad.neg(_js(p_conf, p_label))
        if kind == "neg-jsd":
            # rounding can push a near-zero divergence just below zero
            return ad.neg(ad.sqrt(ad.relu(_js(p_conf, p_label))))
        dot = _sum_hw(ad.mul(p_label, p_conf))
        norms = ad.mul(_sum_hw(ad.square(p_label)), _sum_hw(ad.square(p_conf)))
        return ad.div(dot, ad.sqrt(ad.add(norms, eps * eps)))
    if kind == "ncc":
        da, _ = _centered(a, n)
        db, _ = _centered(b, n)
        num = _sum_hw(ad.mul(da, db))
        den = ad.mul(_sum_hw(ad.square(da)), _sum_hw(ad.square(db)))
        return ad.div(num, ad.sqrt(ad.add(den, eps * eps)))
    if kind == "ssim":
        return _ssim(fn, a, b, n)
    raise UsageError(f"unknown similarity kind {kind!r}")


def _ssim(fn: SimilarityFn, a, b, n):
    eps = fn.epsilon
    dof = float(max(n - 1, 1))
    da, mu_a = _centered(a, n)
    db, mu_b = _centered(b, n)
    var_a = ad.add(ad.div(_sum_hw(ad.square(da)), dof), eps)
    var_b = ad.add(ad.div(_sum_hw(ad.square(db)), dof), eps)
    # epsilon enters every second moment, as a tiny component shared by both
    # maps: identical maps then score exactly 1, and constant maps compare by
    # luminance alone
    cov = ad.add(ad.div(_sum_hw(ad.mul(da, db)), dof), eps)
    sd_ab = ad.sqrt(ad.mul(var_a, var_b))
    if fn.dynamic_range is None:
        # the range is part of the function, so it stays on the graph
        rng = ad.maximum(ad.maximum(ad.amax(a, (1, 2)), ad.amax(b, (1, 2))), 1e-8)
    else:
        rng = ad.constant(np.full(a.shape[0], float(fn.dynamic_range), dtype=a.value.dtype))
    c1 = ad.square(ad.mul(rng, fn.k1))
    c2 = ad.square(ad.mul(rng, fn.k2))
    c3 = ad.mul(c2, 0.5)
    lum = ad.div(ad.add(ad.mul(ad.mul(mu_a, mu_b), 2.0), c1),
                 ad.add(ad.add(ad.square(mu_a), ad.square(mu_b)), c1))
    con = ad.div(ad.add(ad.mul(sd_ab, 2.0), c2), ad.add(ad.add(var_a, var_b), c2))
    struct = ad.div(ad.add(cov, c3), ad.add(sd_ab, c3))
    ea, eb, ec = fn.ssim_exponents
    parts = []
    for term, e in ((lum, ea), (con, eb), (struct, ec)):
        parts.append(term if e == 1.0 else ad.power(term, e))
    return ad.mul(ad.mul(parts[0], parts[1]), parts[2])


def per_sample(fn: SimilarityFn, a, b):
    """Per-sample values, shape (B,)."""
    na, nb = _batched(a), _batched(b)
    if na.shape != nb.shape:
        raise UsageError(f"heatmap shapes differ: {na.shape} vs {nb.shape}")
    out = _per_sample(fn, na, nb)
    if isinstance(a, ad.Node) or isinstance(b, ad.Node):
        return out
    return out.value


def evaluate(fn, a, b):
    """Batch-mean similarity of ``a`` (label maps) and ``b`` (confounder maps)."""
    if isinstance(fn, str):
        fn = SimilarityFn(fn)
    na, nb = _batched(a), _batched(b)
    if na.shape != nb.shape:
        raise UsageError(f"heatmap shapes differ: {na.shape} vs {nb.shape}")
    out = ad.mean(_per_sample(fn, na, nb))
    if isinstance(a, ad.Node) or isinstance(b, ad.Node):
        return out
    return float(out.value)
