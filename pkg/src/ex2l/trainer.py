"""Training loops: ERM, GroupDRO and eX2L.

eX2L trains a label model and a confounder model side by side.  Each step
takes Grad-CAM maps of both models for the true label / true confounder
and adds ``lambda_sim * S(label_map, confounder_map)`` to the two
cross-entropy losses.  The channel weights are detached (first-order
``grad_of``); the activations are not, so the penalty reaches both
networks' convolutional parameters.

Seeds: one experiment seed fans out into independent streams for the label
network init, the confounder network init and the batch sampler.  ERM and
eX2L with zero coefficients therefore walk identical label-model
trajectories.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import gradcam, similarity
from .datagen import Dataset, make_sampler
from .errors import ConfigError
from .metrics import MetricsReport, accuracy_report, mmd_partition_report
from .network import Network, default_cnn, forward, sgd_step

log = logging.getLogger(__name__)

ALGORITHMS = ("erm", "groupdro", "ex2l")
SAMPLINGS = ("random", "uniform-group")
DEFAULT_SEEDS = (42, 8, 777)


@dataclass
class TrainConfig:
    algorithm: str = "ex2l"
    similarity: str = "neg-mae"
    sampling: str = "uniform-group"
    lambda_c: float = 1.0
    lambda_sim: float = 1.0
    groupdro_eta: float = 0.01
    lr: float = 0.05
    lr_conf: float = 0.05
    weight_decay: float = 0.0
    weight_decay_conf: float = 0.0
    batch_size: int = 128
    max_epochs: int = 50
    patience: int = 10
    min_delta: float = 1e-3
    seed: int = 42
    precision: str = "float64"
    channels: tuple = (8, 16)
    similarity_epsilon: float = 1e-8

    def validate(self) -> list[str]:
        problems = []
        if self.algorithm not in ALGORITHMS:
            problems.append(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.similarity not in similarity.KINDS:
            problems.append(f"similarity must be one of {similarity.KINDS}, got {self.similarity!r}")
        if self.sampling not in SAMPLINGS:
            problems.append(f"sampling must be one of {SAMPLINGS}, got {self.sampling!r}")
        for name in ("lambda_c", "lambda_sim", "weight_decay", "weight_decay_conf", "min_delta"):
            if not getattr(self, name) >= 0:
                problems.append(f"{name} must be >= 0")
        for name in ("lr", "lr_conf", "groupdro_eta", "similarity_epsilon"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be > 0")
        for name in ("batch_size", "max_epochs"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.patience < 1:
            problems.append("patience must be >= 1")
        if self.precision not in ("float64", "float32"):
            problems.append("precision must be float64 or float32")
        return problems

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32


def derive_seed(seed: int, stream: str) -> int:
    """Independent child seed for a named stream."""
    tag = int.from_bytes(stream.encode("utf-8"), "little") % (2 ** 32)
    return int(np.random.SeedSequence([int(seed), tag]).generate_state(1)[0])


def make_networks(cfg: TrainConfig, data: Dataset):
    in_shape = tuple(data.images.shape[1:])
    n_y = 1 if data.n_labels == 2 else data.n_labels
    label = default_cnn(in_shape, n_y, np.random.default_rng(derive_seed(cfg.seed, "label-init")),
                        tuple(cfg.channels), cfg.dtype)
    conf = None
    if cfg.algorithm == "ex2l":
        n_c = 1 if data.n_confounders == 2 else data.n_confounders
        conf = default_cnn(in_shape, n_c, np.random.default_rng(derive_seed(cfg.seed, "confounder-init")),
                           tuple(cfg.channels), cfg.dtype)
    return label, conf


def task_loss(logits: ad.Node, targets, reduction: str = "mean") -> ad.Node:
    if logits.shape[1] == 1:
        return ad.bce_with_logits(logits, targets, reduction)
    return ad.cce_with_logits(logits, targets, reduction)


def predictions(logits: np.ndarray) -> np.ndarray:
    if logits.shape[1] == 1:
        return (logits[:, 0] > 0).astype(np.int64)
    return logits.argmax(axis=1)


# ---------------------------------------------------------------------------
# objectives

@dataclass
class Ex2lParts:
    total: ad.Node
    label_loss: ad.Node
    conf_loss: ad.Node
    sim: ad.Node
    alpha_label: np.ndarray
    alpha_conf: np.ndarray
    label_trace: object
    conf_trace: object


def ex2l_objective(label_net: Network, conf_net: Network, x, y, c, sim_fn, lambda_c: float,
                   lambda_sim: float, frozen_alpha=None) -> Ex2lParts:
    """Total eX2L loss for one batch.

    ``frozen_alpha=(alpha_label, alpha_conf)`` skips the weight query and
    reuses given channel weights; finite-difference checks use it to hold the
    weights fixed while parameters move.
    """
    tl = forward(label_net, x)
    tc = forward(conf_net, x)
    if frozen_alpha is None:
        head_y = gradcam.head_kind(tl.logits.shape[1])
        head_c = gradcam.head_kind(tc.logits.shape[1])
        wy = gradcam.cam_weights(tl, gradcam.target_logit(tl.logits, y, head_y))
        wc = gradcam.cam_weights(tc, gradcam.target_logit(tc.logits, c, head_c))
    else:
        wy, wc = (gradcam.CamWeights(np.asarray(a)) for a in frozen_alpha)
    map_y = gradcam.heatmap(tl, wy)
    map_c = gradcam.heatmap(tc, wc)
    loss_y = task_loss(tl.logits, y)
    loss_c = task_loss(tc.logits, c)
    sim = similarity.evaluate(sim_fn, map_y, map_c)
    total = ad.add(ad.add(loss_y, ad.mul(loss_c, lambda_c)), ad.mul(sim, lambda_sim))
    return Ex2lParts(total, loss_y, loss_c, sim, wy.alpha, wc.alpha, tl, tc)


class GroupDROState:
    """Exponentiated-gradient weights over groups, persistent across steps."""

    def __init__(self, n_groups: int, eta: float):
        self.q = np.full(n_groups, 1.0 / n_groups)
        self.eta = eta

    def update(self, group_losses: np.ndarray, present: np.ndarray) -> np.ndarray:
        q = self.q.copy()
        q[present] = q[present] * np.exp(self.eta * group_losses[present])
        self.q = q / q.sum()
        return self.q


def groupdro_objective(net: Network, x, y, groups, state: GroupDROState):
    """Weighted sum of per-group mean losses; updates ``state.q`` first."""
    trace = forward(net, x)
    per = task_loss(trace.logits, y, reduction="none")
    n_groups = len(state.q)
    masks = np.stack([groups == k for k in range(n_groups)]).astype(per.value.dtype)
    counts = masks.sum(axis=1)
    present = counts > 0
    safe = np.where(present, counts, 1.0)
    # (G,) mean loss per group, zero for absent groups
    group_loss = ad.div(ad.sum_(ad.mul(per, masks), axis=1), safe)
    q = state.update(group_loss.value, present)
    weights = np.where(present, q, 0.0).astype(per.value.dtype)
    return ad.sum_(ad.mul(group_loss, weights)), trace


# ---------------------------------------------------------------------------
# evaluation

def infer(net: Network, images: np.ndarray, chunk: int = 500):
    """(logits, latents) as plain arrays."""
    logits, latents = [], []
    for i in range(0, len(images), chunk):
        t = forward(net, images[i:i + chunk])
        logits.append(t.logits.value)
        latents.append(t.latent.value)
    return np.concatenate(logits), np.concatenate(latents)


def evaluate(net: Network, data: Dataset, split: str, with_latents: bool = False):
    logits, latents = infer(net, data.images)
    if data.has_confounder:
        report = accuracy_report(predictions(logits), data.y, data.g, split, data.n_groups)
    else:
        report = accuracy_report(predictions(logits), data.y, np.zeros(len(data), np.int64), split, 1)
    if with_latents:
        return report, latents
    return report


def early_stop_update(history: list, score: float, patience: int, min_delta: float) -> bool:
    """Append ``score``; True when the last ``patience`` epochs brought no improvement > min_delta."""
    history.append(float(score))
    best = -math.inf
    since = 0
    for s in history:
        if s > best + min_delta:
            best, since = s, 0
        else:
            since += 1
    return since >= patience


# ---------------------------------------------------------------------------
# training

@dataclass
class Checkpoint:
    epoch: int
    label_state: dict
    conf_state: Optional[dict]
    val_aa: float
    val_wga: float
    layers: list = field(default_factory=list)
    in_shape: tuple = ()
    capture: int = 4
    conf_layers: Optional[list] = None

    @property
    def score(self) -> float:
        return (self.val_aa + self.val_wga) / 2.0


@dataclass
class TrainResult:
    config: TrainConfig
    checkpoint: Checkpoint
    history: list  # MetricsReport per epoch: train then val
    epoch_seconds: list
    label_net: Network
    conf_net: Optional[Network]
    stopped_early: bool = False

    def best_nets(self):
        """Networks loaded with the selected checkpoint's parameters."""
        self.label_net.load_state(self.checkpoint.label_state)
        if self.conf_net is not None and self.checkpoint.conf_state is not None:
            self.conf_net.load_state(self.checkpoint.conf_state)
        return self.label_net, self.conf_net


def train(cfg: TrainConfig, splits: dict, on_epoch: Optional[Callable] = None,
          max_batches: Optional[int] = None, on_step: Optional[Callable] = None) -> TrainResult:
    """Dispatch on ``cfg.algorithm``; ``splits`` needs 'train' and 'val'.

    ``max_batches`` caps the number of steps per epoch (timing runs).
    ``on_step(step, label_net, conf_net)`` runs after every parameter update.
    """
    problems = cfg.validate()
    if problems:
        raise ConfigError("invalid training config", problems)
    data = splits["train"]
    if not data.has_confounder:
        needs = []
        if cfg.algorithm in ("ex2l", "groupdro"):
            needs.append(f"{cfg.algorithm} needs confounder (group) labels")
        if cfg.sampling == "uniform-group":
            needs.append("uniform-group sampling needs confounder (group) labels")
        if needs:
            raise ConfigError("training data lacks confounder labels", needs)
    label_net, conf_net = make_networks(cfg, data)
    sampler = make_sampler(cfg.sampling, data, cfg.batch_size, derive_seed(cfg.seed, "sampler"))
    sim_fn = similarity.SimilarityFn(cfg.similarity, epsilon=cfg.similarity_epsilon)
    dro = GroupDROState(data.n_groups, cfg.groupdro_eta) if cfg.algorithm == "groupdro" else None
    # without annotations every example counts as one group, so WGA equals AA
    groups = data.g if data.has_confounder else np.zeros(len(data), dtype=np.int64)
    n_groups = data.n_groups if data.has_confounder else 1

    history, seconds, scores = [], [], []
    best: Optional[Checkpoint] = None
    stopped = False
    n_steps = 0
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        preds, ys, gs, losses = [], [], [], []
        for step, idx in enumerate(sampler.epoch()):
            if max_batches is not None and step >= max_batches:
                break
            xb = data.images[idx]
            yb, gb = data.y[idx], groups[idx]
            cb = data.c[idx] if data.has_confounder else None
            if cfg.algorithm == "erm":
                trace = forward(label_net, xb)
                loss = task_loss(trace.logits, yb)
                ad.backward(loss)
                sgd_step(label_net, cfg.lr, cfg.weight_decay)
            elif cfg.algorithm == "groupdro":
                loss, trace = groupdro_objective(label_net, xb, yb, gb, dro)
                ad.backward(loss)
                sgd_step(label_net, cfg.lr, cfg.weight_decay)
            else:
                parts = ex2l_objective(label_net, conf_net, xb, yb, cb, sim_fn,
                                       cfg.lambda_c, cfg.lambda_sim)
                loss, trace = parts.total, parts.label_trace
                ad.backward(loss)
                sgd_step(label_net, cfg.lr, cfg.weight_decay)
                sgd_step(conf_net, cfg.lr_conf, cfg.weight_decay_conf)
            if on_step is not None:
                on_step(n_steps, label_net, conf_net)
            n_steps += 1
            preds.append(predictions(trace.logits.value))
            ys.append(yb)
            gs.append(gb)
            losses.append(float(loss.value))
        seconds.append(time.perf_counter() - t0)
        if not np.all(np.isfinite(losses)):
            raise FloatingPointError(f"non-finite training loss at epoch {epoch}")

        train_rep = accuracy_report(np.concatenate(preds), np.concatenate(ys), np.concatenate(gs),
                                    "train", n_groups)
        train_rep.losses = {"total": float(np.mean(losses))}
        val_rep = evaluate(label_net, splits["val"], "val")
        train_rep.epoch = val_rep.epoch = epoch
        history += [train_rep, val_rep]
        if best is None or val_rep.score > best.score:
            best = Checkpoint(epoch, label_net.state(), conf_net.state() if conf_net else None,
                              val_rep.aa, val_rep.wga, list(label_net.layers), label_net.in_shape,
                              label_net.capture, list(conf_net.layers) if conf_net else None)
        log.info("epoch %d %s: loss %.4f val AA %.4f WGA %.4f (%.1fs)", epoch, cfg.algorithm,
                 train_rep.losses["total"], val_rep.aa, val_rep.wga, seconds[-1])
        if on_epoch is not None:
            on_epoch(epoch, train_rep, val_rep)
        if early_stop_update(scores, val_rep.score, cfg.patience, cfg.min_delta):
            stopped = True
            break
    return TrainResult(cfg, best, history, seconds, label_net, conf_net, stopped)


def train_erm(cfg: TrainConfig, splits: dict, **kw) -> TrainResult:
    return train(replace(cfg, algorithm="erm"), splits, **kw)


def train_groupdro(cfg: TrainConfig, splits: dict, **kw) -> TrainResult:
    return train(replace(cfg, algorithm="groupdro"), splits, **kw)


def train_ex2l(cfg: TrainConfig, splits: dict, **kw) -> TrainResult:
    return train(replace(cfg, algorithm="ex2l"), splits, **kw)


def test_report(result: TrainResult, splits: dict, mmd_partitions=("by-label", "by-confounder")):
    """Test metrics of the selected checkpoint, with linear-MMD diagnostics on test latents.

    The by-env entry pools validation (training environments) and test
    latents, since the test split holds a single environment.
    """
    net, _ = result.best_nets()
    test = splits["test"]
    rep, lat = evaluate(net, test, "test", with_latents=True)
    parts = [p for p in mmd_partitions
             if p != "by-env" and (p != "by-confounder" or test.has_confounder)]
    rep.mmd = mmd_partition_report(lat, test.y, test.c, test.env, parts) if parts else {}
    if "by-env" in mmd_partitions and "val" in splits:
        _, val_lat = infer(net, splits["val"].images)
        pooled = np.concatenate([val_lat, lat])
        envs = np.concatenate([splits["val"].env, test.env])
        rep.mmd.update(mmd_partition_report(pooled, None, None, envs, ("by-env",)))
    return rep


# ---------------------------------------------------------------------------
# random search

@dataclass(frozen=True)
class Dist:
    kind: str  # "log10-uniform" | "uniform" | "fixed"
    low: float = 0.0
    high: float = 0.0

    def draw(self, rng: np.random.Generator) -> float:
        if self.kind == "fixed":
            return self.low
        u = rng.uniform(self.low, self.high)
        return float(10.0 ** u) if self.kind == "log10-uniform" else float(u)


# eX2L rows of the hyperparameter table; "Lambda (y)" drives lambda_sim.
# Learning rates are desk-scale SGD ranges, not the table's Adam ranges.
EX2L_SPACE = {
    "lambda_sim": Dist("log10-uniform", -1.0, 2.0),
    "lambda_c": Dist("log10-uniform", -1.0, 2.0),
    "weight_decay": Dist("log10-uniform", -6.0, -2.0),
    "weight_decay_conf": Dist("log10-uniform", -6.0, -2.0),
    "lr": Dist("log10-uniform", -2.0, -0.5),
    "lr_conf": Dist("log10-uniform", -2.0, -0.5),
}
GROUPDRO_SPACE = {
    "groupdro_eta": Dist("log10-uniform", -1.0, 1.0),
    "lr": Dist("log10-uniform", -2.0, -0.5),
}
ERM_SPACE = {"lr": Dist("log10-uniform", -2.0, -0.5)}


def default_space(algorithm: str) -> dict:
    return {"ex2l": EX2L_SPACE, "groupdro": GROUPDRO_SPACE, "erm": ERM_SPACE}[algorithm]


def draw_configs(base: TrainConfig, space: dict, trials: int, seed: int) -> list[TrainConfig]:
    rng = np.random.default_rng(seed)
    names = {f.name for f in fields(TrainConfig)}
    out = []
    for _ in range(trials):
        values = {}
        for key in sorted(space):
            if key not in names:
                raise ConfigError(f"search space field {key!r} is not a TrainConfig field")
            values[key] = space[key].draw(rng)
        out.append(replace(base, **values))
    return out


def _run_trial(args):
    cfg, splits = args
    result = train(cfg, splits)
    train_wga = evaluate(result.best_nets()[0], splits["train"], "train").wga
    return result.checkpoint, train_wga


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class SearchResult:
    best: TrainConfig
    best_checkpoint: Checkpoint
    trials: list  # dicts: trial, score, val_aa, val_wga, plus drawn fields


def random_search(base: TrainConfig, splits: dict, space: Optional[dict] = None, trials: int = 20,
                  seed: int = 0, workers: int = 1) -> SearchResult:
    """Train ``trials`` drawn configs; pick the highest validation (AA+WGA)/2 (earliest on ties)."""
    space = space if space is not None else default_space(base.algorithm)
    configs = draw_configs(base, space, trials, seed)
    outcomes = _map(_run_trial, [(c, splits) for c in configs], workers)
    rows, best_i = [], 0
    for i, (cfg, (ckpt, _)) in enumerate(zip(configs, outcomes)):
        row = {"trial": i, "score": ckpt.score, "val_aa": ckpt.val_aa, "val_wga": ckpt.val_wga,
               "epoch": ckpt.epoch}
        row.update({k: getattr(cfg, k) for k in sorted(space)})
        rows.append(row)
        if ckpt.score > outcomes[best_i][0].score:
            best_i = i
    return SearchResult(configs[best_i], outcomes[best_i][0], rows)


# ---------------------------------------------------------------------------
# similarity screening

DISPLAY_NAMES = {
    "cosine": "Cosine", "soft-iou": "IoU", "neg-jsd": "JS Dist.", "neg-js-div": "JS Div.",
    "neg-kl": "KL Div.", "neg-mae": "MAE", "neg-mse": "MSE", "ncc": "NCC", "neg-rmse": "RMSE",
    "ssim": "SSIM", "soft-dice": "Soft Dice",
}
SCREEN_ORDER = ("cosine", "soft-iou", "neg-jsd", "neg-js-div", "neg-kl", "neg-mae", "neg-mse",
                "ncc", "neg-rmse", "ssim", "soft-dice")


@dataclass
class ScreenResult:
    rows: list  # dicts with name, kind, sampling, train_wga, val_wga[, <dataset>_train_wga, ...]
    datasets: list
    ranking: list  # row indices by primary val WGA, descending
    top_kinds: list


def screening_harness(base: TrainConfig, datasets: dict, workers: int = 1) -> ScreenResult:
    """Train every similarity kind under both samplers on each dataset.

    ``datasets`` maps a dataset name to its splits; the first one is the
    primary screen that fills ``train_wga`` / ``val_wga`` and drives ranking.
    """
    names = list(datasets)
    jobs = []
    for kind in SCREEN_ORDER:
        for sampling in SAMPLINGS:
            for name in names:
                cfg = replace(base, algorithm="ex2l", similarity=kind, sampling=sampling)
                jobs.append((cfg, datasets[name]))
    outcomes = iter(_map(_run_trial, jobs, workers))
    rows = []
    for kind in SCREEN_ORDER:
        for sampling in SAMPLINGS:
            row = {"name": DISPLAY_NAMES[kind], "kind": kind, "sampling": sampling}
            for j, name in enumerate(names):
                ckpt, train_wga = next(outcomes)
                prefix = "" if j == 0 else f"{name}_"
                row[f"{prefix}train_wga"] = train_wga
                row[f"{prefix}val_wga"] = ckpt.val_wga
            rows.append(row)
    ranking = sorted(range(len(rows)), key=lambda i: (-rows[i]["val_wga"], i))
    top = []
    for i in ranking:
        if rows[i]["kind"] not in top:
            top.append(rows[i]["kind"])
        if len(top) == 3:
            break
    return ScreenResult(rows, names, ranking, top)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
