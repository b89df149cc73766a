"""Small sequential CNNs on top of :mod:`ex2l.autodiff`.

A :class:`Network` is a list of layer specs plus a dict of named parameter
leaves.  ``forward`` returns a :class:`ForwardTrace` that keeps the
per-layer nodes, so the activation at ``net.capture`` can later be used as
a Grad-CAM target.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, UsageError


@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    kernel: int = 3
    padding: int = 1
    stride: int = 1
    kind: str = field(default="conv2d", init=False)


@dataclass(frozen=True)
class ReLU:
    kind: str = field(default="relu", init=False)


@dataclass(frozen=True)
class MaxPool2:
    kind: str = field(default="maxpool2", init=False)


@dataclass(frozen=True)
class Flatten:
    kind: str = field(default="flatten", init=False)


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    kind: str = field(default="dense", init=False)


_LAYER_TYPES = {"conv2d": Conv2d, "relu": ReLU, "maxpool2": MaxPool2, "flatten": Flatten, "dense": Dense}


def layer_to_dict(layer) -> dict:
    return asdict(layer)


def layer_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    try:
        cls = _LAYER_TYPES[kind]
    except KeyError:
        raise ConfigError(f"unknown layer kind {kind!r}") from None
    return cls(**d)


def output_shape(layer, shape: tuple) -> tuple:
    """Per-sample output shape of ``layer`` for per-sample input ``shape``."""
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[0] != layer.in_ch:
            raise ConfigError(f"conv2d expects ({layer.in_ch}, H, W), got {shape}")
        h = (shape[1] + 2 * layer.padding - layer.kernel) // layer.stride + 1
        w = (shape[2] + 2 * layer.padding - layer.kernel) // layer.stride + 1
        if h < 1 or w < 1:
            raise ConfigError(f"conv2d output would be empty for input {shape}")
        return (layer.out_ch, h, w)
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, MaxPool2):
        if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
            raise ConfigError(f"maxpool2 expects (C, H>=2, W>=2), got {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Dense):
        if shape != (layer.in_features,):
            raise ConfigError(f"dense expects ({layer.in_features},), got {shape}")
        return (layer.out_features,)
    raise ConfigError(f"unsupported layer {layer!r}")


def infer_shapes(layers, in_shape: tuple) -> list[tuple]:
    shapes = [tuple(in_shape)]
    for layer in layers:
        shapes.append(output_shape(layer, shapes[-1]))
    return shapes


@dataclass
class Network:
    layers: list
    params: dict  # name -> autodiff.Node
    capture: int
    in_shape: tuple

    @property
    def n_outputs(self) -> int:
        return infer_shapes(self.layers, self.in_shape)[-1][0]

    @property
    def dtype(self):
        return next(iter(self.params.values())).value.dtype

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, p in self.params.items():
            if state[k].shape != p.value.shape:
                raise UsageError(f"parameter {k}: shape {state[k].shape} != {p.value.shape}")
            p.value = np.array(state[k], dtype=p.value.dtype)

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())


@dataclass
class ForwardTrace:
    input: ad.Node
    outputs: list  # one node per layer
    activation: ad.Node
    latent: Optional[ad.Node]
    logits: ad.Node


def build_network(layers, in_shape, capture: int, rng: np.random.Generator,
                  dtype=np.float64) -> Network:
    """Validate the layer stack and draw Kaiming-uniform (fan-in) weights."""
    shapes = infer_shapes(layers, in_shape)
    if not 0 <= capture < len(layers):
        raise ConfigError(f"capture layer {capture} outside [0, {len(layers)})")
    if len(shapes[capture + 1]) != 3:
        raise ConfigError(f"capture layer {capture} output {shapes[capture + 1]} is not C x H x W")
    params = {}
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv2d):
            fan_in = layer.in_ch * layer.kernel * layer.kernel
            shape = (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel)
            bias = layer.out_ch
        elif isinstance(layer, Dense):
            fan_in = layer.in_features
            shape = (layer.out_features, layer.in_features)
            bias = layer.out_features
        else:
            continue
        bound = np.sqrt(6.0 / fan_in)
        params[f"{i}.weight"] = ad.parameter(rng.uniform(-bound, bound, size=shape).astype(dtype))
        params[f"{i}.bias"] = ad.parameter(np.zeros(bias, dtype=dtype))
    return Network(list(layers), params, capture, tuple(in_shape))


def default_cnn(in_shape=(3, 28, 28), n_outputs: int = 1, rng=None, channels=(8, 16),
                dtype=np.float64) -> Network:
    """conv-relu-pool twice, then a linear head; captures the second ReLU."""
    if rng is None:
        rng = np.random.default_rng(0)
    c0 = in_shape[0]
    c1, c2 = channels
    body = [Conv2d(c0, c1), ReLU(), MaxPool2(), Conv2d(c1, c2), ReLU(), MaxPool2(), Flatten()]
    flat = infer_shapes(body, in_shape)[-1][0]
    return build_network(body + [Dense(flat, n_outputs)], in_shape, capture=4, rng=rng, dtype=dtype)


def forward(net: Network, batch) -> ForwardTrace:
    x = batch.value if isinstance(batch, ad.Node) else np.asarray(batch)
    if x.ndim != len(net.in_shape) + 1 or tuple(x.shape[1:]) != net.in_shape:
        raise ConfigError(f"batch shape {x.shape} does not match network input {net.in_shape}")
    if x.dtype != net.dtype:
        x = x.astype(net.dtype)
    inp = ad.constant(x)
    h = inp
    outputs = []
    latent = None
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Conv2d):
            h = ad.conv2d(h, net.params[f"{i}.weight"], net.params[f"{i}.bias"],
                          stride=layer.stride, padding=layer.padding)
        elif isinstance(layer, ReLU):
            h = ad.relu(h)
        elif isinstance(layer, MaxPool2):
            h = ad.maxpool2(h)
        elif isinstance(layer, Flatten):
            h = ad.flatten(h)
            latent = h
        elif isinstance(layer, Dense):
            h = ad.dense(h, net.params[f"{i}.weight"], net.params[f"{i}.bias"])
        outputs.append(h)
    return ForwardTrace(inp, outputs, outputs[net.capture], latent, h)


def sgd_step(net: Network, lr: float, weight_decay: float = 0.0) -> None:
    """``p <- p - lr * (grad + weight_decay * p)``, then clear the grad slots."""
    for p in net.params.values():
        if p.grad is None:
            continue
        if weight_decay:
            p.value = p.value - lr * (p.grad + weight_decay * p.value)
        else:
            p.value = p.value - lr * p.grad
        p.grad = None


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst_param: str
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def finite_diff_check(nets, loss_builder: Callable[[], ad.Node], eps: float = 1e-5,
                      tol: float = 1e-4, n_samples: int = 40, rng=None,
                      floor: float = 1e-6) -> GradCheckReport:
    """Compare ``backward`` against central differences on a random parameter subsample.

    ``nets`` is one network or a list of them; ``loss_builder`` rebuilds the
    scalar loss from the current parameter values.  The relative error of an
    entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if isinstance(nets, Network):
        nets = [nets]
    if rng is None:
        rng = np.random.default_rng(0)
    for net in nets:
        if net.dtype != np.float64:
            raise UsageError("finite_diff_check needs float64 parameters")
        net.zero_grad()
    loss = loss_builder()
    ad.backward(loss)
    named = [(f"net{j}:{k}", p) for j, net in enumerate(nets) for k, p in net.params.items()]
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.value))
                for name, p in named}
    for net in nets:
        net.zero_grad()

    sizes = np.array([p.size for _, p in named])
    worst, worst_name, count = 0.0, "", 0
    # every tensor is probed at least once, the rest is drawn by size
    picks = [(k, int(rng.integers(named[k][1].size))) for k in range(len(named))]
    extra = rng.choice(len(named), size=max(n_samples - len(named), 0), p=sizes / sizes.sum())
    picks += [(int(k), int(rng.integers(named[k][1].size))) for k in extra]
    for k, flat in picks:
        name, p = named[k]
        idx = np.unravel_index(flat, p.value.shape)
        orig = p.value[idx]
        p.value[idx] = orig + eps
        up = float(loss_builder().value)
        p.value[idx] = orig - eps
        down = float(loss_builder().value)
        p.value[idx] = orig
        numeric = (up - down) / (2 * eps)
        a = float(analytic[name][idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        count += 1
        if rel > worst:
            worst, worst_name = rel, f"{name}{tuple(int(i) for i in idx)}"
    return GradCheckReport(worst, count, worst_name, tol)
