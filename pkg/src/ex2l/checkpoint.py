"""Flat binary checkpoint files.

Layout (all integers little-endian)::

    magic      8 bytes  b"EX2LCKPT"
    version    u32      currently 1
    meta_len   u32
    meta       meta_len bytes of UTF-8 JSON (epoch, scores, layers, config)
    n_tensors  u32
    per tensor:
        name_len u16, name (UTF-8), ndim u8, dims u32 * ndim
    then every tensor's values as little-endian float64, in table order

Tensor names are ``label/<param>`` and ``conf/<param>``.  float32 networks
round-trip exactly because every float32 value is representable as a double.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .network import Network, build_network, layer_from_dict, layer_to_dict
from .trainer import Checkpoint

MAGIC = b"EX2LCKPT"
VERSION = 1


def save_checkpoint(path, ckpt: Checkpoint, config: dict | None = None) -> None:
    meta = {
        "epoch": ckpt.epoch,
        "val_aa": ckpt.val_aa,
        "val_wga": ckpt.val_wga,
        "in_shape": list(ckpt.in_shape),
        "capture": ckpt.capture,
        "layers": [layer_to_dict(l) for l in ckpt.layers],
        "conf_layers": [layer_to_dict(l) for l in ckpt.conf_layers] if ckpt.conf_layers else None,
        "config": config or {},
    }
    tensors = [(f"label/{k}", v) for k, v in sorted(ckpt.label_state.items())]
    if ckpt.conf_state is not None:
        tensors += [(f"conf/{k}", v) for k, v in sorted(ckpt.conf_state.items())]
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes,
           struct.pack("<I", len(tensors))]
    for name, v in tensors:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", v.ndim))
        out.append(struct.pack(f"<{v.ndim}I", *v.shape))
    for _, v in tensors:
        out.append(np.asarray(v, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> tuple[Checkpoint, dict]:
    """Returns the checkpoint and the stored config dict."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("not an ex2l checkpoint (bad magic)", 0)
    version, meta_len = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", len(MAGIC))
    at = r.pos
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint metadata: {exc}", at) from None
    (n,) = r.unpack("<I", "tensor count")
    table = []
    for _ in range(n):
        (name_len,) = r.unpack("<H", "tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B", "tensor rank")
        table.append((name, r.unpack(f"<{ndim}I", "tensor shape")))
    label, conf = {}, {}
    for name, shape in table:
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(8 * count, f"values of {name}"), dtype="<f8").reshape(shape)
        owner, _, key = name.partition("/")
        if owner not in ("label", "conf"):
            raise FormatError(f"unexpected tensor name {name!r}")
        (label if owner == "label" else conf)[key] = arr.astype(np.float64)
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after tensor data", r.pos)
    ckpt = Checkpoint(
        epoch=meta["epoch"], label_state=label, conf_state=conf or None,
        val_aa=meta["val_aa"], val_wga=meta["val_wga"],
        layers=[layer_from_dict(d) for d in meta["layers"]],
        in_shape=tuple(meta["in_shape"]), capture=meta["capture"],
        conf_layers=[layer_from_dict(d) for d in meta["conf_layers"]] if meta["conf_layers"] else None,
    )
    return ckpt, meta.get("config", {})


def networks_from_checkpoint(ckpt: Checkpoint, dtype=np.float64) -> tuple[Network, Network | None]:
    """Rebuild the label (and confounder) networks with the stored parameters."""
    rng = np.random.default_rng(0)
    label = build_network(ckpt.layers, ckpt.in_shape, ckpt.capture, rng, dtype)
    label.load_state(ckpt.label_state)
    conf = None
    if ckpt.conf_layers and ckpt.conf_state:
        conf = build_network(ckpt.conf_layers, ckpt.in_shape, ckpt.capture, rng, dtype)
        conf.load_state(ckpt.conf_state)
    return label, conf
