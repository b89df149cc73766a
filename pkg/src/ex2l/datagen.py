"""Group-annotated synthetic datasets and the two batch samplers.

Every example is a pure function of ``(seed, index)``: each draws from its
own ``np.random.Generator`` seeded with that pair, so any subset can be
regenerated bit-identically.

Group encoding is row-major over confounder x label: ``g = c * n_labels + y``.
"""
from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import DataError, FormatError, UsageError

IMAGE_SHAPE = (3, 28, 28)
RED, GREEN = 0, 1  # channel used for confounder value 0 / 1 in the CMNIST recipe

# seven-segment layout: a top, b upper right, c lower right, d bottom,
# e lower left, f upper left, g middle
_SEGMENTS = {
    0: "abcdef", 1: "bc", 2: "abdeg", 3: "abcdg", 4: "bcfg",
    5: "acdfg", 6: "acdefg", 7: "abc", 8: "abcdefg", 9: "abcdfg",
}


def encode_group(c, y, n_labels: int):
    return np.asarray(c) * n_labels + np.asarray(y)


def decode_group(g, n_labels: int):
    g = np.asarray(g)
    return g // n_labels, g % n_labels


def example_rng(seed: int, *index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, index)]))


def render_glyph(template: int, rng: np.random.Generator, size: int = 28) -> np.ndarray:
    """A jittered seven-segment digit: intensity map in [0, 1], shape (size, size)."""
    img = np.zeros((size, size))
    w = int(rng.integers(9, 13))
    h = int(rng.integers(16, 21))
    t = int(rng.integers(2, 4))
    x0 = (size - w) // 2 + int(rng.integers(-3, 4))
    y0 = (size - h) // 2 + int(rng.integers(-3, 4))
    x0 = min(max(x0, 0), size - w)
    y0 = min(max(y0, 0), size - h)
    mid = y0 + h // 2
    rects = {
        "a": (y0, y0 + t, x0, x0 + w),
        "d": (y0 + h - t, y0 + h, x0, x0 + w),
        "g": (mid - t // 2, mid - t // 2 + t, x0, x0 + w),
        "f": (y0, mid + 1, x0, x0 + t),
        "e": (mid, y0 + h, x0, x0 + t),
        "b": (y0, mid + 1, x0 + w - t, x0 + w),
        "c": (mid, y0 + h, x0 + w - t, x0 + w),
    }
    for seg in _SEGMENTS[int(template)]:
        r0, r1, c0, c1 = rects[seg]
        img[r0:r1, c0:c1] = 1.0
    return img * rng.uniform(0.7, 1.0)


@dataclass(frozen=True)
class Example:
    image: np.ndarray
    y: int
    c: int
    g: int
    env: int


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    y: np.ndarray
    c: Optional[np.ndarray]  # None when the confounder is not annotated
    env: np.ndarray
    n_labels: int = 2
    n_confounders: int = 2
    digit: Optional[np.ndarray] = None  # glyph template / source digit, when known
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.images)
        for name in ("y", "c", "env"):
            if getattr(self, name) is not None and len(getattr(self, name)) != n:
                raise DataError(f"dataset field {name!r} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i) -> Example:
        return Example(self.images[i], int(self.y[i]), int(self.c[i]), int(self.g[i]), int(self.env[i]))

    @property
    def has_confounder(self) -> bool:
        return self.c is not None

    @property
    def g(self) -> np.ndarray:
        if self.c is None:
            raise DataError("dataset has no confounder labels, so no groups")
        return encode_group(self.c, self.y, self.n_labels)

    @property
    def n_groups(self) -> int:
        return self.n_labels * self.n_confounders

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.y[idx], None if self.c is None else self.c[idx], self.env[idx],
                       self.n_labels, self.n_confounders,
                       None if self.digit is None else self.digit[idx], dict(self.meta))

    def group_counts(self) -> np.ndarray:
        return np.bincount(self.g, minlength=self.n_groups)

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        first = parts[0]
        digit = None
        if all(p.digit is not None for p in parts):
            digit = np.concatenate([p.digit for p in parts])
        return Dataset(np.concatenate([p.images for p in parts]),
                       np.concatenate([p.y for p in parts]),
                       None if any(p.c is None for p in parts) else np.concatenate([p.c for p in parts]),
                       np.concatenate([p.env for p in parts]),
                       first.n_labels, first.n_confounders, digit, dict(first.meta))


# ---------------------------------------------------------------------------
# CMNIST-style recipe

def gen_cmnist_style(n: int, correlation: float, flip: float = 0.25, seed: int = 0,
                     env: int = 0, glyphs=None) -> Dataset:
    """Binary digit task with a colour confounder.

    Per example: pick a glyph (procedural template, or a real digit when
    ``glyphs=(images, digits)`` is given); base label = digit >= 5; the
    label is flipped with probability ``flip``; the colour equals the
    (noisy) label with probability ``correlation`` and is inverted otherwise.
    Colour 0 tints the glyph red (channel 0), colour 1 green (channel 1).
    """
    if n < 1:
        raise UsageError("n must be >= 1")
    if not 0.0 <= correlation <= 1.0 or not 0.0 <= flip <= 1.0:
        raise UsageError("correlation and flip must lie in [0, 1]")
    images = np.zeros((n,) + IMAGE_SHAPE, dtype=np.float32)
    y = np.zeros(n, dtype=np.int64)
    c = np.zeros(n, dtype=np.int64)
    digit = np.zeros(n, dtype=np.int64)
    for i in range(n):
        rng = example_rng(seed, env, i)
        if glyphs is None:
            d = int(rng.integers(10))
            mask = render_glyph(d, rng)
        else:
            src_images, src_digits = glyphs
            j = int(rng.integers(len(src_images)))
            d = int(src_digits[j])
            mask = np.asarray(src_images[j], dtype=np.float64)
        label = int(d >= 5)
        if rng.random() < flip:
            label = 1 - label
        colour = label if rng.random() < correlation else 1 - label
        images[i, RED if colour == 0 else GREEN] = mask
        y[i], c[i], digit[i] = label, colour, d
    return Dataset(images, y, c, np.full(n, env, dtype=np.int64), 2, 2, digit,
                   {"kind": "cmnist", "correlation": correlation, "flip": flip})


# ---------------------------------------------------------------------------
# group-proportion tables

@dataclass
class GroupTable:
    """Rows of (environment, confounder, label, proportion).

    Names are mapped to indices in order of first appearance.  Published
    tables are rounded to 0.01%, so proportions within 1e-3 of summing to
    one are renormalised; anything further off is rejected.
    """
    rows: list

    def __post_init__(self):
        self.rows = [(str(e), str(c), str(y), float(p)) for e, c, y, p in self.rows]
        problems = []
        for e in self.envs:
            ps = [p for env, _, _, p in self.rows if env == e]
            if any(p < 0 for p in ps):
                problems.append(f"environment {e!r} has a negative proportion")
            total = sum(ps)
            if abs(total - 1.0) > 1e-3:
                problems.append(f"environment {e!r} proportions sum to {total:.6f}")
        if problems:
            raise DataError("invalid group table: " + "; ".join(problems))
        totals = {e: sum(p for env, _, _, p in self.rows if env == e) for e in self.envs}
        self.rows = [(e, c, y, p / totals[e]) for e, c, y, p in self.rows]

    @property
    def envs(self) -> list[str]:
        return list(dict.fromkeys(r[0] for r in self.rows))

    @property
    def confounders(self) -> list[str]:
        return list(dict.fromkeys(r[1] for r in self.rows))

    @property
    def labels(self) -> list[str]:
        return list(dict.fromkeys(r[2] for r in self.rows))

    def distribution(self, env: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(confounder idx, label idx, probability) arrays for one environment."""
        cs, ys, ps = [], [], []
        for e, c, y, p in self.rows:
            if e == env:
                cs.append(self.confounders.index(c))
                ys.append(self.labels.index(y))
                ps.append(p)
        return np.array(cs), np.array(ys), np.array(ps)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["env", "confounder", "label", "proportion"])
            for e, c, y, p in self.rows:
                w.writerow([e, c, y, repr(p)])

    @classmethod
    def from_csv(cls, path) -> "GroupTable":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"env", "confounder", "label", "proportion"} - set(reader.fieldnames or ())
            if missing:
                raise DataError(f"{path}: missing columns {sorted(missing)}")
            rows = []
            for r in reader:
                p = r["proportion"].strip()
                value = float(p[:-1]) / 100.0 if p.endswith("%") else float(p)
                rows.append((r["env"], r["confounder"], r["label"], value))
        return cls(rows)


WATERBIRDS_TABLE = GroupTable([
    ("Land-centric (1)", "Land", "Waterbird", 0.0826),
    ("Land-centric (1)", "Land", "Landbird", 0.6180),
    ("Land-centric (1)", "Water", "Waterbird", 0.1158),
    ("Land-centric (1)", "Water", "Landbird", 0.1837),
    ("Balanced (2)", "Land", "Waterbird", 0.0598),
    ("Balanced (2)", "Land", "Landbird", 0.4477),
    ("Balanced (2)", "Water", "Waterbird", 0.1905),
    ("Balanced (2)", "Water", "Landbird", 0.3020),
])

CELEBA_TABLE = GroupTable([
    ("Balanced (1)", "Male", "Blonde", 0.0108),
    ("Balanced (1)", "Male", "Non-Blonde", 0.4694),
    ("Balanced (1)", "Female", "Blonde", 0.1020),
    ("Balanced (1)", "Female", "Non-Blonde", 0.4177),
    ("Less Males (2)", "Male", "Blonde", 0.0066),
    ("Less Males (2)", "Male", "Non-Blonde", 0.3519),
    ("Less Males (2)", "Female", "Blonde", 0.1736),
    ("Less Males (2)", "Female", "Non-Blonde", 0.4679),
])


def render_texture(kind: int, rng: np.random.Generator, size: int = 28) -> np.ndarray:
    """Background pattern: even kinds are diagonal stripes, odd kinds a dot grid."""
    yy, xx = np.mgrid[0:size, 0:size]
    period = 4 + kind // 2
    phase = int(rng.integers(period))
    if kind % 2 == 0:
        tex = ((xx + yy + phase) % period) < period // 2
    else:
        tex = (((xx + phase) % period) < 2) & (((yy + phase) % period) < 2)
    return tex.astype(np.float64) * rng.uniform(0.4, 0.6)


def _family_template(label: int, n_labels: int, rng) -> int:
    lo = (10 * label) // n_labels
    hi = max((10 * (label + 1)) // n_labels, lo + 1)
    return int(rng.integers(lo, hi))


def synth_object_image(label: int, confounder: int, n_labels: int, rng) -> np.ndarray:
    """Glyph of the label's family on a central patch, confounder texture around it."""
    img = np.zeros(IMAGE_SHAPE)
    tex = render_texture(confounder, rng)
    glyph = render_glyph(_family_template(label, n_labels, rng), rng)
    patch = np.zeros(IMAGE_SHAPE[1:], dtype=bool)
    patch[4:24, 6:22] = True
    img[:] = np.where(patch, 0.0, tex)
    img[:] += glyph
    return np.clip(img, 0.0, 1.0)


def _draw_member(rng: np.random.Generator, cdf: np.ndarray) -> int:
    return min(int(np.searchsorted(cdf, rng.random(), side="right")), len(cdf) - 1)


def sample_memberships(table: GroupTable, env: str, n: int, seed: int = 0):
    """(confounder, label) index arrays that :func:`gen_from_group_table` would draw."""
    e_idx = table.envs.index(env)
    cs, ys, ps = table.distribution(env)
    cdf = np.cumsum(ps)
    cdf[-1] = 1.0
    rows = np.array([_draw_member(example_rng(seed, 1000 + e_idx, i), cdf) for i in range(n)],
                    dtype=np.int64)
    return cs[rows], ys[rows]


def gen_from_group_table(table: GroupTable, n_per_env, seed: int = 0,
                         envs: Optional[Sequence[str]] = None) -> Dataset:
    """Sample groups from each environment's row distribution and synthesize images."""
    envs = list(envs) if envs is not None else table.envs
    if isinstance(n_per_env, int):
        n_per_env = [n_per_env] * len(envs)
    n_labels, n_conf = len(table.labels), len(table.confounders)
    parts = []
    for e_name, n in zip(envs, n_per_env):
        e_idx = table.envs.index(e_name)
        cs, ys, ps = table.distribution(e_name)
        cdf = np.cumsum(ps)
        cdf[-1] = 1.0
        images = np.zeros((n,) + IMAGE_SHAPE, dtype=np.float32)
        y = np.zeros(n, dtype=np.int64)
        c = np.zeros(n, dtype=np.int64)
        for i in range(n):
            rng = example_rng(seed, 1000 + e_idx, i)
            k = _draw_member(rng, cdf)
            y[i], c[i] = ys[k], cs[k]
            images[i] = synth_object_image(int(y[i]), int(c[i]), n_labels, rng)
        parts.append(Dataset(images, y, c, np.full(n, e_idx, dtype=np.int64), n_labels, n_conf))
    out = Dataset.concat(parts)
    out.meta = {"kind": "group-table", "labels": table.labels, "confounders": table.confounders}
    return out


# ---------------------------------------------------------------------------
# IDX ingestion

_IDX_IMAGES, _IDX_LABELS = 0x00000803, 0x00000801


def _read_idx(path, expected_magic: int) -> np.ndarray:
    path = Path(path)
    raw = gzip.decompress(path.read_bytes()) if path.suffix == ".gz" else path.read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension table", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise FormatError(f"{path}: expected {count} data bytes, found {len(raw) - header}",
                          offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Images scaled to [0, 1] as (N, 28, 28) float64, labels as int64."""
    images = _read_idx(images_path, _IDX_IMAGES)
    labels = _read_idx(labels_path, _IDX_LABELS)
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


# ---------------------------------------------------------------------------
# samplers

class RandomSampler:
    """i.i.d. uniform draws over examples, with replacement."""

    def __init__(self, n: int, batch_size: int, seed: int = 0):
        if batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if n < 1:
            raise DataError("cannot sample from an empty dataset")
        self.n, self.batch_size = n, batch_size
        self.rng = np.random.default_rng(seed)

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(self.n / self.batch_size)

    def next_batch(self) -> np.ndarray:
        return self.rng.integers(self.n, size=self.batch_size)

    def epoch(self) -> Iterator[np.ndarray]:
        for _ in range(self.batches_per_epoch):
            yield self.next_batch()

    def __iter__(self):
        while True:
            yield self.next_batch()


class UniformGroupSampler(RandomSampler):
    """Each slot picks a non-empty group uniformly, then a member uniformly."""

    def __init__(self, groups, batch_size: int, seed: int = 0):
        groups = np.asarray(groups)
        super().__init__(max(len(groups), 1), batch_size, seed)
        if len(groups) == 0:
            raise DataError("all groups are empty")
        order = np.argsort(groups, kind="stable")
        labels, starts, sizes = np.unique(groups[order], return_index=True, return_counts=True)
        self.order, self.starts, self.sizes = order, starts, sizes
        self.group_ids = labels
        self.n = len(groups)

    def next_batch(self) -> np.ndarray:
        k = self.rng.integers(len(self.sizes), size=self.batch_size)
        within = np.floor(self.rng.random(self.batch_size) * self.sizes[k]).astype(np.int64)
        return self.order[self.starts[k] + within]


def make_sampler(kind: str, dataset: Dataset, batch_size: int, seed: int):
    if kind == "random":
        return RandomSampler(len(dataset), batch_size, seed)
    if kind in ("uniform-group", "uniform_group"):
        return UniformGroupSampler(dataset.g, batch_size, seed)
    raise UsageError(f"unknown sampling {kind!r}; expected random or uniform-group")


# ---------------------------------------------------------------------------
# split construction

@dataclass
class SplitSpec:
    """Train/val/test layout for the CMNIST-style recipe.

    Validation draws from the training environments; the test environment
    reverses the colour-label pairing.
    """
    train_correlations: tuple = (0.9, 0.8)
    test_correlation: float = 0.1
    n_train: int = 10000
    n_val: int = 2000
    n_test: int = 2000
    flip: float = 0.25
    seed: int = 0


def _split_sizes(total: int, k: int) -> list[int]:
    base = [total // k] * k
    for i in range(total - sum(base)):
        base[i] += 1
    return base


def build_cmnist_splits(spec: SplitSpec, glyphs=None) -> dict[str, Dataset]:
    k = len(spec.train_correlations)
    splits = {}
    for name, total, offset in (("train", spec.n_train, 0), ("val", spec.n_val, 100)):
        parts = []
        for e, (corr, n) in enumerate(zip(spec.train_correlations, _split_sizes(total, k))):
            if n == 0:
                continue
            part = gen_cmnist_style(n, corr, spec.flip, seed=spec.seed * 1000 + offset + e, env=e,
                                    glyphs=glyphs)
            parts.append(part)
        splits[name] = Dataset.concat(parts)
    splits["test"] = gen_cmnist_style(spec.n_test, spec.test_correlation, spec.flip,
                                      seed=spec.seed * 1000 + 200, env=k, glyphs=glyphs)
    return splits


def build_table_splits(table: GroupTable, n_train: int, n_val: int, n_test: int, seed: int = 0,
                       test_env: Optional[str] = None) -> dict[str, Dataset]:
    """Train/val from every environment except ``test_env``; test from ``test_env``.

    With no ``test_env`` the test split is group-balanced, mirroring the
    usual evaluation of subpopulation-shift benchmarks.
    """
    envs = table.envs
    train_envs = [e for e in envs if e != test_env]
    k = len(train_envs)
    train = gen_from_group_table(table, _split_sizes(n_train, k), seed * 1000, train_envs)
    val = gen_from_group_table(table, _split_sizes(n_val, k), seed * 1000 + 100, train_envs)
    if test_env is not None:
        test = gen_from_group_table(table, [n_test], seed * 1000 + 200, [test_env])
    else:
        balanced = GroupTable([("balanced", c, y, 1.0 / (len(table.confounders) * len(table.labels)))
                               for c in table.confounders for y in table.labels])
        test = gen_from_group_table(balanced, [n_test], seed * 1000 + 200)
    for d in (train, val, test):
        d.meta = {"kind": "group-table", "labels": table.labels, "confounders": table.confounders}
    return {"train": train, "val": val, "test": test}
