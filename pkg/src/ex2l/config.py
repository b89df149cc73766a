"""Experiment configuration: sectioned ``key = value`` text plus ``--key=value`` overrides.

Keys are unique across sections, so an override only names the key.  Every
problem found while parsing and validating is collected and reported in a
single :class:`~ex2l.errors.ConfigError`.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Callable

from .datagen import CELEBA_TABLE, WATERBIRDS_TABLE, GroupTable, SplitSpec, build_cmnist_splits, \
    build_table_splits, load_mnist_idx
from .errors import ConfigError, DataError
from .metrics import PARTITIONS
from .trainer import TrainConfig

DATASETS = ("synth-cmnist", "mnist-idx", "waterbirds-table", "celeba-table", "group-table")
RESERVED_SECTIONS = ("manifest",)  # written by runs, ignored when replaying


def _list(item: Callable) -> Callable:
    def parse(s: str) -> tuple:
        parts = [p.strip() for p in s.split(",") if p.strip()]
        return tuple(item(p) for p in parts)
    return parse


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


@dataclass(frozen=True)
class Key:
    section: str
    name: str
    parse: Callable
    default: Any
    help: str = ""


_TRAIN_PARSERS = {"channels": _list(int)}

SCHEMA: list[Key] = []
for _f in fields(TrainConfig):
    _default = _f.default
    _parse = _TRAIN_PARSERS.get(_f.name, type(_default))
    SCHEMA.append(Key("train", _f.name, _parse, _default))
SCHEMA += [
    Key("dataset", "dataset", str, "synth-cmnist", "one of " + ", ".join(DATASETS)),
    Key("dataset", "n_train", int, 10000),
    Key("dataset", "n_val", int, 2000),
    Key("dataset", "n_test", int, 2000),
    Key("dataset", "train_correlations", _list(float), (0.9, 0.8)),
    Key("dataset", "test_correlation", float, 0.1),
    Key("dataset", "flip", float, 0.25),
    Key("dataset", "data_seed", int, 0),
    Key("dataset", "table_path", str, ""),
    Key("dataset", "test_env", str, ""),
    Key("dataset", "idx_images", str, ""),
    Key("dataset", "idx_labels", str, ""),
    Key("experiment", "out_dir", str, "runs/default"),
    Key("experiment", "seeds", _list(int), (42, 8, 777)),
    Key("experiment", "heatmaps", int, 0, "per-seed Grad-CAM exports after training"),
    Key("experiment", "mmd_partitions", _list(str), ("by-label", "by-confounder", "by-env")),
    Key("experiment", "parallel_trials", int, 1),
    Key("experiment", "screen_datasets", _list(str), ("synth-cmnist", "waterbirds-table")),
    Key("experiment", "timeit_algorithms", _list(str), ("erm", "ex2l")),
    Key("experiment", "timeit_batches", int, 20, "steps per timed epoch; 0 = full epoch"),
    Key("experiment", "timeit_epochs", int, 2),
]
KEYS = {k.name: k for k in SCHEMA}
SECTIONS = tuple(dict.fromkeys(k.section for k in SCHEMA))


@dataclass
class ExperimentConfig:
    values: dict  # every key in SCHEMA, resolved

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(**{f.name: self.values[f.name] for f in fields(TrainConfig)})

    def with_train(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig({**self.values, **changes})

    def to_text(self) -> str:
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            lines += [f"{k.name} = {_fmt(self.values[k.name])}" for k in SCHEMA if k.section == section]
            lines.append("")
        return "\n".join(lines)

    def content_hash(self) -> str:
        """Git blob id of the canonical config text."""
        body = self.to_text().encode("utf-8")
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def parse_overrides(argv: list[str]) -> tuple[dict, list[str]]:
    """``--key=value`` or ``--key value`` pairs -> (raw strings, problems)."""
    raw, problems = {}, []
    i = 0
    while i < len(argv):
        tok = argv[i]
        if not tok.startswith("--") or len(tok) == 2:
            problems.append(f"unexpected argument {tok!r}")
            i += 1
            continue
        key, eq, value = tok[2:].partition("=")
        key = key.replace("-", "_")
        if not eq:
            if i + 1 >= len(argv) or argv[i + 1].startswith("--"):
                problems.append(f"override --{key} has no value")
                i += 1
                continue
            value = argv[i + 1]
            i += 1
        raw[key] = value
        i += 1
    return raw, problems


def load_config(path=None, overrides: list[str] | dict | None = None) -> ExperimentConfig:
    """Defaults, then the file, then overrides; validated as a whole."""
    problems: list[str] = []
    raw: dict[str, str] = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}", [str(exc).splitlines()[0]]) from None
        for section in parser.sections():
            if section in RESERVED_SECTIONS:
                continue
            if section not in SECTIONS:
                problems.append(f"unknown section [{section}]")
                continue
            for key, value in parser.items(section):
                if key in KEYS and KEYS[key].section != section:
                    problems.append(f"key {key!r} belongs in [{KEYS[key].section}], not [{section}]")
                raw[key] = value
    if isinstance(overrides, dict):
        raw.update({k: str(v) for k, v in overrides.items()})
    elif overrides:
        extra, bad = parse_overrides(list(overrides))
        problems += bad
        raw.update(extra)

    values = {k.name: k.default for k in SCHEMA}
    for key, text in raw.items():
        if key not in KEYS:
            problems.append(f"unknown key {key!r}")
            continue
        try:
            values[key] = KEYS[key].parse(text)
        except ValueError as exc:
            problems.append(f"{key}: cannot parse {text!r} ({exc})")
    cfg = ExperimentConfig(values)
    problems += validate(cfg)
    if problems:
        raise ConfigError("invalid configuration", problems)
    return cfg


def validate(cfg: ExperimentConfig) -> list[str]:
    v = cfg.values
    problems = cfg.train.validate()
    if len(v["channels"]) != 2 or any(ch < 1 for ch in v["channels"]):
        problems.append("channels must be two positive integers")
    if v["dataset"] not in DATASETS:
        problems.append(f"dataset must be one of {', '.join(DATASETS)}, got {v['dataset']!r}")
    for key in ("n_train", "n_val", "n_test"):
        if v[key] < 1:
            problems.append(f"{key} must be >= 1")
    for key in ("test_correlation", "flip"):
        if not 0.0 <= v[key] <= 1.0:
            problems.append(f"{key} must lie in [0, 1]")
    if not v["train_correlations"] or any(not 0.0 <= e <= 1.0 for e in v["train_correlations"]):
        problems.append("train_correlations must be a non-empty list of values in [0, 1]")
    if v["dataset"] == "group-table" and not v["table_path"]:
        problems.append("dataset group-table needs table_path")
    if v["dataset"] == "mnist-idx" and not (v["idx_images"] and v["idx_labels"]):
        problems.append("dataset mnist-idx needs idx_images and idx_labels")
    if not v["seeds"]:
        problems.append("seeds must list at least one seed")
    if len(set(v["seeds"])) != len(v["seeds"]):
        problems.append("seeds must be distinct")
    if v["heatmaps"] < 0:
        problems.append("heatmaps must be >= 0")
    bad = [p for p in v["mmd_partitions"] if p not in PARTITIONS]
    if bad:
        problems.append(f"unknown mmd partition(s) {', '.join(bad)}; valid: {', '.join(PARTITIONS)}")
    if v["parallel_trials"] < 1:
        problems.append("parallel_trials must be >= 1")
    bad = [d for d in v["screen_datasets"] if d not in DATASETS]
    if bad or not v["screen_datasets"]:
        problems.append(f"screen_datasets must name datasets from {', '.join(DATASETS)}")
    bad = [a for a in v["timeit_algorithms"] if a not in ("erm", "groupdro", "ex2l")]
    if bad or not v["timeit_algorithms"]:
        problems.append("timeit_algorithms must list erm, groupdro and/or ex2l")
    if v["timeit_batches"] < 0 or v["timeit_epochs"] < 1:
        problems.append("timeit_batches must be >= 0 and timeit_epochs >= 1")
    return problems


def build_splits(cfg: ExperimentConfig, dataset: str | None = None) -> dict:
    """Materialise train/val/test for ``dataset`` (default: the configured one)."""
    v = cfg.values
    kind = dataset or v["dataset"]
    if kind in ("synth-cmnist", "mnist-idx"):
        glyphs = None
        if kind == "mnist-idx":
            images, labels = load_mnist_idx(v["idx_images"], v["idx_labels"])
            glyphs = (images, labels)
        spec = SplitSpec(tuple(v["train_correlations"]), v["test_correlation"], v["n_train"],
                         v["n_val"], v["n_test"], v["flip"], v["data_seed"])
        return build_cmnist_splits(spec, glyphs)
    if kind == "waterbirds-table":
        table = WATERBIRDS_TABLE
    elif kind == "celeba-table":
        table = CELEBA_TABLE
    elif kind == "group-table":
        try:
            table = GroupTable.from_csv(v["table_path"])
        except OSError as exc:
            raise DataError(f"cannot read group table {v['table_path']}: {exc}") from None
    else:
        raise ConfigError(f"unknown dataset {kind!r}")
    test_env = v["test_env"] or None
    if test_env is not None and test_env not in table.envs:
        raise ConfigError(f"test_env {test_env!r} not in table environments {table.envs}")
    return build_table_splits(table, v["n_train"], v["n_val"], v["n_test"], v["data_seed"], test_env)
