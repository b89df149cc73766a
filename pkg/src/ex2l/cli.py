"""Command-line runner: ``ex2l {train,screen,gradcam,mmd,timeit,search}``.

Each verb takes an optional config file (first bare argument or
``--config``) followed by ``--key=value`` overrides.  Exit codes: 0 ok,
2 configuration error, 3 data error, 4 internal failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import gradcam
from .checkpoint import load_checkpoint, networks_from_checkpoint, save_checkpoint
from .config import ExperimentConfig, build_splits, load_config, parse_overrides
from .errors import ConfigError, DataError, Ex2lError, UsageError
from .metrics import PARTITIONS, MetricsReport, mmd_partition_report
from .network import forward
from .trainer import config_dict, infer, random_search, screening_harness, test_report, train

log = logging.getLogger("ex2l")


def _num(v) -> str:
    """Shortest round-trip text for a float; blanks for missing values."""
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(x) for x in row])


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# train

MMD_COLUMNS = {"by-label": "mmd_y", "by-confounder": "mmd_c", "by-env": "mmd_env"}


def metrics_header(n_groups: int) -> list[str]:
    return (["epoch", "split", "algorithm", "similarity", "sampling", "AA", "WGA"]
            + [f"g{k}" for k in range(n_groups)] + list(MMD_COLUMNS.values()))


def metrics_row(cfg, rep: MetricsReport, n_groups: int) -> list:
    similarity = cfg.similarity if cfg.algorithm == "ex2l" else ""
    row = [rep.epoch, rep.split, cfg.algorithm, similarity, cfg.sampling, rep.aa, rep.wga]
    row += [rep.group_acc.get(k) for k in range(n_groups)]
    row += [rep.mmd.get(p) for p in MMD_COLUMNS]
    return row


def export_heatmaps(label_net, conf_net, data, n: int, out_dir: Path, split: str) -> list[list]:
    """Grad-CAM maps of the first ``n`` samples for the true y (label model) and true c."""
    out_dir.mkdir(parents=True, exist_ok=True)
    n = min(n, len(data))
    x = data.images[:n]
    rows = []
    tl = forward(label_net, x)
    y_hat = (tl.logits.value[:, 0] > 0).astype(int) if tl.logits.shape[1] == 1 \
        else tl.logits.value.argmax(axis=1)
    maps_y = gradcam.gradcam(label_net, tl, data.y[:n]).value
    maps_c = None
    if conf_net is not None:
        tc = forward(conf_net, x)
        maps_c = gradcam.gradcam(conf_net, tc, data.c[:n]).value
    for i in range(n):
        label_path = out_dir / f"{split}_{i}_label.pgm"
        gradcam.export_heatmap(maps_y[i], label_path)
        conf_path = ""
        if maps_c is not None:
            conf_path = out_dir / f"{split}_{i}_conf.pgm"
            gradcam.export_heatmap(maps_c[i], conf_path)
        rows.append([i, int(data.y[i]), int(y_hat[i]), int(data.c[i]), str(label_path.name),
                     str(conf_path.name) if conf_path else ""])
    _write_csv(out_dir / "index.csv", ["sample", "y", "y_hat", "c", "label_map_path", "conf_map_path"],
               rows)
    return rows


def cmd_train(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    splits = build_splits(cfg)
    base = cfg.train
    partitions = list(cfg.mmd_partitions)
    n_groups = splits["train"].n_groups
    summary_rows, seconds = [], {}
    for seed in cfg.seeds:
        run_cfg = replace(base, seed=seed)
        log.info("training %s seed %d", run_cfg.algorithm, seed)
        result = train(run_cfg, splits)
        rep = test_report(result, splits, partitions)
        rep.epoch = result.checkpoint.epoch
        summary_rows.append([seed, rep.aa, rep.wga] + [rep.mmd.get(p) for p in partitions])
        seconds[seed] = result.epoch_seconds
        seed_dir = out / f"seed_{seed}"
        seed_dir.mkdir(exist_ok=True)
        # per-epoch train/val rows, then the selected checkpoint's test row
        _write_csv(seed_dir / "metrics.csv", metrics_header(n_groups),
                   [metrics_row(run_cfg, r, n_groups) for r in result.history + [rep]])
        save_checkpoint(seed_dir / "checkpoint.bin", result.checkpoint, {**cfg.values, "seed": seed})
        if cfg.heatmaps:
            label_net, conf_net = result.best_nets()
            export_heatmaps(label_net, conf_net, splits["test"], cfg.heatmaps, seed_dir / "heatmaps",
                            "test")
        print(f"seed {seed}: test AA {rep.aa:.4f} WGA {rep.wga:.4f} (epoch {rep.epoch})")
    header = ["seed", "AA", "WGA"] + [MMD_COLUMNS[p] for p in partitions]
    table = np.array([[np.nan if v is None else v for v in r[1:]] for r in summary_rows], dtype=float)
    mean = table.mean(axis=0)
    std = table.std(axis=0, ddof=1) if len(table) > 1 else np.zeros(table.shape[1])
    summary = [["mean±std"] + [f"{m:.6f}±{s:.6f}" for m, s in zip(mean, std)]]
    _write_csv(out / "summary.csv", header, summary_rows + summary)
    print(f"summary: AA {mean[0]:.4f}±{std[0]:.4f} WGA {mean[1]:.4f}±{std[1]:.4f}")
    write_manifest(out / "manifest.ini", cfg, started, seconds)
    return 0


def write_manifest(path: Path, cfg: ExperimentConfig, started: str, seconds: dict) -> None:
    """Replayable: ``ex2l train manifest.ini`` re-runs the same configuration."""
    lines = [cfg.to_text(), "[manifest]", f"config_hash = {cfg.content_hash()}",
             f"version = {__version__}", f"started = {started}", f"finished = {_now()}"]
    for seed, secs in seconds.items():
        lines.append(f"epoch_seconds_seed_{seed} = " + ",".join(f"{s:.4f}" for s in secs))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# screen / search

def cmd_screen(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    datasets = {name: build_splits(cfg, name) for name in cfg.screen_datasets}
    res = screening_harness(cfg.train, datasets, workers=cfg.parallel_trials)
    names = list(datasets)
    header = ["name", "sampling", "train_wga", "val_wga"]
    for name in names[1:]:
        header += [f"{name}_train_wga", f"{name}_val_wga"]
    rows = []
    for r in res.rows:
        rows.append([r["name"], r["sampling"]] + [r[k] for k in header[2:]])
    _write_csv(out / "screen.csv", header, rows)
    print("top kinds by val WGA: " + ", ".join(res.top_kinds))
    return 0


def cmd_search(cfg: ExperimentConfig, trials: int, search_seed: int) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = build_splits(cfg)
    res = random_search(cfg.train, splits, trials=trials, seed=search_seed, workers=cfg.parallel_trials)
    header = list(res.trials[0])
    _write_csv(out / "trials.csv", header, [[r[k] for k in header] for r in res.trials])
    best = cfg.with_train(**{k: v for k, v in config_dict(res.best).items() if k in cfg.values})
    (out / "best.ini").write_text(best.to_text(), encoding="utf-8")
    print(f"best trial score {res.best_checkpoint.score:.4f}; config written to {out / 'best.ini'}")
    return 0


# ---------------------------------------------------------------------------
# checkpoint consumers

def _load_for_data(path: str, cfg_path, overrides):
    """Checkpoint, the config describing its data, and the rebuilt networks.

    Without a config file the checkpoint's own stored config is used, so the
    heatmaps and MMD values refer to the data the model was trained against.
    """
    ckpt, stored = load_checkpoint(path)
    if cfg_path is None:
        raw = {k: _cfg_text(v) for k, v in stored.items()}
        extra, problems = parse_overrides(list(overrides or []))
        if problems:
            raise ConfigError("invalid overrides", problems)
        cfg = load_config(None, {**raw, **extra})
    else:
        cfg = load_config(cfg_path, overrides)
    dtype = np.float32 if cfg.precision == "float32" else np.float64
    try:
        label_net, conf_net = networks_from_checkpoint(ckpt, dtype)
    except (KeyError, UsageError) as exc:
        raise DataError(f"{path}: parameters do not match the stored architecture ({exc})") from None
    return ckpt, cfg, label_net, conf_net


def _cfg_text(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(_cfg_text(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _check_shape(data, ckpt, path):
    if tuple(data.images.shape[1:]) != tuple(ckpt.in_shape):
        raise DataError(f"dataset images {data.images.shape[1:]} do not match checkpoint {path} "
                        f"input {tuple(ckpt.in_shape)}")


def cmd_gradcam(args, cfg_path, overrides) -> int:
    ckpt, cfg, label_net, conf_net = _load_for_data(args.checkpoint, cfg_path, overrides)
    data = build_splits(cfg)[args.split]
    _check_shape(data, ckpt, args.checkpoint)
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    rows = export_heatmaps(label_net, conf_net, data, args.n, Path(args.out_dir), args.split)
    print(f"wrote {len(rows)} samples to {args.out_dir}")
    return 0


def cmd_mmd(args, cfg_path, overrides) -> int:
    partitions = [p.strip() for p in args.partitions.split(",") if p.strip()]
    bad = [p for p in partitions if p not in PARTITIONS]
    if bad or not partitions:
        raise UsageError(f"unknown partition {', '.join(bad) or '(none)'}; valid: {', '.join(PARTITIONS)}")
    rows = []
    for path in args.checkpoint:
        ckpt, cfg, label_net, _ = _load_for_data(path, cfg_path, overrides)
        splits = build_splits(cfg)
        test = splits["test"]
        _check_shape(test, ckpt, path)
        _, lat = infer(label_net, test.images)
        simple = [p for p in partitions if p != "by-env"]
        values = mmd_partition_report(lat, test.y, test.c, test.env, simple) if simple else {}
        if "by-env" in partitions:
            _, val_lat = infer(label_net, splits["val"].images)
            values.update(mmd_partition_report(np.concatenate([val_lat, lat]), None, None,
                                               np.concatenate([splits["val"].env, test.env]),
                                               ("by-env",)))
        algorithm = cfg.algorithm
        for p in partitions:
            rows.append([path, algorithm, p, values[p]])
    header = ["checkpoint", "algorithm", "partition", "mmd"]
    if args.out:
        _write_csv(Path(args.out), header, rows)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_num(x) for x in r])
    return 0


# ---------------------------------------------------------------------------
# timeit

def time_algorithms(cfg: ExperimentConfig, splits=None) -> list[list]:
    """Rows of (algorithm, median train seconds per epoch, ratio vs ERM or None)."""
    splits = splits or build_splits(cfg)
    batches = cfg.timeit_batches or None
    per = {}
    for algorithm in sorted(cfg.timeit_algorithms):
        run = replace(cfg.train, algorithm=algorithm, max_epochs=cfg.timeit_epochs,
                      patience=cfg.timeit_epochs + 1, seed=cfg.seeds[0])
        res = train(run, {"train": splits["train"], "val": splits["val"].subset(np.arange(1))},
                    max_batches=batches)
        per[algorithm] = float(np.median(res.epoch_seconds))
    ref = per.get("erm")
    return [[a, s, (s / ref if ref else None)] for a, s in per.items()]


def cmd_timeit(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = time_algorithms(cfg)
    _write_csv(out / "timeit.csv", ["algorithm", "epoch_seconds", "ratio_vs_erm"], rows)
    for a, s, r in rows:
        print(f"{a:10s} {s:8.3f} s/epoch" + (f"  {r:.2f}x ERM" if r is not None else ""))
    return 0


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ex2l", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in ("train", "screen", "timeit"):
        s = sub.add_parser(verb)
        s.add_argument("--config")
    s = sub.add_parser("search")
    s.add_argument("--config")
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--search-seed", type=int, default=0)
    s = sub.add_parser("gradcam")
    s.add_argument("--config")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=5)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s = sub.add_parser("mmd")
    s.add_argument("--config")
    s.add_argument("--checkpoint", action="append", required=True)
    s.add_argument("--partitions", default="by-label,by-confounder")
    s.add_argument("--out")
    return p


def run(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    cfg_path = args.config
    if rest and not rest[0].startswith("-"):
        if cfg_path is not None:
            raise ConfigError("config given twice", [f"--config {cfg_path}", rest[0]])
        cfg_path = rest.pop(0)
    if args.verb == "gradcam":
        return cmd_gradcam(args, cfg_path, rest)
    if args.verb == "mmd":
        return cmd_mmd(args, cfg_path, rest)
    cfg = load_config(cfg_path, rest)
    if args.verb == "train":
        return cmd_train(cfg)
    if args.verb == "screen":
        return cmd_screen(cfg)
    if args.verb == "search":
        return cmd_search(cfg, args.trials, args.search_seed)
    return cmd_timeit(cfg)


def main(argv=None) -> int:
    try:
        return run(argv)
    except Ex2lError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except (FloatingPointError, AssertionError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
