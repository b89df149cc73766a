from __future__ import annotations

import csv

import numpy as np
import pytest

from ex2l.checkpoint import MAGIC, load_checkpoint, networks_from_checkpoint, save_checkpoint
from ex2l.cli import main
from ex2l.config import ExperimentConfig, load_config, parse_overrides
from ex2l.errors import ConfigError, FormatError
from ex2l.network import forward

SMALL = ["--n_train=64", "--n_val=32", "--n_test=32", "--max_epochs=1", "--batch_size=16",
         "--channels=4,6", "--seeds=1"]


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", f"--out_dir={out}", "--heatmaps=3", *SMALL]) == 0
    return out


# -- config -----------------------------------------------------------------

def test_overrides_both_spellings():
    raw, problems = parse_overrides(["--lr=0.5", "--batch-size", "8", "stray", "--seed"])
    assert raw == {"lr": "0.5", "batch_size": "8"}
    assert len(problems) == 2


def test_config_file_then_overrides(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train]\nlr = 0.3\nalgorithm = erm\n[dataset]\nn_train = 100\n")
    cfg = load_config(p, ["--lr=0.2"])
    assert cfg.lr == 0.2 and cfg.algorithm == "erm" and cfg.n_train == 100
    assert cfg.train.lr == 0.2


def test_config_collects_every_problem(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train]\nlr = -1\nn_train = 5\nbogus = 1\n[weird]\nx = 1\n")
    with pytest.raises(ConfigError) as err:
        load_config(p, ["--batch_size=zero"])
    problems = err.value.problems
    assert len(problems) == 5
    assert any("bogus" in s for s in problems) and any("[weird]" in s for s in problems)


def test_config_text_roundtrip_and_hash(tmp_path):
    cfg = load_config(None, ["--lr=0.125", "--seeds=3,4"])
    p = tmp_path / "again.ini"
    p.write_text(cfg.to_text())
    again = load_config(p)
    assert again.values == cfg.values
    assert again.content_hash() == cfg.content_hash()
    assert len(cfg.content_hash()) == 40
    assert load_config(None, ["--lr=0.25"]).content_hash() != cfg.content_hash()


def test_manifest_section_is_ignored(tmp_path):
    p = tmp_path / "m.ini"
    p.write_text(load_config().to_text() + "[manifest]\nconfig_hash = abc\n")
    assert load_config(p).values == load_config().values


# -- checkpoints ------------------------------------------------------------

def test_checkpoint_roundtrip(trained):
    ckpt, stored = load_checkpoint(trained / "seed_1" / "checkpoint.bin")
    assert stored["seed"] == 1 and stored["n_train"] == 64
    label, conf = networks_from_checkpoint(ckpt)
    assert conf is not None
    x = np.random.default_rng(0).random((2, 3, 28, 28))
    assert forward(label, x).logits.shape == (2, 1)


def test_checkpoint_rewrite_is_byte_identical(trained, tmp_path):
    src = trained / "seed_1" / "checkpoint.bin"
    ckpt, stored = load_checkpoint(src)
    save_checkpoint(tmp_path / "c.bin", ckpt, stored)
    assert (tmp_path / "c.bin").read_bytes() == src.read_bytes()


def test_checkpoint_format_errors(trained, tmp_path):
    data = (trained / "seed_1" / "checkpoint.bin").read_bytes()
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(FormatError) as err:
        load_checkpoint(bad)
    assert err.value.offset == 0
    bad.write_bytes(data[:-5])
    with pytest.raises(FormatError) as err:
        load_checkpoint(bad)
    assert "truncated" in str(err.value) and err.value.offset > len(MAGIC)
    bad.write_bytes(data + b"\0")
    with pytest.raises(FormatError) as err:
        load_checkpoint(bad)
    assert err.value.offset == len(data)


# -- verbs ------------------------------------------------------------------

def test_train_outputs(trained):
    rows = _rows(trained / "seed_1" / "metrics.csv")
    header = rows[0]
    assert header[:7] == ["epoch", "split", "algorithm", "similarity", "sampling", "AA", "WGA"]
    assert header[-3:] == ["mmd_y", "mmd_c", "mmd_env"]
    assert [r[1] for r in rows[1:]] == ["train", "val", "test"]
    summary = _rows(trained / "summary.csv")
    assert summary[-1][0] == "mean±std" and len(summary) == 3
    manifest = (trained / "manifest.ini").read_text()
    assert "[manifest]" in manifest and "config_hash" in manifest
    index = _rows(trained / "seed_1" / "heatmaps" / "index.csv")
    assert len(index) == 4


def test_manifest_replay_is_byte_identical(trained, tmp_path):
    out = tmp_path / "replay"
    manifest = trained / "manifest.ini"
    assert main(["train", str(manifest), f"--out_dir={out}"]) == 0
    a = (trained / "seed_1" / "metrics.csv").read_bytes()
    assert (out / "seed_1" / "metrics.csv").read_bytes() == a


def test_gradcam_verb(trained, tmp_path):
    out = tmp_path / "maps"
    ckpt = trained / "seed_1" / "checkpoint.bin"
    assert main(["gradcam", f"--checkpoint={ckpt}", "--n=5", f"--out-dir={out}"]) == 0
    assert len(list(out.glob("*.pgm"))) == 10
    rows = _rows(out / "index.csv")
    assert len(rows) == 6
    assert rows[0] == ["sample", "y", "y_hat", "c", "label_map_path", "conf_map_path"]


def test_mmd_verb(trained, tmp_path, capsys):
    ckpt = trained / "seed_1" / "checkpoint.bin"
    out = tmp_path / "mmd.csv"
    assert main(["mmd", f"--checkpoint={ckpt}", "--partitions=by-label,by-confounder,by-env",
                 f"--out={out}"]) == 0
    rows = _rows(out)
    assert [r[2] for r in rows[1:]] == ["by-label", "by-confounder", "by-env"]
    assert all(float(r[3]) >= 0 for r in rows[1:])
    assert main(["mmd", f"--checkpoint={ckpt}", "--partitions=by-colour"]) == 2
    assert "by-colour" in capsys.readouterr().err


def test_exit_codes(tmp_path, capsys):
    assert main(["train", "--lr=-1", "--batch_size=0", f"--out_dir={tmp_path}"]) == 2
    err = capsys.readouterr().err
    assert "lr" in err and "batch_size" in err
    assert main(["train", str(tmp_path / "missing.ini")]) == 2
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"xx")
    assert main(["gradcam", f"--checkpoint={junk}", f"--out-dir={tmp_path}"]) == 3
    assert main(["gradcam", f"--checkpoint={tmp_path / 'none.bin'}", f"--out-dir={tmp_path}"]) == 3


def test_timeit_verb(tmp_path):
    args = ["timeit", f"--out_dir={tmp_path}", "--timeit_batches=2", "--timeit_epochs=1",
            "--timeit_algorithms=groupdro,erm", *SMALL]
    assert main(args) == 0
    rows = _rows(tmp_path / "timeit.csv")
    assert [r[0] for r in rows[1:]] == ["erm", "groupdro"]
    assert float(rows[1][2]) == 1.0


def test_experiment_config_is_plain_data():
    cfg = ExperimentConfig({"lr": 1.0})
    assert cfg.lr == 1.0
    with pytest.raises(AttributeError):
        cfg.nothing
