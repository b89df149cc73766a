from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ex2l.errors import UsageError
from ex2l.metrics import accuracy_report, linear_mmd, mmd_by_parts, mmd_partition_report


def test_accuracy_examples():
    r = accuracy_report([1, 0, 1], [1, 0, 1], [0, 1, 0])
    assert (r.aa, r.wga) == (1.0, 1.0)
    r = accuracy_report([1, 1, 0, 1], [1, 1, 1, 1], [0, 0, 0, 1])
    assert r.aa == 0.75
    assert r.group_acc == {0: pytest.approx(2 / 3), 1: 1.0}
    assert r.wga == pytest.approx(2 / 3)
    assert r.score == pytest.approx((0.75 + 2 / 3) / 2)


def test_wga_is_minimum_of_three_groups():
    groups = np.repeat([0, 1, 2], 10)
    correct = np.concatenate([np.arange(10) < 9, np.arange(10) < 5, np.arange(10) < 7])
    r = accuracy_report(correct.astype(int), np.ones(30, int), groups)
    assert r.wga == 0.5


def test_empty_groups_are_skipped_and_empty_input_rejected():
    r = accuracy_report([0, 0], [0, 1], [0, 3], n_groups=4)
    assert set(r.group_acc) == {0, 3} and r.group_count[1] == 0
    assert r.wga == 0.0
    with pytest.raises(UsageError):
        accuracy_report([], [], [])


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1), st.integers(0, 3)), min_size=1,
                max_size=40), st.randoms())
def test_wga_matches_enumeration_and_reordering(rows, rnd):
    preds, y, g = (np.array(col) for col in zip(*rows))
    r = accuracy_report(preds, y, g, n_groups=4)
    per = {}
    for p, t, k in rows:
        per.setdefault(k, []).append(p == t)
    assert r.wga == min(sum(v) / len(v) for v in per.values())
    order = list(range(len(rows)))
    rnd.shuffle(order)
    r2 = accuracy_report(preds[order], y[order], g[order], n_groups=4)
    assert r2.aa == pytest.approx(r.aa, abs=1e-15) and r2.wga == r.wga


def test_linear_mmd_examples(rng):
    a = rng.normal(size=(50, 4))
    assert linear_mmd(a, a) == 0.0
    b = a + np.array([1.0, 0, 0, 0])
    assert linear_mmd(a, b, scale=False) == pytest.approx(1.0, abs=1e-12)
    assert linear_mmd(a, b) == pytest.approx(0.25, abs=1e-12)
    with pytest.raises(UsageError):
        linear_mmd(np.zeros((0, 4)), a)
    with pytest.raises(UsageError):
        linear_mmd(a, np.zeros((3, 5)))


def test_linear_mmd_monte_carlo(rng):
    mu = np.array([0.6, -0.3, 0.2])
    a = rng.normal(size=(10000, 3))
    b = rng.normal(size=(10000, 3)) + mu
    # E[estimate] = |mu|^2 + 2 tr(cov)/n; the bias is far below the tolerance here
    assert linear_mmd(a, b, scale=False) == pytest.approx(mu @ mu, rel=0.05)


@given(st.integers(0, 2**31 - 1))
def test_linear_mmd_symmetric_and_non_negative(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(7, 3)), rng.normal(size=(5, 3))
    assert linear_mmd(a, b) == linear_mmd(b, a) >= 0
    c = b - b.mean(axis=0) + a.mean(axis=0)
    assert linear_mmd(a, c) < 1e-12


def test_partition_report_cluster_construction(rng):
    n = 2000
    y = rng.integers(0, 2, n)
    c = rng.integers(0, 2, n)
    env = rng.integers(0, 3, n)
    z = rng.normal(size=(n, 8)) + 3.0 * y[:, None]
    rep = mmd_partition_report(z, y, c, env)
    assert rep["by-label"] > 50 * rep["by-confounder"]
    assert rep["by-env"] < 0.05
    same = np.ones((10, 3))
    rep = mmd_partition_report(same, np.arange(10) % 2, np.arange(10) % 2, np.arange(10) % 2)
    assert all(v == 0 for v in rep.values())


def test_multi_part_is_mean_pairwise(rng):
    z = rng.normal(size=(30, 2))
    parts = np.repeat([0, 1, 2], 10)
    pairs = [(0, 1), (0, 2), (1, 2)]
    want = np.mean([linear_mmd(z[parts == i], z[parts == j]) for i, j in pairs])
    assert mmd_by_parts(z, parts) == pytest.approx(want, abs=1e-15)


def test_partition_errors(rng):
    z = rng.normal(size=(6, 2))
    with pytest.raises(UsageError):
        mmd_by_parts(z, np.zeros(6))
    with pytest.raises(UsageError):
        mmd_partition_report(z, np.arange(6) % 2, None, None, ("by-colour",))
