from __future__ import annotations

from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ex2l import autodiff as ad
from ex2l import gradcam
from ex2l.errors import DataError, UsageError
from ex2l.network import default_cnn, forward
from ex2l.similarity import evaluate
from ex2l.trainer import ex2l_objective


def _net(seed=0, n_out=1):
    return default_cnn((3, 8, 8), n_out, np.random.default_rng(seed), channels=(4, 6))


def _head_from_activation(net, act: np.ndarray) -> np.ndarray:
    """Logits recomputed from a capture-layer activation (layers after the capture)."""
    h = ad.constant(act)
    for i in range(net.capture + 1, len(net.layers)):
        kind = net.layers[i].kind
        if kind == "maxpool2":
            h = ad.maxpool2(h)
        elif kind == "flatten":
            h = ad.flatten(h)
        elif kind == "dense":
            h = ad.dense(h, net.params[f"{i}.weight"], net.params[f"{i}.bias"])
        elif kind == "relu":
            h = ad.relu(h)
    return h.value


def test_target_logit_examples():
    s = ad.constant(np.array([[2.0]]))
    assert gradcam.target_logit(s, [1]).value[0] == 2.0
    assert gradcam.target_logit(s, [0]).value[0] == -2.0
    m = ad.constant(np.array([[0.1, -3.0, 5.0]]))
    assert gradcam.target_logit(m, [2], "multiclass").value[0] == 5.0
    with pytest.raises(DataError):
        gradcam.target_logit(s, [2])
    with pytest.raises(DataError):
        gradcam.target_logit(m, [3], "multiclass")


def test_linear_score_gives_its_coefficients():
    a = ad.parameter(np.random.default_rng(0).random((2, 3, 4, 4)))
    coef = np.array([0.5, -2.0, 3.0])
    score = ad.sum_(ad.mul(a, coef[None, :, None, None]), axis=(1, 2, 3))
    w = gradcam.cam_weights(SimpleNamespace(activation=a), score)
    np.testing.assert_allclose(w.alpha, np.tile(coef, (2, 1)))


def test_score_independent_of_activation():
    a = ad.parameter(np.ones((1, 2, 3, 3)))
    score = ad.mul(ad.sum_(a, axis=(1, 2, 3)), 0.0)
    np.testing.assert_array_equal(gradcam.cam_weights(SimpleNamespace(activation=a), score).alpha, 0.0)
    unrelated = ad.sum_(ad.parameter(np.ones((1, 4))), axis=1)
    with pytest.raises(UsageError):
        gradcam.cam_weights(SimpleNamespace(activation=a), unrelated)


@pytest.mark.parametrize("target", [0, 1])
def test_alpha_matches_finite_differences(target):
    net = _net(3)
    x = np.random.default_rng(5).random((4, 3, 8, 8))
    trace = forward(net, x)
    scores = gradcam.target_logit(trace.logits, np.full(4, target))
    alpha = gradcam.cam_weights(trace, scores).alpha
    act = trace.activation.value.copy()
    sign = 1.0 if target == 1 else -1.0
    P = act.shape[2] * act.shape[3]
    eps = 1e-6
    for k in range(act.shape[1]):
        up, down = act.copy(), act.copy()
        up[:, k] += eps
        down[:, k] -= eps
        # a uniform shift of one channel keeps every pooling winner in place
        num = sign * (_head_from_activation(net, up) - _head_from_activation(net, down))[:, 0] / (2 * eps * P)
        rel = np.abs(alpha[:, k] - num) / np.maximum(np.maximum(np.abs(alpha[:, k]), np.abs(num)), 1e-8)
        assert rel.max() < 1e-4


def test_heatmap_examples():
    act = ad.constant(np.array([[[[2.0, 0.0]], [[0.0, 3.0]]]]))
    trace = SimpleNamespace(activation=act)
    out = gradcam.heatmap(trace, gradcam.CamWeights(np.array([[1.0, -1.0]])))
    np.testing.assert_array_equal(out.value, [[[2.0, 0.0]]])
    zero = gradcam.heatmap(trace, gradcam.CamWeights(np.zeros((1, 2))))
    np.testing.assert_array_equal(zero.value, 0.0)
    neg = SimpleNamespace(activation=ad.constant(-np.ones((1, 1, 2, 2))))
    np.testing.assert_array_equal(gradcam.heatmap(neg, gradcam.CamWeights(np.ones((1, 1)))).value, 0.0)
    with pytest.raises(UsageError):
        gradcam.heatmap(trace, gradcam.CamWeights(np.ones((1, 3))))


def test_heatmaps_non_negative_and_shapes_agree():
    x = np.random.default_rng(1).random((6, 3, 8, 8))
    la, co = _net(1), _net(2)
    tl, tc = forward(la, x), forward(co, x)
    my = gradcam.gradcam(la, tl, np.arange(6) % 2)
    mc = gradcam.gradcam(co, tc, (np.arange(6) + 1) % 2)
    assert (my.value >= 0).all() and (mc.value >= 0).all()
    assert my.shape == mc.shape == (6,) + tl.activation.shape[2:]


@given(st.floats(0.01, 100.0))
def test_positive_scaling_keeps_support(scale):
    net = _net(4)
    x = np.random.default_rng(2).random((3, 3, 8, 8))
    trace = forward(net, x)
    s = gradcam.target_logit(trace.logits, [1, 0, 1])
    w1 = gradcam.cam_weights(trace, s)
    w2 = gradcam.cam_weights(trace, ad.mul(s, scale))
    np.testing.assert_allclose(w2.alpha, scale * w1.alpha, rtol=1e-10, atol=1e-300)
    m1 = gradcam.heatmap(trace, w1).value
    m2 = gradcam.heatmap(trace, w2).value
    np.testing.assert_array_equal(m1 > 0, m2 > 0)


def _grads(label, conf, x, y, c, frozen=None, detach_activation=False):
    for n in (label, conf):
        n.zero_grad()
    if detach_activation:
        tl, tc = forward(label, x), forward(conf, x)
        wy = gradcam.cam_weights(tl, gradcam.target_logit(tl.logits, y))
        wc = gradcam.cam_weights(tc, gradcam.target_logit(tc.logits, c))
        cut_l = SimpleNamespace(activation=ad.constant(tl.activation.value))
        cut_c = SimpleNamespace(activation=ad.constant(tc.activation.value))
        sim = evaluate("neg-mae", gradcam.heatmap(cut_l, wy), gradcam.heatmap(cut_c, wc))
        ad.backward(sim)
    else:
        parts = ex2l_objective(label, conf, x, y, c, "neg-mae", 0.0, 1.0, frozen_alpha=frozen)
        ad.backward(ad.mul(parts.sim, 1.0))
    out = {f"l.{k}": (p.grad.copy() if p.grad is not None else None) for k, p in label.params.items()}
    out.update({f"c.{k}": (p.grad.copy() if p.grad is not None else None) for k, p in conf.params.items()})
    for n in (label, conf):
        n.zero_grad()
    return out


def test_alpha_detachment_contract():
    label, conf = _net(10), _net(11)
    x = np.random.default_rng(9).random((5, 3, 8, 8))
    y, c = np.array([1, 0, 1, 1, 0]), np.array([0, 0, 1, 1, 1])
    base = _grads(label, conf, x, y, c)

    # freeze: handing the same alpha in as plain numbers changes nothing
    tl, tc = forward(label, x), forward(conf, x)
    a_l = gradcam.cam_weights(tl, gradcam.target_logit(tl.logits, y)).alpha
    a_c = gradcam.cam_weights(tc, gradcam.target_logit(tc.logits, c)).alpha
    frozen = _grads(label, conf, x, y, c, frozen=(a_l.copy(), a_c.copy()))
    for k in base:
        np.testing.assert_array_equal(base[k], frozen[k])

    # the similarity reaches the conv parameters through the activations
    assert np.abs(base["l.0.weight"]).max() > 0 and np.abs(base["c.3.weight"]).max() > 0

    # corrupt: cutting the activation path removes that gradient entirely
    cut = _grads(label, conf, x, y, c, detach_activation=True)
    assert all(v is None for v in cut.values())


def test_heatmap_graph_excludes_the_score():
    net = _net(0)
    trace = forward(net, np.random.default_rng(0).random((2, 3, 8, 8)))
    m = gradcam.gradcam(net, trace, [0, 1])
    ids = {n.id for n in ad._ancestors(m)}
    assert trace.logits.id not in ids
    assert trace.activation.id in ids


def test_pgm_pixels_and_roundtrip(tmp_path):
    np.testing.assert_array_equal(gradcam.to_pgm_pixels(np.array([[0.0, 1.0], [2.0, 4.0]])),
                                  [[0, 63], [127, 255]])
    np.testing.assert_array_equal(gradcam.to_pgm_pixels(np.full((3, 2), 7.0)), 0)
    np.testing.assert_array_equal(gradcam.to_pgm_pixels(np.zeros((2, 2))), 0)
    m = np.random.default_rng(0).random((5, 7))
    path = tmp_path / "m.pgm"
    gradcam.export_heatmap(m, path)
    assert path.read_bytes().startswith(b"P5\n7 5\n255\n")
    np.testing.assert_array_equal(gradcam.read_pgm(path), gradcam.to_pgm_pixels(m))
    with pytest.raises(DataError):
        gradcam.to_pgm_pixels(np.array([[np.nan, 1.0]]))
