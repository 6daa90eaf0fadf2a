import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from miat.attention import AttentionParams, multi_head_attention
from miat.errors import ConfigError, DataError, DimensionError
from miat.fusion import (FusionLayer, ParallelCross, SequentialCross, box_loss,
                         concat_cross_attention, parallel_cross_attention, parallel_gates,
                         self_critical_loss, sequential_cross_attention, xe_loss)
from miat.tensor import Tensor

from oracles import giou_scalar, layer_norm_loops


def feats(rng, *shapes):
    return [rng.normal(size=s) for s in shapes]


def test_parallel_identity_gates_reduce_to_sum_plus_residual():
    rng = np.random.default_rng(0)
    p = ParallelCross(4, 2, rng, gate="identity")
    x, g, r = feats(rng, (3, 4), (5, 4), (2, 4))
    a_g = multi_head_attention(p.attn_grid, x, g, g).data
    a_r = multi_head_attention(p.attn_region, x, r, r).data
    expect = layer_norm_loops(a_g + a_r + x, p.norm.gain.data, p.norm.bias.data, 1e-5)
    assert np.allclose(parallel_cross_attention(x, g, r, p).data, expect, atol=1e-12)


def test_parallel_sigmoid_gates_are_in_unit_interval():
    rng = np.random.default_rng(1)
    p = ParallelCross(4, 2, rng)
    x, a, b = feats(rng, (3, 4), (3, 4), (3, 4))
    c_g, c_r = parallel_gates(Tensor(x), Tensor(a), Tensor(b), p)
    w = p.gate_grid_w.data
    assert np.allclose(c_g.data, 1 / (1 + np.exp(-(np.hstack([a, x]) @ w + p.gate_grid_b.data))))
    assert np.all((c_r.data > 0) & (c_r.data < 1))
    with pytest.raises(ConfigError):
        ParallelCross(4, 2, rng, gate="tanh")


def test_concat_design_attends_over_stacked_features():
    rng = np.random.default_rng(2)
    p = AttentionParams(4, 2, rng)
    x, g, r = feats(rng, (2, 4), (3, 4), (2, 4))
    stacked = np.vstack([g, r])
    assert np.allclose(concat_cross_attention(x, g, r, p).data,
                       multi_head_attention(p, x, stacked, stacked).data, atol=1e-14)
    # an empty source falls back to the other one
    assert np.allclose(concat_cross_attention(x, np.zeros((0, 4)), r, p).data,
                       multi_head_attention(p, x, r, r).data, atol=1e-14)


def test_sequential_order_matters():
    rng = np.random.default_rng(3)
    x, g, r = feats(rng, (2, 4), (3, 4), (3, 4))
    a = SequentialCross(4, 2, np.random.default_rng(9), order="grid_first")
    b = SequentialCross(4, 2, np.random.default_rng(9), order="region_first")
    assert not np.allclose(a(x, g, r).data, b(x, g, r).data)
    assert np.array_equal(a(x, g, r).data, sequential_cross_attention(x, g, r, a).data)


@pytest.mark.parametrize("design", ["concat", "sequential", "parallel"])
def test_fusion_layer_is_causal(design):
    rng = np.random.default_rng(4)
    layer = FusionLayer(4, 2, rng, design=design)
    x, g, r = feats(rng, (5, 4), (3, 4), (2, 4))
    base = layer(x, g, r).data
    y = x.copy()
    y[3:] += 5.0
    assert np.allclose(layer(y, g, r).data[:3], base[:3], atol=1e-12)
    assert base.shape == (5, 4)


def test_fusion_layer_rejects_unknown_design_and_width_mismatch():
    rng = np.random.default_rng(5)
    with pytest.raises(ConfigError):
        FusionLayer(4, 2, rng, design="stacked")
    with pytest.raises(DimensionError):
        FusionLayer(4, 2, rng)(np.ones((2, 4)), np.ones((3, 3)), np.ones((2, 4)))


def test_xe_uniform_logits():
    assert xe_loss(np.zeros((3, 7)), [0, 3, 6]).item() == pytest.approx(3 * np.log(7), abs=1e-14)
    assert xe_loss(np.zeros((3, 7)), [0, 3, 6], [1, 1, 0]).item() == pytest.approx(2 * np.log(7), abs=1e-14)
    with pytest.raises(DataError):
        xe_loss(np.zeros((2, 3)), [0, 3])
    with pytest.raises(DimensionError):
        xe_loss(np.zeros((2, 3)), [0])


def test_self_critical_baseline_and_gradient():
    lp = Tensor(np.array([-1.0, -2.0, -3.0]), requires_grad=True)
    rewards = {"a": 1.0, "b": 0.0, "c": 2.0}
    loss = self_critical_loss(["a", "b", "c"], lp, rewards.get)
    # advantages 0, -1, 1 around the mean reward 1
    assert loss.item() == pytest.approx(-(0 * -1 + -1 * -2 + 1 * -3) / 3, abs=1e-15)
    loss.backward()
    assert np.allclose(lp.grad, [0.0, 1 / 3, -1 / 3])
    equal = self_critical_loss(["a", "a"], np.array([-1.0, -5.0]), rewards.get)
    assert equal.item() == 0.0


def test_box_loss_disjoint_unit_boxes():
    l1, giou, total = box_loss(np.array([0.0, 0.0, 1.0, 1.0]), np.array([1.0, 1.0, 2.0, 2.0]))
    assert l1.item() == 4.0
    assert giou.item() == pytest.approx(1.5, abs=1e-15)
    assert total.item() == pytest.approx(23.0, abs=1e-14)


def test_box_loss_identical_boxes_is_zero():
    b = np.array([0.1, 0.2, 0.5, 0.9])
    _, giou, total = box_loss(b, b)
    assert abs(giou.item()) < 1e-15 and abs(total.item()) < 1e-15


def test_box_loss_rejects_degenerate_boxes():
    with pytest.raises(DataError):
        box_loss(np.array([0.0, 0.0, 0.0, 1.0]), np.array([0.0, 0.0, 1.0, 1.0]))
    with pytest.raises(DimensionError):
        box_loss(np.zeros(3), np.zeros(3))


boxes = st.tuples(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.05, 3), st.floats(0.05, 3)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=100, deadline=None)
@given(boxes, boxes)
def test_giou_matches_geometry_and_is_symmetric(b, bh):
    _, giou, _ = box_loss(np.array(b), np.array(bh))
    _, back, _ = box_loss(np.array(bh), np.array(b))
    assert giou.item() == pytest.approx(1 - giou_scalar(b, bh), abs=1e-10)
    assert giou.item() == pytest.approx(back.item(), abs=1e-12)
    assert 0.0 <= giou.item() <= 2.0 + 1e-12
