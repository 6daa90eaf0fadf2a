import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from miat.attention import AttentionParams, multi_head_attention
from miat.errors import ConfigError, DimensionError
from miat.ltmi import (LtmiBlock, LtmiEncoder, LtmiLayer, NaiveExtensionLayer, Utility,
                       count_parameters, frozen_projection, ltmi_block, ltmi_layer,
                       ltmi_layer_parameters, naive_block_parameters, naive_layer_parameters,
                       simplified_attention)
from miat.tensor import Tensor

from oracles import attention_loops, layer_norm_loops


def test_frozen_projection_selects_a_slice():
    assert np.array_equal(frozen_projection(2, 2, 4), [[0, 0], [0, 0], [1, 0], [0, 1]])
    total = sum(frozen_projection(h, 4, 8) @ frozen_projection(h, 4, 8).T for h in range(1, 5))
    assert np.array_equal(total, np.eye(8))
    with pytest.raises(ConfigError):
        frozen_projection(3, 2, 4)
    with pytest.raises(ConfigError):
        frozen_projection(1, 3, 4)


@settings(max_examples=50, deadline=None)
@given(st.sampled_from([(4, 1), (4, 2), (6, 3), (8, 4)]), st.integers(1, 4), st.integers(1, 5),
       st.booleans(), st.integers(0, 10_000))
def test_simplified_attention_equals_mha_with_frozen_projections(dH, M, N, with_pads, seed):
    d, H = dH
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(M, d)), rng.normal(size=(N, d))
    pads = rng.normal(size=(2, d)) if with_pads else None
    proj = [frozen_projection(h, H, d) for h in range(1, H + 1)]
    frozen = AttentionParams.from_matrices(proj, proj, proj, np.eye(d))
    keys = np.vstack([Y, pads]) if with_pads else Y
    expect = multi_head_attention(frozen, X, keys, keys).data
    assert np.allclose(simplified_attention(X, Y, H, pads).data, expect, atol=1e-12, rtol=0)


def test_simplified_attention_batched_matches_per_example():
    rng = np.random.default_rng(0)
    X, Y, pads = rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 5, 4)), rng.normal(size=(2, 4))
    out = simplified_attention(X, Y, 2, pads).data
    for b in range(3):
        assert np.allclose(out[b], simplified_attention(X[b], Y[b], 2, pads).data, atol=1e-14)


def test_simplified_attention_per_head_loops_and_weights():
    rng = np.random.default_rng(1)
    X, Y = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
    out, w = simplified_attention(X, Y, 2, return_weights=True)
    for h in range(2):
        s = slice(2 * h, 2 * h + 2)
        ref, ref_w = attention_loops(X[:, s], Y[:, s], Y[:, s])
        assert np.allclose(out.data[:, s], ref, atol=1e-12)
        assert np.allclose(w.data[h], ref_w, atol=1e-12)


def test_pads_let_queries_attend_nowhere():
    # a pad of zeros with a very negative key elsewhere soaks up the attention mass
    X = np.array([[1.0, 1.0]])
    Y = np.array([[-30.0, -30.0]])
    out, w = simplified_attention(X, Y, 1, np.zeros((2, 2)), return_weights=True)
    assert w.data[0, 0, 0] < 1e-12
    assert np.allclose(out.data, 0.0, atol=1e-10)


def test_width_checks():
    with pytest.raises(DimensionError):
        simplified_attention(np.ones((2, 4)), np.ones((2, 6)), 2)
    with pytest.raises(ConfigError):
        simplified_attention(np.ones((2, 6)), np.ones((2, 6)), 4)
    with pytest.raises(DimensionError):
        simplified_attention(np.ones((2, 4)), np.ones((2, 4)), 2, np.ones((2, 3)))


def test_block_formula_against_direct_computation():
    rng = np.random.default_rng(2)
    d, H = 4, 2
    block = LtmiBlock("v", ["v", "q"], d, H, rng, dropout_rate=0.0)
    v = Utility("v", Tensor(rng.normal(size=(3, d))), rng.normal(size=(2, d)))
    q = Utility("q", Tensor(rng.normal(size=(5, d))), rng.normal(size=(2, d)))
    out = ltmi_block(v, [q], block).data

    def attend(X, Y, pads):
        keys = np.vstack([Y, pads])
        return np.hstack([attention_loops(X[:, 2 * h:2 * h + 2], keys[:, 2 * h:2 * h + 2],
                                          keys[:, 2 * h:2 * h + 2])[0] for h in range(H)])

    X = v.features.data
    joined = np.hstack([attend(X, X, v.pads), attend(X, q.features.data, q.pads)])
    hidden = np.maximum(joined @ block.weight.data + block.bias.data, 0)
    expect = layer_norm_loops(hidden + X, block.norm.gain.data, block.norm.bias.data, 1e-5)
    assert np.allclose(out, expect, atol=1e-12)


def test_block_source_order_is_canonical():
    rng = np.random.default_rng(3)
    block = LtmiBlock("v", ["v", "q", "r"], 4, 2, rng, dropout_rate=0.0)
    v, q, r = (Utility(n, Tensor(rng.normal(size=(2, 4)))) for n in "vqr")
    assert np.array_equal(ltmi_block(v, [q, r], block).data, ltmi_block(v, [r, q], block).data)
    with pytest.raises(ConfigError):
        ltmi_block(v, [q], block)


def test_layer_uses_pre_layer_values_for_every_block():
    rng = np.random.default_rng(4)
    layer = LtmiLayer(["a", "b"], 4, 2, rng, dropout_rate=0.0)
    a, b = (Utility(n, Tensor(rng.normal(size=(3, 4)))) for n in "ab")
    new_a, new_b = ltmi_layer([a, b], layer)
    assert np.array_equal(new_b.features.data, ltmi_block(b, [a], layer.blocks[1]).data)
    assert np.array_equal(new_a.features.data, ltmi_block(a, [b], layer.blocks[0]).data)


def test_encoder_shares_pads_across_layers():
    rng = np.random.default_rng(5)
    enc = LtmiEncoder(["v", "q"], 8, 4, 2, rng)
    names = [n for n, _ in enc.named_parameters()]
    assert sum(n.startswith("pads.") for n in names) == 2
    out = enc({"v": rng.normal(size=(2, 3, 8)), "q": rng.normal(size=(2, 4, 8))})
    assert out["v"].shape == (2, 3, 8) and out["q"].shape == (2, 4, 8)


def test_parameter_counts():
    assert ltmi_layer_parameters(1, 2) == 14
    assert ltmi_layer_parameters(3, 512) == 2_366_976
    # 4d^2 attention + 8d^2 + 5d FFN + 4d norms, times U^2 blocks
    assert naive_block_parameters(512) == 12 * 512 * 512 + 9 * 512
    assert naive_layer_parameters(3, 512) == 28_353_024
    assert ltmi_layer_parameters(3, 512) / naive_layer_parameters(3, 512) < 0.1


@pytest.mark.parametrize("U,d,H", [(1, 4, 2), (2, 8, 4), (3, 6, 3)])
def test_built_layers_match_closed_form(U, d, H):
    rng = np.random.default_rng(6)
    names = [f"u{i}" for i in range(U)]
    assert count_parameters(LtmiLayer(names, d, H, rng)) == ltmi_layer_parameters(U, d)
    naive = NaiveExtensionLayer(names, d, H, rng)
    assert naive.block_count == U * U
    assert count_parameters(naive) == naive_layer_parameters(U, d)
