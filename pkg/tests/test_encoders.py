import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from miat.encoders import (COORD_BINS, BiLSTM, HistoryEncoder, ImageEncoder, LstmParams,
                           QuestionEncoder, TokenEmbedding, box_bins, load_vocabulary, lstm_cell,
                           run_lstm, save_vocabulary)
from miat.errors import DataError, DimensionError

from oracles import lstm_cell_scalar


def gate_dicts(p):
    Wx, Wh, b = {}, {}, {}
    for g in ("i", "f", "o", "g"):
        Wx[g], Wh[g], b[g] = p.gate(g)
    return Wx, Wh, b


def test_zero_params_cell_halves_memory():
    p = LstmParams(2, 1)
    h, c = lstm_cell(np.array([[0.3, -0.7]]), np.zeros((1, 1)), np.ones((1, 1)), p)
    # every gate is sigmoid(0) = 0.5 and the candidate is tanh(0) = 0
    assert c.data[0, 0] == 0.5
    assert h.data[0, 0] == pytest.approx(0.5 * np.tanh(0.5), abs=1e-15)
    assert h.data[0, 0] == pytest.approx(0.23105857863000487, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_cell_matches_scalar_oracle(d_in, hidden, seed):
    rng = np.random.default_rng(seed)
    p = LstmParams(d_in, hidden, rng)
    p.b.data = rng.normal(size=p.b.shape)
    x, h, c = rng.normal(size=d_in), rng.normal(size=hidden), rng.normal(size=hidden)
    got_h, got_c = lstm_cell(x[None], h[None], c[None], p)
    ref_h, ref_c = lstm_cell_scalar(x, h, c, *gate_dicts(p))
    assert np.allclose(got_h.data[0], ref_h, atol=1e-12)
    assert np.allclose(got_c.data[0], ref_c, atol=1e-12)


def test_run_lstm_reverse_reads_last_token_first():
    rng = np.random.default_rng(0)
    p = LstmParams(3, 2, rng)
    xs = rng.normal(size=(1, 4, 3))
    outs, (h, _) = run_lstm(xs, p, reverse=True)
    fwd, _ = run_lstm(xs[:, ::-1], p)
    for t in range(4):
        assert np.allclose(outs[t].data, fwd[3 - t].data, atol=1e-15)
    assert np.array_equal(h.data, outs[0].data)


def test_lstm_width_errors():
    p = LstmParams(3, 2)
    with pytest.raises(DimensionError):
        lstm_cell(np.ones((1, 4)), np.zeros((1, 2)), np.zeros((1, 2)), p)
    with pytest.raises(DimensionError):
        lstm_cell(np.ones((1, 3)), np.zeros((1, 3)), np.zeros((1, 2)), p)
    with pytest.raises(DimensionError):
        run_lstm(np.ones((2, 4)), p)


def test_bilstm_output_layout():
    rng = np.random.default_rng(1)
    lstm = BiLSTM(5, 3, rng)
    seq, last_fwd, first_bwd = lstm(rng.normal(size=(2, 4, 5)))
    assert seq.shape == (2, 4, 6)
    assert np.array_equal(seq.data[:, -1, :3], last_fwd.data)
    assert np.array_equal(seq.data[:, 0, 3:], first_bwd.data)


def test_embedding_bounds():
    emb = TokenEmbedding(5, np.random.default_rng(2), width=4)
    assert emb([0, 4]).shape == (2, 4)
    with pytest.raises(DataError):
        emb([5])


def test_question_and_history_shapes_and_norm():
    rng = np.random.default_rng(3)
    emb = TokenEmbedding(7, rng, width=6)
    q = QuestionEncoder(emb, 4, rng)([[1, 2, 3], [4, 5, 6]])
    assert q.shape == (2, 3, 4)
    assert np.allclose(q.data.mean(axis=-1), 0.0, atol=1e-12)
    r = HistoryEncoder(emb, 4, rng)(np.ones((2, 3, 5), dtype=int))
    assert r.shape == (2, 3, 4)
    with pytest.raises(DataError):
        QuestionEncoder(emb, 4, rng)(np.zeros((1, 0), dtype=int))
    with pytest.raises(DataError):
        HistoryEncoder(emb, 4, rng)(np.zeros((1, 0, 3), dtype=int))


def test_box_bins():
    assert np.array_equal(box_bins([0.0, 0.5, 0.999, 1.0]), [0, 300, 599, COORD_BINS - 1])
    with pytest.raises(DataError):
        box_bins([0.0, 0.1, 1.2, 0.5])
    with pytest.raises(DimensionError):
        box_bins([0.0, 0.1, 0.2])


def test_image_encoder_shape_and_box_sensitivity():
    rng = np.random.default_rng(4)
    enc = ImageEncoder(5, 4, rng)
    feats = rng.normal(size=(3, 5))
    boxes = np.array([[0.1, 0.1, 0.5, 0.5]] * 3)
    a = enc(feats, boxes).data
    moved = boxes.copy()
    moved[0] = [0.6, 0.6, 0.9, 0.9]
    b = enc(feats, moved).data
    assert a.shape == (3, 4)
    assert not np.allclose(a[0], b[0]) and np.allclose(a[1:], b[1:])
    with pytest.raises(DimensionError):
        enc(feats, boxes[:2])


def test_vocabulary_roundtrip(tmp_path):
    save_vocabulary(["<pad>", "<sos>", "red"], tmp_path / "vocab.txt")
    assert load_vocabulary(tmp_path / "vocab.txt") == {"<pad>": 0, "<sos>": 1, "red": 2}
