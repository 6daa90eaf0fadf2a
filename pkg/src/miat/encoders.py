"""LSTM cell, bidirectional utility encoders, and the image utility constructor."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import sinusoidal_pe
from .errors import DataError, DimensionError
from .nn import MLP, LayerNorm, Linear, Module, glorot, normal, param
from .tensor import Tensor, as_tensor, concat, getitem, matmul, reshape, sigmoid, stack, tanh

EMBED_WIDTH = 300
COORD_BINS = 600
GATES = ("i", "f", "o", "g")


class LstmParams(Module):
    """Input, recurrent and bias weights for the four gates, stored side by side.

    Columns are laid out as [input | forget | output | candidate]; :meth:`gate`
    returns the three per-gate pieces.
    """

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator | None = None):
        self.d_in = d_in
        self.hidden = hidden
        if rng is None:
            self.w_x = param(np.zeros((d_in, 4 * hidden)))
            self.w_h = param(np.zeros((hidden, 4 * hidden)))
        else:
            self.w_x = glorot(rng, d_in, 4 * hidden)
            self.w_h = glorot(rng, hidden, 4 * hidden)
        self.b = param(np.zeros(4 * hidden))

    def gate(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        k = GATES.index(name)
        cols = slice(k * self.hidden, (k + 1) * self.hidden)
        return self.w_x.data[:, cols], self.w_h.data[:, cols], self.b.data[cols]


def lstm_cell(x, h_prev, c_prev, params: LstmParams, x_proj: Tensor | None = None):
    """One step: i, f, o = sigmoid, g = tanh, c = f*c_prev + i*g, h = o*tanh(c).

    ``x_proj`` lets a caller pass a precomputed ``x @ W_x``.
    """
    h_prev, c_prev = as_tensor(h_prev), as_tensor(c_prev)
    n = params.hidden
    if h_prev.shape[-1] != n or c_prev.shape[-1] != n:
        raise DimensionError(f"LSTM state width must be {n}")
    if x_proj is None:
        x = as_tensor(x)
        if x.shape[-1] != params.d_in:
            raise DimensionError(f"LSTM input width {x.shape[-1]} != {params.d_in}")
        x_proj = matmul(x, params.w_x)
    z = x_proj + matmul(h_prev, params.w_h) + params.b
    gates = sigmoid(getitem(z, (Ellipsis, slice(0, 3 * n))))
    i = getitem(gates, (Ellipsis, slice(0, n)))
    f = getitem(gates, (Ellipsis, slice(n, 2 * n)))
    o = getitem(gates, (Ellipsis, slice(2 * n, 3 * n)))
    g = tanh(getitem(z, (Ellipsis, slice(3 * n, 4 * n))))
    c = f * c_prev + i * g
    h = o * tanh(c)
    return h, c


def run_lstm(xs, params: LstmParams, h0=None, c0=None, reverse: bool = False):
    """Unroll over axis -2 of ``xs`` (batch x T x d_in). Returns per-step h (in input order) and the final (h, c)."""
    xs = as_tensor(xs)
    if xs.shape[-1] != params.d_in:
        raise DimensionError(f"LSTM input width {xs.shape[-1]} != {params.d_in}")
    T = xs.shape[-2]
    lead = xs.shape[:-2]
    h = as_tensor(h0) if h0 is not None else Tensor(np.zeros((*lead, params.hidden)))
    c = as_tensor(c0) if c0 is not None else Tensor(np.zeros((*lead, params.hidden)))
    proj = matmul(xs, params.w_x)
    steps = range(T - 1, -1, -1) if reverse else range(T)
    outputs: list[Tensor | None] = [None] * T
    for t in steps:
        h, c = lstm_cell(None, h, c, params, x_proj=getitem(proj, (Ellipsis, t, slice(None))))
        outputs[t] = h
    return outputs, (h, c)


class BiLSTM(Module):
    """Two stacked bidirectional layers; the upper layer reads [fwd; bwd] of the lower."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, layers: int = 2):
        self.hidden = hidden
        self.forward_cells = []
        self.backward_cells = []
        width = d_in
        for _ in range(layers):
            self.forward_cells.append(LstmParams(width, hidden, rng))
            self.backward_cells.append(LstmParams(width, hidden, rng))
            width = 2 * hidden

    def __call__(self, xs):
        """Returns (per-position [fwd; bwd] of the top layer stacked on axis -2,
        top forward state at the last token, top backward state at the first token)."""
        seq = as_tensor(xs)
        for fwd, bwd in zip(self.forward_cells, self.backward_cells):
            f_out, _ = run_lstm(seq, fwd)
            b_out, _ = run_lstm(seq, bwd, reverse=True)
            seq = stack([concat([f, b], axis=-1) for f, b in zip(f_out, b_out)], axis=-2)
        return seq, f_out[-1], b_out[0]


class TokenEmbedding(Module):
    def __init__(self, vocab_size: int, rng: np.random.Generator, width: int = EMBED_WIDTH):
        self.vocab_size = vocab_size
        self.table = normal(rng, (vocab_size, width), 1.0)

    def __call__(self, tokens) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise DataError(f"token id outside vocabulary of size {self.vocab_size}")
        return getitem(self.table, tokens)


class QuestionEncoder(Module):
    """embed -> 2-layer biLSTM -> linear 2d->d -> + sinusoidal PE -> layer norm."""

    def __init__(self, embedding: TokenEmbedding, d: int, rng: np.random.Generator):
        self.embedding = embedding
        self.lstm = BiLSTM(embedding.table.shape[1], d, rng)
        self.proj = Linear(rng, 2 * d, d)
        self.norm = LayerNorm(d)
        self.d = d

    def __call__(self, tokens) -> Tensor:
        return encode_question(tokens, self)


def encode_question(tokens, params: QuestionEncoder) -> Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape[-1] < 1:
        raise DataError("question has no tokens")
    seq, _, _ = params.lstm(params.embedding(tokens))
    q_f = params.proj(seq)
    q_p = sinusoidal_pe(tokens.shape[-1], params.d)
    return params.norm(q_f + q_p)


class HistoryEncoder(Module):
    """One row per dialog round from the final biLSTM states plus a round-index PE."""

    def __init__(self, embedding: TokenEmbedding, d: int, rng: np.random.Generator):
        self.embedding = embedding
        self.lstm = BiLSTM(embedding.table.shape[1], d, rng)
        self.proj = Linear(rng, 2 * d, d)
        self.norm = LayerNorm(d)
        self.d = d

    def __call__(self, rounds) -> Tensor:
        return encode_history(rounds, self)


def encode_history(rounds, params: HistoryEncoder) -> Tensor:
    """``rounds`` has shape (..., T, L): T rounds of L tokens each."""
    rounds = np.asarray(rounds, dtype=np.int64)
    if rounds.ndim < 2 or rounds.shape[-2] < 1:
        raise DataError("history needs at least one round")
    if rounds.shape[-1] < 1:
        raise DataError("history round has no tokens")
    lead, (T, L) = rounds.shape[:-2], rounds.shape[-2:]
    flat = rounds.reshape(-1, L)
    _, last_fwd, first_bwd = params.lstm(params.embedding(flat))
    r_f = params.proj(concat([last_fwd, first_bwd], axis=-1))
    r_f = reshape(r_f, (*lead, T, params.d))
    return params.norm(r_f + sinusoidal_pe(T, params.d))


def box_bins(boxes) -> np.ndarray:
    """Map normalised (x1, y1, x2, y2) corners to integer bins of a 600 x 600 image."""
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.shape[-1] != 4:
        raise DimensionError("boxes need 4 coordinates")
    if np.any(boxes < 0.0) or np.any(boxes > 1.0):
        raise DataError("box coordinate outside [0, 1]")
    return np.minimum((boxes * COORD_BINS).astype(np.int64), COORD_BINS - 1)


class ImageEncoder(Module):
    """v = LN(LN(MLP(feature)) + sum_j LN(MLP(coord_embed_j)))."""

    def __init__(self, feature_width: int, d: int, rng: np.random.Generator, dropout_rate: float = 0.0):
        self.feature_mlp = MLP(rng, feature_width, d, dropout_rate)
        self.feature_norm = LayerNorm(d)
        self.coord_tables = [normal(rng, (COORD_BINS, d), 1.0 / np.sqrt(d)) for _ in range(4)]
        self.box_mlp = MLP(rng, d, d, dropout_rate)
        self.box_norm = LayerNorm(d)
        self.norm = LayerNorm(d)

    def __call__(self, features, boxes, rng: np.random.Generator | None = None) -> Tensor:
        return encode_image_utility(features, boxes, self, rng)


def encode_image_utility(features, boxes, params: ImageEncoder,
                         rng: np.random.Generator | None = None) -> Tensor:
    features = as_tensor(features)
    bins = box_bins(boxes)
    if features.shape[-2] < 1:
        raise DataError("image utility needs at least one region")
    if bins.shape[:-1] != features.shape[:-1]:
        raise DimensionError("one box per region is required")
    v_f = params.feature_norm(params.feature_mlp(features, rng))
    v_b = None
    for j, table in enumerate(params.coord_tables):
        term = params.box_norm(params.box_mlp(getitem(table, bins[..., j]), rng))
        v_b = term if v_b is None else v_b + term
    return params.norm(v_f + v_b)


def load_vocabulary(path: str | Path) -> dict[str, int]:
    """One token per line; a token's id is its zero-based line number."""
    tokens = Path(path).read_text(encoding="utf-8").splitlines()
    return {tok: i for i, tok in enumerate(tokens)}


def save_vocabulary(tokens: Sequence[str], path: str | Path) -> None:
    Path(path).write_text("".join(f"{t}\n" for t in tokens), encoding="utf-8")
