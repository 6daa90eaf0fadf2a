"""Scaled dot-product and multi-head attention, the position-wise FFN, masks and
sinusoidal position codes."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, DegenerateMaskError, DimensionError
from .nn import Module, glorot, param
from .tensor import Tensor, as_tensor, concat, matmul, relu, softmax, transpose

MASK_FILL = -1e30


def attention_weights(Q, K, mask=None) -> Tensor:
    """softmax(Q K^T / sqrt(dk)) with disallowed positions pushed to -1e30."""
    Q, K = as_tensor(Q), as_tensor(K)
    if Q.shape[-1] != K.shape[-1]:
        raise DimensionError(f"query width {Q.shape[-1]} != key width {K.shape[-1]}")
    scores = matmul(Q, transpose(K)) * (1.0 / np.sqrt(Q.shape[-1]))
    if mask is not None:
        allow = np.asarray(mask, dtype=bool)
        if not np.all(np.broadcast_to(allow, scores.shape).any(axis=-1)):
            raise DegenerateMaskError("attention mask leaves a query with no visible key")
        scores = scores + np.where(allow, 0.0, MASK_FILL)
    return softmax(scores, axis=-1)


def scaled_dot_attention(Q, K, V, mask=None, return_weights: bool = False):
    K, V = as_tensor(K), as_tensor(V)
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"{K.shape[-2]} keys but {V.shape[-2]} values")
    weights = attention_weights(Q, K, mask)
    out = matmul(weights, V)
    return (out, weights) if return_weights else out


class AttentionParams(Module):
    """Per-head projections W_Q[h], W_K[h], W_V[h] (d x d/H) and an output map W_O (d x d)."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator | None = None):
        if heads < 1 or d % heads:
            raise ConfigError(f"model width {d} is not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.d_head = d // heads
        rng = rng if rng is not None else np.random.default_rng(0)
        self.w_q = [glorot(rng, d, self.d_head) for _ in range(heads)]
        self.w_k = [glorot(rng, d, self.d_head) for _ in range(heads)]
        self.w_v = [glorot(rng, d, self.d_head) for _ in range(heads)]
        self.w_o = glorot(rng, d, d)

    @classmethod
    def from_matrices(cls, w_q, w_k, w_v, w_o) -> "AttentionParams":
        """Build from explicit per-head lists (used for frozen or hand-set weights)."""
        self = cls.__new__(cls)
        self.heads = len(w_q)
        self.d = as_tensor(w_o).shape[0]
        self.d_head = self.d // self.heads
        self.w_q = [as_tensor(w) for w in w_q]
        self.w_k = [as_tensor(w) for w in w_k]
        self.w_v = [as_tensor(w) for w in w_v]
        self.w_o = as_tensor(w_o)
        return self

    def count(self) -> int:
        return 4 * self.d * self.d

    def __call__(self, Q, K, V, mask=None) -> Tensor:
        return multi_head_attention(self, Q, K, V, mask)


def multi_head_attention(params: AttentionParams, Q, K, V, mask=None) -> Tensor:
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    for name, t in (("Q", Q), ("K", K), ("V", V)):
        if t.shape[-1] != params.d:
            raise DimensionError(f"{name} width {t.shape[-1]} != model width {params.d}")
    heads = [
        scaled_dot_attention(matmul(Q, wq), matmul(K, wk), matmul(V, wv), mask)
        for wq, wk, wv in zip(params.w_q, params.w_k, params.w_v)
    ]
    return matmul(concat(heads, axis=-1), params.w_o)


def ffn(x, W1, b1, W2, b2) -> Tensor:
    return matmul(relu(matmul(x, W1) + b1), W2) + b2


class FeedForward(Module):
    def __init__(self, d: int, d_ff: int, rng: np.random.Generator):
        self.w1 = glorot(rng, d, d_ff)
        self.b1 = param(np.zeros(d_ff))
        self.w2 = glorot(rng, d_ff, d)
        self.b2 = param(np.zeros(d))

    def __call__(self, x) -> Tensor:
        return ffn(x, self.w1, self.b1, self.w2, self.b2)


def causal_mask(T: int) -> np.ndarray:
    """Boolean T x T matrix; entry (i, j) is True when position i may see j (j <= i)."""
    if T < 1:
        raise DimensionError("causal mask needs T >= 1")
    return np.tril(np.ones((T, T), dtype=bool))


def sinusoidal_pe(T: int, d: int) -> np.ndarray:
    if d % 2:
        raise ConfigError(f"sinusoidal position codes need an even width, got {d}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    return pe
