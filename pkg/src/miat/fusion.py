"""Caption-generator layer fusing word features with grid and region features.

Three cross-attention designs are available: ``concat`` (one attention over the
row-stacked visual features), ``sequential`` (two attention sub-layers one after
the other, each with residual + norm), and ``parallel`` (two attention branches
combined through elementwise sigmoid gates). Also here: the captioning losses and
the L1 + GIoU box-regression loss.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .attention import AttentionParams, FeedForward, causal_mask, multi_head_attention
from .errors import ConfigError, DataError, DimensionError
from .nn import LayerNorm, Module, glorot, param
from .tensor import (
    Tensor,
    absolute,
    as_tensor,
    concat,
    dropout,
    getitem,
    log_softmax,
    matmul,
    maximum,
    minimum,
    sigmoid,
    tsum,
)

DESIGNS = ("concat", "sequential", "parallel")
BOX_L1_WEIGHT = 5.0
BOX_GIOU_WEIGHT = 2.0


def _check_width(words: Tensor, *others: Tensor) -> None:
    d = words.shape[-1]
    for t in others:
        if t.shape[-1] != d:
            raise DimensionError(f"visual feature width {t.shape[-1]} != word width {d}")


def concat_cross_attention(words, grid, region, params: AttentionParams) -> Tensor:
    words, grid, region = as_tensor(words), as_tensor(grid), as_tensor(region)
    _check_width(words, grid, region)
    if grid.shape[-2] == 0:
        visual = region
    elif region.shape[-2] == 0:
        visual = grid
    else:
        visual = concat([grid, region], axis=-2)
    return multi_head_attention(params, words, visual, visual)


class SequentialCross(Module):
    """Two attention sub-layers; ``order`` picks which source is attended first."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, order: str = "grid_first"):
        if order not in ("grid_first", "region_first"):
            raise ConfigError(f"unknown sequential order {order!r}")
        self.order = order
        self.attn_first = AttentionParams(d, heads, rng)
        self.norm_first = LayerNorm(d)
        self.attn_second = AttentionParams(d, heads, rng)
        self.norm_second = LayerNorm(d)

    def __call__(self, words, grid, region) -> Tensor:
        first, second = (grid, region) if self.order == "grid_first" else (region, grid)
        return sequential_cross_attention(words, first, second, self)


def sequential_cross_attention(words, first, second, params: SequentialCross) -> Tensor:
    words, first, second = as_tensor(words), as_tensor(first), as_tensor(second)
    _check_width(words, first, second)
    h = params.norm_first(words + multi_head_attention(params.attn_first, words, first, first))
    return params.norm_second(h + multi_head_attention(params.attn_second, h, second, second))


class ParallelCross(Module):
    """Grid and region branches with gates c = sigmoid([a; x'] W + b), W of shape 2d x d."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, gate: str = "sigmoid"):
        if gate not in ("sigmoid", "identity"):
            raise ConfigError(f"unknown gate activation {gate!r}")
        self.gate = gate
        self.attn_grid = AttentionParams(d, heads, rng)
        self.attn_region = AttentionParams(d, heads, rng)
        self.gate_grid_w = glorot(rng, 2 * d, d)
        self.gate_grid_b = param(np.zeros(d))
        self.gate_region_w = glorot(rng, 2 * d, d)
        self.gate_region_b = param(np.zeros(d))
        self.norm = LayerNorm(d)

    def __call__(self, words, grid, region) -> Tensor:
        return parallel_cross_attention(words, grid, region, self)


def parallel_gates(words, attended_grid, attended_region, params: ParallelCross):
    if params.gate == "identity":
        ones = np.ones(attended_grid.shape)
        return Tensor(ones), Tensor(ones)
    c_g = sigmoid(matmul(concat([attended_grid, words], axis=-1), params.gate_grid_w) + params.gate_grid_b)
    c_r = sigmoid(matmul(concat([attended_region, words], axis=-1), params.gate_region_w) + params.gate_region_b)
    return c_g, c_r


def parallel_cross_attention(words, grid, region, params: ParallelCross) -> Tensor:
    words, grid, region = as_tensor(words), as_tensor(grid), as_tensor(region)
    _check_width(words, grid, region)
    a_g = multi_head_attention(params.attn_grid, words, grid, grid)
    a_r = multi_head_attention(params.attn_region, words, region, region)
    c_g, c_r = parallel_gates(words, a_g, a_r, params)
    return params.norm(c_g * a_g + c_r * a_r + words)


class FusionLayer(Module):
    """Masked self-attention, dual-feature cross-attention, then FFN."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, design: str = "parallel",
                 order: str = "grid_first", gate: str = "sigmoid", dropout_rate: float = 0.2):
        if design not in DESIGNS:
            raise ConfigError(f"unknown fusion design {design!r}; choose from {DESIGNS}")
        self.design = design
        self.dropout_rate = dropout_rate
        self.self_attn = AttentionParams(d, heads, rng)
        self.norm_self = LayerNorm(d)
        if design == "concat":
            self.cross = AttentionParams(d, heads, rng)
            self.norm_cross = LayerNorm(d)
        elif design == "sequential":
            self.cross = SequentialCross(d, heads, rng, order)
        else:
            self.cross = ParallelCross(d, heads, rng, gate)
        self.ffn = FeedForward(d, 4 * d, rng)
        self.norm_ffn = LayerNorm(d)

    def __call__(self, words, grid, region, rng: np.random.Generator | None = None) -> Tensor:
        words = as_tensor(words)
        mask = causal_mask(words.shape[-2])
        sa = dropout(multi_head_attention(self.self_attn, words, words, words, mask), self.dropout_rate, rng)
        x = self.norm_self(words + sa)
        if self.design == "concat":
            ca = dropout(concat_cross_attention(x, grid, region, self.cross), self.dropout_rate, rng)
            x = self.norm_cross(x + ca)
        else:
            x = self.cross(x, grid, region)
        return self.norm_ffn(x + dropout(self.ffn(x), self.dropout_rate, rng))


# -- captioning losses ------------------------------------------------------------------

def xe_loss(logits, gold, weights=None) -> Tensor:
    """Sum over positions of -log p(gold_t). ``weights`` (same shape as gold) masks padding."""
    logits = as_tensor(logits)
    gold = np.asarray(gold, dtype=np.int64)
    if logits.shape[:-1] != gold.shape:
        raise DimensionError(f"logits {logits.shape} do not align with gold tokens {gold.shape}")
    vocab = logits.shape[-1]
    if gold.size and (gold.min() < 0 or gold.max() >= vocab):
        raise DataError(f"gold token outside vocabulary of size {vocab}")
    lp = log_softmax(logits, axis=-1)
    index = tuple(np.indices(gold.shape)) + (gold,)
    picked = getitem(lp, index)
    if weights is not None:
        picked = picked * np.asarray(weights, dtype=np.float64)
    return -tsum(picked)


def self_critical_loss(samples: Sequence, log_probs, reward_fn: Callable[[object], float]) -> Tensor:
    """-(1/k) sum_i (r(w_i) - mean r) log p(w_i)."""
    k = len(samples)
    if k == 0:
        raise ConfigError("self-critical loss needs at least one sample")
    log_probs = as_tensor(log_probs)
    if log_probs.shape != (k,):
        raise DimensionError(f"expected {k} sequence log-probabilities, got shape {log_probs.shape}")
    rewards = np.array([float(reward_fn(s)) for s in samples])
    advantage = rewards - rewards.mean()
    return -tsum(log_probs * advantage) * (1.0 / k)


# -- box regression ----------------------------------------------------------------------

def _check_box(box: Tensor, label: str) -> None:
    if box.shape[-1] != 4:
        raise DimensionError(f"{label} must have 4 coordinates, got shape {box.shape}")
    x1, y1, x2, y2 = np.moveaxis(box.data, -1, 0)
    if np.any(x2 <= x1) or np.any(y2 <= y1):
        raise DataError(f"{label} is degenerate (needs x1 < x2 and y1 < y2)")


def box_loss(b, b_hat):
    """Returns (l1, giou, total) with total = 5 * l1 + 2 * giou, boxes as (x1, y1, x2, y2)."""
    b, b_hat = as_tensor(b), as_tensor(b_hat)
    _check_box(b, "box")
    _check_box(b_hat, "predicted box")
    l1 = tsum(absolute(b - b_hat), axis=-1)

    def coord(t, i):
        return getitem(t, (Ellipsis, i))

    x1, y1, x2, y2 = (coord(b, i) for i in range(4))
    u1, v1, u2, v2 = (coord(b_hat, i) for i in range(4))
    area = (x2 - x1) * (y2 - y1)
    area_hat = (u2 - u1) * (v2 - v1)
    iw = maximum(minimum(x2, u2) - maximum(x1, u1), 0.0)
    ih = maximum(minimum(y2, v2) - maximum(y1, v1), 0.0)
    inter = iw * ih
    union = area + area_hat - inter
    enclosing = (maximum(x2, u2) - minimum(x1, u1)) * (maximum(y2, v2) - minimum(y1, v1))
    giou = 1.0 - (inter / union - (enclosing - union) / enclosing)
    total = BOX_L1_WEIGHT * l1 + BOX_GIOU_WEIGHT * giou
    return l1, giou, total
