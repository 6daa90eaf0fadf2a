"""Light-weight many-input attention: the frozen-projection block, its U-block
layer, a stacked encoder, and the naive multi-utility Transformer baseline.

Parameter counting convention (used by :func:`count_parameters` and the
closed-form helpers): an LTMI block owns its aggregation weight (U*d x d), bias
(d) and layer-norm gain/bias (2d); each utility owns two memory pads (2d) that
are shared by every stacked layer. A naive block owns Q/K/V/O projections
(4 d^2, no biases), an FFN with hidden width 4d (weights and biases), and two
layer norms.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .attention import AttentionParams, FeedForward, scaled_dot_attention
from .errors import ConfigError, DimensionError
from .nn import LayerNorm, Module, glorot, normal, param
from .tensor import Tensor, as_tensor, broadcast_to, concat, dropout, matmul, relu, reshape, transpose


def frozen_projection(h: int, H: int, d: int) -> np.ndarray:
    """Selector for the h-th (1-based) contiguous d/H slice of the feature axis."""
    if H < 1 or d % H:
        raise ConfigError(f"width {d} is not divisible by {H} heads")
    if not 1 <= h <= H:
        raise ConfigError(f"head index {h} outside 1..{H}")
    d_head = d // H
    w = np.zeros((d, d_head))
    w[(h - 1) * d_head:h * d_head, :] = np.eye(d_head)
    return w


@dataclass
class Utility:
    """A named matrix of entity features plus its two memory pads."""

    name: str
    features: Tensor
    pads: Tensor | None = None

    @property
    def d(self) -> int:
        return self.features.shape[-1]

    @property
    def entity_count(self) -> int:
        return self.features.shape[-2]

    def with_features(self, features: Tensor) -> "Utility":
        return replace(self, features=features)


def _split_heads(x: Tensor, H: int) -> Tensor:
    *lead, n, d = x.shape
    x = reshape(x, (*lead, n, H, d // H))
    k = len(lead)
    return transpose(x, (*range(k), k + 1, k, k + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, H, n, dh = x.shape
    k = len(lead)
    x = transpose(x, (*range(k), k + 1, k, k + 2))
    return reshape(x, (*lead, n, H * dh))


def simplified_attention(X, Y, H: int, pads=None, return_weights: bool = False):
    """Attention of queries X over keys/values Y with frozen slice projections and W_O = I.

    ``pads`` (2 x d) are appended to Y's rows as extra keys/values; they never
    produce output rows. Heads are evaluated in one batched product.
    """
    X, Y = as_tensor(X), as_tensor(Y)
    d = X.shape[-1]
    if Y.shape[-1] != d:
        raise DimensionError(f"target width {d} != source width {Y.shape[-1]}")
    if H < 1 or d % H:
        raise ConfigError(f"width {d} is not divisible by {H} heads")
    if pads is not None:
        pads = as_tensor(pads)
        if pads.shape[-1] != d:
            raise DimensionError("memory pad width differs from the utility width")
        Y = concat([Y, broadcast_to(pads, (*Y.shape[:-2], pads.shape[-2], d))], axis=-2)
    xh, yh = _split_heads(X, H), _split_heads(Y, H)
    out, weights = scaled_dot_attention(xh, yh, yh, return_weights=True)
    out = _merge_heads(out)
    return (out, weights) if return_weights else out


class LtmiBlock(Module):
    """One target utility attending to itself and every other utility."""

    def __init__(self, target: str, order: Sequence[str], d: int, heads: int,
                 rng: np.random.Generator, dropout_rate: float = 0.1):
        if d % heads:
            raise ConfigError(f"width {d} is not divisible by {heads} heads")
        if target not in order:
            raise ConfigError(f"target {target!r} missing from utility order {list(order)}")
        self.target = target
        self.sources = [name for name in order if name != target]
        self.d = d
        self.heads = heads
        self.dropout_rate = dropout_rate
        self.weight = glorot(rng, len(order) * d, d)
        self.bias = param(np.zeros(d))
        self.norm = LayerNorm(d)


def ltmi_block(target: Utility, sources: Sequence[Utility], block: LtmiBlock,
               rng: np.random.Generator | None = None) -> Tensor:
    """LayerNorm(ReLU([A_X(X), A_Y1(X), ...] W + b) + X); sources are reordered canonically."""
    by_name = {u.name: u for u in sources}
    if set(by_name) != set(block.sources):
        raise ConfigError(f"block for {block.target!r} expects sources {block.sources}, "
                          f"got {sorted(by_name)}")
    X = target.features
    for u in sources:
        if u.d != X.shape[-1]:
            raise DimensionError(f"utility {u.name!r} has width {u.d}, target has {X.shape[-1]}")
    attended = [simplified_attention(X, X, block.heads, target.pads)]
    for name in block.sources:
        src = by_name[name]
        attended.append(simplified_attention(X, src.features, block.heads, src.pads))
    joined = concat(attended, axis=-1) if len(attended) > 1 else attended[0]
    hidden = dropout(relu(matmul(joined, block.weight) + block.bias), block.dropout_rate, rng)
    return block.norm(hidden + X)


class LtmiLayer(Module):
    def __init__(self, names: Sequence[str], d: int, heads: int, rng: np.random.Generator,
                 dropout_rate: float = 0.1):
        if not names:
            raise ConfigError("an LTMI layer needs at least one utility")
        self.names = list(names)
        self.d = d
        self.heads = heads
        self.blocks = [LtmiBlock(n, self.names, d, heads, rng, dropout_rate) for n in self.names]


def ltmi_layer(utilities: Sequence[Utility], layer: LtmiLayer,
               rng: np.random.Generator | None = None) -> list[Utility]:
    """Update every utility from the pre-layer values of all utilities."""
    if not utilities:
        raise ConfigError("ltmi_layer needs at least one utility")
    by_name = {u.name: u for u in utilities}
    if set(by_name) != set(layer.names) or len(by_name) != len(utilities):
        raise ConfigError(f"layer expects utilities {layer.names}, got {list(by_name)}")
    out = []
    for block in layer.blocks:
        target = by_name[block.target]
        others = [by_name[n] for n in block.sources]
        out.append(target.with_features(ltmi_block(target, others, block, rng)))
    return out


class LtmiEncoder(Module):
    """L stacked layers; each utility's two pads are shared by all layers."""

    def __init__(self, names: Sequence[str], d: int, heads: int, layers: int,
                 rng: np.random.Generator, dropout_rate: float = 0.1):
        self.names = list(names)
        self.d = d
        self.pads = {n: normal(rng, (2, d), 1.0) for n in self.names}
        self.layers = [LtmiLayer(self.names, d, heads, rng, dropout_rate) for _ in range(layers)]

    def __call__(self, features: dict[str, Tensor], rng: np.random.Generator | None = None
                 ) -> dict[str, Tensor]:
        utils = [Utility(n, as_tensor(features[n]), self.pads[n]) for n in self.names]
        for layer in self.layers:
            utils = ltmi_layer(utils, layer, rng)
        return {u.name: u.features for u in utils}


# -- naive baseline -----------------------------------------------------------------

class NaiveBlock(Module):
    """Standard Transformer block: attention sub-layer then FFN, each with residual + norm."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, d_ff: int | None = None):
        self.attn = AttentionParams(d, heads, rng)
        self.ffn = FeedForward(d, d_ff or 4 * d, rng)
        self.norm1 = LayerNorm(d)
        self.norm2 = LayerNorm(d)

    def __call__(self, x, y) -> Tensor:
        h = self.norm1(x + self.attn(x, y, y))
        return self.norm2(h + self.ffn(h))


class NaiveExtensionLayer(Module):
    """U self-attention blocks plus U(U-1) source-to-target blocks."""

    def __init__(self, names: Sequence[str], d: int, heads: int, rng: np.random.Generator,
                 d_ff: int | None = None):
        self.names = list(names)
        self.d = d
        self.d_ff = d_ff or 4 * d
        self.self_blocks = {n: NaiveBlock(d, heads, rng, self.d_ff) for n in self.names}
        self.cross_blocks = {
            f"{src}->{tgt}": NaiveBlock(d, heads, rng, self.d_ff)
            for tgt in self.names for src in self.names if src != tgt
        }

    @property
    def block_count(self) -> int:
        return len(self.self_blocks) + len(self.cross_blocks)

    def __call__(self, features: dict[str, Tensor]) -> dict[str, Tensor]:
        out = {}
        for tgt in self.names:
            x = self.self_blocks[tgt](features[tgt], features[tgt])
            for src in self.names:
                if src != tgt:
                    x = self.cross_blocks[f"{src}->{tgt}"](x, features[src])
            out[tgt] = x
        return out


# -- parameter accounting ----------------------------------------------------------

def ltmi_layer_parameters(U: int, d: int) -> int:
    return U * (U * d * d + d + 2 * d) + U * 2 * d


def naive_block_parameters(d: int, d_ff: int | None = None) -> int:
    d_ff = d_ff or 4 * d
    return 4 * d * d + (d * d_ff + d_ff + d_ff * d + d) + 2 * 2 * d


def naive_layer_parameters(U: int, d: int, d_ff: int | None = None) -> int:
    return U * U * naive_block_parameters(d, d_ff)


def count_parameters(layer) -> int:
    """Learnable scalars of a built layer under the module's counting convention."""
    if isinstance(layer, LtmiLayer):
        return layer.num_parameters() + len(layer.names) * 2 * layer.d
    if isinstance(layer, (LtmiEncoder, NaiveExtensionLayer, Module)):
        return layer.num_parameters()
    raise TypeError(f"cannot count parameters of {type(layer).__name__}")
