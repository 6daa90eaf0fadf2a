"""
Frozen-projection attention and what it saves
==============================================

Attention with per-head slice selectors instead of learned projections, checked
against ordinary multi-head attention, and the parameter bill for three inputs.
"""
import numpy as np

from miat.attention import AttentionParams, multi_head_attention
from miat.ltmi import (LtmiEncoder, frozen_projection, ltmi_layer_parameters,
                       naive_layer_parameters, simplified_attention)

rng = np.random.default_rng(0)

# a head's projection just picks a contiguous block of features
print(frozen_projection(2, 2, 4))

# queries from one input, keys/values from another, plus two memory rows
d, H = 8, 4
X = rng.normal(size=(3, d))
Y = rng.normal(size=(5, d))
pads = rng.normal(size=(2, d))
fast, weights = simplified_attention(X, Y, H, pads, return_weights=True)
print("attention weights per head:", weights.shape)   # (H, queries, keys + 2)

# the same thing written as standard multi-head attention with fixed weights
proj = [frozen_projection(h, H, d) for h in range(1, H + 1)]
frozen = AttentionParams.from_matrices(proj, proj, proj, np.eye(d))
slow = multi_head_attention(frozen, X, np.vstack([Y, pads]), np.vstack([Y, pads]))
print("max difference:", np.abs(fast.data - slow.data).max())

# memory rows give a query somewhere to put its weight when nothing matches
print("weight left on the pads:", weights.data[..., -2:].sum(axis=-1).mean().round(3))

# parameter bill at width 512 with image, question and history inputs
ltmi, naive = ltmi_layer_parameters(3, 512), naive_layer_parameters(3, 512)
print(f"light layer {ltmi:,}  naive layer {naive:,}  ratio {ltmi / naive:.3f}")

# a small two-layer stack, as used by the dialog toy
enc = LtmiEncoder(["v", "q", "r"], 64, 4, 2, rng)
out = enc({"v": rng.normal(size=(2, 4, 64)), "q": rng.normal(size=(2, 2, 64)),
           "r": rng.normal(size=(2, 2, 64))})
print({k: v.shape for k, v in out.items()}, enc.num_parameters(), "parameters")
