"""Decision layer of the instruction-following agent.

Per-view object attention guided by the active instruction, gated fusion of the
view summaries, the instruction selector (advanced by the COMPLETE action), the
vision-free two-stage (action, object-class) decoder, the action decoder, and
mask-candidate selection.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Hashable, Iterable, Sequence

import numpy as np

from .encoders import LstmParams, lstm_cell
from .errors import ConfigError, DataError, DimensionError
from .ltmi import simplified_attention
from .nn import Module, glorot, normal, param
from .tensor import (
    Tensor,
    as_tensor,
    bce_with_logits,
    concat,
    getitem,
    matmul,
    relu,
    reshape,
    sigmoid,
    softmax,
    transpose,
    tsum,
)
from .fusion import xe_loss

# -- visual attention ----------------------------------------------------------------


def per_view_attend(view, confidences, s, W_s, return_weights: bool = False):
    """sum_n softmax_n(v_n^T W_s s) * rho_n * v_n for one view (..., N, d)."""
    view, s, W_s = as_tensor(view), as_tensor(s), as_tensor(W_s)
    rho = np.asarray(confidences, dtype=np.float64)
    if view.shape[-2] == 0:
        raise DimensionError("a view needs at least one object")
    if view.shape[-1] != s.shape[-1] or W_s.shape != (view.shape[-1], s.shape[-1]):
        raise DimensionError("view, instruction and W_s widths disagree")
    if rho.shape != view.shape[:-1]:
        raise DimensionError(f"confidences shape {rho.shape} != {view.shape[:-1]}")
    guide = matmul(reshape(s, (*s.shape[:-1], 1, s.shape[-1])), transpose(W_s))  # (..., 1, d) = (W_s s)^T
    scores = matmul(view, transpose(guide))                                      # (..., N, 1)
    alpha = softmax(scores, axis=-2)
    out = matmul(transpose(alpha * rho[..., None]), view)
    out = reshape(out, (*view.shape[:-2], view.shape[-1]))
    return (out, reshape(alpha, alpha.shape[:-1])) if return_weights else out


def gated_view_fusion(view_vectors, s, W_g, mode: str = "sigmoid", return_gates: bool = False):
    """sum_k w_k v^k with w_k = sigmoid((v^k)^T W_g s) (independent gates) or,
    with ``mode="softmax"``, weights normalised across the K views."""
    V, s, W_g = as_tensor(view_vectors), as_tensor(s), as_tensor(W_g)
    if V.shape[-2] < 1:
        raise DimensionError("need at least one view")
    guide = matmul(reshape(s, (*s.shape[:-1], 1, s.shape[-1])), transpose(W_g))
    scores = matmul(V, transpose(guide))                                         # (..., K, 1)
    if mode == "sigmoid":
        gates = sigmoid(scores)
    elif mode == "softmax":
        gates = softmax(scores, axis=-2)
    else:
        raise ConfigError(f"unknown view fusion mode {mode!r}")
    out = reshape(matmul(transpose(gates), V), (*V.shape[:-2], V.shape[-1]))
    return (out, reshape(gates, gates.shape[:-1])) if return_gates else out


# -- instruction selector -----------------------------------------------------------


@dataclass(frozen=True)
class InstructionState:
    """``m`` is the 1-based active instruction; m == L + 1 marks the end of the episode."""

    m: int
    L: int
    instructions: Tensor
    goal: Tensor | None = None
    done: bool = False

    def __post_init__(self):
        if self.L < 1:
            raise ConfigError("an episode needs at least one instruction")
        if not 1 <= self.m <= self.L + 1:
            raise ConfigError(f"instruction index {self.m} outside 1..{self.L + 1}")

    @property
    def current(self) -> Tensor:
        idx = min(self.m, self.L) - 1
        return getitem(self.instructions, idx)


def advance_instruction(state: InstructionState, p_a_prev, complete_index: int,
                        decoder_state: "TwoStageState | None" = None):
    """m <- m + 1 iff argmax(p_a_prev) is COMPLETE; resets the two-stage decoder on increment.

    Returns ``(state, decoder_state)``. Once the episode has ended further calls are no-ops.
    """
    p = np.asarray(p_a_prev.data if isinstance(p_a_prev, Tensor) else p_a_prev, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-6:
        raise DataError("action distribution does not sum to 1")
    if state.done or int(np.argmax(p)) != complete_index:
        return state, decoder_state
    m = state.m + 1
    new_state = replace(state, m=m, done=m > state.L)
    if decoder_state is not None and not new_state.done:
        decoder_state = TwoStageState.reset(new_state.current)
    return new_state, decoder_state


def replay_instruction_indices(actions: Iterable[int], complete_index: int, L: int) -> list[int]:
    """Instruction index in effect at each step of a (gold) action stream."""
    m, out = 1, []
    for a in actions:
        out.append(min(m, L))
        if a == complete_index and m <= L:
            m += 1
    return out


# -- two-stage instruction decoder ----------------------------------------------------


@dataclass(frozen=True)
class TwoStageState:
    h_action: Tensor
    c_action: Tensor
    h_object: Tensor
    c_object: Tensor
    prev_action: np.ndarray | None = None
    prev_object: np.ndarray | None = None

    @classmethod
    def reset(cls, s) -> "TwoStageState":
        s = as_tensor(s)
        zero = Tensor(np.zeros(s.shape))
        return cls(s, zero, s, zero)


class TwoStageDecoder(Module):
    """Two autoregressive LSTMs predicting (action, object class) from the instruction alone."""

    def __init__(self, d: int, n_actions: int, n_objects: int, rng: np.random.Generator | None = None,
                 navigation: Sequence[int] = ()):
        self.d = d
        self.n_actions = n_actions
        self.n_objects = n_objects
        self.navigation = np.array(sorted(navigation), dtype=np.int64)
        if rng is None:
            self.embed_action = param(np.zeros((n_actions, d)))
            self.embed_object = param(np.zeros((n_objects, d)))
            self.w_action = param(np.zeros((d, n_actions)))
            self.w_object = param(np.zeros((d, n_objects)))
        else:
            self.embed_action = normal(rng, (n_actions, d), 1.0 / np.sqrt(d))
            self.embed_object = normal(rng, (n_objects, d), 1.0 / np.sqrt(d))
            self.w_action = glorot(rng, d, n_actions)
            self.w_object = glorot(rng, d, n_objects)
        self.action_lstm = LstmParams(d, d, rng)
        self.object_lstm = LstmParams(d, d, rng)
        self.b_action = param(np.zeros(n_actions))
        self.b_object = param(np.zeros(n_objects))
        self.nav_action = param(np.full(n_actions, 1.0 / n_actions))
        self.nav_object = param(np.full(n_objects, 1.0 / n_objects))

    def _embed(self, table: Tensor, prev: np.ndarray | None, like: Tensor) -> Tensor:
        if prev is None:
            return Tensor(np.zeros(like.shape))
        prev = np.asarray(prev, dtype=np.int64)
        picked = getitem(table, np.maximum(prev, 0))
        return picked * (prev >= 0)[..., None]

    def logits(self, state: TwoStageState, prev_action=None, prev_object=None):
        """One step; returns (action logits, object logits, next state without prev set)."""
        prev_action = state.prev_action if prev_action is None else prev_action
        prev_object = state.prev_object if prev_object is None else prev_object
        xa = self._embed(self.embed_action, prev_action, state.h_action)
        xo = self._embed(self.embed_object, prev_object, state.h_object)
        ha, ca = lstm_cell(xa, state.h_action, state.c_action, self.action_lstm)
        ho, co = lstm_cell(xo, state.h_object, state.c_object, self.object_lstm)
        la = matmul(ha, self.w_action) + self.b_action
        lo = matmul(ho, self.w_object) + self.b_object
        return la, lo, TwoStageState(ha, ca, ho, co)

    def is_navigation(self, actions) -> np.ndarray:
        return np.isin(np.asarray(actions), self.navigation)


def two_stage_step(state: TwoStageState, decoder: TwoStageDecoder):
    """Returns (p_ia, p_io, forwarded_ia, forwarded_io, next_state).

    Each LSTM consumes the embedding of its own previous argmax (zeros right after a
    reset). When the predicted action is a navigation action the forwarded vectors
    are the learnable constants instead of the predictions.
    """
    la, lo, nxt = decoder.logits(state)
    p_ia, p_io = softmax(la, axis=-1), softmax(lo, axis=-1)
    a_hat = np.argmax(p_ia.data, axis=-1)
    o_hat = np.argmax(p_io.data, axis=-1)
    nav = decoder.is_navigation(a_hat)[..., None].astype(np.float64)
    fwd_ia = p_ia * (1.0 - nav) + decoder.nav_action * nav
    fwd_io = p_io * (1.0 - nav) + decoder.nav_object * nav
    nxt = replace(nxt, prev_action=a_hat, prev_object=o_hat)
    return p_ia, p_io, fwd_ia, fwd_io, nxt


# -- action decoder --------------------------------------------------------------------


class ActionDecoder(Module):
    """LSTM over [v; s; p_ia; p_io] followed by a softmax over N_a + 1 actions (last = COMPLETE)."""

    def __init__(self, d: int, n_actions: int, n_objects: int, rng: np.random.Generator | None = None):
        self.d = d
        self.input_width = 2 * d + n_actions + n_objects
        self.lstm = LstmParams(self.input_width, d, rng)
        self.w = glorot(rng, d, n_actions + 1) if rng is not None else param(np.zeros((d, n_actions + 1)))
        self.b = param(np.zeros(n_actions + 1))

    @property
    def complete_index(self) -> int:
        return self.b.shape[0] - 1


def action_logits(v, s, p_ia, p_io, h_prev, c_prev, decoder: ActionDecoder):
    x = concat([as_tensor(v), as_tensor(s), as_tensor(p_ia), as_tensor(p_io)], axis=-1)
    if x.shape[-1] != decoder.input_width:
        raise DimensionError(f"action decoder input width {x.shape[-1]} != {decoder.input_width}")
    h, c = lstm_cell(x, h_prev, c_prev, decoder.lstm)
    return h, c, matmul(h, decoder.w) + decoder.b


def action_step(v, s, p_ia, p_io, h_prev, c_prev, decoder: ActionDecoder):
    """Returns (h, c, p_a) with p_a a distribution over N_a + 1 actions."""
    h, c, logits = action_logits(v, s, p_ia, p_io, h_prev, c_prev, decoder)
    return h, c, softmax(logits, axis=-1)


# -- mask decoder -----------------------------------------------------------------------


class MaskDecoder(Module):
    """Single-head pad-augmented self-attention, affine + ReLU + residual, bilinear scoring."""

    def __init__(self, d: int, n_actions: int, n_objects: int, rng: np.random.Generator):
        self.pads = normal(rng, (2, d), 1.0)
        self.w = glorot(rng, d, d)
        self.b = param(np.zeros(d))
        self.w_m = glorot(rng, d + n_actions + n_objects, d)

    def refine(self, candidates) -> Tensor:
        candidates = as_tensor(candidates)
        attended = simplified_attention(candidates, candidates, 1, self.pads)
        return relu(matmul(attended, self.w) + self.b) + candidates


def mask_logits(candidates, g, decoder: MaskDecoder) -> Tensor:
    candidates, g = as_tensor(candidates), as_tensor(g)
    if candidates.shape[-2] == 0:
        raise DimensionError("no mask candidates")
    if g.shape[-1] != decoder.w_m.shape[0]:
        raise DimensionError(f"guide width {g.shape[-1]} != {decoder.w_m.shape[0]}")
    refined = decoder.refine(candidates)
    query = matmul(reshape(g, (*g.shape[:-1], 1, g.shape[-1])), decoder.w_m)   # (..., 1, d)
    scores = matmul(refined, transpose(query))
    return reshape(scores, scores.shape[:-1])


def select_mask(candidates, g, decoder: MaskDecoder):
    """Returns (p_m, chosen) where chosen = argmax p_m, lowest index on ties."""
    p = sigmoid(mask_logits(candidates, g, decoder))
    return p, int(np.argmax(p.data)) if p.ndim == 1 else np.argmax(p.data, axis=-1)


# -- sequences and losses -----------------------------------------------------------------


def simplify_nav_sequence(actions: Sequence[Hashable], navigation: Iterable[Hashable]) -> list:
    """Collapse runs of a repeated navigation action to one occurrence."""
    nav = set(navigation)
    out: list = []
    for a in actions:
        if out and a == out[-1] and a in nav:
            continue
        out.append(a)
    return out


def lwit_loss(mask_logits_, gold_mask, action_logits_, gold_actions, aux_logits, gold_aux):
    """L = L_mask + L_action + L_aux, each term summed over its steps.

    ``gold_mask`` holds one candidate index per step (-1 where no mask is chosen);
    ``aux_logits``/``gold_aux`` are (action stream, object stream) pairs.
    Returns ``(total, {"mask": ..., "action": ..., "aux": ...})``.
    """
    gold_mask = np.asarray(gold_mask, dtype=np.int64)
    mask_logits_ = as_tensor(mask_logits_)
    if mask_logits_.shape[:-1] != gold_mask.shape:
        raise DataError("mask logits and gold mask indices are misaligned")
    gold_actions = np.asarray(gold_actions, dtype=np.int64)
    if as_tensor(action_logits_).shape[:-1] != gold_actions.shape:
        raise DataError("action logits and gold actions are misaligned")
    if len(aux_logits) != len(gold_aux):
        raise DataError("auxiliary streams are misaligned")

    active = gold_mask >= 0
    targets = np.zeros(mask_logits_.shape)
    targets[active, gold_mask[active]] = 1.0
    l_mask = tsum(bce_with_logits(mask_logits_, targets) * active[..., None])
    l_action = xe_loss(action_logits_, gold_actions)
    l_aux = None
    for logits, gold in zip(aux_logits, gold_aux):
        term = xe_loss(logits, gold)
        l_aux = term if l_aux is None else l_aux + term
    if l_aux is None:
        l_aux = Tensor(0.0)
    total = l_mask + l_action + l_aux
    return total, {"mask": l_mask, "action": l_action, "aux": l_aux}
