"""Task models assembled from the library modules, one per toy task."""
from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..attention import sinusoidal_pe
from ..decoders import SummaryAttention, discriminative_loss, discriminative_scores
from ..encoders import BiLSTM, HistoryEncoder, ImageEncoder, QuestionEncoder, TokenEmbedding
from ..errors import ConfigError
from ..fusion import FusionLayer, xe_loss
from ..hierview import (
    ActionDecoder,
    MaskDecoder,
    TwoStageDecoder,
    TwoStageState,
    action_logits,
    gated_view_fusion,
    lwit_loss,
    mask_logits,
    per_view_attend,
    simplify_nav_sequence,
    two_stage_step,
)
from ..ltmi import LtmiEncoder
from ..nn import MLP, LayerNorm, Linear, Module, glorot, normal
from ..tensor import Tensor, concat, getitem, stack
from . import data as D
from .config import RunConfig


# -- dialog-toy ---------------------------------------------------------------------------------

class DialogModel(Module):
    """Utility encoders -> stacked LTMI -> per-utility summaries -> discriminative scores.

    Utilities are named ``v`` (image), ``q`` (question) and ``r`` (history); leaving
    ``r`` out of the config gives the history ablation.
    """

    def __init__(self, config: RunConfig, vocab_size: int, feature_width: int, rng: np.random.Generator):
        names = config.utility_names
        if "v" not in names or "q" not in names or not set(names) <= {"v", "q", "r"}:
            raise ConfigError("dialog-toy utilities must include v and q, optionally r")
        d = config.d
        self.names = names
        self.embedding = TokenEmbedding(vocab_size, rng, config.embed_width)
        self.question = QuestionEncoder(self.embedding, d, rng)
        self.history = HistoryEncoder(self.embedding, d, rng) if "r" in names else None
        self.image = ImageEncoder(feature_width, d, rng)
        self.encoder = LtmiEncoder(names, d, config.heads, config.layers, rng, config.dropout)
        self.summaries = {n: SummaryAttention(d, rng) for n in names}
        self.context = Linear(rng, len(names) * d, d)
        self.answer = Linear(rng, feature_width, d)
        self.answer_norm = LayerNorm(d)

    def scores(self, batch: dict[str, np.ndarray], rng: np.random.Generator | None = None) -> Tensor:
        feats = {
            "v": self.image(batch["features"], batch["boxes"], rng),
            "q": self.question(batch["question"]),
        }
        if self.history is not None:
            feats["r"] = self.history(batch["history"])
        encoded = self.encoder(feats, rng)
        c = self.context(concat([self.summaries[n](encoded[n]) for n in self.names], axis=-1))
        answers = self.answer_norm(self.answer(batch["candidates"]))
        return discriminative_scores(answers, c)

    def loss(self, batch, rng=None) -> Tensor:
        scores = self.scores(batch, rng)
        target = np.zeros(scores.shape)
        target[np.arange(scores.shape[0]), batch["gold"]] = 1.0
        return discriminative_loss(scores, target) / scores.shape[0]


# -- fusion-toy ---------------------------------------------------------------------------------

class CaptionModel(Module):
    """Teacher-forced caption layer stack over grid and region features."""

    SOS = 0

    def __init__(self, config: RunConfig, vocab_size: int, feature_width: int, rng: np.random.Generator):
        d = config.d
        self.embedding = normal(rng, (vocab_size, d), 1.0 / np.sqrt(d))
        self.grid_proj = Linear(rng, feature_width, d)
        self.region_proj = Linear(rng, feature_width, d)
        self.layers = [FusionLayer(d, config.heads, rng, design=config.fusion_design, dropout_rate=config.dropout)
                       for _ in range(config.layers)]
        self.out = Linear(rng, d, vocab_size)
        self.d = d

    def logits(self, batch, rng=None) -> Tensor:
        caption = batch["caption"]
        inputs = np.concatenate([np.full((caption.shape[0], 1), self.SOS), caption[:, :-1]], axis=1)
        x = getitem(self.embedding, inputs) + sinusoidal_pe(caption.shape[1], self.d)
        grid, region = self.grid_proj(batch["grid"]), self.region_proj(batch["region"])
        for layer in self.layers:
            x = layer(x, grid, region, rng)
        return self.out(x)

    def loss(self, batch, rng=None) -> Tensor:
        return xe_loss(self.logits(batch, rng), batch["caption"]) / batch["caption"].shape[0]


# -- view-count-toy ------------------------------------------------------------------------------

class ViewCountModel(Module):
    """Per-view attention guided by the target class, view fusion, then a count classifier."""

    def __init__(self, config: RunConfig, views: int, feature_width: int, rng: np.random.Generator):
        d = config.d
        self.mode = config.view_fusion
        self.proj = Linear(rng, feature_width, d)
        self.target_embed = normal(rng, (D.OBJECT_CLASSES, d), 1.0 / np.sqrt(d))
        self.w_s = [glorot(rng, d, d) for _ in range(views)]
        self.w_g = glorot(rng, d, d)
        self.hidden = MLP(rng, d, d)
        self.out = Linear(rng, d, views + 1)

    def logits(self, batch, rng=None) -> Tensor:
        objs = self.proj(batch["features"])                       # (B, K, N, d)
        s = getitem(self.target_embed, batch["target"])
        ones = np.ones(batch["features"].shape[:-1])
        summaries = stack([per_view_attend(getitem(objs, (slice(None), k)), ones[:, k], s, w)
                           for k, w in enumerate(self.w_s)], axis=-2)
        v = gated_view_fusion(summaries, s, self.w_g, mode=self.mode)
        return self.out(self.hidden(v))

    def loss(self, batch, rng=None) -> Tensor:
        return xe_loss(self.logits(batch, rng), batch["count"]) / batch["count"].shape[0]


# -- instruct-toy ------------------------------------------------------------------------------

class InstructionEncoder(Module):
    """Token embedding -> biLSTM -> linear of [last forward; first backward] -> layer norm -> dropout."""

    def __init__(self, embedding: TokenEmbedding, d: int, rng: np.random.Generator, dropout: float = 0.0):
        self.embedding = embedding
        self.lstm = BiLSTM(embedding.table.shape[1], d, rng, layers=1)
        self.proj = Linear(rng, 2 * d, d)
        self.norm = LayerNorm(d)
        self.dropout = dropout

    def __call__(self, tokens, rng: np.random.Generator | None = None) -> Tensor:
        _, fwd, bwd = self.lstm(self.embedding(tokens))
        return T.dropout(self.norm(self.proj(concat([fwd, bwd], axis=-1))), self.dropout, rng)


def _pad_episodes(episodes: list[D.Episode]):
    B = len(episodes)
    Tm = max(ep.steps for ep in episodes)
    Lm = max(ep.instructions.shape[0] for ep in episodes)
    _, K, N, F = episodes[0].features.shape
    W = episodes[0].instructions.shape[1]
    out = {
        "instructions": np.zeros((B, Lm, W), dtype=np.int64),
        "goal": np.stack([ep.goal for ep in episodes]),
        "features": np.zeros((B, Tm, K, N, F)),
        "confidences": np.zeros((B, Tm, K, N)),
        "actions": np.full((B, Tm), -1, dtype=np.int64),
        "objects": np.zeros((B, Tm), dtype=np.int64),
        "masks": np.full((B, Tm), -1, dtype=np.int64),
        "instr_index": np.zeros((B, Tm), dtype=np.int64),
        "instr_step": np.zeros((B, Tm), dtype=np.int64),
    }
    for b, ep in enumerate(episodes):
        T_, L = ep.steps, ep.instructions.shape[0]
        out["instructions"][b, :L] = ep.instructions
        for key in ("features", "confidences", "actions", "objects", "masks"):
            out[key][b, :T_] = getattr(ep, key)
        idx = ep.instruction_index()
        out["instr_index"][b, :T_] = idx
        starts = np.searchsorted(idx, idx, side="left")
        out["instr_step"][b, :T_] = np.arange(T_) - starts
    return out


def _aux_targets(episodes: list[D.Episode], Lm: int):
    """Simplified (action, object) sequences per instruction without the COMPLETE step."""
    seqs = []
    for ep in episodes:
        idx = ep.instruction_index()
        for m in range(Lm):
            sel = (idx == m) & (ep.actions != D.COMPLETE)
            acts = simplify_nav_sequence(list(zip(ep.actions[sel].tolist(), ep.objects[sel].tolist())),
                                         [(a, 0) for a in D.NAVIGATION])
            seqs.append(acts)
    S = max(1, max(len(s) for s in seqs))
    gold_a = np.zeros((len(seqs), S), dtype=np.int64)
    gold_o = np.zeros((len(seqs), S), dtype=np.int64)
    weight = np.zeros((len(seqs), S))
    for r, seq in enumerate(seqs):
        for i, (a, o) in enumerate(seq):
            gold_a[r, i], gold_o[r, i], weight[r, i] = a, o, 1.0
    return gold_a, gold_o, weight


class InstructAgent(Module):
    def __init__(self, config: RunConfig, views: int, feature_width: int, rng: np.random.Generator):
        d = config.d
        n_a, n_o = len(D.ACTIONS), D.OBJECT_CLASSES
        self.view_fusion = config.view_fusion
        self.embedding = TokenEmbedding(len(D.INSTRUCTION_VOCAB), rng, config.embed_width)
        self.instructions = InstructionEncoder(self.embedding, d, rng, config.dropout)
        self.goal = InstructionEncoder(self.embedding, d, rng, config.dropout)
        self.obj_proj = Linear(rng, feature_width, d)
        self.dropout = config.dropout
        # small bilinear init keeps the attention and gate scores out of saturation
        self.w_s = [normal(rng, (d, d), 1.0 / d) for _ in range(views)]
        self.w_g = normal(rng, (d, d), 1.0 / d)
        self.two_stage = TwoStageDecoder(d, n_a, n_o, rng, navigation=D.NAVIGATION)
        self.action = ActionDecoder(d, n_a, n_o, rng)
        self.mask = MaskDecoder(d, n_a, n_o, rng)

    def forward(self, episodes: list[D.Episode], rng: np.random.Generator | None = None):
        """Teacher-forced replay of a batch of episodes.

        Returns (action logits (B,T,N_a+1), mask logits (B,T,N), aux logits pair,
        padded batch, aux targets).
        """
        batch = _pad_episodes(episodes)
        B, Tm = batch["actions"].shape
        Lm = batch["instructions"].shape[1]
        rows = np.arange(B)[:, None]

        s_all = self.instructions(batch["instructions"].reshape(B * Lm, -1), rng)  # (B*Lm, d)
        goal = self.goal(batch["goal"], rng)                                      # (B, d)
        s_t = getitem(s_all, rows * Lm + batch["instr_index"])                   # (B, T, d)

        objs = T.dropout(T.relu(self.obj_proj(batch["features"])), self.dropout, rng)   # (B, T, K, N, d)
        views = stack([per_view_attend(getitem(objs, (slice(None), slice(None), k)),
                                       batch["confidences"][:, :, k], s_t, w)
                       for k, w in enumerate(self.w_s)], axis=-2)
        v_t = gated_view_fusion(views, s_t, self.w_g, mode=self.view_fusion)

        # vision-free decoder, free-running from a reset at every instruction
        steps = int(batch["instr_step"].max()) + 1
        state = TwoStageState.reset(s_all)
        fwd_a, fwd_o = [], []
        for _ in range(steps):
            _, _, f_a, f_o, state = two_stage_step(state, self.two_stage)
            fwd_a.append(f_a)
            fwd_o.append(f_o)
        pick = (rows * Lm + batch["instr_index"], batch["instr_step"])
        p_ia = getitem(stack(fwd_a, axis=1), pick)                               # (B, T, N_a)
        p_io = getitem(stack(fwd_o, axis=1), pick)

        # teacher-forced pass over the simplified gold sequences for the auxiliary loss
        gold_a, gold_o, weight = _aux_targets(episodes, Lm)
        state = TwoStageState.reset(s_all)
        aux_a, aux_o = [], []
        for i in range(gold_a.shape[1]):
            prev_a = gold_a[:, i - 1] if i else np.full(gold_a.shape[0], -1)
            prev_o = gold_o[:, i - 1] if i else np.full(gold_a.shape[0], -1)
            la, lo, state = self.two_stage.logits(state, prev_a, prev_o)
            aux_a.append(la)
            aux_o.append(lo)

        h, c = goal, Tensor(np.zeros(goal.shape))
        act = []
        for t in range(Tm):
            h, c, logits = action_logits(getitem(v_t, (slice(None), t)), getitem(s_t, (slice(None), t)),
                                         getitem(p_ia, (slice(None), t)), getitem(p_io, (slice(None), t)),
                                         h, c, self.action)
            act.append(logits)
        act_logits = stack(act, axis=1)

        candidates = getitem(objs, (slice(None), slice(None), D.CENTER_VIEW))      # (B, T, N, d)
        m_logits = mask_logits(candidates, concat([s_t, p_ia, p_io], axis=-1), self.mask)
        aux = (stack(aux_a, axis=1), stack(aux_o, axis=1))
        return act_logits, m_logits, aux, batch, (gold_a, gold_o, weight)

    def loss(self, episodes: list[D.Episode], rng=None) -> Tensor:
        total, _ = self.loss_terms(episodes, rng)
        return total / len(episodes)

    def loss_terms(self, episodes: list[D.Episode], rng=None):
        act, m_logits, (aux_a, aux_o), batch, (gold_a, gold_o, weight) = self.forward(episodes, rng)
        valid = np.nonzero(batch["actions"] >= 0)
        aux_valid = np.nonzero(weight > 0)
        return lwit_loss(getitem(m_logits, valid), batch["masks"][valid],
                         getitem(act, valid), batch["actions"][valid],
                         [getitem(aux_a, aux_valid), getitem(aux_o, aux_valid)],
                         [gold_a[aux_valid], gold_o[aux_valid]])

    def replay_accuracy(self, episodes: list[D.Episode]) -> dict[str, float]:
        """Per-step action accuracy and mask-selection accuracy against the gold script."""
        act, m_logits, _, batch, _ = self.forward(episodes)
        valid = batch["actions"] >= 0
        pred = np.argmax(act.data, axis=-1)
        with_mask = batch["masks"] >= 0
        chosen = np.argmax(m_logits.data, axis=-1)
        return {
            "action_accuracy": float(np.mean(pred[valid] == batch["actions"][valid])),
            "mask_accuracy": float(np.mean(chosen[with_mask] == batch["masks"][with_mask])),
            "action_correct": float(np.sum(pred[valid] == batch["actions"][valid])),
            "action_steps": float(np.sum(valid)),
            "mask_correct": float(np.sum(chosen[with_mask] == batch["masks"][with_mask])),
            "mask_steps": float(np.sum(with_mask)),
        }
