"""Answer scoring for dialog-style candidate ranking, the associated losses, and
ranking metrics (MRR, R@k, mean rank, NDCG)."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .encoders import LstmParams, TokenEmbedding, lstm_cell
from .errors import DataError, DimensionError, UsageError
from .fusion import xe_loss
from .nn import Module, glorot, param
from .tensor import (
    Tensor,
    as_tensor,
    getitem,
    log_softmax,
    matmul,
    relu,
    reshape,
    softmax,
    stack,
    transpose,
    tsum,
)


class SummaryAttention(Module):
    def __init__(self, d: int, rng: np.random.Generator):
        self.w1 = glorot(rng, d, d)
        self.b1 = param(np.zeros(d))
        self.w2 = glorot(rng, d, 1)
        self.b2 = param(np.zeros(1))

    def __call__(self, U) -> Tensor:
        return summarize_utility(U, self.w1, self.b1, self.w2, self.b2)


def summarize_utility(U, W1, b1, W2, b2) -> Tensor:
    """Collapse K entity rows to one d-vector with two-layer attention weights."""
    U = as_tensor(U)
    if U.shape[-2] < 1:
        raise DimensionError("cannot summarise a utility with no entities")
    logits = matmul(relu(matmul(U, W1) + b1), W2) + b2
    weights = softmax(logits, axis=-2)
    out = matmul(transpose(weights), U)
    return reshape(out, (*U.shape[:-2], U.shape[-1]))


def discriminative_scores(candidates, context) -> Tensor:
    """log_softmax over candidates of a_i . c; candidates (..., C, d), context (..., d)."""
    candidates, context = as_tensor(candidates), as_tensor(context)
    if candidates.shape[-1] != context.shape[-1]:
        raise DimensionError("candidate and context widths differ")
    dots = matmul(candidates, reshape(context, (*context.shape, 1)))
    return log_softmax(reshape(dots, dots.shape[:-1]), axis=-1)


def discriminative_loss(log_probs, target) -> Tensor:
    """-sum_i y_i p_i; ``target`` is one-hot or a relevance vector of the same length."""
    log_probs = as_tensor(log_probs)
    y = np.asarray(target, dtype=np.float64)
    if y.shape != log_probs.shape:
        raise DimensionError(f"target shape {y.shape} != score shape {log_probs.shape}")
    return -tsum(log_probs * y)


def multitask_loss(discriminative, generative) -> Tensor:
    """Unweighted sum of the two decoder losses."""
    return as_tensor(discriminative) + as_tensor(generative)


class GenerativeDecoder(Module):
    """Two-layer LSTM language model whose initial hidden state is the context vector."""

    def __init__(self, embedding: TokenEmbedding, d: int, rng: np.random.Generator | None = None,
                 sos: int = 1):
        self.embedding = embedding
        self.sos = sos
        self.lower = LstmParams(embedding.table.shape[1], d, rng)
        self.upper = LstmParams(d, d, rng)
        vocab = embedding.vocab_size
        self.out_w = glorot(rng, d, vocab) if rng is not None else param(np.zeros((d, vocab)))
        self.out_b = param(np.zeros(vocab))

    def token_log_probs(self, tokens, context) -> tuple[Tensor, np.ndarray, np.ndarray]:
        """Teacher-forced log-probabilities for padded sequences (C x L, pad = -1)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        C, L = tokens.shape
        context = as_tensor(context)
        inputs = np.concatenate([np.full((C, 1), self.sos), np.maximum(tokens[:, :-1], 0)], axis=1)
        emb = self.embedding(inputs)
        h0 = reshape(context, (1, -1)) * np.ones((C, 1))
        h1 = h2 = h0
        c1 = c2 = Tensor(np.zeros((C, self.upper.hidden)))
        steps = []
        for n in range(L):
            h1, c1 = lstm_cell(getitem(emb, (slice(None), n)), h1, c1, self.lower)
            h2, c2 = lstm_cell(h1, h2, c2, self.upper)
            steps.append(log_softmax(matmul(h2, self.out_w) + self.out_b, axis=-1))
        return steps, np.maximum(tokens, 0), (tokens >= 0).astype(np.float64)


def _pad(sequences: Sequence[Sequence[int]]) -> np.ndarray:
    if not sequences:
        raise DataError("no candidate sequences")
    if any(len(s) == 0 for s in sequences):
        raise DataError("empty candidate answer")
    width = max(len(s) for s in sequences)
    out = np.full((len(sequences), width), -1, dtype=np.int64)
    for i, s in enumerate(sequences):
        out[i, :len(s)] = s
    return out


def generative_scores(candidates: Sequence[Sequence[int]], decoder: GenerativeDecoder, context) -> Tensor:
    """s_i = sum over the candidate's words of log p(word | SOS + prefix)."""
    tokens = _pad(candidates)
    steps, gold, weights = decoder.token_log_probs(tokens, context)
    C = tokens.shape[0]
    total = None
    for n, lp in enumerate(steps):
        picked = getitem(lp, (np.arange(C), gold[:, n])) * weights[:, n]
        total = picked if total is None else total + picked
    return total


def generative_loss(answer: Sequence[int], decoder: GenerativeDecoder, context) -> Tensor:
    tokens = _pad([answer])
    steps, gold, _ = decoder.token_log_probs(tokens, context)
    logits = stack([getitem(lp, 0) for lp in steps], axis=0)
    return xe_loss(logits, gold[0])


def ranking_distribution(scores) -> Tensor:
    return softmax(as_tensor(scores), axis=-1)


def average_distributions(p_a, p_b) -> np.ndarray:
    """Elementwise mean of two candidate distributions (used for ensembled re-ranking)."""
    p_a = np.asarray(p_a.data if isinstance(p_a, Tensor) else p_a, dtype=np.float64)
    p_b = np.asarray(p_b.data if isinstance(p_b, Tensor) else p_b, dtype=np.float64)
    if p_a.shape != p_b.shape:
        raise DimensionError("distributions differ in length")
    return 0.5 * (p_a + p_b)


# -- metrics --------------------------------------------------------------------------

def ranking_order(scores) -> np.ndarray:
    """Candidate indices sorted by descending score, ties broken by lower index."""
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    return np.argsort(-s, kind="stable")


def dcg(gains: np.ndarray) -> float:
    gains = np.asarray(gains, dtype=np.float64)
    return float(np.sum(gains / np.log2(np.arange(2, gains.size + 2))))


def ndcg(scores, relevance) -> float:
    """Linear-gain NDCG truncated at the number of positively relevant candidates."""
    rel = np.asarray(relevance, dtype=np.float64)
    k = int(np.count_nonzero(rel > 0))
    if k == 0:
        return 0.0
    order = ranking_order(scores)
    ideal = dcg(np.sort(rel)[::-1][:k])
    return dcg(rel[order][:k]) / ideal


def ranking_metrics(scores, gold: int | None = None, relevance=None) -> dict[str, float]:
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    if s.ndim != 1 or s.size < 1:
        raise DimensionError("scores must be a non-empty vector")
    if gold is None and relevance is None:
        raise UsageError("ranking metrics need a gold index or relevance scores")
    out: dict[str, float] = {}
    if gold is not None:
        if not 0 <= gold < s.size:
            raise DataError(f"gold index {gold} outside 0..{s.size - 1}")
        rank = int(np.nonzero(ranking_order(s) == gold)[0][0]) + 1
        out.update({
            "MRR": 1.0 / rank,
            "R@1": float(rank <= 1),
            "R@5": float(rank <= 5),
            "R@10": float(rank <= 10),
            "MeanRank": float(rank),
        })
    if relevance is not None:
        rel = np.asarray(relevance, dtype=np.float64)
        if rel.shape != s.shape:
            raise DimensionError("relevance length differs from the candidate count")
        out["NDCG"] = ndcg(s, rel)
    return out


def format_metrics(metrics: dict[str, float]) -> list[str]:
    return [f"metric={name} value={value!r}" for name, value in metrics.items()]


def mean_metrics(rows: Sequence[dict[str, float]]) -> dict[str, float]:
    if not rows:
        return {}
    keys = list(rows[0])
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}
