"""Central-difference gradient checks and a registry of cases covering every op and layer.

Each registered case builds a scalar loss closure and the tensors to check. The
loss projects every op output onto a fixed random direction so that all output
entries contribute. Relative error of one tensor is
``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8)``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention, decoders, encoders, fusion, hierview, ltmi
from . import tensor as T
from .nn import Module
from .tensor import Tensor

CaseBuilder = Callable[[], tuple[Callable[[], Tensor], list[tuple[str, Tensor]]]]
REGISTRY: dict[str, CaseBuilder] = {}


def case(name: str):
    def register(fn: CaseBuilder) -> CaseBuilder:
        REGISTRY[name] = fn
        return fn
    return register


@dataclass
class GradReport:
    name: str
    max_rel_error: float
    worst_tensor: str
    checked_entries: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def numerical_gradient(fn: Callable[[], Tensor], x: Tensor, entries, h: float = 1e-5) -> np.ndarray:
    out = np.zeros(len(entries))
    flat = x.data.reshape(-1)
    for k, idx in enumerate(entries):
        orig = flat[idx]
        flat[idx] = orig + h
        up = fn().item()
        flat[idx] = orig - h
        down = fn().item()
        flat[idx] = orig
        out[k] = (up - down) / (2 * h)
    return out


def check_gradients(name: str, fn: Callable[[], Tensor], tensors: list[tuple],
                    h: float = 1e-5, max_entries: int = 48, seed: int = 0) -> GradReport:
    """``tensors`` holds (name, tensor) or (name, tensor, flat_entries) items. Large
    tensors without explicit entries are sampled at ``max_entries`` positions."""
    rng = np.random.default_rng(seed)
    for item in tensors:
        item[1].data = np.ascontiguousarray(item[1].data)
        item[1].grad = None
    loss = fn()
    loss.backward()
    worst, worst_name, count = 0.0, "", 0
    for item in tensors:
        tname, t = item[0], item[1]
        analytic_full = t.grad if t.grad is not None else np.zeros_like(t.data)
        n = t.data.size
        if len(item) > 2:
            entries = np.asarray(item[2])
        elif n <= max_entries:
            entries = np.arange(n)
        else:
            entries = np.sort(rng.choice(n, max_entries, replace=False))
        numeric = numerical_gradient(fn, t, entries, h)
        analytic = analytic_full.reshape(-1)[entries]
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
        err = float(np.abs(analytic - numeric).max(initial=0.0) / scale)
        count += len(entries)
        if err >= worst:
            worst, worst_name = err, tname
    return GradReport(name, worst, worst_name, count)


def run_all(names=None) -> list[GradReport]:
    names = list(REGISTRY) if names is None else names
    reports = []
    for name in names:
        fn, tensors = REGISTRY[name]()
        reports.append(check_gradients(name, fn, tensors))
    return reports


# -- helpers ----------------------------------------------------------------------------

def _rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def _var(rng, *shape, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _project(out: Tensor, seed: int = 99) -> Tensor:
    direction = np.random.default_rng(seed).normal(size=out.shape)
    return (out * direction).sum()


def _module_params(module: Module, prefix: str = "") -> list[tuple[str, Tensor]]:
    return [(prefix + n, p) for n, p in module.named_parameters()]


# -- tensor core --------------------------------------------------------------------------

@case("tensor.elementwise")
def _elementwise():
    rng = _rng(1)
    a, b = _var(rng, 3, 4), _var(rng, 4)
    c = Tensor(rng.uniform(0.5, 2.0, size=(3, 1)), requires_grad=True)

    def fn():
        y = (a + b) * a - b / c + T.neg(a) * 0.5
        y = T.exp(T.tanh(y)) + T.sigmoid(y) + T.log(c * c + 1.0)
        return _project(y)
    return fn, [("a", a), ("b", b), ("c", c)]


@case("tensor.nonsmooth")
def _nonsmooth():
    rng = _rng(2)
    a, b = _var(rng, 4, 3), _var(rng, 4, 3)

    def fn():
        return _project(T.relu(a) + T.absolute(b) + T.maximum(a, b) - T.minimum(a, b * 2.0))
    return fn, [("a", a), ("b", b)]


@case("tensor.matmul")
def _matmul():
    rng = _rng(3)
    a, b = _var(rng, 2, 3, 4), _var(rng, 4, 5)
    return (lambda: _project(T.matmul(a, b))), [("a", a), ("b", b)]


@case("tensor.structural")
def _structural():
    rng = _rng(4)
    a, b = _var(rng, 2, 3, 4), _var(rng, 2, 3, 2)
    idx = np.array([[0, 2, 2], [1, 1, 0]])

    def fn():
        x = T.concat([a, b], axis=-1)
        x = T.transpose(x, (1, 0, 2)).reshape(3, 12)
        y = T.stack([T.getitem(x, idx)[..., 2:5], T.getitem(x, (slice(None), slice(1, 4)))[idx]], axis=0)
        z = T.broadcast_to(T.getitem(a, (0, 1)), (5, 4))
        return _project(y) + _project(z, 7) + a.sum(axis=1).mean() + T.tsum(b, axis=-1, keepdims=True).sum()
    return fn, [("a", a), ("b", b)]


@case("tensor.softmax")
def _softmax():
    rng = _rng(5)
    a = _var(rng, 3, 5, scale=2.0)
    return (lambda: _project(T.softmax_rows(a)) + _project(T.log_softmax_rows(a), 3)
            + _project(T.softmax(a, axis=0), 4)), [("a", a)]


@case("tensor.layer_norm")
def _layer_norm():
    rng = _rng(6)
    x, g, b = _var(rng, 2, 3, 6), _var(rng, 6), _var(rng, 6)
    return (lambda: _project(T.layer_norm(x, g, b, 1e-5))), [("x", x), ("gain", g), ("bias", b)]


@case("tensor.dropout_bce")
def _dropout_bce():
    rng = _rng(7)
    x = _var(rng, 4, 5)
    y = rng.integers(0, 2, size=(4, 5))

    def fn():
        d = T.dropout(x, 0.3, np.random.default_rng(11))
        return T.bce_with_logits(d, y).sum()
    return fn, [("x", x)]


# -- attention --------------------------------------------------------------------------------

@case("attention.scaled_dot")
def _sda():
    rng = _rng(10)
    q, k, v = _var(rng, 3, 4), _var(rng, 5, 4), _var(rng, 5, 2)
    mask = rng.random((3, 5)) > 0.3
    mask[:, 0] = True
    return (lambda: _project(attention.scaled_dot_attention(q, k, v, mask))), [("Q", q), ("K", k), ("V", v)]


@case("attention.multi_head")
def _mha():
    rng = _rng(11)
    params = attention.AttentionParams(4, 2, rng)
    x, y = _var(rng, 2, 3, 4), _var(rng, 2, 5, 4)
    mask = attention.causal_mask(3)
    return (lambda: _project(params(x, y, y)) + _project(params(x, x, x, mask), 5)), \
        _module_params(params) + [("x", x), ("y", y)]


@case("attention.ffn")
def _ffn():
    rng = _rng(12)
    layer = attention.FeedForward(3, 5, rng)
    layer.b1.data = rng.normal(size=5)
    x = _var(rng, 4, 3)
    return (lambda: _project(layer(x))), _module_params(layer) + [("x", x)]


# -- ltmi ------------------------------------------------------------------------------------

@case("ltmi.simplified_attention")
def _simplified():
    rng = _rng(20)
    x, y, pads = _var(rng, 2, 3, 6), _var(rng, 2, 4, 6), _var(rng, 2, 6)
    return (lambda: _project(ltmi.simplified_attention(x, y, 3, pads))), [("X", x), ("Y", y), ("pads", pads)]


@case("ltmi.block")
def _block():
    rng = _rng(21)
    block = ltmi.LtmiBlock("x", ["x", "y", "z"], 4, 2, rng)
    block.norm.gain.data = rng.normal(1.0, 0.2, 4)
    x = ltmi.Utility("x", _var(rng, 3, 4), _var(rng, 2, 4))
    y = ltmi.Utility("y", _var(rng, 2, 4), _var(rng, 2, 4))
    z = ltmi.Utility("z", _var(rng, 5, 4), _var(rng, 2, 4))
    tensors = _module_params(block) + [("X", x.features), ("Y", y.features), ("pads.x", x.pads),
                                       ("pads.y", y.pads), ("pads.z", z.pads)]

    def fn():
        return _project(ltmi.ltmi_block(x, [z, y], block, np.random.default_rng(3)))
    return fn, tensors


@case("ltmi.encoder")
def _encoder():
    rng = _rng(22)
    enc = ltmi.LtmiEncoder(["v", "q", "r"], 4, 2, 2, rng, dropout_rate=0.0)
    feats = {"v": _var(rng, 2, 3, 4), "q": _var(rng, 2, 2, 4), "r": _var(rng, 2, 2, 4)}

    def fn():
        out = enc(feats)
        return sum((_project(out[n], i) for i, n in enumerate(out)), Tensor(0.0))
    return fn, _module_params(enc) + [(f"in.{k}", v) for k, v in feats.items()]


@case("ltmi.naive_layer")
def _naive():
    rng = _rng(23)
    layer = ltmi.NaiveExtensionLayer(["a", "b"], 4, 2, rng)
    feats = {"a": _var(rng, 3, 4), "b": _var(rng, 2, 4)}

    def fn():
        out = layer(feats)
        return _project(out["a"], 1) + _project(out["b"], 2)
    return fn, _module_params(layer)


# -- fusion ------------------------------------------------------------------------------------

def _fusion_case(design: str, seed: int):
    rng = _rng(seed)
    layer = fusion.FusionLayer(4, 2, rng, design=design)
    words, grid, region = _var(rng, 2, 3, 4), _var(rng, 2, 4, 4), _var(rng, 2, 2, 4)

    def fn():
        return _project(layer(words, grid, region, np.random.default_rng(5)))
    return fn, _module_params(layer) + [("words", words), ("grid", grid), ("region", region)]


@case("fusion.concat")
def _fusion_concat():
    return _fusion_case("concat", 30)


@case("fusion.sequential")
def _fusion_sequential():
    return _fusion_case("sequential", 31)


@case("fusion.parallel")
def _fusion_parallel():
    return _fusion_case("parallel", 32)


@case("fusion.losses")
def _fusion_losses():
    rng = _rng(33)
    logits = _var(rng, 2, 3, 5)
    gold = rng.integers(0, 5, size=(2, 3))
    logp = _var(rng, 3)
    b = Tensor([0.1, 0.2, 0.5, 0.7], requires_grad=True)
    b_hat = Tensor([0.3, 0.05, 0.65, 0.55], requires_grad=True)

    def fn():
        sc = fusion.self_critical_loss(["a b", "a", "c"], logp, lambda s: len(s))
        _, _, total = fusion.box_loss(b, b_hat)
        return fusion.xe_loss(logits, gold) + sc + total
    return fn, [("logits", logits), ("logp", logp), ("box", b), ("box_hat", b_hat)]


# -- encoders ------------------------------------------------------------------------------------

@case("encoders.lstm_cell")
def _lstm_cell():
    rng = _rng(40)
    params = encoders.LstmParams(3, 4, rng)
    params.b.data = rng.normal(size=16)
    x, h, c = _var(rng, 2, 3), _var(rng, 2, 4), _var(rng, 2, 4)

    def fn():
        h1, c1 = encoders.lstm_cell(x, h, c, params)
        return _project(h1, 1) + _project(c1, 2)
    return fn, _module_params(params) + [("x", x), ("h", h), ("c", c)]


@case("encoders.question_history")
def _question_history():
    rng = _rng(41)
    emb = encoders.TokenEmbedding(7, rng, width=5)
    q = encoders.QuestionEncoder(emb, 4, rng)
    hist = encoders.HistoryEncoder(emb, 4, rng)
    tokens = rng.integers(0, 7, size=(2, 3))
    rounds = rng.integers(0, 7, size=(2, 2, 3))

    def fn():
        return _project(q(tokens), 1) + _project(hist(rounds), 2)
    return fn, _module_params(q, "q.") + _module_params(hist, "h.")


@case("encoders.image")
def _image():
    rng = _rng(42)
    enc = encoders.ImageEncoder(5, 4, rng)
    feats = _var(rng, 2, 3, 5)
    corners = np.sort(rng.random((2, 3, 2, 2)), axis=-2)
    boxes = corners.transpose(0, 1, 3, 2).reshape(2, 3, 4)[..., [0, 2, 1, 3]]
    bins = encoders.box_bins(boxes)
    tensors: list = [(n, p) for n, p in _module_params(enc) if not n.startswith("coord_tables")]
    # only the table rows that are read carry gradient; check exactly those entries
    for j, table in enumerate(enc.coord_tables):
        rows = np.unique(bins[..., j])
        entries = (rows[:, None] * table.shape[1] + np.arange(table.shape[1])).reshape(-1)
        tensors.append((f"coord_tables.{j}", table, entries))
    return (lambda: _project(enc(feats, boxes))), tensors + [("features", feats)]


# -- decoders ------------------------------------------------------------------------------------

@case("decoders.discriminative")
def _discriminative():
    rng = _rng(50)
    summ = decoders.SummaryAttention(4, rng)
    U, cands = _var(rng, 2, 5, 4), _var(rng, 2, 6, 4)
    target = rng.dirichlet(np.ones(6), size=2)

    def fn():
        c = summ(U)
        return decoders.discriminative_loss(decoders.discriminative_scores(cands, c), target)
    return fn, _module_params(summ) + [("U", U), ("candidates", cands)]


@case("decoders.generative")
def _generative():
    rng = _rng(51)
    emb = encoders.TokenEmbedding(6, rng, width=3)
    dec = decoders.GenerativeDecoder(emb, 4, rng)
    ctx = _var(rng, 4)

    def fn():
        s = decoders.generative_scores([[2, 3], [4], [5, 2, 3]], dec, ctx)
        lg = decoders.generative_loss([2, 4], dec, ctx)
        return decoders.multitask_loss(_project(s), lg)
    return fn, _module_params(dec) + [("context", ctx)]


# -- hierview ------------------------------------------------------------------------------------

@case("hierview.view_attention")
def _views():
    rng = _rng(60)
    views, s = _var(rng, 2, 3, 4, 5), _var(rng, 2, 5)
    conf = rng.random((2, 3, 4))
    w_s, w_g = _var(rng, 5, 5, scale=0.5), _var(rng, 5, 5, scale=0.5)

    def fn():
        summaries = T.stack([hierview.per_view_attend(T.getitem(views, (slice(None), k)), conf[:, k], s, w_s)
                             for k in range(3)], axis=-2)
        return (_project(hierview.gated_view_fusion(summaries, s, w_g), 1)
                + _project(hierview.gated_view_fusion(summaries, s, w_g, mode="softmax"), 2))
    return fn, [("views", views), ("s", s), ("W_s", w_s), ("W_g", w_g)]


@case("hierview.decoders")
def _agent_decoders():
    rng = _rng(61)
    d, na, no = 4, 3, 2
    two = hierview.TwoStageDecoder(d, na, no, rng, navigation=[0])
    act = hierview.ActionDecoder(d, na, no, rng)
    mask = hierview.MaskDecoder(d, na, no, rng)
    s, v = _var(rng, 2, d), _var(rng, 2, d)
    cands = _var(rng, 2, 5, d)
    gold_mask = np.array([1, -1])
    gold_action = np.array([3, 1])

    def fn():
        state = hierview.TwoStageState.reset(s)
        state = dataclasses.replace(state, prev_action=np.array([1, -1]), prev_object=np.array([0, 1]))
        la, lo, _ = two.logits(state)
        p_ia, p_io, f_ia, f_io, _ = hierview.two_stage_step(state, two)
        h, c, logits = hierview.action_logits(v, s, f_ia, f_io, s, Tensor(np.zeros((2, d))), act)
        g = T.concat([s, p_ia, p_io], axis=-1)
        ml = hierview.mask_logits(cands, g, mask)
        total, _ = hierview.lwit_loss(ml, gold_mask, logits, gold_action,
                                      [la, lo], [np.array([1, 2]), np.array([0, 1])])
        return total + _project(h)
    return fn, _module_params(two, "two.") + _module_params(act, "act.") + _module_params(mask, "mask.") \
        + [("s", s), ("v", v), ("candidates", cands)]
