"""Synthetic planted tasks and their on-disk formats.

dialog-toy
    K image entities with random features, each at a fixed box slot that encodes
    its identity. History round i reads ``round_i saw obj_k``; the question reads
    ``what round_j``. The gold answer is entity k_j's feature plus noise, so the
    answer can only be found by following question -> history -> image.
fusion-toy
    Copy task for the caption layer: the caption lists the classes of the region
    features in slot order; grid features are distractors.
instruct-toy
    Scripted episodes of navigation and manipulation instructions over K views of
    N object candidates each (gold actions, object classes and masks).
view-count-toy
    Count the views that contain a target class. Weights normalised across views
    cannot represent the count; independent gates can.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from ..errors import CheckpointError, DataError
from ..hierview import replay_instruction_indices
from ..tensor import read_tensors, write_tensors

DATASET_MAGIC = b"MIDS"
DATASET_VERSION = 1
EPISODE_MAGIC = b"MIEP"
EPISODE_VERSION = 1


# -- generic named-array files -------------------------------------------------------------
# Layout: magic "MIDS", version u32, task name (u32 length + UTF-8), then the
# named-tensor block (u32 count + tensor records). Integers are stored exactly as f64.

def save_arrays(path: str | Path, task: str, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", DATASET_VERSION))
        raw = task.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)) + raw)
        write_tensors(fh, sorted(arrays.items()))


def load_arrays(path: str | Path) -> tuple[str, dict[str, np.ndarray]]:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot open dataset {path}: {exc}") from None
    with fh:
        if fh.read(4) != DATASET_MAGIC:
            raise CheckpointError(f"{path}: not a dataset file")
        head = fh.read(8)
        if len(head) != 8:
            raise CheckpointError(f"{path}: truncated header")
        version, n = struct.unpack("<II", head)
        if version != DATASET_VERSION:
            raise CheckpointError(f"{path}: unsupported dataset version {version}")
        task = fh.read(n).decode("utf-8")
        return task, read_tensors(fh)


# -- dialog-toy ----------------------------------------------------------------------------

@dataclass(frozen=True)
class DialogSizes:
    examples: int = 2000
    entities: int = 4
    rounds: int = 2
    candidates: int = 10
    feature_width: int = 16
    answer_noise: float = 0.1


def dialog_vocabulary(sizes: DialogSizes = DialogSizes()) -> list[str]:
    return (["<pad>", "what", "saw"] + [f"round{i}" for i in range(sizes.rounds)]
            + [f"obj{k}" for k in range(sizes.entities)])


def entity_boxes(K: int) -> np.ndarray:
    """Fixed box per entity identity on a 4-column grid."""
    cols = 4
    rows = -(-K // cols)
    k = np.arange(K)
    x1, y1 = (k % cols) / cols, (k // cols) / rows
    return np.stack([x1, y1, x1 + 1.0 / cols, y1 + 1.0 / rows], axis=-1)


def gen_dialog_toy(seed: int, sizes: DialogSizes = DialogSizes()) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    n, K, T, C, F = sizes.examples, sizes.entities, sizes.rounds, sizes.candidates, sizes.feature_width
    if C < K:
        raise DataError("need at least one candidate per entity")
    vocab = {tok: i for i, tok in enumerate(dialog_vocabulary(sizes))}
    boxes = entity_boxes(K)

    features = np.zeros((n, K, F))
    slot_boxes = np.zeros((n, K, 4))
    identity = np.zeros((n, K), dtype=np.int64)
    question = np.zeros((n, 2), dtype=np.int64)
    history = np.zeros((n, T, 3), dtype=np.int64)
    pointers = np.zeros((n, T), dtype=np.int64)
    candidates = np.zeros((n, C, F))
    gold = np.zeros(n, dtype=np.int64)
    asked = np.zeros(n, dtype=np.int64)
    for e in range(n):
        feats = rng.normal(size=(K, F))           # row k belongs to entity k
        order = rng.permutation(K)                 # slot -> entity
        features[e] = feats[order]
        slot_boxes[e] = boxes[order]
        identity[e] = order
        ptr = rng.choice(K, size=T, replace=False) if T <= K else rng.integers(0, K, size=T)
        pointers[e] = ptr
        for i in range(T):
            history[e, i] = [vocab[f"round{i}"], vocab["saw"], vocab[f"obj{ptr[i]}"]]
        j = int(rng.integers(T))
        asked[e] = j
        question[e] = [vocab["what"], vocab[f"round{j}"]]
        cands = np.concatenate([feats + sizes.answer_noise * rng.normal(size=(K, F)),
                                rng.normal(size=(C - K, F))])
        perm = rng.permutation(C)
        candidates[e] = cands[perm]
        gold[e] = int(np.nonzero(perm == ptr[j])[0][0])
    relevance = np.zeros((n, C))
    relevance[np.arange(n), gold] = 1.0
    return {
        "features": features, "boxes": slot_boxes, "identity": identity,
        "question": question, "history": history, "pointers": pointers, "asked": asked,
        "candidates": candidates, "gold": gold, "relevance": relevance,
    }


def planted_solver(data: dict[str, np.ndarray]) -> np.ndarray:
    """Follows question -> history pointer -> entity box, then picks the nearest candidate."""
    n = data["gold"].shape[0]
    picks = np.zeros(n, dtype=np.int64)
    for e in range(n):
        k = data["pointers"][e, data["asked"][e]]
        slot = int(np.nonzero(data["identity"][e] == k)[0][0])
        dist = np.linalg.norm(data["candidates"][e] - data["features"][e, slot], axis=-1)
        picks[e] = int(np.argmin(dist))
    return picks


def blinded_solver(data: dict[str, np.ndarray], rng: np.random.Generator) -> np.ndarray:
    """Same pipeline without the history: the entity has to be guessed."""
    n, K = data["identity"].shape
    picks = np.zeros(n, dtype=np.int64)
    for e in range(n):
        slot = int(rng.integers(K))
        dist = np.linalg.norm(data["candidates"][e] - data["features"][e, slot], axis=-1)
        picks[e] = int(np.argmin(dist))
    return picks


# -- fusion-toy ------------------------------------------------------------------------------

@dataclass(frozen=True)
class FusionSizes:
    examples: int = 1000
    regions: int = 4
    grid: int = 9
    classes: int = 5
    feature_width: int = 12
    noise: float = 0.1


def class_prototypes(classes: int, width: int, seed: int = 7) -> np.ndarray:
    """Fixed per-class feature vectors shared by every split (row 0 is background)."""
    return np.random.default_rng(seed).normal(size=(classes + 1, width))


def gen_fusion_toy(seed: int, sizes: FusionSizes = FusionSizes()) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    n, N, M, F = sizes.examples, sizes.regions, sizes.grid, sizes.feature_width
    protos = class_prototypes(sizes.classes, F)
    labels = rng.integers(1, sizes.classes + 1, size=(n, N))
    slot_code = np.eye(N)
    region = np.concatenate([protos[labels], np.broadcast_to(slot_code, (n, N, N))], axis=-1)
    region = region + sizes.noise * rng.normal(size=region.shape)
    grid = rng.normal(size=(n, M, F + N))
    caption = labels.copy()        # token t is the class of region slot t; 0 is SOS
    return {"region": region, "grid": grid, "caption": caption}


# -- instruct-toy ------------------------------------------------------------------------------

ACTIONS = ("MoveAhead", "RotateLeft", "RotateRight", "Pickup", "Put", "Toggle")
NAVIGATION = (0, 1, 2)
COMPLETE = len(ACTIONS)
OBJECT_CLASSES = 6            # 0 = no object, 1..5 = classes
CENTER_VIEW = 0
INSTRUCTION_WORDS = ("<pad>", "go", "left", "right", "straight", "to", "pick", "put", "toggle", "up", "down", "on")
INSTRUCTION_VOCAB = INSTRUCTION_WORDS + tuple(f"c{i}" for i in range(1, OBJECT_CLASSES))
INSTRUCTION_WIDTH = 4


@dataclass
class Episode:
    instructions: np.ndarray     # (L, W) token ids
    goal: np.ndarray             # (W,)
    features: np.ndarray         # (T, K, N, F)
    confidences: np.ndarray      # (T, K, N)
    actions: np.ndarray          # (T,) in 0..N_a (N_a = COMPLETE)
    objects: np.ndarray          # (T,)
    masks: np.ndarray            # (T,) candidate index in the centre view, -1 if none

    @property
    def steps(self) -> int:
        return int(self.actions.shape[0])

    def instruction_index(self) -> np.ndarray:
        """0-based instruction in effect at each step (from the gold COMPLETE events)."""
        L = self.instructions.shape[0]
        return np.array(replay_instruction_indices(self.actions.tolist(), COMPLETE, L)) - 1


@dataclass(frozen=True)
class InstructSizes:
    views: int = 5
    objects: int = 8
    feature_width: int = 16
    min_instructions: int = 2
    max_instructions: int = 3
    max_moves: int = 3
    noise: float = 0.1
    demonstrations: int = 1


def _tokens(words: list[str]) -> np.ndarray:
    ids = [INSTRUCTION_VOCAB.index(w) for w in words]
    return np.array(ids + [0] * (INSTRUCTION_WIDTH - len(ids)), dtype=np.int64)


def _directive(rng: np.random.Generator) -> list[str]:
    target = int(rng.integers(1, OBJECT_CLASSES))
    if rng.random() < 0.5:
        return ["go", ("straight", "left", "right")[int(rng.integers(3))], "to", f"c{target}"]
    verb, particle = (("pick", "up"), ("put", "down"), ("toggle", "on"))[int(rng.integers(3))]
    return [verb, particle, f"c{target}"]


def _script_steps(rng: np.random.Generator, words: list[str], sizes: InstructSizes):
    """Gold steps [(action, object, target detections in the centre view, mask_wanted)].

    Navigation walks a random number of steps, so the stopping point is only
    visible in the images, never in the words: on arrival the target fills half
    of the centre view's detections.
    """
    target = int(words[-1][1:])
    if words[0] == "go":
        steps = []
        if words[1] != "straight":
            steps.append((1 if words[1] == "left" else 2, 0, 0, False))
        moves = int(rng.integers(1, sizes.max_moves + 1))
        steps += [(0, 0, 0, False)] * moves
        steps.append((COMPLETE, 0, sizes.objects // 2, False))
        return target, steps
    kind = ("pick", "put", "toggle").index(words[0])
    return target, [(3 + kind, target, 1, True), (COMPLETE, 0, 1, False)]


def _view_features(rng, protos, sizes: InstructSizes, target: int, copies: int):
    """``copies`` detections of the target in the centre view; the first is the mask."""
    K, N = sizes.views, sizes.objects
    others = [c for c in range(1, OBJECT_CLASSES) if c != target]
    classes = np.where(rng.random((K, N)) < 0.6, rng.choice(others, size=(K, N)), 0)
    mask = -1
    if copies:
        slots = rng.choice(N, size=copies, replace=False)
        mask = int(slots[0])
        classes[CENTER_VIEW, slots] = target
    feats = protos[classes] + sizes.noise * rng.normal(size=(K, N, protos.shape[1]))
    conf = rng.uniform(0.5, 1.0, size=(K, N))
    return feats, conf, mask


def gen_instruct_toy(seed: int, episodes: int = 500, sizes: InstructSizes = InstructSizes()) -> list[Episode]:
    """Scripted episodes; every directive is demonstrated ``sizes.demonstrations`` times
    with fresh path lengths and views, so step counts cannot be memorised from the text."""
    rng = np.random.default_rng(seed)
    protos = class_prototypes(OBJECT_CLASSES - 1, sizes.feature_width)
    out = []
    while len(out) < episodes:
        L = int(rng.integers(sizes.min_instructions, sizes.max_instructions + 1))
        directive: list[list[str]] = []
        while len(directive) < L:
            words = _directive(rng)
            if not directive or words != directive[-1]:
                directive.append(words)
        tokens = np.stack([_tokens(w) for w in directive])
        for _ in range(min(sizes.demonstrations, episodes - len(out))):
            feats, confs, acts, objs, masks = [], [], [], [], []
            for words in directive:
                target, steps = _script_steps(rng, words, sizes)
                for action, obj, copies, wants_mask in steps:
                    f, c, m = _view_features(rng, protos, sizes, target, copies)
                    feats.append(f)
                    confs.append(c)
                    acts.append(action)
                    objs.append(obj)
                    masks.append(m if wants_mask else -1)
            out.append(Episode(tokens.copy(), tokens[-1].copy(), np.stack(feats), np.stack(confs),
                               np.array(acts), np.array(objs), np.array(masks)))
    return out


# Episode file layout (little-endian):
#   header  : magic "MIEP", version u32, episode count u32, K u32, N u32, F u32, W u32
#   episode : L u32, instruction tokens L*W i32, goal tokens W i32, T u32, then T step records
#   step    : features K*N*F f64, confidences K*N f64, action i32, object i32, mask i32

def write_episodes(path: str | Path, episodes: list[Episode]) -> None:
    if not episodes:
        raise DataError("no episodes to write")
    _, K, N, F = episodes[0].features.shape
    W = episodes[0].instructions.shape[1]
    with open(path, "wb") as fh:
        fh.write(EPISODE_MAGIC)
        fh.write(struct.pack("<6I", EPISODE_VERSION, len(episodes), K, N, F, W))
        for ep in episodes:
            if ep.features.shape[1:] != (K, N, F) or ep.instructions.shape[1] != W:
                raise DataError("episodes disagree on K, N, F or instruction width")
            fh.write(struct.pack("<I", ep.instructions.shape[0]))
            fh.write(ep.instructions.astype("<i4").tobytes())
            fh.write(ep.goal.astype("<i4").tobytes())
            fh.write(struct.pack("<I", ep.steps))
            for t in range(ep.steps):
                fh.write(ep.features[t].astype("<f8").tobytes())
                fh.write(ep.confidences[t].astype("<f8").tobytes())
                fh.write(struct.pack("<3i", ep.actions[t], ep.objects[t], ep.masks[t]))


def _read(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("episode file is truncated")
    return buf


def read_episodes(path: str | Path) -> list[Episode]:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot open episode file {path}: {exc}") from None
    with fh:
        if fh.read(4) != EPISODE_MAGIC:
            raise CheckpointError(f"{path}: not an episode file")
        version, count, K, N, F, W = struct.unpack("<6I", _read(fh, 24))
        if version != EPISODE_VERSION:
            raise CheckpointError(f"{path}: unsupported episode format version {version}")
        out = []
        for _ in range(count):
            (L,) = struct.unpack("<I", _read(fh, 4))
            instr = np.frombuffer(_read(fh, 4 * L * W), dtype="<i4").reshape(L, W).astype(np.int64)
            goal = np.frombuffer(_read(fh, 4 * W), dtype="<i4").astype(np.int64)
            (T,) = struct.unpack("<I", _read(fh, 4))
            feats = np.zeros((T, K, N, F))
            confs = np.zeros((T, K, N))
            rec = np.zeros((T, 3), dtype=np.int64)
            for t in range(T):
                feats[t] = np.frombuffer(_read(fh, 8 * K * N * F), dtype="<f8").reshape(K, N, F)
                confs[t] = np.frombuffer(_read(fh, 8 * K * N), dtype="<f8").reshape(K, N)
                rec[t] = struct.unpack("<3i", _read(fh, 12))
            out.append(Episode(instr, goal, feats, confs, rec[:, 0], rec[:, 1], rec[:, 2]))
        return out


# -- view-count-toy ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ViewCountSizes:
    examples: int = 1500
    views: int = 5
    objects: int = 4
    feature_width: int = 16
    noise: float = 0.1


def gen_view_count_toy(seed: int, sizes: ViewCountSizes = ViewCountSizes()) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    n, K, N = sizes.examples, sizes.views, sizes.objects
    protos = class_prototypes(OBJECT_CLASSES - 1, sizes.feature_width)
    target = rng.integers(1, OBJECT_CLASSES, size=n)
    present = rng.random((n, K)) < 0.5
    classes = np.zeros((n, K, N), dtype=np.int64)
    for e in range(n):
        others = [c for c in range(1, OBJECT_CLASSES) if c != target[e]]
        classes[e] = rng.choice(others, size=(K, N))
        for k in np.nonzero(present[e])[0]:
            classes[e, k, rng.integers(N)] = target[e]
    feats = protos[classes] + sizes.noise * rng.normal(size=(n, K, N, sizes.feature_width))
    return {"features": feats, "target": target, "count": present.sum(axis=1)}


# -- dataset directories -------------------------------------------------------------------------

SPLITS = ("train", "valid")
# index-valued arrays; the file stores everything as f64
INTEGER_ARRAYS = frozenset({"identity", "question", "history", "pointers", "asked", "gold",
                            "caption", "target", "count"})


def generate(task: str, seed: int, out: str | Path) -> list[Path]:
    """Writes the train split (seed) and a held-out valid split (seed + 1) into ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for offset, split in enumerate(SPLITS):
        s = seed + offset
        if task == "instruct-toy":
            path = out / f"{split}.episodes"
            write_episodes(path, gen_instruct_toy(s, 500 if split == "train" else 100))
        else:
            if task == "dialog-toy":
                arrays = gen_dialog_toy(s, DialogSizes(examples=2000 if split == "train" else 500))
            elif task == "fusion-toy":
                arrays = gen_fusion_toy(s, FusionSizes(examples=1000 if split == "train" else 200))
            elif task == "view-count-toy":
                arrays = gen_view_count_toy(s, ViewCountSizes(examples=1500 if split == "train" else 500))
            else:
                raise DataError(f"unknown task {task!r}")
            path = out / f"{split}.bin"
            save_arrays(path, task, arrays)
        written.append(path)
    return written


def load_split(task: str, data_dir: str | Path, split: str):
    data_dir = Path(data_dir)
    if task == "instruct-toy":
        return read_episodes(data_dir / f"{split}.episodes")
    found, arrays = load_arrays(data_dir / f"{split}.bin")
    if found != task:
        raise DataError(f"{data_dir}: dataset is for task {found!r}, not {task!r}")
    return {k: v.astype(np.int64) if k in INTEGER_ARRAYS else v for k, v in arrays.items()}
