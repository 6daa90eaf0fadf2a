"""Minibatch training, evaluation and checkpointing for the toy tasks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..decoders import format_metrics, mean_metrics, ranking_metrics
from ..errors import ConfigError, NumericError
from ..optim import Adam, schedule_lr
from . import data as D
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config
from .models import CaptionModel, DialogModel, InstructAgent, ViewCountModel

EVAL_BATCH = 100


def build_model(config: RunConfig, data, rng: np.random.Generator):
    """Model for ``config.task``; only shapes are read from ``data``."""
    if config.task == "dialog-toy":
        K, T = data["identity"].shape[1], data["history"].shape[1]
        vocab = D.dialog_vocabulary(D.DialogSizes(entities=K, rounds=T))
        return DialogModel(config, len(vocab), data["features"].shape[-1], rng)
    if config.task == "fusion-toy":
        return CaptionModel(config, D.FusionSizes().classes + 1, data["region"].shape[-1], rng)
    if config.task == "view-count-toy":
        return ViewCountModel(config, data["features"].shape[1], data["features"].shape[-1], rng)
    if config.task == "instruct-toy":
        _, K, _, F = data[0].features.shape
        return InstructAgent(config, K, F, rng)
    raise ConfigError(f"unknown task {config.task!r}")


def dataset_size(data) -> int:
    return len(data) if isinstance(data, list) else len(next(iter(data.values())))


def take(data, idx: np.ndarray):
    if isinstance(data, list):
        return [data[i] for i in idx]
    return {k: v[idx] for k, v in data.items()}


def evaluate(model, data, config: RunConfig) -> dict[str, float]:
    """Metrics on a split in evaluation mode (no dropout)."""
    n = dataset_size(data)
    chunks = [np.arange(i, min(i + EVAL_BATCH, n)) for i in range(0, n, EVAL_BATCH)]
    if config.task == "dialog-toy":
        rows = []
        for idx in chunks:
            batch = take(data, idx)
            scores = model.scores(batch).data
            for i in range(len(idx)):
                rows.append(ranking_metrics(scores[i], int(batch["gold"][i]), batch["relevance"][i]))
        return mean_metrics(rows)
    if config.task == "instruct-toy":
        tot = {"action_correct": 0.0, "action_steps": 0.0, "mask_correct": 0.0, "mask_steps": 0.0}
        for idx in chunks:
            acc = model.replay_accuracy(take(data, idx))
            for k in tot:
                tot[k] += acc[k]
        return {"action_accuracy": tot["action_correct"] / tot["action_steps"],
                "mask_accuracy": tot["mask_correct"] / max(tot["mask_steps"], 1.0)}
    correct = total = 0
    for idx in chunks:
        batch = take(data, idx)
        pred = np.argmax(model.logits(batch).data, axis=-1)
        gold = batch["caption"] if config.task == "fusion-toy" else batch["count"]
        correct += int(np.sum(pred == gold))
        total += gold.size
    return {"accuracy": correct / total}


@dataclass
class TrainResult:
    model: object
    epoch_losses: list[float] = field(default_factory=list)
    metrics: list[dict[str, float]] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1]


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def train(config: RunConfig, train_data=None, valid_data=None,
          log: Callable[[str], None] | None = print, write_checkpoints: bool = True) -> TrainResult:
    """Adam with the warmup/halving schedule; logs ``epoch=<e> loss=<v>`` plus metric lines.

    Data are loaded from ``config.data`` unless passed in. Everything random is derived
    from ``config.seed``: one generator initialises the model, a second one drives
    shuffling and dropout.
    """
    if train_data is None:
        train_data = D.load_split(config.task, config.data, "train")
    if valid_data is None:
        valid_data = D.load_split(config.task, config.data, "valid")
    model = build_model(config, train_data, np.random.default_rng(config.seed))
    opt = Adam(model.parameters(), lr=config.lr_peak, beta1=config.beta1, beta2=config.beta2,
               eps=config.eps, weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed, 1])
    out = Path(config.out)
    lines: list[str] = []
    if write_checkpoints:
        out.mkdir(parents=True, exist_ok=True)

    def emit(line: str) -> None:
        lines.append(line)
        if log is not None:
            log(line)

    n = dataset_size(train_data)
    bs = config.batch_size
    steps = math.ceil(n / bs)
    result = TrainResult(model)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in range(steps):
            idx = order[i * bs:(i + 1) * bs]
            lr = schedule_lr(config.schedule, epoch + i / steps)
            model.zero_grad()
            loss = model.loss(take(train_data, idx), rng)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch + 1} step {i + 1} (lr={lr:g})")
            loss.backward()
            opt.step(lr=lr)
            total += value * len(idx)
        result.epoch_losses.append(total / n)
        metrics = evaluate(model, valid_data, config)
        result.metrics.append(metrics)
        emit(f"epoch={epoch + 1} loss={total / n!r}")
        for line in format_metrics(metrics):
            emit(line)
        if write_checkpoints and ((epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == config.epochs):
            path = out / f"epoch-{epoch + 1:03d}.ckpt"
            save_checkpoint(path, Checkpoint(epoch + 1, config.to_text(), model.state_dict(),
                                             opt.state(), rng_state(rng)))
            result.checkpoints.append(path)
    if write_checkpoints:
        (out / "train.log").write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
    return result


def restore(path: str | Path, data) -> tuple[object, RunConfig, Checkpoint]:
    """Rebuilds the model stored in a checkpoint; ``data`` supplies the shapes."""
    ckpt = load_checkpoint(path)
    config = parse_config(ckpt.config_text)
    model = build_model(config, data, np.random.default_rng(config.seed))
    model.load_state_dict(ckpt.model)
    return model, config, ckpt


def evaluate_checkpoint(path: str | Path, data_dir: str | Path, split: str = "valid") -> dict[str, float]:
    ckpt = load_checkpoint(path)
    config = parse_config(ckpt.config_text)
    data = D.load_split(config.task, data_dir, split)
    model, config, _ = restore(path, data)
    return evaluate(model, data, config)
