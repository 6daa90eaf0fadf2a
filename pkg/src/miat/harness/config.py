"""Run configuration: line-oriented ``key = value`` text with ``#`` comments."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from ..errors import ConfigError
from ..optim import ScheduleConfig

TASKS = ("dialog-toy", "fusion-toy", "instruct-toy", "view-count-toy")


@dataclass
class RunConfig:
    task: str = "dialog-toy"
    data: str = "data"
    out: str = "runs"
    seed: int = 0
    # model shape
    utilities: str = "v,q,r"
    d: int = 64
    heads: int = 4
    layers: int = 2
    embed_width: int = 300
    dropout: float = 0.1
    fusion_design: str = "parallel"
    view_fusion: str = "sigmoid"
    # optimisation
    batch_size: int = 32
    epochs: int = 30
    lr_start: float = 1e-5
    lr_peak: float = 1e-3
    warmup_epochs: float = 1.0
    halving_period: float = 2.0
    beta1: float = 0.9
    beta2: float = 0.997
    eps: float = 1e-9
    weight_decay: float = 1e-5
    checkpoint_every: int = 1

    def __post_init__(self):
        self.validate()

    @property
    def utility_names(self) -> list[str]:
        return [u.strip() for u in self.utilities.split(",") if u.strip()]

    @property
    def U(self) -> int:
        return len(self.utility_names)

    @property
    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.lr_start, self.lr_peak, self.warmup_epochs, self.halving_period)

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {TASKS}")
        for name in ("d", "heads", "layers", "embed_width", "batch_size", "epochs", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.U < 1 or len(set(self.utility_names)) != self.U:
            raise ConfigError(f"bad utility list {self.utilities!r}")
        self.schedule  # validates the schedule fields

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


# Settings that train each toy task to its target on one CPU core in a few minutes.
# The warmup-then-halving schedule shape is kept; only its period and peak change.
TASK_PRESETS: dict[str, dict] = {
    "dialog-toy": {"epochs": 30, "lr_peak": 2e-3, "halving_period": 10.0, "batch_size": 32},
    "fusion-toy": {"epochs": 10, "lr_peak": 2e-3, "halving_period": 10.0, "layers": 1},
    "instruct-toy": {"epochs": 25, "lr_peak": 2e-3, "halving_period": 10.0, "batch_size": 16},
    "view-count-toy": {"epochs": 80, "lr_peak": 2e-3, "halving_period": 40.0, "batch_size": 16},
}


def preset(task: str, **overrides) -> RunConfig:
    """RunConfig for ``task`` with its preset applied, then ``overrides``."""
    if task not in TASK_PRESETS:
        raise ConfigError(f"unknown task {task!r}; choose from {TASKS}")
    return RunConfig(task=task, **{**TASK_PRESETS[task], **overrides})


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _convert(name: str, raw: str):
    kind = _FIELDS[name].type
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw)
    return RunConfig(**values)


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
