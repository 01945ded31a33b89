"""Fine-tuning regimes as explicit phase lists, and the training loop.

A schedule is ``cycles`` repetitions of a fixed list of phases; each phase
trains one set of parameter groups for ``epochs_per_phase`` epochs while the
rest of the stack stays frozen. The cyclical LR step counter runs across the
whole schedule and is never reset at phase boundaries. Adam moments live on
the parameters, so a frozen parameter keeps its optimizer state.

Train logs are JSON lines: an optional ``{"kind": "header", ...}`` line, one
``{"kind": "epoch", ...}`` line per epoch (fields of ``EpochRecord``), and an
optional ``{"kind": "result", "eer": ...}`` line written by evaluation.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .core import Rng
from .data import Dataset
from .errors import ConfigError, NumericError
from .models import ModelStack, save_checkpoint
from .nn import GROUPS, Param, softmax_xent
from .optim import AdamConfig, CyclicLrConfig, adam_step, lr_at

EMB, ADA, CLS = GROUPS

# phases of one cycle; None marks "every group the stack has"
_PHASES: dict[str, list[frozenset[str] | None]] = {
    "baseline": [frozenset({EMB, CLS})],
    "pretrained": [],
    "finetune": [None],
    "glu": [frozenset({ADA, CLS})],
    "ra": [frozenset({ADA, CLS})],
    "gift1": [frozenset({ADA, CLS}), frozenset({EMB})],
    "gift2": [frozenset({CLS}), frozenset({ADA}), frozenset({EMB})],
    "ift_only": [frozenset({CLS}), frozenset({EMB})],
}
SCHEDULE_NAMES = tuple(_PHASES)

# adapter the stack must carry: a kind, "any", "none", or None for no constraint
REQUIRED_ADAPTER = {
    "baseline": "none", "pretrained": None, "finetune": None,
    "glu": "glu", "ra": "ra", "gift1": "any", "gift2": "any", "ift_only": "none",
}

# report labels, in the row order of the results tables
DISPLAY_NAMES = {
    "pretrained": "Pretrained", "baseline": "Baseline", "finetune": "Finetune",
    "ra": "RA", "glu": "GLU", "gift1": "G-IFT-1", "gift2": "G-IFT-2", "ift_only": "IFT-only",
}


@dataclass(frozen=True)
class Phase:
    trainable_groups: frozenset[str]
    epochs: int = 1


@dataclass
class Schedule:
    name: str
    cycles: int
    phases_per_cycle: list[Phase]

    def phases(self) -> Iterator[tuple[int, int, Phase]]:
        for cycle in range(self.cycles):
            for idx, phase in enumerate(self.phases_per_cycle):
                yield cycle, idx, phase

    @property
    def total_epochs(self) -> int:
        return self.cycles * sum(p.epochs for p in self.phases_per_cycle)


def check_compatible(name: str, stack: ModelStack) -> None:
    need = REQUIRED_ADAPTER[name]
    kind = stack.arch.adapter if stack.adapter is not None else "none"
    if need == "any" and kind == "none":
        raise ConfigError(f"schedule {name!r} needs a stack with an adapter")
    if need in ("glu", "ra", "none") and kind != need:
        raise ConfigError(f"schedule {name!r} needs adapter kind {need!r}, stack has {kind!r}")


def expand(name: str, cycles: int, epochs_per_phase: int = 1, stack: ModelStack | None = None) -> Schedule:
    """Expand a named regime into its explicit phase list.

    When ``stack`` is given the regime is checked against it and
    ``finetune`` trains every group the stack has (adapter included).
    """
    if name not in _PHASES:
        raise ConfigError(f"unknown schedule {name!r}; choose from {SCHEDULE_NAMES}")
    if cycles < 1 or epochs_per_phase < 1:
        raise ConfigError("schedule cycles and epochs_per_phase must be >= 1")
    if stack is not None:
        check_compatible(name, stack)
    everything = frozenset(stack.groups()) if stack is not None else frozenset({EMB, CLS})
    phases = [Phase(groups or everything, epochs_per_phase) for groups in _PHASES[name]]
    return Schedule(name, cycles, phases)


@dataclass
class UpdateCounter:
    """Counts (parameter, optimizer step) applications, per tensor and per scalar."""

    tensors: int = 0
    scalars: int = 0
    by_group: dict[str, int] = field(default_factory=lambda: {g: 0 for g in GROUPS})

    def record(self, params: Sequence[Param]) -> None:
        self.tensors += len(params)
        for p in params:
            self.scalars += p.size
            self.by_group[p.group] += p.size


@dataclass
class EpochRecord:
    schedule: str
    cycle: int
    phase: int
    groups: list[str]
    mean_loss: float
    lr: float
    steps: int
    updates: int


@dataclass
class TrainLog:
    schedule: str
    epochs: list[EpochRecord] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    eer: float | None = None
    header: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return len(self.lr_trace)

    def lines(self) -> list[str]:
        out = []
        if self.header:
            out.append(json.dumps({"kind": "header", **self.header}, sort_keys=True))
        out += [json.dumps({"kind": "epoch", **asdict(r)}, sort_keys=True) for r in self.epochs]
        if self.eer is not None:
            out.append(json.dumps({"kind": "result", "eer": self.eer}, sort_keys=True))
        return out

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "TrainLog":
        log = cls(schedule="")
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.pop("kind")
            if kind == "header":
                log.header = rec
            elif kind == "epoch":
                log.epochs.append(EpochRecord(**rec))
                log.schedule = rec["schedule"]
            elif kind == "result":
                log.eer = rec["eer"]
        return log


def run(
    stack: ModelStack,
    schedule: Schedule,
    dataset: Dataset,
    adam_cfg: AdamConfig,
    lr_cfg: CyclicLrConfig,
    rng: Rng,
    batch_size: int = 16,
    counter: UpdateCounter | None = None,
) -> TrainLog:
    """Train ``stack`` phase by phase; only the phase's groups are ever stepped."""
    if stack.classifier is None:
        raise ConfigError("training needs a stack with a classifier")
    if stack.arch.n_speakers != dataset.n_speakers:
        raise ConfigError(
            f"classifier has {stack.arch.n_speakers} outputs, dataset has {dataset.n_speakers} speakers"
        )
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    check_compatible(schedule.name, stack)
    counter = counter if counter is not None else UpdateCounter()
    log = TrainLog(schedule.name)
    try:
        _train_phases(stack, schedule, dataset, adam_cfg, lr_cfg, rng, batch_size, counter, log)
    except NumericError as exc:
        exc.log = log  # partial log, so callers can point at it
        raise
    return log


def _train_phases(stack, schedule, dataset, adam_cfg, lr_cfg, rng, batch_size, counter, log) -> None:
    all_params = stack.params
    epoch_no = 0
    for cycle, idx, phase in schedule.phases():
        trainable = stack.trainable_set(phase.trainable_groups)
        through_embedding = EMB in phase.trainable_groups
        for _ in range(phase.epochs):
            losses = []
            order = rng.permutation(len(dataset))
            for start in range(0, len(order), batch_size):
                batch = order[start:start + batch_size]
                out = stack.forward_batch([dataset.utterances[i].frames for i in batch])
                loss, dlogits = softmax_xent(out.logits, dataset.labels[batch])
                if not math.isfinite(loss):
                    raise NumericError(
                        f"non-finite loss in {schedule.name} cycle {cycle} phase {idx}",
                        last_good_epoch=epoch_no - 1 if epoch_no else None,
                    )
                for p in all_params:
                    p.zero_grad()
                stack.backward(dlogits, through_embedding=through_embedding)
                lr = lr_at(lr_cfg, log.steps)
                adam_step(trainable, adam_cfg, lr)
                counter.record(trainable)
                log.lr_trace.append(lr)
                losses.append(loss)
            log.epochs.append(EpochRecord(
                schedule=schedule.name, cycle=cycle, phase=idx,
                groups=sorted(phase.trainable_groups), mean_loss=float(np.mean(losses)),
                lr=log.lr_trace[-1], steps=log.steps, updates=counter.tensors,
            ))
            epoch_no += 1


def pretrain(
    stack: ModelStack,
    source: Dataset,
    adam_cfg: AdamConfig,
    lr_cfg: CyclicLrConfig,
    rng: Rng,
    epochs: int,
    path,
    batch_size: int = 16,
    meta: dict | None = None,
) -> TrainLog:
    """Train an adapterless stack on the source domain and save its embedding only."""
    if stack.adapter is not None:
        raise ConfigError("pretraining expects a stack without an adapter")
    log = run(stack, expand("finetune", epochs, stack=stack), source, adam_cfg, lr_cfg, rng, batch_size)
    save_checkpoint(stack, path, groups={EMB}, meta=meta)
    return log
