"""Experiment configuration: one JSON document, strictly validated.

Schema (every key optional; unknown keys are rejected)::

    {
      "seed": 1,
      "data": {<CorpusConfig fields>, "fractions": [0.25, 1.0]},
      "model": {"d_f", "h_f", "L_f", "d_e", "adapter", "h_a", "d_a", "h_r"},
      "optim": {"adam": {<AdamConfig>}, "cyclic_lr": {<CyclicLrConfig>}},
      "pretrain": {"epochs": 15, "step_size": 500, "batch_size": 16},
      "schedule": {"names": [...], "E": 15, "epochs_per_phase": 1, "batch_size": 16},
      "eval": {"n_trials": 2000, "n_boot": 1000, "level": 0.95},
      "paths": {"workdir": "work"}
    }

``model.adapter`` is the adapter used by the G-IFT schedules; the glu and ra
schedules always use their own kind and the remaining schedules none.
Randomness is derived from ``seed``: data uses ``seed ^ 1``, model
initialisation and batch order ``seed ^ 2``, trial sampling ``seed ^ 3`` and
bootstrap resampling ``seed ^ 4``.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .core import Rng, make_rng
from .data import CorpusConfig
from .errors import ArtifactIOError, ConfigError
from .models import ModelArch
from .optim import AdamConfig, CyclicLrConfig
from .schedule import SCHEDULE_NAMES

SUBSEEDS = {"data": 1, "init": 2, "trials": 3, "bootstrap": 4}
TABLE_SCHEDULES = ["pretrained", "baseline", "finetune", "ra", "glu", "gift1", "gift2"]


@dataclass
class PretrainConfig:
    epochs: int = 15
    step_size: int = 500
    batch_size: int = 16


@dataclass
class ScheduleConfig:
    names: list[str] = field(default_factory=lambda: list(TABLE_SCHEDULES))
    E: int = 15
    epochs_per_phase: int = 1
    batch_size: int = 16

    def __post_init__(self):
        bad = [n for n in self.names if n not in SCHEDULE_NAMES]
        if bad:
            raise ConfigError(f"schedule.names: unknown schedules {bad}; choose from {list(SCHEDULE_NAMES)}")
        for name in ("E", "epochs_per_phase", "batch_size"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigError(f"schedule.{name} must be an integer >= 1")


@dataclass
class EvalConfig:
    n_trials: int = 2000
    n_boot: int = 1000
    level: float = 0.95

    def __post_init__(self):
        if self.n_trials < 2 or self.n_boot < 1 or not 0 < self.level < 1:
            raise ConfigError("eval needs n_trials >= 2, n_boot >= 1 and 0 < level < 1")


@dataclass
class ExperimentConfig:
    seed: int = 1
    data: CorpusConfig = field(default_factory=CorpusConfig)
    fractions: list[float] = field(default_factory=lambda: [0.25, 1.0])
    model: ModelArch = field(default_factory=ModelArch)
    adam: AdamConfig = field(default_factory=AdamConfig)
    cyclic_lr: CyclicLrConfig = field(default_factory=lambda: CyclicLrConfig(step_size=25))
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    workdir: str = "work"

    def rng(self, purpose: str) -> Rng:
        return make_rng(self.seed ^ SUBSEEDS[purpose])

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "data": {**self.data.to_dict(), "fractions": list(self.fractions)},
            "model": {k: v for k, v in self.model.to_dict().items() if k != "n_speakers"},
            "optim": {"adam": asdict(self.adam), "cyclic_lr": asdict(self.cyclic_lr)},
            "pretrain": asdict(self.pretrain),
            "schedule": asdict(self.schedule),
            "eval": asdict(self.eval),
            "paths": {"workdir": self.workdir},
        }

    def data_hash(self) -> str:
        """Hash of everything that shapes the generated data except the seed."""
        return _digest(self.to_dict()["data"])

    def config_hash(self) -> str:
        """Hash of the whole configuration except seed and paths."""
        d = self.to_dict()
        d.pop("seed")
        d.pop("paths")
        return _digest(d)

    def stamp(self) -> dict:
        return {"config_hash": self.config_hash(), "data_hash": self.data_hash(), "seed": self.seed}


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def _table(d: Any, where: str, allowed: set[str]) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    return d


def _build(cls, d: dict, where: str):
    allowed = {f.name for f in fields(cls)}
    _table(d, where, allowed)
    try:
        return cls(**d)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _typecheck(value, default, where: str):
    if isinstance(default, bool) or default is None:
        return
    if isinstance(default, int) and not isinstance(default, bool):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
    elif isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{where} must be a number, got {value!r}")
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where} must be a string, got {value!r}")


def _check_types(d: dict, defaults: dict, where: str) -> None:
    for k, v in d.items():
        if k in defaults:
            if isinstance(defaults[k], dict) and isinstance(v, dict):
                _check_types(v, defaults[k], f"{where}.{k}")
            else:
                _typecheck(v, defaults[k], f"{where}.{k}")


def from_dict(raw: dict) -> ExperimentConfig:
    """Validate a parsed config document in full and build the config."""
    top = _table(raw, "config", {"seed", "data", "model", "optim", "pretrain", "schedule", "eval", "paths"})
    _check_types(top, ExperimentConfig().to_dict(), "config")
    cfg = ExperimentConfig()
    if "seed" in top:
        if not isinstance(top["seed"], int) or top["seed"] < 0:
            raise ConfigError("config.seed must be a non-negative integer")
        cfg.seed = top["seed"]
    if "data" in top:
        data = dict(_table(top["data"], "data", {f.name for f in fields(CorpusConfig)} | {"fractions"}))
        if "fractions" in data:
            fr = data.pop("fractions")
            if not isinstance(fr, list) or not fr or fr != sorted(fr) or any(not 0 < f <= 1 for f in fr):
                raise ConfigError("data.fractions must be an ascending list in (0, 1]")
            cfg.fractions = [float(f) for f in fr]
        merged = {**CorpusConfig().to_dict(), **data}
        for key in ("shift", "source_train", "target_train", "target_eval"):
            if key in data:
                merged[key] = {**CorpusConfig().to_dict()[key], **_table(data[key], f"data.{key}", set(CorpusConfig().to_dict()[key]))}
        try:
            cfg.data = CorpusConfig.from_dict(merged)
        except (ConfigError, TypeError) as exc:
            raise ConfigError(f"data: {exc}") from None
    if "model" in top:
        model = _table(top["model"], "model", {f.name for f in fields(ModelArch)} - {"n_speakers"})
        cfg.model = _build(ModelArch, {**cfg.model.to_dict(), **model}, "model")
    if "optim" in top:
        optim = _table(top["optim"], "optim", {"adam", "cyclic_lr"})
        if "adam" in optim:
            cfg.adam = _build(AdamConfig, {**asdict(cfg.adam), **optim["adam"]}, "optim.adam")
        if "cyclic_lr" in optim:
            cfg.cyclic_lr = _build(CyclicLrConfig, {**asdict(cfg.cyclic_lr), **optim["cyclic_lr"]}, "optim.cyclic_lr")
    if "pretrain" in top:
        cfg.pretrain = _build(PretrainConfig, {**asdict(cfg.pretrain), **top["pretrain"]}, "pretrain")
        if min(cfg.pretrain.epochs, cfg.pretrain.step_size, cfg.pretrain.batch_size) < 1:
            raise ConfigError("pretrain values must be >= 1")
    if "schedule" in top:
        cfg.schedule = _build(ScheduleConfig, {**asdict(cfg.schedule), **top["schedule"]}, "schedule")
    if "eval" in top:
        cfg.eval = _build(EvalConfig, {**asdict(cfg.eval), **top["eval"]}, "eval")
    if "paths" in top:
        paths = _table(top["paths"], "paths", {"workdir"})
        cfg.workdir = paths.get("workdir", cfg.workdir)
    if cfg.model.d_f != cfg.data.d_f:
        raise ConfigError(f"model.d_f ({cfg.model.d_f}) must equal data.d_f ({cfg.data.d_f})")
    return cfg


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b.c=value``; value is read as JSON when possible, else as a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    out = copy.deepcopy(raw)
    for text in overrides:
        path, value = parse_override(text)
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-object")
        node[path[-1]] = value
    return out


def load_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Defaults, then the file, then ``--set`` overrides."""
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ArtifactIOError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return from_dict(apply_overrides(raw, overrides or []))
