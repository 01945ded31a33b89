"""Experiment steps on disk, one seed per directory.

Layout of ``<workdir>/seed_<s>/``::

    data/            source_train, target_train, target_eval (.gft + .lst),
                     target_train_<fraction>.lst subsets, trials.txt, corpus.json
    pretrain/        model.ckpt (embedding only), train.jsonl
    runs/<schedule>_f<fraction>/
                     model.ckpt, train.jsonl, scores.txt, det.csv, summary.json

Every step reads only what earlier steps wrote, so any step can be rerun on
its own; identical config and seed give bit-identical files.
"""
from __future__ import annotations

import json
import logging
from dataclasses import replace
from pathlib import Path

from .config import ExperimentConfig
from .data import Dataset, gen_corpus, load_manifest, scaled_splits, write_split, write_subset_manifest
from .errors import ArtifactIOError, ConfigError, NumericError
from .evaluation import (bootstrap_ci, eer, extract_embeddings, make_trials, read_trials,
                         score_trials, write_det_csv, write_scores, write_trials)
from .models import ModelArch, build_stack, load_checkpoint, save_checkpoint, stack_from_pretrained
from .optim import CyclicLrConfig
from .schedule import REQUIRED_ADAPTER, TrainLog, expand, pretrain, run

log = logging.getLogger(__name__)

SPLITS = ("source_train", "target_train", "target_eval")


def seed_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.workdir) / f"seed_{cfg.seed}"


def frac_tag(fraction: float) -> str:
    return f"{fraction:g}"


def run_dir(cfg: ExperimentConfig, schedule: str, fraction: float) -> Path:
    return seed_dir(cfg) / "runs" / f"{schedule}_f{frac_tag(fraction)}"


def header_lines(cfg: ExperimentConfig, **extra) -> list[str]:
    items = {**cfg.stamp(), **extra}
    return [f"{k}={v}" for k, v in items.items()]


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise ArtifactIOError(f"missing {what}: {path}")
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def adapter_for(cfg: ExperimentConfig, schedule: str) -> str:
    need = REQUIRED_ADAPTER[schedule]
    if need == "any":
        if cfg.model.adapter == "none":
            raise ConfigError(f"model.adapter must be glu or ra to run schedule {schedule!r}")
        return cfg.model.adapter
    return need or "none"


def arch_for(cfg: ExperimentConfig, adapter: str, n_speakers: int) -> ModelArch:
    return replace(cfg.model, adapter=adapter, n_speakers=n_speakers)


# -- steps ---------------------------------------------------------------------

def generate(cfg: ExperimentConfig) -> Path:
    out = seed_dir(cfg) / "data"
    out.mkdir(parents=True, exist_ok=True)
    corpus = gen_corpus(cfg.data, cfg.rng("data"))
    header = header_lines(cfg)
    for name in SPLITS:
        write_split(out, name, getattr(corpus, name), header)
    for frac, subset in zip(cfg.fractions, scaled_splits(corpus.target_train, cfg.fractions)):
        write_subset_manifest(out, f"target_train_{frac_tag(frac)}", "target_train", subset, header)
    trials = make_trials(corpus.target_eval, cfg.eval.n_trials, cfg.rng("trials"))
    write_trials(out / "trials.txt", trials, header)
    # location-independent, so reruns elsewhere stay byte-identical
    settings = {k: v for k, v in cfg.to_dict().items() if k != "paths"}
    _write_json(out / "corpus.json", {**cfg.stamp(), "config": settings})
    return out


def load_split(cfg: ExperimentConfig, name: str) -> list:
    return load_manifest(_need(seed_dir(cfg) / "data" / f"{name}.lst", "manifest (run gen first)"))


def _abort(exc: NumericError, path: Path, cfg: ExperimentConfig) -> NumericError:
    partial = getattr(exc, "log", None)
    if partial is not None:
        partial.header = {**cfg.stamp(), "aborted": str(exc)}
        partial.write(path)
    return NumericError(f"{exc}; see {path}", exc.last_good_epoch)


def do_pretrain(cfg: ExperimentConfig) -> Path:
    out = seed_dir(cfg) / "pretrain"
    out.mkdir(parents=True, exist_ok=True)
    source = Dataset(load_split(cfg, "source_train"))
    rng = cfg.rng("init")
    stack = build_stack(arch_for(cfg, "none", source.n_speakers), rng)
    lr_cfg = CyclicLrConfig(cfg.cyclic_lr.base_lr, cfg.cyclic_lr.max_lr, cfg.pretrain.step_size)
    try:
        train_log = pretrain(stack, source, cfg.adam, lr_cfg, rng, cfg.pretrain.epochs,
                             out / "model.ckpt", cfg.pretrain.batch_size, meta=cfg.stamp())
    except NumericError as exc:
        raise _abort(exc, out / "train.jsonl", cfg) from exc
    train_log.header = cfg.stamp()
    train_log.write(out / "train.jsonl")
    return out / "model.ckpt"


def train(cfg: ExperimentConfig, schedule: str, fraction: float) -> Path:
    if fraction not in cfg.fractions:
        raise ConfigError(f"fraction {fraction} is not among data.fractions {cfg.fractions}")
    out = run_dir(cfg, schedule, fraction)
    out.mkdir(parents=True, exist_ok=True)
    target = Dataset(load_split(cfg, f"target_train_{frac_tag(fraction)}"))
    rng = cfg.rng("init")
    arch = arch_for(cfg, adapter_for(cfg, schedule), target.n_speakers)
    if schedule == "baseline":
        stack = build_stack(arch, rng)
    else:
        ckpt = _need(seed_dir(cfg) / "pretrain" / "model.ckpt", "pretrained checkpoint (run pretrain first)")
        stack = stack_from_pretrained(ckpt, arch, rng)
    plan = expand(schedule, cfg.schedule.E, cfg.schedule.epochs_per_phase, stack)
    try:
        train_log = run(stack, plan, target, cfg.adam, cfg.cyclic_lr, rng, cfg.schedule.batch_size)
    except NumericError as exc:
        raise _abort(exc, out / "train.jsonl", cfg) from exc
    meta = {**cfg.stamp(), "schedule": schedule, "fraction": fraction}
    save_checkpoint(stack, out / "model.ckpt", meta=meta)
    train_log.header = meta
    train_log.write(out / "train.jsonl")
    return out / "model.ckpt"


def evaluate(cfg: ExperimentConfig, checkpoint: Path, out: Path, extra: dict | None = None) -> dict:
    """Score the trial list with ``checkpoint``; writes scores, DET points and a summary."""
    stack = load_checkpoint(_need(Path(checkpoint), "checkpoint"))
    utts = load_split(cfg, "target_eval")
    trials = read_trials(_need(seed_dir(cfg) / "data" / "trials.txt", "trial list (run gen first)"))
    scores = score_trials(trials, extract_embeddings(stack, utts))
    res = eer(scores)
    lo, hi = bootstrap_ci(scores, n_boot=cfg.eval.n_boot, level=cfg.eval.level, rng=cfg.rng("bootstrap"))
    out.mkdir(parents=True, exist_ok=True)
    header = header_lines(cfg, **(extra or {}))
    write_scores(out / "scores.txt", scores, header)
    write_det_csv(out / "det.csv", scores, header=header)
    summary = {
        **cfg.stamp(), **(extra or {}),
        "eer": res.eer, "eer_pct": 100.0 * res.eer, "threshold": res.threshold,
        "ci": [lo, hi], "level": cfg.eval.level, "n_boot": cfg.eval.n_boot,
        "n_target": res.n_target, "n_impostor": res.n_impostor,
        "tap": stack.embedding_tap,
    }
    _write_json(out / "summary.json", summary)
    train_log = out / "train.jsonl"
    if train_log.exists():
        tl = TrainLog.read(train_log)
        tl.eer = res.eer
        tl.write(train_log)
    return summary


def evaluate_run(cfg: ExperimentConfig, schedule: str, fraction: float) -> dict:
    out = run_dir(cfg, schedule, fraction)
    return evaluate(cfg, out / "model.ckpt", out, {"schedule": schedule, "fraction": fraction})


def full_seed(cfg: ExperimentConfig) -> list[dict]:
    """gen, pretrain, then train and evaluate every configured schedule and fraction."""
    generate(cfg)
    do_pretrain(cfg)
    out = []
    for fraction in cfg.fractions:
        for name in cfg.schedule.names:
            train(cfg, name, fraction)
            s = evaluate_run(cfg, name, fraction)
            log.info("seed %d %s@%g EER %.2f%%", cfg.seed, name, fraction, s["eer_pct"])
            out.append(s)
    return out
