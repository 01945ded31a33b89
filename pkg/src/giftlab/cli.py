"""Command-line entry point: ``giftlab <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data/format error,
4 numeric failure, 5 missing or unreadable artifact.
"""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline
from .config import ExperimentConfig, load_config
from .core import make_rng
from .errors import GiftError, NumericError
from .models import ModelArch, build_stack
from .nn import GLU, LayerNorm, Linear, ReLU, Sigmoid, SoftmaxXent, gradcheck
from .report import collect_runs, read_fixture, report_header, write_report

log = logging.getLogger("giftlab")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment config (JSON)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. optim.adam.lr=0.002 (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    p.add_argument("--workdir", help="shorthand for --set paths.workdir=DIR")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def _config(args) -> ExperimentConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.workdir is not None:
        overrides.append(f"paths.workdir={args.workdir}")
    return load_config(args.config, overrides)


def _runs(cfg: ExperimentConfig, args) -> list[tuple[str, float]]:
    names = [args.schedule] if args.schedule else cfg.schedule.names
    fracs = [args.fraction] if args.fraction is not None else cfg.fractions
    return [(n, f) for f in fracs for n in names]


def cmd_gen(args) -> int:
    cfg = _config(args)
    print(pipeline.generate(cfg))
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    print(pipeline.do_pretrain(cfg))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    for name, frac in _runs(cfg, args):
        print(pipeline.train(cfg, name, frac))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    if args.checkpoint is not None:
        out = args.out or args.checkpoint.parent
        s = pipeline.evaluate(cfg, args.checkpoint, Path(out))
        print(f"{args.checkpoint}: EER {s['eer_pct']:.2f}% CI [{100 * s['ci'][0]:.2f}, {100 * s['ci'][1]:.2f}]")
        return 0
    for name, frac in _runs(cfg, args):
        s = pipeline.evaluate_run(cfg, name, frac)
        print(f"{name}@{frac:g}: EER {s['eer_pct']:.2f}% CI [{100 * s['ci'][0]:.2f}, {100 * s['ci'][1]:.2f}]")
    return 0


def gradcheck_suite(cfg: ExperimentConfig, tolerance: float = 1e-5) -> list[tuple[str, object]]:
    """Gradient checks for every layer type and for small full stacks."""
    rng = cfg.rng("init")
    x = rng.normal(size=(3, 4))
    labels = np.array([0, 2, 1])
    layers = [
        ("linear", Linear(4, 3, "t.linear", "embedding", rng), x),
        ("relu", ReLU(), x + np.sign(x) * 0.1),
        ("sigmoid", Sigmoid(), x),
        ("layernorm", LayerNorm(4, "t.ln", "adapter"), x),
        ("glu", GLU(4, 3, "t.glu", "adapter", rng), x),
        ("softmax_xent", SoftmaxXent(labels), rng.normal(size=(3, 3))),
    ]
    out = [(name, gradcheck(layer, inp, tolerance, rng=rng)) for name, layer, inp in layers]
    # Fixed probe with O(1) weights. At h = 1e-6 central differences carry
    # ~1e-10 of round-off, so gradient entries near 1e-6 cannot be resolved
    # to 1e-5 relative; this probe keeps all entries clear of that floor.
    small = dict(d_f=3, h_f=4, L_f=2, d_e=4, h_a=3, d_a=4, n_speakers=3)
    for kind in ("glu", "ra", "none"):
        r = make_rng(17)
        stack = build_stack(ModelArch(adapter=kind, h_r=3 if kind == "ra" else 0, **small), r)
        for p in stack.params:
            p.value[...] = r.uniform(-1, 1, size=p.value.shape)
        utts = [r.uniform(-1, 1, size=(n, 3)) for n in (3, 4, 5, 3)]
        out.append((f"stack[{kind}]", gradcheck(stack, utts, tolerance, labels=[0, 1, 2, 1])))
    return out


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    ok = True
    for name, rep in gradcheck_suite(cfg, args.tolerance):
        status = "PASS" if rep.passed else "FAIL"
        print(f"{status} {name}: max relative error {rep.max_error:.3e}")
        if not rep.passed:
            ok = False
            for line in rep.lines():
                print("   ", line)
    if not ok:
        raise NumericError(f"gradient check failed at tolerance {args.tolerance:g}")
    return 0


def cmd_report(args) -> int:
    if args.fixture is not None:
        records = read_fixture(args.fixture)
        out = args.out or args.fixture.parent
        header = [f"fixture={args.fixture.name}"]
    else:
        workdir = Path(args.workdir or _config(args).workdir)
        records = collect_runs(workdir)
        out = args.out or workdir / "report"
        header = report_header(records)
    table = write_report(records, out, header)
    print((Path(out) / "results.md").read_text(encoding="utf-8"), end="")
    for sp in table.splits:
        for s in ("gift1", "gift2"):
            r = table.reduction(s, sp)
            if r is not None:
                print(f"{sp} {s}: reduction over Finetune {r} pp")
    return 0


def _seed_job(cfg: ExperimentConfig) -> int:
    pipeline.full_seed(cfg)
    return cfg.seed


def cmd_run(args) -> int:
    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    cfgs = [replace(cfg, seed=s) for s in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            list(pool.map(_seed_job, cfgs))
    else:
        for c in cfgs:
            _seed_job(c)
    records = collect_runs(cfg.workdir)
    records = [r for r in records if r.seed in seeds]
    write_report(records, Path(cfg.workdir) / "report", report_header(records))
    print((Path(cfg.workdir) / "report" / "results.md").read_text(encoding="utf-8"), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="giftlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate the synthetic corpora and trial list")
    _common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="train the embedding network on the source domain")
    _common(p)
    p.set_defaults(func=cmd_pretrain)

    for name, func, doc in (("train", cmd_train, "fine-tune on the target domain"),
                            ("eval", cmd_eval, "score the trial list and compute EER")):
        p = sub.add_parser(name, help=doc)
        _common(p)
        p.add_argument("--schedule", help="one schedule (default: all in schedule.names)")
        p.add_argument("--fraction", type=float, help="one target-train fraction (default: all)")
        if name == "eval":
            p.add_argument("--checkpoint", type=Path, help="evaluate this checkpoint instead of a run")
            p.add_argument("--out", type=Path, help="output directory for --checkpoint")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="check analytic gradients against central differences")
    _common(p)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="aggregate runs (or a fixture) into result tables")
    _common(p)
    p.add_argument("--fixture", type=Path, help="CSV of schedule,split,seed,eer_pct")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="full pipeline for one or more seeds, then report")
    _common(p)
    p.add_argument("--seeds", help="comma separated seeds, each in its own seed_<s> directory")
    p.add_argument("--jobs", type=int, default=1, help="seeds run in parallel processes")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except GiftError as exc:
        print(f"giftlab {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"giftlab {args.command}: I/O error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
