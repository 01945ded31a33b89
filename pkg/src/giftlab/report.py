"""Result tables: median EER per (schedule, split) and reductions over Finetune.

Inputs are records of one EER (in percent) per (schedule, split, seed). They
come either from ``summary.json`` files under a workdir or from a CSV fixture
with columns ``schedule,split,seed,eer_pct`` (schedule as key or display name).
All arithmetic is done in ``Decimal`` on the printed two-decimal values, so a
fixture of published numbers reproduces their differences exactly.

Outputs:

* ``results.md`` / ``results.csv``: median EER table, rows in display order
* ``reduction.csv``: ``split,schedule,finetune_eer_pct,eer_pct,reduction_pp,paired_median_pp``
  where ``reduction_pp = median(Finetune) - median(schedule)`` and the paired
  column is the median over seeds of the per-seed reduction
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path
from statistics import median
from typing import Iterable, Sequence

from .errors import ArtifactIOError, DataError
from .schedule import DISPLAY_NAMES

CENT = Decimal("0.01")
_BY_DISPLAY = {v.lower(): k for k, v in DISPLAY_NAMES.items()}


@dataclass(frozen=True)
class Record:
    schedule: str
    split: str
    seed: int
    eer_pct: Decimal
    data_hash: str = ""
    config_hash: str = ""


def to_pct(value: float) -> Decimal:
    return Decimal(repr(float(value))).quantize(CENT)


def schedule_key(name: str) -> str:
    if name in DISPLAY_NAMES:
        return name
    key = _BY_DISPLAY.get(name.strip().lower())
    if key is None:
        raise DataError(f"unknown schedule name {name!r}")
    return key


def read_fixture(path) -> list[Record]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(f"cannot read fixture {path}: {exc}") from exc
    rows = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    out = []
    for row in csv.DictReader(rows):
        try:
            out.append(Record(schedule_key(row["schedule"]), row["split"], int(row["seed"]),
                              Decimal(row["eer_pct"]).quantize(CENT)))
        except (KeyError, ValueError, ArithmeticError) as exc:
            raise DataError(f"{path}: bad fixture row {row}: {exc}") from exc
    return out


def collect_runs(workdir) -> list[Record]:
    """Every evaluated run under ``workdir``; all must share one data hash."""
    workdir = Path(workdir)
    summaries = sorted(workdir.glob("seed_*/runs/*/summary.json"))
    if not summaries:
        raise ArtifactIOError(f"no evaluated runs under {workdir}")
    out = []
    for path in summaries:
        s = json.loads(path.read_text(encoding="utf-8"))
        for need in ("train.jsonl", "scores.txt"):
            if not (path.parent / need).exists():
                raise ArtifactIOError(f"run {path.parent} lacks {need}")
        out.append(Record(s["schedule"], f"f={s['fraction']:g}", int(s["seed"]), to_pct(s["eer_pct"]),
                          s["data_hash"], s["config_hash"]))
    hashes = sorted({r.data_hash for r in out})
    if len(hashes) > 1:
        raise DataError(f"runs under {workdir} mix data-generation hashes {hashes}; refusing to aggregate")
    return out


@dataclass
class ResultTable:
    splits: list[str]
    schedules: list[str]
    cells: dict[tuple[str, str], Decimal]  # (schedule, split) -> median EER %
    seeds: dict[tuple[str, str], list[int]]
    per_seed: dict[tuple[str, str, int], Decimal]

    def median(self, schedule: str, split: str) -> Decimal | None:
        return self.cells.get((schedule, split))

    def reduction(self, schedule: str, split: str, reference: str = "finetune") -> Decimal | None:
        ref, val = self.median(reference, split), self.median(schedule, split)
        if ref is None or val is None:
            return None
        return ref - val

    def paired_reduction(self, schedule: str, split: str, reference: str = "finetune") -> Decimal | None:
        common = sorted(set(self.seeds.get((schedule, split), [])) & set(self.seeds.get((reference, split), [])))
        if not common:
            return None
        return median(self.per_seed[reference, split, s] - self.per_seed[schedule, split, s] for s in common)


def build_table(records: Iterable[Record]) -> ResultTable:
    """Median per cell. Fraction splits ("f=...") sort numerically, others keep input order."""
    records = list(records)
    first_seen = {r.split: k for k, r in reversed(list(enumerate(records)))}

    def split_order(split: str):
        if split.startswith("f="):
            return (0, float(split[2:]))
        return (1, first_seen[split])

    per_seed: dict[tuple[str, str, int], Decimal] = {}
    for r in records:
        key = (r.schedule, r.split, r.seed)
        if key in per_seed:
            raise DataError(f"duplicate result for {key}")
        per_seed[key] = r.eer_pct
    seeds: dict[tuple[str, str], list[int]] = {}
    for sched, split, seed in per_seed:
        seeds.setdefault((sched, split), []).append(seed)
    cells = {k: median(per_seed[k[0], k[1], s] for s in sorted(v)) for k, v in seeds.items()}
    splits = sorted({k[1] for k in cells}, key=split_order)
    schedules = [s for s in DISPLAY_NAMES if any((s, sp) in cells for sp in splits)]
    return ResultTable(splits, schedules, cells, {k: sorted(v) for k, v in seeds.items()}, per_seed)


def _fmt(v: Decimal | None) -> str:
    return "" if v is None else str(v.quantize(CENT))


def markdown(table: ResultTable, header: Sequence[str] = ()) -> str:
    lines = [f"<!-- {h} -->" for h in header]
    lines.append("| EER (%) | " + " | ".join(table.splits) + " |")
    lines.append("|---|" + "---|" * len(table.splits))
    for s in table.schedules:
        lines.append(f"| {DISPLAY_NAMES[s]} | " + " | ".join(_fmt(table.median(s, sp)) for sp in table.splits) + " |")
    return "\n".join(lines) + "\n"


def _csv(rows: list[list[str]], header: Sequence[str]) -> str:
    buf = io.StringIO()
    for h in header:
        buf.write(f"# {h}\n")
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def table_csv(table: ResultTable, header: Sequence[str] = ()) -> str:
    rows = [["schedule", "split", "median_eer_pct", "n_seeds"]]
    for s in table.schedules:
        for sp in table.splits:
            if (s, sp) in table.cells:
                rows.append([DISPLAY_NAMES[s], sp, _fmt(table.median(s, sp)), str(len(table.seeds[s, sp]))])
    return _csv(rows, header)


def reduction_csv(table: ResultTable, header: Sequence[str] = ()) -> str:
    rows = [["split", "schedule", "finetune_eer_pct", "eer_pct", "reduction_pp", "paired_median_pp"]]
    for sp in table.splits:
        for s in table.schedules:
            if s == "finetune" or (s, sp) not in table.cells or ("finetune", sp) not in table.cells:
                continue
            rows.append([sp, DISPLAY_NAMES[s], _fmt(table.median("finetune", sp)), _fmt(table.median(s, sp)),
                         _fmt(table.reduction(s, sp)), _fmt(table.paired_reduction(s, sp))])
    return _csv(rows, header)


def write_report(records: list[Record], out_dir, header: Sequence[str] = ()) -> ResultTable:
    table = build_table(records)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "results.md").write_text(markdown(table, header), encoding="utf-8")
    (out_dir / "results.csv").write_text(table_csv(table, header), encoding="utf-8")
    (out_dir / "reduction.csv").write_text(reduction_csv(table, header), encoding="utf-8")
    return table


def report_header(records: Sequence[Record]) -> list[str]:
    cfg_hashes = sorted({r.config_hash for r in records if r.config_hash})
    data_hashes = sorted({r.data_hash for r in records if r.data_hash})
    seeds = sorted({r.seed for r in records})
    out = []
    if cfg_hashes:
        out.append(f"config_hash={','.join(cfg_hashes)}")
    if data_hashes:
        out.append(f"data_hash={','.join(data_hashes)}")
    out.append(f"seeds={','.join(map(str, seeds))}")
    return out
