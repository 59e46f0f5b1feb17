"""Reading raw diaries, preprocessing them into cycles, and serialization.

Raw CSV header: ``subject_id,date,bbt,menses,age_group``.  ``menses`` marks
onset days only.  Preprocessed files add ``bbt_offset`` and ``cycle_id``
columns; their ``bbt`` values are already standardized and one cycle's
rows run from its onset day through the next onset day inclusive.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .model import CycleSeries
from .presets import AGE_GROUPS

__all__ = [
    "RAW_HEADER",
    "STANDARDIZED_HEADER",
    "ParseError",
    "SchemaError",
    "NotApplicable",
    "RawRecord",
    "RawCycle",
    "PreprocessReport",
    "load_csv",
    "build_cycles",
    "standardize_bbt",
    "median",
    "nearest_rank_bounds",
    "select_cycles",
    "preprocess",
    "write_series_csv",
    "write_raw_csv",
    "dump_json",
    "load_json",
]

RAW_HEADER = ("subject_id", "date", "bbt", "menses", "age_group")
STANDARDIZED_HEADER = RAW_HEADER + ("bbt_offset", "cycle_id")
EARLY_DAYS = 7
DEFAULT_GAP = 5

REASONS = ("open_cycle", "long_gap", "no_early_bbt", "trim_short", "trim_long")


class SchemaError(ValueError):
    """The CSV header does not match the expected schema."""


class ParseError(ValueError):
    """One or more rows could not be parsed; ``errors`` lists ``(row, message)``."""

    def __init__(self, errors: list):
        self.errors = errors
        lines = "; ".join(f"row {r}: {m}" for r, m in errors[:20])
        more = f" (+{len(errors) - 20} more)" if len(errors) > 20 else ""
        super().__init__(f"{len(errors)} malformed row(s): {lines}{more}")


class NotApplicable(ValueError):
    """A cycle has no BBT reading in its first seven days."""


@dataclass(frozen=True)
class RawRecord:
    subject_id: str
    date: dt.date
    bbt: Optional[float]
    menses: int
    age_group: Optional[str] = None
    bbt_offset: Optional[float] = None
    cycle_id: Optional[str] = None
    row: int = 0


def _age_group(text: str) -> Optional[str]:
    if not text:
        return None
    key = text.replace("–", "-").replace("_", "-").strip()
    if key not in AGE_GROUPS:
        raise ValueError(f"unknown age group {text!r}")
    return key


def _float(text: str, name: str) -> Optional[float]:
    if text == "":
        return None
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(f"{name} must be finite")
    return v


def load_csv(path) -> list:
    """Parse a diary CSV (raw or preprocessed)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = tuple(h.strip() for h in next(reader))
        except StopIteration:
            raise SchemaError("empty file") from None
        if header not in (RAW_HEADER, STANDARDIZED_HEADER):
            raise SchemaError(f"header {','.join(header)!r} does not match "
                              f"{','.join(RAW_HEADER)!r}")
        extended = header == STANDARDIZED_HEADER
        records, errors, seen = [], [], {}
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                errors.append((row_no, f"expected {len(header)} fields, got {len(row)}"))
                continue
            cells = [c.strip() for c in row]
            try:
                sid = cells[0]
                if not sid:
                    raise ValueError("empty subject_id")
                date = dt.date.fromisoformat(cells[1])
                bbt = _float(cells[2], "bbt")
                if cells[3] not in ("0", "1"):
                    raise ValueError(f"menses must be 0 or 1, got {cells[3]!r}")
                rec = RawRecord(sid, date, bbt, int(cells[3]), _age_group(cells[4]),
                                _float(cells[5], "bbt_offset") if extended else None,
                                (cells[6] or None) if extended else None, row_no)
                if extended and (rec.bbt_offset is None or rec.cycle_id is None):
                    raise ValueError("bbt_offset and cycle_id are required in preprocessed files")
            except ValueError as exc:
                errors.append((row_no, str(exc)))
                continue
            key = (rec.cycle_id, sid, date) if extended else (sid, date)
            if key in seen:
                errors.append((row_no, f"duplicate ({sid}, {date.isoformat()}) "
                                       f"also on row {seen[key]}"))
                continue
            seen[key] = row_no
            records.append(rec)
    if errors:
        raise ParseError(errors)
    return records


@dataclass
class RawCycle:
    """Days of one cycle: onset day through the next onset day (if seen)."""

    subject_id: str
    age_group: Optional[str]
    start: dt.date
    bbt: np.ndarray          # nan = missing, includes filled gap days
    z: np.ndarray
    closed: bool
    max_gap: int = 0
    offset: Optional[float] = None
    cycle_id: Optional[str] = None

    @property
    def id(self) -> str:
        return self.cycle_id or f"{self.subject_id}/{self.start.isoformat()}"

    @property
    def length(self) -> Optional[int]:
        return len(self.z) - 1 if self.closed else None


def _subject_days(recs: list):
    """Daily arrays from first to last recorded date, and the longest gap."""
    recs = sorted(recs, key=lambda r: r.date)
    first = recs[0].date
    n = (recs[-1].date - first).days + 1
    bbt = np.full(n, np.nan)
    z = np.zeros(n, dtype=np.int8)
    present = np.zeros(n, dtype=bool)
    for r in recs:
        i = (r.date - first).days
        present[i] = True
        z[i] = r.menses
        if r.bbt is not None:
            bbt[i] = r.bbt
    return first, bbt, z, present


def _max_gap(present: np.ndarray) -> int:
    gap = run = 0
    for p in present:
        run = 0 if p else run + 1
        gap = max(gap, run)
    return gap


def build_cycles(records: Iterable[RawRecord]) -> list:
    """Split each subject's diary at onset days.

    Days before a subject's first onset are not part of any cycle.  The
    part after the last onset becomes an open cycle.
    """
    by_subject: dict = {}
    for r in records:
        by_subject.setdefault(r.subject_id, []).append(r)
    cycles = []
    for sid in sorted(by_subject):
        recs = by_subject[sid]
        groups = [g for g in (r.age_group for r in recs) if g]
        age = groups[-1] if groups else None
        first, bbt, z, present = _subject_days(recs)
        onsets = np.flatnonzero(z)
        for k, s in enumerate(onsets):
            closed = k + 1 < len(onsets)
            e = onsets[k + 1] + 1 if closed else len(z)
            cycles.append(RawCycle(sid, age, first + dt.timedelta(days=int(s)), bbt[s:e].copy(),
                                   z[s:e].copy(), closed, _max_gap(present[s:e])))
    return cycles


def _cycles_from_standardized(records: Sequence[RawRecord]) -> list:
    by_cycle: dict = {}
    for r in records:
        by_cycle.setdefault(r.cycle_id, []).append(r)
    out = []
    for cid in sorted(by_cycle):
        recs = by_cycle[cid]
        first, bbt, z, present = _subject_days(recs)
        age = next((r.age_group for r in recs if r.age_group), None)
        closed = bool(z[0] == 1 and z[-1] == 1 and len(z) > 1 and z[1:-1].sum() == 0)
        out.append(RawCycle(recs[0].subject_id, age, first, bbt, z, closed, _max_gap(present),
                            recs[0].bbt_offset, cid))
    return out


def median(values) -> float:
    """Median; even counts use the mean of the two middle values."""
    v = np.sort(np.asarray(list(values), dtype=float))
    if v.size == 0:
        raise ValueError("median of no values")
    mid = v.size // 2
    return float(v[mid]) if v.size % 2 else float(0.5 * (v[mid - 1] + v[mid]))


def standardize_bbt(cycle: RawCycle) -> tuple:
    """``(y, offset)``: BBT minus the median of the first seven days' readings."""
    early = cycle.bbt[:EARLY_DAYS]
    early = early[~np.isnan(early)]
    if early.size == 0:
        raise NotApplicable(f"cycle {cycle.id} has no BBT in its first {EARLY_DAYS} days")
    offset = median(early)
    return cycle.bbt - offset, offset


def nearest_rank_bounds(lengths, keep: float = 0.95) -> tuple:
    """Lower and upper kept lengths for a symmetric nearest-rank trim.

    With ``n`` sorted lengths and ``r = ceil(keep * n)``, the upper bound is
    the ``r``-th smallest and the lower bound the ``r``-th largest value.
    """
    v = np.sort(np.asarray(list(lengths)))
    n = v.size
    if n == 0:
        return None, None
    r = max(1, math.ceil(keep * n - 1e-9))
    return int(v[n - r]), int(v[r - 1])


@dataclass
class PreprocessReport:
    kept: list = field(default_factory=list)
    dropped: dict = field(default_factory=dict)     # cycle id -> reason
    offsets: dict = field(default_factory=dict)     # cycle id -> offset
    bounds: dict = field(default_factory=dict)      # age group -> [lo, hi]
    gap_threshold: int = DEFAULT_GAP
    open_cycles: list = field(default_factory=list)

    def counts(self) -> dict:
        out = {r: 0 for r in REASONS}
        for reason in self.dropped.values():
            out[reason] += 1
        out["kept"] = len(self.kept)
        return out

    def to_dict(self) -> dict:
        return {
            "kept": list(self.kept),
            "dropped": dict(sorted(self.dropped.items())),
            "offsets": dict(sorted(self.offsets.items())),
            "bounds": {k: list(v) for k, v in sorted(self.bounds.items())},
            "gap_threshold": self.gap_threshold,
            "open_cycles": list(self.open_cycles),
            "counts": self.counts(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessReport":
        return cls(list(d["kept"]), dict(d["dropped"]), dict(d["offsets"]),
                   {k: list(v) for k, v in d["bounds"].items()}, int(d["gap_threshold"]),
                   list(d.get("open_cycles", [])))

    def __eq__(self, other):
        return isinstance(other, PreprocessReport) and self.to_dict() == other.to_dict()


def select_cycles(cycles: Sequence[RawCycle], keep: float = 0.95,
                  report: Optional[PreprocessReport] = None) -> tuple:
    """Drop the shortest and longest cycles per age group.

    Returns ``(kept cycles, report)``.
    """
    report = report or PreprocessReport()
    groups: dict = {}
    for c in cycles:
        groups.setdefault(c.age_group or "unknown", []).append(c)
    kept = []
    for g in sorted(groups):
        members = groups[g]
        lo, hi = nearest_rank_bounds([c.length for c in members], keep)
        report.bounds[g] = [lo, hi]
        for c in members:
            if c.length < lo:
                report.dropped[c.id] = "trim_short"
            elif c.length > hi:
                report.dropped[c.id] = "trim_long"
            else:
                kept.append(c)
    return kept, report


def _to_series(c: RawCycle, y: np.ndarray) -> CycleSeries:
    meta = {"subject": c.subject_id, "start": c.start.isoformat(), "offset": c.offset,
            "closed": c.closed}
    return CycleSeries(c.id, y, c.z, c.age_group, None, meta)


def preprocess(records: Sequence[RawRecord], gap_threshold: int = DEFAULT_GAP,
               keep: float = 0.95, include_open: bool = False) -> tuple:
    """Cycles ready for fitting, and the report of what was dropped and why.

    Already-standardized input (with ``bbt_offset``) is passed through
    without re-standardizing or re-trimming.  With ``include_open`` the
    trailing open cycles that pass the other rules are returned too (they
    are still listed as dropped for fitting).
    """
    report = PreprocessReport(gap_threshold=gap_threshold)
    standardized = bool(records) and records[0].bbt_offset is not None
    cycles = _cycles_from_standardized(records) if standardized else build_cycles(records)
    usable, open_ok = [], []
    for c in cycles:
        if c.max_gap > gap_threshold:
            report.dropped[c.id] = "long_gap"
            continue
        if standardized:
            y = c.bbt
            if np.all(np.isnan(c.bbt[:EARLY_DAYS])):
                report.dropped[c.id] = "no_early_bbt"
                continue
        else:
            try:
                y, c.offset = standardize_bbt(c)
            except NotApplicable:
                report.dropped[c.id] = "no_early_bbt"
                continue
        if not c.closed:
            report.dropped[c.id] = "open_cycle"
            report.open_cycles.append(c.id)
            report.offsets[c.id] = c.offset
            open_ok.append((c, y))
            continue
        usable.append((c, y))
    ys = {c.id: y for c, y in usable}
    if standardized:
        kept = [c for c, _ in usable]
    else:
        kept, report = select_cycles([c for c, _ in usable], keep, report)
    series = []
    for c in kept:
        report.kept.append(c.id)
        report.offsets[c.id] = c.offset
        series.append(_to_series(c, ys[c.id]))
    if include_open:
        series += [_to_series(c, y) for c, y in open_ok]
    return series, report


def _fmt(v: float) -> str:
    return "" if v is None or not np.isfinite(v) else repr(round(float(v), 10))


def write_series_csv(series: Sequence[CycleSeries], path, start: Optional[dt.date] = None) -> None:
    """Write standardized series in the preprocessed CSV layout."""
    base = start or dt.date(2000, 1, 1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STANDARDIZED_HEADER)
        for s in series:
            subject = s.meta.get("subject", s.subject_id)
            first = dt.date.fromisoformat(s.meta["start"]) if "start" in s.meta else base
            offset = s.meta.get("offset")
            offset = 0.0 if offset is None else offset
            for t in range(s.n_days):
                w.writerow([subject, (first + dt.timedelta(days=t)).isoformat(), _fmt(s.y[t]),
                            int(s.z[t]), s.age_group or "", _fmt(offset), s.subject_id])


def write_raw_csv(series: Sequence[CycleSeries], path, baseline: float = 36.5,
                  start: Optional[dt.date] = None) -> None:
    """Write series as raw diaries, one subject per series, BBT shifted by ``baseline``."""
    base = start or dt.date(2000, 1, 1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RAW_HEADER)
        for s in series:
            for t in range(s.n_days):
                w.writerow([s.subject_id, (base + dt.timedelta(days=t)).isoformat(),
                            _fmt(s.y[t] + baseline), int(s.z[t]), s.age_group or ""])


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def dump_json(obj, path) -> None:
    text = json.dumps(obj, default=_default, indent=2, sort_keys=True, allow_nan=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    os.replace(tmp, path)


def load_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
