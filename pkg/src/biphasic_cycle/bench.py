"""Onset prediction benchmark over model variants and a calendar baseline."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .estimation import FitSpec, fit
from .filtering import PhaseGrid, batch_filter_masses
from .model import CycleSeries, ModelParams, Variant, as_series_list
from .onset import DEFAULT_K_MAX, ConvolutionEngine, onset_table
from .presets import DEFAULT_INIT

__all__ = [
    "HORIZONS",
    "CALENDAR",
    "CalendarModel",
    "BenchReport",
    "horizon_day",
    "rmse",
    "run_benchmark",
    "evaluate_predictions",
]

log = logging.getLogger(__name__)

# "X" is the onset day of the cycle itself; numbers are days before the next onset.
HORIZONS = ("X", "21", "14", "7", "6", "5", "4", "3", "2", "1")
CALENDAR = "C"
MIN_LENGTH_21 = 21
DEGENERATE_SHARE = 0.5


def horizon_day(cycle_length: int, horizon: str) -> tuple:
    """``(prediction day, true days to onset)`` for a cycle of the given length.

    Days are 1-based with the cycle's onset on day 1 and the next onset on
    day ``cycle_length + 1``.
    """
    if horizon == "X":
        return 1, cycle_length
    d = int(horizon)
    if d < 1 or d > cycle_length:
        raise ValueError(f"horizon {d} does not fit a {cycle_length}-day cycle")
    return cycle_length + 1 - d, d


def rmse(predicted, actual) -> float:
    p = np.asarray(predicted, dtype=float)
    a = np.asarray(actual, dtype=float)
    if p.size == 0:
        return math.nan
    return float(np.sqrt(np.mean((p - a) ** 2)))


def _cycle_length(s: CycleSeries) -> int:
    L = s.cycle_length
    if L is None or s.z[0] != 1:
        raise ValueError(f"series {s.subject_id!r} is not a closed cycle starting at onset")
    return L


def _in_cell(L: int, horizon: str) -> bool:
    if horizon == "X":
        return True
    d = int(horizon)
    if horizon == "21" and L < MIN_LENGTH_21:
        return False
    return d <= L


@dataclass(frozen=True)
class CalendarModel:
    """Predict the next onset ``fixed_offset`` days after the previous one."""

    fixed_offset: int

    @classmethod
    def fit(cls, train: Sequence[CycleSeries]) -> "CalendarModel":
        lengths = np.array([_cycle_length(s) for s in as_series_list(train)])
        if lengths.size == 0:
            raise ValueError("no training cycles")
        cands = np.arange(lengths.min(), lengths.max() + 1)
        errs = [np.mean((c - lengths) ** 2) for c in cands]
        return cls(int(cands[int(np.argmin(errs))]))

    def predict(self, day: int) -> int:
        """Days from ``day`` to the predicted onset on day ``1 + fixed_offset``."""
        return 1 + self.fixed_offset - day


@dataclass
class BenchReport:
    models: list
    horizons: list
    rmse: dict                 # model -> horizon -> value
    n: dict                    # model -> horizon -> count
    failures: dict = field(default_factory=dict)
    degenerate: dict = field(default_factory=dict)
    calendar_offset: Optional[int] = None
    params: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_csv(self, out: Optional[io.TextIOBase] = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", *self.horizons, "failures", "degenerate"])
        for m in self.models:
            row = [m]
            for h in self.horizons:
                v = self.rmse[m][h]
                row.append("" if v is None or math.isnan(v) else f"{v:.6f}")
            row += [self.failures.get(m, 0), int(bool(self.degenerate.get(m, False)))]
            w.writerow(row)
        text = buf.getvalue()
        if out is not None:
            out.write(text)
        return text

    def to_dict(self) -> dict:
        clean = {m: {h: (None if v is None or math.isnan(v) else v) for h, v in r.items()}
                 for m, r in self.rmse.items()}
        return {"models": list(self.models), "horizons": list(self.horizons), "rmse": clean,
                "n": self.n, "failures": self.failures, "degenerate": self.degenerate,
                "calendar_offset": self.calendar_offset, "params": self.params,
                "metadata": self.metadata}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "BenchReport":
        r = {m: {h: (math.nan if v is None else float(v)) for h, v in row.items()}
             for m, row in d["rmse"].items()}
        return cls(list(d["models"]), list(d["horizons"]), r,
                   {m: {h: int(v) for h, v in row.items()} for m, row in d["n"].items()},
                   dict(d.get("failures", {})), dict(d.get("degenerate", {})),
                   d.get("calendar_offset"), dict(d.get("params", {})), dict(d.get("metadata", {})))

    @classmethod
    def from_json(cls, text: str) -> "BenchReport":
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        if not isinstance(other, BenchReport):
            return NotImplemented
        return self.to_json() == other.to_json()


def evaluate_predictions(test: Sequence[CycleSeries], params: ModelParams,
                         n_bins: int = 512, k_max: int = DEFAULT_K_MAX,
                         engine: Optional[ConvolutionEngine] = None,
                         horizons: Sequence[str] = HORIZONS) -> tuple:
    """Point predictions per horizon for every test cycle.

    Returns ``(records, failures)`` where each record is
    ``(series index, horizon, predicted k, true k)``.
    """
    test = as_series_list(test)
    grid = PhaseGrid(n_bins)
    table = onset_table(params, grid, k_max, engine)
    _, failed, filt = batch_filter_masses(test, params, grid)
    records, failures = [], 0
    for i, (s, bad, f) in enumerate(zip(test, failed, filt)):
        L = _cycle_length(s)
        if bad:
            # a zero likelihood after the last prediction day does not matter
            days = [horizon_day(L, h)[0] for h in horizons if _in_cell(L, h)]
            if bad <= max(days):
                log.warning("series %s: zero likelihood on day %d", s.subject_id, bad)
                failures += 1
                continue
        for h in horizons:
            if not _in_cell(L, h):
                continue
            day, target = horizon_day(L, h)
            m = f[day - 1]
            probs = (m / m.sum()) @ table
            records.append((i, h, int(np.argmax(probs)) + 1, target))
    return records, failures


def _cells(records, horizons):
    out_rmse, out_n = {}, {}
    for h in horizons:
        pairs = [(p, a) for _, hh, p, a in records if hh == h]
        out_n[h] = len(pairs)
        out_rmse[h] = rmse([p for p, _ in pairs], [a for _, a in pairs]) if pairs else math.nan
    return out_rmse, out_n


def _degenerate(records) -> bool:
    """Flags a model that nearly always predicts the onset for the next day."""
    early = [p for _, h, p, a in records if a >= 2]
    return bool(early) and float(np.mean(np.asarray(early) == 1)) > DEGENERATE_SHARE


def run_benchmark(train: Sequence[CycleSeries], test: Sequence[CycleSeries],
                  models: Sequence[str] = ("FE", "RE", "I1", "I2", "I3", CALENDAR),
                  fit_spec: Optional[FitSpec] = None, params: Optional[dict] = None,
                  n_bins: int = 512, k_max: int = DEFAULT_K_MAX,
                  engine: Optional[ConvolutionEngine] = None) -> BenchReport:
    """Fit each model on ``train`` and score its onset predictions on ``test``.

    ``params`` maps model names to parameter sets that are used instead of
    fitting.  State-space variants other than FE are warm-started from the
    FE estimate when it is available.
    """
    train = as_series_list(train)
    test = as_series_list(test)
    train_ids = {id(s) for s in train}
    if any(id(s) in train_ids for s in test):
        raise ValueError("train and test must be disjoint")
    params = dict(params or {})
    base = fit_spec or FitSpec(compute_ci=False)
    engine = engine or ConvolutionEngine()
    report = BenchReport(list(models), list(HORIZONS), {}, {},
                         metadata={"calendar_fit_on": "train", "n_train": len(train),
                                   "n_test": len(test), "n_bins": n_bins, "k_max": k_max})
    order = sorted(models, key=lambda m: (m != "FE", m == CALENDAR))
    for m in order:
        if m == CALENDAR:
            cal = CalendarModel.fit(train)
            report.calendar_offset = cal.fixed_offset
            recs = []
            for i, s in enumerate(test):
                L = _cycle_length(s)
                for h in HORIZONS:
                    if _in_cell(L, h):
                        day, target = horizon_day(L, h)
                        recs.append((i, h, cal.predict(day), target))
            fails = 0
        else:
            variant = Variant(m)
            if m not in params:
                warm = params.get("FE", DEFAULT_INIT).with_variant(variant)
                spec = FitSpec(**{**base.to_dict(), "variant": variant.value})
                params[m] = fit(train, spec, warm).params
            recs, fails = evaluate_predictions(test, params[m], n_bins, k_max, engine)
            report.params[m] = params[m].to_dict()
        report.rmse[m], report.n[m] = _cells(recs, HORIZONS)
        report.failures[m] = fails
        report.degenerate[m] = _degenerate(recs) if m != CALENDAR else False
    return report
