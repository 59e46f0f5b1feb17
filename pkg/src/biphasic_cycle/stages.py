"""Follicular / luteal stage identification from phase densities."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .filtering import PhaseDensity
from .model import ModelParams, gamma_cdf

__all__ = [
    "Stage",
    "Basis",
    "StageCall",
    "CycleStageSummary",
    "prob_stage1",
    "prob_stage2",
    "call_stages",
    "stage_lengths",
    "stage_lengths_from_probs",
    "stage_length_pmf",
    "population_stage_stats",
    "stage_stats_csv",
]

MONOPHASIC_DAYS = 3


class Stage(str, Enum):
    STAGE1 = "Stage1"
    STAGE2 = "Stage2"


class Basis(str, Enum):
    PREDICTIVE = "Predictive"
    FILTERING = "Filtering"
    SMOOTHED = "Smoothed"


@dataclass(frozen=True)
class StageCall:
    day: int
    prob_stage1: float
    basis: Basis = Basis.SMOOTHED

    def __post_init__(self):
        if not 0.0 <= self.prob_stage1 <= 1.0:
            raise ValueError("prob_stage1 must lie in [0, 1]")

    @property
    def call(self) -> Stage:
        return Stage.STAGE1 if self.prob_stage1 >= 0.5 else Stage.STAGE2


@dataclass(frozen=True)
class CycleStageSummary:
    first_stage_length: int
    second_stage_length: int
    monotone: bool = True  # False if a Stage1 call follows a Stage2 call

    @property
    def cycle_length(self) -> int:
        return self.first_stage_length + self.second_stage_length

    @property
    def monophasic(self) -> bool:
        return self.second_stage_length < MONOPHASIC_DAYS


def prob_stage1(density: PhaseDensity) -> float:
    """Probability that the fractional phase lies in ``[0, 0.5)``."""
    m = density.masses
    total = m.sum()
    if not total > 0:
        raise ValueError("density has no mass")
    p = float(m[density.grid.stage1_mask].sum() / total)
    return min(max(p, 0.0), 1.0)


def prob_stage2(density: PhaseDensity) -> float:
    return 1.0 - prob_stage1(density)


def call_stages(densities: Sequence[PhaseDensity], basis: Basis = Basis.SMOOTHED) -> list:
    return [StageCall(t + 1, prob_stage1(d), Basis(basis)) for t, d in enumerate(densities)]


def stage_lengths_from_probs(probs: Iterable[float]) -> CycleStageSummary:
    """Count the days called Stage1 / Stage2 with the ``>= 0.5`` rule."""
    calls = np.asarray(list(probs), dtype=float) >= 0.5
    first = int(calls.sum())
    # once a day is called Stage2, a later Stage1 call breaks monotonicity
    seen2 = np.cumsum(~calls) > 0
    monotone = not bool(np.any(calls & seen2))
    return CycleStageSummary(first, int(calls.size - first), monotone)


def stage_lengths(smoothed: Sequence[PhaseDensity]) -> CycleStageSummary:
    """Stage lengths of one cycle (onset day up to the day before the next onset)."""
    return stage_lengths_from_probs(prob_stage1(d) for d in smoothed)


def stage_length_pmf(stage: int, params: ModelParams, k_max: int) -> np.ndarray:
    """Distribution of the number of days spent in a stage, ``k = 1..k_max``.

    A stage covers half a cycle, so its day count is the first ``k`` for
    which ``k`` increments exceed 0.5.
    """
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    sp = params.stage_params(stage)
    cdf = np.concatenate([[1.0], gamma_cdf(0.5, sp.alpha * np.arange(1, k_max + 1), sp.beta)])
    return np.clip(cdf[:-1] - cdf[1:], 0.0, 1.0)


def _describe(x: np.ndarray) -> dict:
    if x.size == 0:
        return {"n": 0, "mean": math.nan, "median": math.nan, "sd": math.nan}
    sd = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    return {"n": int(x.size), "mean": float(np.mean(x)), "median": float(np.median(x)), "sd": sd}


def population_stage_stats(summaries: Sequence[CycleStageSummary]) -> dict:
    """Mean / median / sd of both stage lengths, overall and without monophasic cycles."""
    if not summaries:
        raise ValueError("no cycles to summarize")
    first = np.array([s.first_stage_length for s in summaries], dtype=float)
    second = np.array([s.second_stage_length for s in summaries], dtype=float)
    mono = np.array([s.monophasic for s in summaries])
    keep = ~mono
    if first.size > 1 and np.std(first) > 0 and np.std(second) > 0:
        corr = float(np.corrcoef(first, second)[0, 1])
    else:
        corr = math.nan
    return {
        "n_cycles": int(first.size),
        "monophasic_pct": 100.0 * float(mono.mean()),
        "correlation": corr,
        "all": {"stage1": _describe(first), "stage2": _describe(second)},
        "biphasic": {"stage1": _describe(first[keep]), "stage2": _describe(second[keep])},
    }


def stage_stats_csv(stats: dict, out: Optional[io.TextIOBase] = None) -> str:
    """Table with one row per (subset, stage)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subset", "stage", "n", "mean", "median", "sd", "monophasic_pct", "correlation"])
    for subset in ("all", "biphasic"):
        for st in ("stage1", "stage2"):
            d = stats[subset][st]
            w.writerow([subset, st, d["n"], _fmt(d["mean"]), _fmt(d["median"]), _fmt(d["sd"]),
                        _fmt(stats["monophasic_pct"]), _fmt(stats["correlation"])])
    text = buf.getvalue()
    if out is not None:
        out.write(text)
    return text


def _fmt(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6g}"
