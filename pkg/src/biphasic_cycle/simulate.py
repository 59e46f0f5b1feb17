"""Synthetic data from the generative model, with the true phase retained."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import CycleSeries, ModelParams

__all__ = ["SimConfig", "SafetyCap", "simulate"]


class SafetyCap(RuntimeError):
    """A simulated cycle ran longer than the configured cap."""


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    Each series starts on an onset day with phase exactly 0 and runs through
    the next ``cycles_per_series`` onsets inclusive, so a one-cycle series
    of cycle length ``L`` has ``L + 1`` days with ``z = 1`` on the first and
    last day.  ``noiseless`` replaces each BBT draw by its mean.
    """

    params: ModelParams
    n_cycles: int
    missing_rate: float = 0.15
    seed: int = 0
    max_days_per_cycle: int = 200
    cycles_per_series: int = 1
    age_group: Optional[str] = None
    noiseless: bool = False
    id_prefix: str = "sim"

    def __post_init__(self):
        if self.n_cycles < 0:
            raise ValueError("n_cycles must be >= 0")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must lie in [0, 1)")
        if self.max_days_per_cycle < 1 or self.cycles_per_series < 1:
            raise ValueError("max_days_per_cycle and cycles_per_series must be >= 1")

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "n_cycles": self.n_cycles,
            "missing_rate": self.missing_rate,
            "seed": self.seed,
            "max_days_per_cycle": self.max_days_per_cycle,
            "cycles_per_series": self.cycles_per_series,
            "age_group": self.age_group,
            "noiseless": self.noiseless,
            "id_prefix": self.id_prefix,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        params = d.pop("params")
        if not isinstance(params, ModelParams):
            params = ModelParams.from_dict(params)
        return cls(params=params, **d)


def _phase_paths(params: ModelParams, n: int, n_onsets: int, cap: int, rng) -> list:
    """Phase trajectories starting at 0 through ``n_onsets`` further integer crossings."""
    a = np.array([params.stage1.alpha, params.stage2.alpha])
    scale = 1.0 / np.array([params.stage1.beta, params.stage2.beta])
    theta = np.zeros(n)
    paths = [[0.0] for _ in range(n)]
    active = np.arange(n)
    days_in_cycle = np.zeros(n, dtype=int)
    while active.size:
        th = theta[active]
        st = ((th - np.floor(th)) >= 0.5).astype(int)
        new = th + rng.gamma(a[st], scale[st])
        days_in_cycle[active] += 1
        crossed = np.floor(new) > np.floor(th)
        for i, v in zip(active, new):
            paths[i].append(float(v))
        theta[active] = new
        days_in_cycle[active[crossed]] = 0
        over = days_in_cycle[active] > cap
        if np.any(over):
            raise SafetyCap(f"cycle exceeded {cap} days (series {int(active[over][0])})")
        done = np.floor(new) >= n_onsets
        active = active[~done]
    return [np.asarray(p) for p in paths]


def simulate(config: SimConfig) -> list:
    """Simulate ``config.n_cycles`` series; reproducible for a fixed seed."""
    p = config.params
    rng = np.random.default_rng(config.seed)
    paths = _phase_paths(p, config.n_cycles, config.cycles_per_series,
                         config.max_days_per_cycle, rng)
    out = []
    width = max(5, len(str(max(config.n_cycles - 1, 0))))
    for i, theta in enumerate(paths):
        fl = np.floor(theta)
        z = np.zeros(len(theta), dtype=np.int8)
        z[0] = 1
        z[1:] = fl[1:] > fl[:-1]
        mean = p.bbt_mean(theta)
        if config.noiseless:
            y = np.array(mean, dtype=float)
        else:
            y = mean + p.bbt_sd(theta) * rng.standard_normal(len(theta))
        mask = rng.random(len(theta)) < config.missing_rate
        while mask.all():
            mask = rng.random(len(theta)) < config.missing_rate
        y = np.where(mask, np.nan, y)
        frac = theta - fl
        onsets = np.flatnonzero(z)
        switch = []
        for s, e in zip(onsets[:-1], onsets[1:]):
            hit = np.flatnonzero(frac[s:e] >= 0.5)
            # a cycle can skip stage 2 entirely when one increment crosses the integer
            switch.append(int(hit[0]) + s + 1 if hit.size else int(e) + 1)
        lengths = np.diff(onsets).tolist()
        meta = {
            "cycle_lengths": lengths,
            "switch_days": switch,
            "stage1_lengths": [int(sw - (s + 1)) for sw, s in zip(switch, onsets[:-1])],
        }
        meta["stage2_lengths"] = [L - s1 for L, s1 in zip(lengths, meta["stage1_lengths"])]
        out.append(CycleSeries(f"{config.id_prefix}-{i:0{width}d}", y, z, config.age_group,
                               theta, meta))
    return out
