"""Grid-based non-Gaussian filtering and smoothing of the menstrual phase.

The unbounded phase is factored into its fractional part, discretized on a
uniform grid over ``[0, 1)``, and a count of integer crossings.  Onsets only
depend on whether an integer was crossed and the stage only on the
fractional part, so each one-day transition splits into an *uncrossed* and a
*crossed* component; any number of crossings in one day count as one onset.

Densities are treated as constant within a bin.  Transition matrices map bin
masses (not density values) and are exact for piecewise-constant densities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .model import CycleSeries, ModelParams, as_series_list

__all__ = [
    "ZeroLikelihood",
    "PhaseGrid",
    "PhaseDensity",
    "JointPredictive",
    "FilterOutput",
    "TransitionKernel",
    "increment_kernel",
    "transition_kernel",
    "emission",
    "predict_step",
    "update_step",
    "default_predictive",
    "filter_series",
    "smooth_series",
    "batch_loglik",
    "batch_stage1_probabilities",
]

TAIL_TOL = 1e-12
_SQRT_2PI = math.sqrt(2.0 * math.pi)


class ZeroLikelihood(ArithmeticError):
    """The observations have zero probability under the model."""

    def __init__(self, day: int, series_id: Optional[str] = None):
        self.day = day
        self.series_id = series_id
        where = f" in series {series_id!r}" if series_id is not None else ""
        super().__init__(f"zero likelihood on day {day}{where}")


@dataclass(frozen=True)
class PhaseGrid:
    """Uniform partition of the fractional phase into ``n_bins`` bins."""

    n_bins: int = 512

    def __post_init__(self):
        if self.n_bins < 2 or self.n_bins % 2:
            raise ValueError("n_bins must be an even integer >= 2")

    @property
    def width(self) -> float:
        return 1.0 / self.n_bins

    @property
    def edges(self) -> np.ndarray:
        return np.arange(self.n_bins + 1) / self.n_bins

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.n_bins) + 0.5) / self.n_bins

    @property
    def stage1_mask(self) -> np.ndarray:
        return np.arange(self.n_bins) < self.n_bins // 2

    def bin_of(self, theta: float) -> int:
        frac = theta - math.floor(theta)
        return min(int(frac * self.n_bins), self.n_bins - 1)


@dataclass
class PhaseDensity:
    """Piecewise-constant density of the fractional phase.

    ``weights`` are density values, so ``weights.sum() * grid.width == 1``
    for a normalized density.
    """

    grid: PhaseGrid
    weights: np.ndarray
    cycle_count: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.grid.n_bins,):
            raise ValueError("weights must have one entry per bin")
        if np.any(self.weights < 0):
            raise ValueError("density weights must be non-negative")

    @classmethod
    def from_masses(cls, grid, masses, cycle_count=0) -> "PhaseDensity":
        return cls(grid, np.asarray(masses, dtype=float) / grid.width, cycle_count)

    @classmethod
    def uniform(cls, grid: PhaseGrid) -> "PhaseDensity":
        return cls(grid, np.ones(grid.n_bins))

    @classmethod
    def point_mass(cls, grid: PhaseGrid, theta: float) -> "PhaseDensity":
        masses = np.zeros(grid.n_bins)
        masses[grid.bin_of(theta)] = 1.0
        return cls.from_masses(grid, masses, int(math.floor(theta)))

    @property
    def masses(self) -> np.ndarray:
        return self.weights * self.grid.width

    def total(self) -> float:
        return float(self.masses.sum())

    def normalized(self) -> "PhaseDensity":
        total = self.total()
        if not total > 0:
            raise ZeroLikelihood(0)
        return PhaseDensity(self.grid, self.weights / total, self.cycle_count)

    def mean(self) -> float:
        """Mean fractional phase."""
        return float(np.dot(self.masses, self.grid.centers) / self.total())


@dataclass
class JointPredictive:
    """One-step predictive masses split by whether an integer was crossed.

    ``uncrossed[i]`` (``crossed[i]``) is the probability that today's
    fractional phase is in bin ``i`` and no onset (an onset) happened since
    yesterday.
    """

    grid: PhaseGrid
    uncrossed: np.ndarray
    crossed: np.ndarray
    cycle_count: int = 0

    def total(self) -> float:
        return float(self.uncrossed.sum() + self.crossed.sum())

    @property
    def crossed_mass(self) -> float:
        return float(self.crossed.sum())

    def marginal(self) -> PhaseDensity:
        return PhaseDensity.from_masses(self.grid, self.uncrossed + self.crossed, self.cycle_count)


# -- transition kernel ------------------------------------------------------

def _integrated_sf(y, shape, rate):
    """``int_y^inf (1 - G(t)) dt`` for the gamma distribution function ``G``."""
    return (shape / rate) * special.gammaincc(shape + 1.0, rate * y) - y * special.gammaincc(shape, rate * y)


def integrated_cdf(y, shape, rate):
    """``int_0^y G(t) dt``; zero for ``y <= 0``."""
    y = np.maximum(np.asarray(y, dtype=float), 0.0)
    return y * special.gammainc(shape, rate * y) - (shape / rate) * special.gammainc(shape + 1.0, rate * y)


def increment_kernel(shape: float, rate: float, width: float, tail: float = TAIL_TOL) -> np.ndarray:
    """Bin-to-bin transfer masses of a gamma increment.

    Entry ``d`` is the probability that a phase uniformly distributed on a
    bin of the given width ends up ``d`` bins further on.  The kernel is cut
    where the remaining gamma tail mass drops below ``tail``.
    """
    # upper tail at x bins; first x where it falls below tail bounds the support
    n = 64
    while special.gammaincc(shape, rate * n * width) > tail:
        n *= 2
    x = np.arange(n + 1) * width
    sf = special.gammaincc(shape, rate * x)
    length = int(np.searchsorted(-sf, -tail)) + 2
    length = min(length, n)
    js = _integrated_sf(np.arange(length + 1) * width, shape, rate)
    out = np.empty(length)
    out[0] = integrated_cdf(width, shape, rate) / width
    out[1:] = (js[2:] - 2.0 * js[1:-1] + js[:-2]) / width
    return np.clip(out, 0.0, None)


def origin_kernel(shape: float, rate: float, width: float, tail: float = TAIL_TOL) -> np.ndarray:
    """Bin masses of a gamma increment started exactly at a bin's left edge."""
    n = 64
    while special.gammaincc(shape, rate * n * width) > tail:
        n *= 2
    out = np.diff(special.gammainc(shape, rate * np.arange(n + 1) * width))
    tail_sf = special.gammaincc(shape, rate * np.arange(1, n + 1) * width)
    return out[:int(np.searchsorted(-tail_sf, -tail)) + 1]


def _fold(k: np.ndarray, start: int, n: int) -> np.ndarray:
    rest = k[start:]
    if not rest.size:
        return np.zeros(n)
    return np.concatenate([rest, np.zeros((-rest.size) % n)]).reshape(-1, n).sum(axis=0)


class TransitionKernel:
    """Dense uncrossed/crossed transition matrices for one parameter set."""

    def __init__(self, params: ModelParams, grid: PhaseGrid):
        self.params = params
        self.grid = grid
        n = grid.n_bins
        half = n // 2
        self.uncrossed = np.zeros((n, n))
        self.crossed = np.zeros((n, n))
        for s, rows in ((1, range(0, half)), (2, range(half, n))):
            sp = params.stage_params(s)
            k = increment_kernel(sp.alpha, sp.beta, grid.width)
            # crossed mass for a source at bin i starts at offset n - i
            for i in rows:
                stay = min(n - i, len(k))
                self.uncrossed[i, i:i + stay] = k[:stay]
                self.crossed[i] = _fold(k, n - i, n)
        # a series that starts on an onset day starts exactly at phase 0
        k0 = origin_kernel(params.stage1.alpha, params.stage1.beta, grid.width)
        self.origin_uncrossed = np.zeros(n)
        self.origin_uncrossed[:min(n, len(k0))] = k0[:n]
        self.origin_crossed = _fold(k0, n, n)

    def matrix(self, z: int) -> np.ndarray:
        return self.crossed if z else self.uncrossed

    def origin(self, z: int) -> np.ndarray:
        return self.origin_crossed if z else self.origin_uncrossed


@lru_cache(maxsize=32)
def _cached_kernel(params: ModelParams, n_bins: int) -> TransitionKernel:
    return TransitionKernel(params, PhaseGrid(n_bins))


def transition_kernel(params: ModelParams, grid: PhaseGrid) -> TransitionKernel:
    return _cached_kernel(params, grid.n_bins)


def _emission_rows(y: np.ndarray, params: ModelParams, grid: PhaseGrid) -> np.ndarray:
    """Per-bin BBT likelihood for each value of ``y``; rows of ones where missing."""
    y = np.asarray(y, dtype=float)
    obs = ~np.isnan(y)
    out = np.ones((y.size, grid.n_bins))
    if not obs.any():
        return out
    yo = y[obs]
    if params.variant.implicit:
        mean = params.bbt_mean(grid.centers)
        sd = params.stage1.sigma
        r = (yo[:, None] - mean[None, :]) / sd
        out[obs] = np.exp(-0.5 * r * r) / (sd * _SQRT_2PI)
    else:
        half = grid.n_bins // 2
        for s, cols in ((1, slice(0, half)), (2, slice(half, None))):
            sp = params.stage_params(s)
            r = (yo - sp.mu) / sp.sigma
            out[obs, cols] = (np.exp(-0.5 * r * r) / (sp.sigma * _SQRT_2PI))[:, None]
    return out


def emission(y, params: ModelParams, grid: PhaseGrid) -> np.ndarray:
    """BBT likelihood at every bin (ones when ``y`` is missing)."""
    if y is None:
        return np.ones(grid.n_bins)
    return _emission_rows(np.array([y], dtype=float), params, grid)[0]


# -- single steps -----------------------------------------------------------

def predict_step(filtering: PhaseDensity, params: ModelParams) -> JointPredictive:
    """Push a filtering density one day forward."""
    kernel = transition_kernel(params, filtering.grid)
    p = filtering.masses
    return JointPredictive(filtering.grid, p @ kernel.uncrossed, p @ kernel.crossed,
                           filtering.cycle_count)


def update_step(predictive: JointPredictive, y, z: int, params: ModelParams, day: int = 0):
    """Condition a predictive structure on one day's ``(y, z)``.

    Returns the normalized filtering density and the log of the one-step
    predictive likelihood ``p(y, z | past)``.
    """
    mass = (predictive.crossed if z else predictive.uncrossed) * emission(y, params, predictive.grid)
    total = mass.sum()
    if not (total > 0 and np.isfinite(total)):
        raise ZeroLikelihood(day)
    density = PhaseDensity.from_masses(predictive.grid, mass / total, predictive.cycle_count + int(z))
    return density, float(math.log(total))


def default_predictive(grid: PhaseGrid, z1: int) -> JointPredictive:
    """Day-1 state when no initial density is given.

    A series starting with an onset starts at phase 0, held in the first bin
    (crossed); its day-2 transition is taken from the exact point rather than
    from a bin-uniform spread.  Any other series starts uniform on ``[0, 1)``
    (uncrossed).
    """
    n = grid.n_bins
    zeros = np.zeros(n)
    if z1:
        first = zeros.copy()
        first[0] = 1.0
        return JointPredictive(grid, zeros, first, 0)
    return JointPredictive(grid, np.full(n, 1.0 / n), zeros, 0)


# -- whole series -----------------------------------------------------------

@dataclass
class FilterOutput:
    """Per-day filtering and predictive masses of one series."""

    grid: PhaseGrid
    params: ModelParams
    series_id: str
    y: np.ndarray
    z: np.ndarray
    filtering_masses: np.ndarray      # (T, n_bins)
    predictive_masses: np.ndarray     # (T, n_bins), crossed + uncrossed
    predictive_crossed: np.ndarray    # (T,) crossed probability before conditioning on z
    log_increments: np.ndarray        # (T,)
    loglik: float = field(init=False)

    def __post_init__(self):
        self.loglik = float(np.sum(self.log_increments))

    @property
    def n_days(self) -> int:
        return len(self.z)

    @property
    def filtering(self) -> list:
        return [PhaseDensity.from_masses(self.grid, m, c)
                for m, c in zip(self.filtering_masses, np.cumsum(self.z[:len(self.filtering_masses)]))]

    @property
    def predictive(self) -> list:
        return [PhaseDensity.from_masses(self.grid, m) for m in self.predictive_masses]

    def to_dict(self) -> dict:
        return {
            "series_id": self.series_id,
            "n_bins": self.grid.n_bins,
            "loglik": self.loglik,
            "log_increments": self.log_increments.tolist(),
            "predictive_crossed": self.predictive_crossed.tolist(),
            "filtering_density": (self.filtering_masses / self.grid.width).tolist(),
        }


def filter_series(series: CycleSeries, params: ModelParams,
                  init: Optional[PhaseDensity] = None,
                  grid: Optional[PhaseGrid] = None) -> FilterOutput:
    """Run the filter over every day of ``series``.

    ``init`` is the density of the phase on the day *before* day 1; when it
    is omitted the day-1 state follows :func:`default_predictive`.
    """
    if grid is None:
        grid = init.grid if init is not None else PhaseGrid()
    if init is not None and init.grid != grid:
        raise ValueError("init density lives on a different grid")
    kernel = transition_kernel(params, grid)
    n_days = series.n_days
    filt = np.empty((n_days, grid.n_bins))
    pred = np.empty((n_days, grid.n_bins))
    crossed = np.empty(n_days)
    incs = np.empty(n_days)
    emis = _emission_rows(series.y, params, grid)
    if init is None:
        jp = default_predictive(grid, int(series.z[0]))
        uncr, cr = jp.uncrossed, jp.crossed
    else:
        p = init.masses / init.total()
        uncr, cr = p @ kernel.uncrossed, p @ kernel.crossed
    from_origin = init is None and bool(series.z[0])
    for t in range(n_days):
        if t == 1 and from_origin:
            uncr, cr = kernel.origin_uncrossed, kernel.origin_crossed
        elif t > 0:
            p = filt[t - 1]
            uncr, cr = p @ kernel.uncrossed, p @ kernel.crossed
        pred[t] = uncr + cr
        crossed[t] = cr.sum()
        mass = (cr if series.z[t] else uncr) * emis[t]
        total = mass.sum()
        if not (total > 0 and np.isfinite(total)):
            raise ZeroLikelihood(t + 1, series.subject_id)
        filt[t] = mass / total
        incs[t] = math.log(total)
    return FilterOutput(grid, params, series.subject_id, series.y.copy(), series.z.copy(),
                        filt, pred, crossed, incs)


def smooth_series(filter_output: FilterOutput, params: Optional[ModelParams] = None) -> list:
    """Fixed-interval smoothed densities for every day of a filtered series.

    The backward pass runs on the same joint (today, yesterday) transition
    used by the filter, with yesterday-to-today mass restricted to the
    component (crossed / uncrossed) that agrees with today's ``z``.
    """
    masses = smoothed_masses(filter_output, params)
    counts = np.cumsum(filter_output.z)
    return [PhaseDensity.from_masses(filter_output.grid, m, int(c)) for m, c in zip(masses, counts)]


def smoothed_masses(filter_output: FilterOutput, params: Optional[ModelParams] = None) -> np.ndarray:
    fo = filter_output
    params = fo.params if params is None else params
    kernel = transition_kernel(params, fo.grid)
    emis = _emission_rows(fo.y, params, fo.grid)
    n_days = fo.n_days
    out = np.empty_like(fo.filtering_masses)
    out[-1] = fo.filtering_masses[-1]
    r = np.ones(fo.grid.n_bins)
    for t in range(n_days - 1, 0, -1):
        r = kernel.matrix(int(fo.z[t])) @ (emis[t] * r)
        r /= r.max()
        s = fo.filtering_masses[t - 1] * r
        out[t - 1] = s / s.sum()
    return out


# -- batched evaluation -------------------------------------------------------

def _pad_series(series: Sequence[CycleSeries]):
    lengths = np.array([s.n_days for s in series])
    t_max = int(lengths.max())
    y = np.full((len(series), t_max), np.nan)
    z = np.zeros((len(series), t_max), dtype=np.int8)
    for i, s in enumerate(series):
        y[i, :s.n_days] = s.y
        z[i, :s.n_days] = s.z
    return lengths, y, z


def _forward_batch(series, params, grid, init=None, record=False):
    """Vectorized filter over many series.

    Returns ``(loglik, failed_day, filtering)`` where ``filtering`` is a list
    of per-series ``(T_i, n_bins)`` arrays when ``record`` is set.  Series
    with zero likelihood get ``-inf`` and the 1-based failing day.
    """
    kernel = transition_kernel(params, grid)
    n = grid.n_bins
    order = np.argsort([-s.n_days for s in series], kind="stable")
    ordered = [series[i] for i in order]
    lengths, y, z = _pad_series(ordered)
    n_series = len(ordered)
    loglik = np.zeros(n_series)
    failed = np.zeros(n_series, dtype=int)
    filt_rec = np.empty((n_series, y.shape[1], n)) if record else None

    starts_onset = np.zeros(n_series, dtype=bool)
    if init is None:
        p = np.zeros((n_series, n))
        starts_onset = z[:, 0] == 1
        p[starts_onset, 0] = 1.0
        p[~starts_onset] = 1.0 / n
    else:
        p0 = init.masses / init.total()
        p = np.tile(p0 @ kernel.matrix(0), (n_series, 1))
        on = z[:, 0] == 1
        if on.any():
            p[on] = p0 @ kernel.matrix(1)
    for t in range(y.shape[1]):
        active = int(np.sum(lengths > t))
        if t > 0:
            prev = p[:active]
            nxt = prev @ kernel.uncrossed
            onsets = np.flatnonzero(z[:active, t])
            if onsets.size:
                nxt[onsets] = prev[onsets] @ kernel.crossed
            if t == 1:
                origin = np.flatnonzero(starts_onset[:active])
                nxt[origin] = np.where(z[origin, 1, None] == 1, kernel.origin_crossed,
                                       kernel.origin_uncrossed)
            p = nxt
        else:
            p = p[:active]
        p = p * _emission_rows(y[:active, t], params, grid)
        total = p.sum(axis=1)
        bad = ~(total > 0) | ~np.isfinite(total)
        if bad.any():
            newly = bad & (failed[:active] == 0)
            failed[:active][newly] = t + 1
            p[bad] = 1.0 / n
            total[bad] = 1.0
        loglik[:active] += np.log(total)
        p = p / total[:, None]
        if record:
            filt_rec[:active, t] = p
    loglik[failed > 0] = -np.inf
    inv = np.empty_like(order)
    inv[order] = np.arange(n_series)
    filt_out = None
    if record:
        filt_out = [filt_rec[inv[i], :series[i].n_days] for i in range(n_series)]
    return loglik[inv], failed[inv], filt_out


def batch_loglik(series, params: ModelParams, grid: Optional[PhaseGrid] = None,
                 init: Optional[PhaseDensity] = None, chunk_size: int = 4096) -> np.ndarray:
    """Per-series log-likelihoods (``-inf`` where a series has zero likelihood)."""
    series = as_series_list(series)
    grid = grid or PhaseGrid()
    out = []
    for start in range(0, len(series), chunk_size):
        ll, _, _ = _forward_batch(series[start:start + chunk_size], params, grid, init)
        out.append(ll)
    return np.concatenate(out) if out else np.zeros(0)


def batch_filter_masses(series, params, grid=None, init=None):
    """Filtering masses for each series, plus per-series log-likelihoods."""
    series = as_series_list(series)
    grid = grid or PhaseGrid()
    ll, failed, filt = _forward_batch(series, params, grid, init, record=True)
    return ll, failed, filt


def batch_stage1_probabilities(series, params: ModelParams, grid: Optional[PhaseGrid] = None,
                               basis: str = "smoothed", chunk_size: int = 256) -> list:
    """Per-day probability of stage 1 for many series.

    Series with zero likelihood yield ``None``.
    """
    series = as_series_list(series)
    grid = grid or PhaseGrid()
    if basis not in ("smoothed", "filtering"):
        raise ValueError("basis must be 'smoothed' or 'filtering'")
    kernel = transition_kernel(params, grid)
    s1 = grid.stage1_mask
    out = []
    for start in range(0, len(series), chunk_size):
        chunk = series[start:start + chunk_size]
        _, failed, filt = _forward_batch(chunk, params, grid, record=True)
        for s, f, bad in zip(chunk, filt, failed):
            if bad:
                out.append(None)
                continue
            if basis == "filtering":
                out.append(f[:, s1].sum(axis=1))
                continue
            emis = _emission_rows(s.y, params, grid)
            probs = np.empty(s.n_days)
            probs[-1] = f[-1, s1].sum()
            r = np.ones(grid.n_bins)
            for t in range(s.n_days - 1, 0, -1):
                r = kernel.matrix(int(s.z[t])) @ (emis[t] * r)
                r /= r.max()
                m = f[t - 1] * r
                probs[t - 1] = m[s1].sum() / m.sum()
            out.append(probs)
    return out
