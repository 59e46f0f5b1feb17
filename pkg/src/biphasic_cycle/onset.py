"""Predictive distribution of the day of the next menstruation onset.

``f(k | theta)`` is the probability that the next onset happens ``k`` days
after a day with phase ``theta``.  In the second stage it is a difference of
gamma distribution functions.  In the first stage the increments switch to
the second-stage law at an unknown day, so ``f`` is a sum over the last day
``j`` spent in stage 1 of terms ``phi(j, k)`` that involve convolutions of
truncated gamma densities.

The convolutions run on a uniform grid of *cells* in increment space.  A
density is stored as cell masses and is taken to be uniform within a cell,
which makes the cell-to-cell gamma transfer exact (it is a second difference
of the integrated gamma distribution function) and keeps the rest of the
error second order in the cell width.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import fft as sfft
from scipy import special

from .filtering import PhaseDensity, PhaseGrid, integrated_cdf
from .model import ModelParams, stage

__all__ = [
    "TruncatedDensity",
    "CellGrid",
    "ConvolutionEngine",
    "OnsetDistribution",
    "f_stage2",
    "f_equal_increments",
    "phi",
    "phi_table",
    "f_stage1",
    "onset_probabilities",
    "onset_table",
    "onset_distribution",
    "point_predict",
]

DEFAULT_K_MAX = 90
WINDOW_TOL = 1e-12


def _cdf(x, shape, rate):
    """Gamma distribution function that accepts ``shape == 0`` (point mass at 0)."""
    x = np.asarray(x, dtype=float)
    shape = np.asarray(shape, dtype=float)
    out = special.gammainc(np.where(shape > 0, shape, 1.0), rate * np.maximum(x, 0.0))
    return np.where(shape > 0, out, np.where(x >= 0, 1.0, 0.0))


@dataclass
class CellGrid:
    """Cells ``[offset + i*delta, offset + (i+1)*delta)`` plus a lead cell ``[0, offset)``."""

    delta: float
    offset: float
    n_cells: int

    @property
    def lo(self) -> np.ndarray:
        return self.offset + self.delta * np.arange(self.n_cells)

    @property
    def hi(self) -> np.ndarray:
        return self.lo + self.delta


@dataclass
class TruncatedDensity:
    """A cell density conditioned on lying in ``window = (a, b)``.

    ``weights`` are renormalized density values on the cells of ``grid``
    (zero outside the window); ``mass`` is the probability of the window
    before renormalization.
    """

    grid: CellGrid
    window: tuple
    weights: np.ndarray
    mass: float

    @property
    def masses(self) -> np.ndarray:
        return self.weights * self.grid.delta


class ConvolutionEngine:
    """FFT convolution of cell densities with gamma laws.

    ``n_points`` cells cover ``[0, support]``.  ``0.5`` must be a whole
    number of cells so that both stage boundaries fall on cell edges.
    Convolutions are linear (zero padded); mass pushed beyond ``support`` is
    dropped.  The engine memoizes kernels, per-parameter tables and per-phase
    ``phi`` tables, so it is meant to have a single owner.
    """

    def __init__(self, n_points: int = 4096, support: float = 4.0, cache_size: int = 4096):
        if n_points < 2 or support <= 0:
            raise ValueError("n_points must be >= 2 and support > 0")
        self.n_points = int(n_points)
        self.support = float(support)
        self.delta = self.support / self.n_points
        half = 0.5 / self.delta
        if abs(half - round(half)) > 1e-9 or round(half) < 1:
            raise ValueError("0.5 must be a whole number of cells")
        self.n_window = int(round(half))
        if 2 * self.n_window > self.n_points:
            raise ValueError("support must be at least 1")
        self._cache_size = cache_size
        self._phi_cache: OrderedDict = OrderedDict()
        self._kernel_cache: dict = {}
        self._q_cache: dict = {}

    # -- primitives -------------------------------------------------------
    def cell_kernel(self, shape: float, rate: float, length: int) -> np.ndarray:
        """Mass moved ``d`` cells forward by a gamma increment, ``d < length``."""
        key = (shape, rate, length)
        k = self._kernel_cache.get(key)
        if k is None:
            d = self.delta
            ig = integrated_cdf(np.arange(-1, length + 1) * d, shape, rate)
            k = (ig[2:] - 2.0 * ig[1:-1] + ig[:-2]) / d
            k = np.clip(k, 0.0, None)
            self._kernel_cache[key] = k
        return k

    def convolve(self, masses: np.ndarray, shape: float, rate: float,
                 grid: Optional[CellGrid] = None, lead_mass: float = 0.0,
                 n_out: Optional[int] = None) -> np.ndarray:
        """Cell masses of ``X + e`` with ``e ~ Gamma(shape, rate)``.

        ``masses`` are the cell masses of ``X`` on ``grid``; ``lead_mass`` is
        the mass of the lead cell ``[0, grid.offset)``.
        """
        masses = np.asarray(masses, dtype=float)
        if grid is None:
            grid = CellGrid(self.delta, 0.0, len(masses))
        n_out = self.n_points if n_out is None else n_out
        kern = self.cell_kernel(shape, rate, n_out)
        n_in = min(len(masses), n_out)
        size = sfft.next_fast_len(n_in + n_out - 1, real=True)
        out = sfft.irfft(sfft.rfft(masses[:n_in], size) * sfft.rfft(kern, size), size)[:n_out]
        if lead_mass:
            out = out + lead_mass * self.lead_row(grid, shape, rate, n_out)
        return np.clip(out, 0.0, None)

    def lead_row(self, grid: CellGrid, shape: float, rate: float, n_out: int) -> np.ndarray:
        """Transfer from a uniform mass on ``[0, offset)`` to each regular cell."""
        o = grid.offset
        if o <= 0:
            return np.zeros(n_out)
        a = o + self.delta * np.arange(n_out)
        b = a + self.delta
        ig = lambda x: integrated_cdf(x, shape, rate)  # noqa: E731
        return np.clip((ig(b) - ig(b - o) - ig(a) + ig(a - o)) / o, 0.0, None)

    def gamma_cells(self, shape: float, rate: float, grid: CellGrid):
        """Exact cell masses of a gamma law and the mass of the lead cell."""
        edges = np.concatenate([[grid.offset], grid.hi])
        cdf = _cdf(edges, shape, rate)
        return np.diff(cdf), float(cdf[0])

    def truncate(self, masses: np.ndarray, grid: CellGrid, first: int, stop: int,
                 window: tuple) -> TruncatedDensity:
        """Condition cell masses on cells ``first <= i < stop``."""
        w = np.zeros_like(masses)
        w[first:stop] = masses[first:stop]
        total = float(w.sum())
        if total < WINDOW_TOL:
            return TruncatedDensity(grid, window, np.zeros_like(masses), total)
        return TruncatedDensity(grid, window, w / total / grid.delta, total)

    def cells_for(self, theta: float) -> tuple:
        """Cell grid aligned to the stage boundary of a first-stage phase.

        Returns ``(grid, n_below)`` where the regular cells ``< n_below`` lie
        below the stage boundary and the next ``n_window`` cells cover the
        rest of the cycle.
        """
        frac = theta - math.floor(theta)
        b1 = 0.5 - frac
        d = self.delta
        o = math.fmod(b1, d)
        if o < 1e-9 * d or d - o < 1e-9 * d:
            o = 0.0
        n_below = int(round((b1 - o) / d))
        return CellGrid(d, o, n_below + self.n_window), n_below

    # -- per-parameter tables ------------------------------------------------
    def stage2_survival_table(self, params: ModelParams, k_max: int) -> np.ndarray:
        """``Q[m, c]``: cell average of ``G(b2 - x; m alpha2, beta2)`` over window cell ``c``."""
        key = (params.stage2.alpha, params.stage2.beta, k_max)
        q = self._q_cache.get(key)
        if q is None:
            nw, d = self.n_window, self.delta
            a2, b2 = params.stage2.alpha, params.stage2.beta
            dist = (nw - np.arange(nw)) * d  # b2 - lower edge of each window cell
            q = np.empty((k_max + 1, nw))
            q[0] = 1.0
            for m in range(1, k_max + 1):
                q[m] = (integrated_cdf(dist, m * a2, b2) - integrated_cdf(dist - d, m * a2, b2)) / d
            q = np.clip(q, 0.0, 1.0)
            self._q_cache[key] = q
        return q

    def phi_table(self, theta: float, params: ModelParams, k_max: int) -> np.ndarray:
        """``phi[j-1, k-1]`` for ``1 <= j <= k <= k_max`` at a first-stage phase."""
        frac = theta - math.floor(theta)
        key = (params.stage1, params.stage2, round(frac, 14), k_max)
        hit = self._phi_cache.get(key)
        if hit is not None:
            self._phi_cache.move_to_end(key)
            return hit
        table = self._compute_phi(frac, params, k_max)
        self._phi_cache[key] = table
        if len(self._phi_cache) > self._cache_size:
            self._phi_cache.popitem(last=False)
        return table

    def _compute_phi(self, frac: float, params: ModelParams, k_max: int) -> np.ndarray:
        a1, r1 = params.stage1.alpha, params.stage1.beta
        b1 = 0.5 - frac
        b2 = 1.0 - frac
        grid, n1 = self.cells_for(frac)
        nw = self.n_window
        win = slice(n1, n1 + nw)
        phi = np.zeros((k_max, k_max))
        windows = np.zeros((k_max, nw))

        # j = 1: today is the last first-stage day
        cells, _ = self.gamma_cells(a1, r1, grid)
        windows[0] = cells[win]
        phi[0, 0] = float(special.gammaincc(a1, r1 * b2))

        # j > 1: u = sum of j-1 first-stage increments stays below b1
        shapes = a1 * np.arange(1, k_max)
        p_stay = _cdf(b1, shapes, r1)                      # P(u_j < b1)
        n_j = int(np.sum(p_stay > 1e-16))
        if n_j:
            edges = np.concatenate([[grid.offset], grid.offset + self.delta * np.arange(1, n1 + 1)])
            cdf = _cdf(edges[None, :], shapes[:n_j, None], r1)
            lead = cdf[:, 0]
            u = np.diff(cdf, axis=1)                           # regular cells below b1
            n_out = n1 + nw
            kern = self.cell_kernel(a1, r1, n_out)
            size = sfft.next_fast_len(max(n1, 1) + n_out - 1, real=True)
            if n1:
                v = sfft.irfft(sfft.rfft(u, size, axis=1) * sfft.rfft(kern, size)[None, :],
                               size, axis=1)[:, :n_out]
            else:
                v = np.zeros((n_j, n_out))
            if grid.offset > 0:
                v = v + lead[:, None] * self.lead_row(grid, a1, r1, n_out)[None, :]
            v = np.clip(v, 0.0, None)
            windows[1:1 + n_j] = v[:, win]
            below_next = _cdf(b1, a1 * np.arange(2, n_j + 2), r1)  # P(u_{j+1} < b1)
            jj = np.arange(1, 1 + n_j)
            budget = np.clip(p_stay[:n_j] - below_next, 0.0, None)
            wsum = windows[jj].sum(axis=1)
            # the grid can overshoot the exact budget slightly; cap it so no
            # row carries more mass than P(stage 1 ends on day j)
            over = wsum > budget
            if np.any(over):
                windows[jj[over]] *= (budget[over] / wsum[over])[:, None]
                wsum = np.minimum(wsum, budget)
            phi[jj, jj] = budget - wsum

        small = windows.sum(axis=1) < WINDOW_TOL
        windows[small] = 0.0
        q = self.stage2_survival_table(params, k_max)
        drop = q[:-1] - q[1:]                                # onset exactly m days after leaving
        for j in range(min(k_max, 1 + n_j)):
            m_max = k_max - 1 - j
            if m_max <= 0 or small[j]:
                continue
            phi[j, j + 1:] = drop[:m_max] @ windows[j]
        return np.clip(phi, 0.0, 1.0)

    def phi_convolution(self, j: int, k: int, theta: float, params: ModelParams) -> float:
        """``phi(j, k)`` evaluated term by term with explicit convolutions.

        Follows the chain of truncated densities literally (``u``, ``v``,
        ``w``) instead of collapsing the second-stage sums into gamma
        distribution functions; used to cross-check :meth:`phi_table`.
        """
        a1, r1 = params.stage1.alpha, params.stage1.beta
        a2, r2 = params.stage2.alpha, params.stage2.beta
        grid, n1 = self.cells_for(theta)
        nw = self.n_window
        n_out = n1 + nw
        v_lead = 0.0
        if j == 1:
            if k == 1:
                return float(special.gammaincc(a1, r1 * (n_out * self.delta + grid.offset)))
            v, _ = self.gamma_cells(a1, r1, grid)
            p_a = 1.0
        else:
            u, lead = self.gamma_cells((j - 1) * a1, r1, grid)
            u = u.copy()
            u[n1:] = 0.0
            p_a = float(u.sum() + lead)
            if p_a < WINDOW_TOL:
                return 0.0
            v = self.convolve(u / p_a, a1, r1, grid, lead / p_a, n_out)
            o = grid.offset
            if o > 0:
                # part of the lead cell that stays inside it
                v_lead = lead / p_a * float(integrated_cdf(o, a1, r1)) / o
        if k == j:
            return p_a * max(1.0 - v_lead - float(v[:n_out].sum()), 0.0)
        v_star = self.truncate(v, grid, n1, n_out, (n1, n_out))
        if v_star.mass < WINDOW_TOL:
            return 0.0
        p_b = v_star.mass
        if k == j + 1:
            after = self.convolve(v_star.masses, a2, r2, grid, 0.0, n_out)
            return p_a * p_b * max(1.0 - float(after.sum()), 0.0)
        w = self.convolve(v_star.masses, (k - j - 1) * a2, r2, grid, 0.0, n_out)
        w_star = self.truncate(w, grid, n1, n_out, (n1, n_out))
        p_c = w_star.mass
        if p_c < WINDOW_TOL:
            return 0.0
        after = self.convolve(w_star.masses, a2, r2, grid, 0.0, n_out)
        return p_a * p_b * p_c * max(1.0 - float(after.sum()), 0.0)


_DEFAULT_ENGINE: Optional[ConvolutionEngine] = None


def default_engine() -> ConvolutionEngine:
    global _DEFAULT_ENGINE
    if _DEFAULT_ENGINE is None:
        _DEFAULT_ENGINE = ConvolutionEngine()
    return _DEFAULT_ENGINE


# -- conditional onset probabilities ---------------------------------------

def _check_k(k):
    if int(k) != k or k < 1:
        raise ValueError("k must be a positive integer")
    return int(k)


def f_stage2(k, theta: float, params: ModelParams):
    """Onset probability ``k`` days ahead from a second-stage phase."""
    if stage(theta) != 2:
        raise ValueError("f_stage2 requires a second-stage phase")
    dist = math.ceil(theta) - theta
    a2, r2 = params.stage2.alpha, params.stage2.beta
    ks = np.atleast_1d(np.asarray(k))
    for kk in ks:
        _check_k(kk)
    ks = ks.astype(float)
    out = _cdf(dist, (ks - 1) * a2, r2) - _cdf(dist, ks * a2, r2)
    out = np.clip(out, 0.0, 1.0)
    return float(out[0]) if np.ndim(k) == 0 else out


def f_equal_increments(k, theta: float, alpha: float, beta: float):
    """Onset probability when both stages share one increment law."""
    frac = theta - math.floor(theta)
    dist = 1.0 - frac
    ks = np.atleast_1d(np.asarray(k, dtype=float))
    out = np.clip(_cdf(dist, (ks - 1) * alpha, beta) - _cdf(dist, ks * alpha, beta), 0.0, 1.0)
    return float(out[0]) if np.ndim(k) == 0 else out


def phi_table(theta: float, params: ModelParams, k_max: int = DEFAULT_K_MAX,
              engine: Optional[ConvolutionEngine] = None) -> np.ndarray:
    if stage(theta) != 1:
        raise ValueError("phi is defined for first-stage phases")
    engine = engine or default_engine()
    return engine.phi_table(theta, params, k_max)


def phi(j: int, k: int, theta: float, params: ModelParams,
        engine: Optional[ConvolutionEngine] = None) -> float:
    """Probability that stage 1 ends on day ``t + j - 1`` and the onset falls on day ``t + k``."""
    j, k = _check_k(j), _check_k(k)
    if j > k:
        raise ValueError("phi requires j <= k")
    return float(phi_table(theta, params, k, engine)[j - 1, k - 1])


def f_stage1(k, theta: float, params: ModelParams,
             engine: Optional[ConvolutionEngine] = None):
    """Onset probability ``k`` days ahead from a first-stage phase."""
    ks = np.atleast_1d(np.asarray(k))
    for kk in ks:
        _check_k(kk)
    table = phi_table(theta, params, int(ks.max()), engine)
    f = table.sum(axis=0)
    out = np.clip(f[ks.astype(int) - 1], 0.0, 1.0)
    return float(out[0]) if np.ndim(k) == 0 else out


def onset_probabilities(theta: float, params: ModelParams, k_max: int = DEFAULT_K_MAX,
                        engine: Optional[ConvolutionEngine] = None) -> np.ndarray:
    """``f(k | theta)`` for ``k = 1..k_max``."""
    ks = np.arange(1, k_max + 1)
    if params.equal_increments:
        return f_equal_increments(ks, theta, params.stage1.alpha, params.stage1.beta)
    if stage(theta) == 2:
        return f_stage2(ks, theta, params)
    return f_stage1(ks, theta, params, engine)


_TABLE_CACHE: OrderedDict = OrderedDict()


def onset_table(params: ModelParams, grid: PhaseGrid, k_max: int = DEFAULT_K_MAX,
                engine: Optional[ConvolutionEngine] = None) -> np.ndarray:
    """``F[i, k-1] = f(k | center of bin i)`` for every bin of the phase grid."""
    engine = engine or default_engine()
    key = (params.stage1, params.stage2, grid.n_bins, k_max, engine.n_points, engine.support)
    hit = _TABLE_CACHE.get(key)
    if hit is not None:
        return hit
    centers = grid.centers
    table = np.empty((grid.n_bins, k_max))
    if params.equal_increments:
        ks = np.arange(1, k_max + 1, dtype=float)
        dist = 1.0 - centers[:, None]
        a, b = params.stage1.alpha, params.stage1.beta
        table[:] = np.clip(_cdf(dist, (ks - 1) * a, b) - _cdf(dist, ks * a, b), 0.0, 1.0)
    else:
        for i, c in enumerate(centers):
            table[i] = onset_probabilities(float(c), params, k_max, engine)
    _TABLE_CACHE[key] = table
    if len(_TABLE_CACHE) > 16:
        _TABLE_CACHE.popitem(last=False)
    return table


@dataclass
class OnsetDistribution:
    """``probs[k-1]`` is the probability that the next onset is ``k`` days ahead."""

    probs: np.ndarray
    tail: float

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if np.any(self.probs < 0):
            raise ValueError("probabilities must be non-negative")

    @property
    def k_max(self) -> int:
        return len(self.probs)

    @property
    def days(self) -> np.ndarray:
        return np.arange(1, self.k_max + 1)

    def mean(self) -> float:
        """Mean of the distribution truncated to ``1..k_max``."""
        return float(np.dot(self.days, self.probs) / self.probs.sum())

    def to_dict(self) -> dict:
        return {"k_max": self.k_max, "probs": self.probs.tolist(), "tail": float(self.tail),
                "point_prediction": point_predict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "OnsetDistribution":
        return cls(np.asarray(d["probs"], dtype=float), float(d["tail"]))

    def __eq__(self, other):
        if not isinstance(other, OnsetDistribution):
            return NotImplemented
        return np.array_equal(self.probs, other.probs) and self.tail == other.tail


def onset_distribution(filtering: PhaseDensity, params: ModelParams,
                       engine: Optional[ConvolutionEngine] = None,
                       k_max: int = DEFAULT_K_MAX) -> OnsetDistribution:
    """Mix ``f(k | theta)`` over a filtering density."""
    table = onset_table(params, filtering.grid, k_max, engine)
    masses = filtering.masses / filtering.total()
    probs = np.clip(masses @ table, 0.0, None)
    return OnsetDistribution(probs, max(0.0, 1.0 - float(probs.sum())))


def point_predict(h) -> int:
    """Most probable number of days to the next onset; ties go to the earliest day."""
    probs = h.probs if isinstance(h, OnsetDistribution) else np.asarray(h, dtype=float)
    if probs.size == 0:
        raise ValueError("empty onset distribution")
    return int(np.argmax(probs)) + 1
