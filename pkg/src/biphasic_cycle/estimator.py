"""scikit-learn style front end.

``X`` is always a list of :class:`~biphasic_cycle.model.CycleSeries`; the
model is unsupervised, so ``y`` is accepted and ignored.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_days, check_even_bins, check_fitted, check_positive_int, check_series_list
from .estimation import FitSpec, fit
from .filtering import PhaseGrid, batch_filter_masses, batch_loglik, batch_stage1_probabilities
from .model import ModelParams, Variant
from .onset import DEFAULT_K_MAX, ConvolutionEngine, onset_table

__all__ = ["BiphasicCycleModel"]


class BiphasicCycleModel(BaseEstimator):
    """Explicit biphasic state-space model with an estimator interface.

    Parameters
    ----------
    variant : {"FE", "RE", "I1", "I2", "I3"}
    n_bins : phase grid size.
    k_max : longest onset horizon, in days.
    init : starting parameters for the optimizer (``None`` for the default).
    max_evals, tol, coarse_bins, method, refine_method : optimizer settings,
        see :class:`~biphasic_cycle.estimation.FitSpec`.
    compute_ci : whether ``fit`` also computes Hessian-based intervals.
    basis : ``"smoothed"`` or ``"filtering"`` densities for ``transform``.
    """

    def __init__(self, variant="FE", n_bins=512, k_max=DEFAULT_K_MAX, init=None,
                 max_evals=4000, tol=1e-3, coarse_bins=64, method="nelder-mead",
                 refine_method=None, compute_ci=False, basis="smoothed"):
        self.variant = variant
        self.n_bins = n_bins
        self.k_max = k_max
        self.init = init
        self.max_evals = max_evals
        self.tol = tol
        self.coarse_bins = coarse_bins
        self.method = method
        self.refine_method = refine_method
        self.compute_ci = compute_ci
        self.basis = basis

    def _spec(self) -> FitSpec:
        return FitSpec(variant=Variant(self.variant), max_evals=self.max_evals, tol=self.tol,
                       n_bins=check_even_bins(self.n_bins), coarse_bins=self.coarse_bins,
                       method=self.method, refine_method=self.refine_method,
                       compute_ci=self.compute_ci)

    def fit(self, X, y=None):
        series = check_series_list(X)
        self.result_ = fit(series, self._spec(), self.init)
        self.params_ = self.result_.params
        self.n_series_ = len(series)
        return self

    @classmethod
    def from_params(cls, params: ModelParams, **kwargs) -> "BiphasicCycleModel":
        """An already fitted model with the given parameters."""
        est = cls(variant=params.variant.value, **kwargs)
        est.params_ = params
        est.result_ = None
        return est

    @property
    def _grid(self) -> PhaseGrid:
        return PhaseGrid(check_even_bins(self.n_bins))

    def score(self, X, y=None) -> float:
        """Total log-likelihood of ``X``."""
        params = check_fitted(self)
        return float(np.sum(batch_loglik(check_series_list(X), params, self._grid)))

    def predict_proba(self, X, day=None) -> np.ndarray:
        """Onset distributions ``h`` after ``day`` (default: last day), shape ``(n, k_max)``."""
        params = check_fitted(self)
        series = check_series_list(X)
        days = check_days([s.n_days for s in series] if day is None else day, series)
        k_max = check_positive_int(self.k_max, "k_max")
        grid = self._grid
        table = onset_table(params, grid, k_max, getattr(self, "engine_", None) or ConvolutionEngine())
        _, failed, filt = batch_filter_masses(series, params, grid)
        out = np.full((len(series), k_max), np.nan)
        for i, (d, f, bad) in enumerate(zip(days, filt, failed)):
            if bad and bad <= d:
                continue
            m = f[d - 1]
            out[i] = (m / m.sum()) @ table
        return out

    def predict(self, X, day=None) -> np.ndarray:
        """Most probable number of days to the next onset (``-1`` where the data are impossible)."""
        h = self.predict_proba(X, day)
        out = np.full(len(h), -1, dtype=int)
        ok = np.all(np.isfinite(h), axis=1)
        out[ok] = np.argmax(h[ok], axis=1) + 1
        return out

    def transform(self, X) -> list:
        """Per-day probability of the first stage for each series (``None`` if impossible)."""
        params = check_fitted(self)
        return batch_stage1_probabilities(check_series_list(X), params, self._grid, self.basis)

    def fit_transform(self, X, y=None, **fit_params) -> list:
        return self.fit(X, y).transform(X)
