"""Input checks shared by the estimator front end and the CLI."""

from __future__ import annotations

import numbers

import numpy as np

from .model import CycleSeries, ModelParams


def check_series_list(X, name: str = "X") -> list:
    """Return ``X`` as a non-empty list of :class:`CycleSeries`."""
    if isinstance(X, CycleSeries):
        return [X]
    try:
        items = list(X)
    except TypeError:
        raise TypeError(f"{name} must be a CycleSeries or an iterable of them") from None
    if not items:
        raise ValueError(f"{name} is empty")
    for i, s in enumerate(items):
        if not isinstance(s, CycleSeries):
            raise TypeError(f"{name}[{i}] is {type(s).__name__}, expected CycleSeries")
    return items


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}")
    return int(value)


def check_even_bins(n_bins) -> int:
    n = check_positive_int(n_bins, "n_bins", 2)
    if n % 2:
        raise ValueError("n_bins must be even so that 0.5 is a bin edge")
    return n


def check_fitted(est, attr: str = "params_") -> ModelParams:
    params = getattr(est, attr, None)
    if params is None:
        raise AttributeError(f"{type(est).__name__} is not fitted yet; call fit() first")
    return params


def check_days(day, series: list) -> np.ndarray:
    """Per-series 1-based day indices, each within its series."""
    days = np.broadcast_to(np.asarray(day), (len(series),)).astype(int)
    for d, s in zip(days, series):
        if not 1 <= d <= s.n_days:
            raise ValueError(f"day {d} is outside series {s.subject_id!r} ({s.n_days} days)")
    return days
