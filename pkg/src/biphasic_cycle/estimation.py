"""Maximum likelihood estimation of the model parameters.

Optimization runs in an unconstrained space: log for shapes, rates and
standard deviations, identity for means and trigonometric coefficients.
The default search is Nelder-Mead with restarts, first on a coarse phase
grid and then on the full grid.  Confidence intervals come from a central
finite-difference Hessian in the transformed space, mapped back to the
natural scale.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np
from scipy import optimize

from .filtering import PhaseGrid, batch_loglik
from .model import CycleSeries, ModelParams, Variant, as_series_list
from .presets import DEFAULT_INIT

__all__ = [
    "Pooling",
    "FitSpec",
    "FitResult",
    "ParamTransform",
    "NonConvergence",
    "neg_loglik",
    "fit",
    "fit_pooled",
    "numerical_hessian",
    "confidence_intervals",
]

Z95 = 1.959963984540054


class NonConvergence(RuntimeWarning):
    """The optimizer ran out of budget before meeting its tolerance."""


class Pooling(str, Enum):
    GLOBAL = "Global"
    PER_GROUP = "PerGroup"
    PER_SUBJECT = "PerSubject"


class ParamTransform:
    """Map between :class:`ModelParams` of one variant and a flat vector."""

    def __init__(self, variant):
        self.variant = Variant(variant)
        v = self.variant
        if v is Variant.FE:
            self.names = ("alpha1", "beta1", "alpha2", "beta2", "mu1", "sigma1", "mu2", "sigma2")
            self.log_mask = np.array([1, 1, 1, 1, 0, 1, 0, 1], dtype=bool)
        elif v is Variant.RE:
            self.names = ("alpha", "beta", "mu1", "sigma1", "mu2", "sigma2")
            self.log_mask = np.array([1, 1, 0, 1, 0, 1], dtype=bool)
        else:
            trig = ["a"]
            for m in range(1, v.harmonics + 1):
                trig += [f"b{m}", f"c{m}"]
            self.names = ("alpha", "beta", "sigma", *trig)
            self.log_mask = np.array([1, 1, 1] + [0] * len(trig), dtype=bool)

    @property
    def size(self) -> int:
        return len(self.names)

    def natural(self, params: ModelParams) -> np.ndarray:
        s1, s2 = params.stage1, params.stage2
        v = self.variant
        if v is Variant.FE:
            vals = [s1.alpha, s1.beta, s2.alpha, s2.beta, s1.mu, s1.sigma, s2.mu, s2.sigma]
        elif v is Variant.RE:
            vals = [s1.alpha, s1.beta, s1.mu, s1.sigma, s2.mu, s2.sigma]
        else:
            vals = [s1.alpha, s1.beta, s1.sigma, *params.trig_coeffs]
        return np.array(vals, dtype=float)

    def to_vector(self, params: ModelParams) -> np.ndarray:
        if params.variant is not self.variant:
            params = params.with_variant(self.variant)
        x = self.natural(params)
        x[self.log_mask] = np.log(x[self.log_mask])
        return x

    def from_natural(self, vals) -> ModelParams:
        vals = [float(v) for v in vals]
        v = self.variant
        if v is Variant.FE:
            return ModelParams.explicit(*vals)
        if v is Variant.RE:
            return ModelParams.restricted(*vals)
        return ModelParams.implicit(vals[0], vals[1], vals[2], vals[3:], v.harmonics)

    def from_vector(self, x) -> ModelParams:
        vals = np.array(x, dtype=float)
        vals[self.log_mask] = np.exp(vals[self.log_mask])
        return self.from_natural(vals)


@dataclass(frozen=True)
class FitSpec:
    """Fitting configuration.

    ``coarse_bins`` runs a first optimization pass on a smaller grid
    (``None`` skips it).  ``method`` is ``"nelder-mead"`` or ``"l-bfgs-b"``
    (finite-difference gradients); ``refine_method`` overrides it for the
    pass on the full grid.
    """

    variant: Variant = Variant.FE
    pooling: Pooling = Pooling.GLOBAL
    max_evals: int = 4000
    tol: float = 1e-3
    n_bins: int = 512
    coarse_bins: Optional[int] = 64
    method: str = "nelder-mead"
    refine_method: Optional[str] = None
    restarts: int = 2
    simplex_step: float = 0.1
    compute_ci: bool = True

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "pooling", Pooling(self.pooling))
        for m in (self.method, self.refine_method or self.method):
            if m not in ("nelder-mead", "l-bfgs-b"):
                raise ValueError(f"unknown method {m!r}")
        if self.max_evals < 1 or self.tol <= 0:
            raise ValueError("max_evals must be >= 1 and tol > 0")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value, "pooling": self.pooling.value,
            "max_evals": self.max_evals, "tol": self.tol, "n_bins": self.n_bins,
            "coarse_bins": self.coarse_bins, "method": self.method,
            "refine_method": self.refine_method,
            "restarts": self.restarts, "simplex_step": self.simplex_step,
            "compute_ci": self.compute_ci,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitSpec":
        return cls(**d)


@dataclass
class FitResult:
    params: ModelParams
    loglik: float
    n_evals: int
    converged: bool = True
    message: str = ""
    hessian: Optional[np.ndarray] = None
    singular: bool = False
    ci95: Optional[dict] = None
    n_series: int = 0
    n_bins: int = 512
    trace: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def names(self) -> tuple:
        return ParamTransform(self.params.variant).names

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "loglik": self.loglik,
            "n_evals": self.n_evals,
            "converged": self.converged,
            "message": self.message,
            "hessian": None if self.hessian is None else np.asarray(self.hessian).tolist(),
            "singular": self.singular,
            "ci95": None if self.ci95 is None else {k: list(v) for k, v in self.ci95.items()},
            "n_series": self.n_series,
            "n_bins": self.n_bins,
            "trace": list(self.trace),
            "failures": [list(f) for f in self.failures],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        return cls(
            params=ModelParams.from_dict(d["params"]),
            loglik=float(d["loglik"]),
            n_evals=int(d["n_evals"]),
            converged=bool(d.get("converged", True)),
            message=d.get("message", ""),
            hessian=None if d.get("hessian") is None else np.asarray(d["hessian"], dtype=float),
            singular=bool(d.get("singular", False)),
            ci95=None if d.get("ci95") is None else {k: tuple(v) for k, v in d["ci95"].items()},
            n_series=int(d.get("n_series", 0)),
            n_bins=int(d.get("n_bins", 512)),
            trace=[float(v) for v in d.get("trace", [])],
            failures=[tuple(f) for f in d.get("failures", [])],
        )

    def __eq__(self, other):
        if not isinstance(other, FitResult):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def neg_loglik(params: ModelParams, data, n_bins: int = 512,
               diagnostics: Optional[dict] = None) -> float:
    """Minus the summed log-likelihood; ``inf`` if any series is impossible.

    When ``diagnostics`` is given, the ids of zero-likelihood series are
    stored under ``"failed"``.
    """
    series = as_series_list(data)
    ll = batch_loglik(series, params, PhaseGrid(n_bins))
    bad = ~np.isfinite(ll)
    if diagnostics is not None:
        diagnostics["failed"] = [series[i].subject_id for i in np.flatnonzero(bad)]
    if bad.any():
        return math.inf
    return -float(ll.sum())


class _Objective:
    """Transformed-space objective that counts evaluations and keeps the best point."""

    def __init__(self, data, transform: ParamTransform, n_bins: int, budget: int):
        self.data = data
        self.transform = transform
        self.n_bins = n_bins
        self.budget = budget
        self.n_evals = 0
        self.best_x = None
        self.best_f = math.inf
        self.trace = []

    def __call__(self, x) -> float:
        self.n_evals += 1
        try:
            params = self.transform.from_vector(x)
            f = neg_loglik(params, self.data, self.n_bins)
        except (ValueError, FloatingPointError, OverflowError):
            f = math.inf
        if not np.isfinite(f):
            f = math.inf
        if f < self.best_f:
            self.best_f = f
            self.best_x = np.array(x, dtype=float)
        self.trace.append(self.best_f)
        return f

    @property
    def exhausted(self) -> bool:
        return self.n_evals >= self.budget


def _nelder_mead(obj: _Objective, x0: np.ndarray, step: float, tol: float, budget: int):
    n = len(x0)
    simplex = np.vstack([x0] + [x0 + step * np.eye(n)[i] for i in range(n)])
    return optimize.minimize(
        obj, x0, method="Nelder-Mead",
        options={"initial_simplex": simplex, "maxfev": max(budget, n + 2),
                 "xatol": 1e-4, "fatol": tol, "adaptive": n > 6},
    )


def _run_pass(obj: _Objective, x0: np.ndarray, spec: FitSpec, step: float, budget: int,
              method: Optional[str] = None) -> bool:
    """One optimization pass with restarts; returns whether it converged."""
    start_evals = obj.n_evals
    f0 = obj(x0)
    if not np.isfinite(f0):
        raise ValueError("initial parameters give zero likelihood")
    method = method or spec.method
    converged = False
    x = x0
    for attempt in range(spec.restarts + 1):
        left = budget - (obj.n_evals - start_evals)
        if left <= 0:
            break
        before = obj.best_f
        if method == "nelder-mead":
            res = _nelder_mead(obj, x, step, spec.tol, left)
            ok = res.status == 0
        else:
            res = optimize.minimize(obj, x, method="L-BFGS-B",
                                    options={"maxfun": left, "ftol": spec.tol * 1e-6})
            ok = res.success
        x = obj.best_x
        converged = ok
        # restart from the best point with a fresh simplex until it stops improving
        if ok and before - obj.best_f < spec.tol:
            break
        step = step * 0.5
    return converged


def fit(data, spec: Optional[FitSpec] = None, init: Optional[ModelParams] = None) -> FitResult:
    """Maximize the likelihood over one pool of series."""
    series = as_series_list(data)
    if not series:
        raise ValueError("no data to fit")
    spec = spec or FitSpec()
    transform = ParamTransform(spec.variant)
    init = init or DEFAULT_INIT
    x0 = transform.to_vector(init)

    total_evals = 0
    trace: list = []
    if spec.coarse_bins and spec.coarse_bins < spec.n_bins:
        coarse = _Objective(series, transform, spec.coarse_bins, spec.max_evals)
        _run_pass(coarse, x0, spec, spec.simplex_step, spec.max_evals // 2)
        total_evals += coarse.n_evals
        fine_start = coarse.best_x
        fine_step = spec.simplex_step * 0.25
    else:
        fine_start, fine_step = x0, spec.simplex_step

    fine = _Objective(series, transform, spec.n_bins, spec.max_evals)
    # never end worse than the initialization on the reporting grid
    f_init = fine(x0)
    if not np.isfinite(f_init):
        raise ValueError("initial parameters give zero likelihood")
    converged = _run_pass(fine, fine_start, spec, fine_step, spec.max_evals - total_evals,
                          spec.refine_method)
    total_evals += fine.n_evals
    trace = fine.trace

    result = FitResult(
        params=transform.from_vector(fine.best_x),
        loglik=-fine.best_f,
        n_evals=total_evals,
        converged=converged,
        message="" if converged else "evaluation budget exhausted",
        n_series=len(series),
        n_bins=spec.n_bins,
        trace=[float(v) for v in trace],
    )
    if not converged:
        warnings.warn(NonConvergence(f"fit stopped after {total_evals} evaluations"))
    if spec.compute_ci:
        result = confidence_intervals(result, series)
    return result


def _group_key(s: CycleSeries, pooling: Pooling) -> str:
    if pooling is Pooling.PER_GROUP:
        return s.age_group or "unknown"
    if pooling is Pooling.PER_SUBJECT:
        return s.meta.get("subject", s.subject_id)
    return "all"


def fit_pooled(data, spec: Optional[FitSpec] = None, init: Optional[ModelParams] = None) -> dict:
    """Fit one parameter set per pool (age group, subject, or everything)."""
    spec = spec or FitSpec()
    groups: dict = {}
    for s in as_series_list(data):
        groups.setdefault(_group_key(s, spec.pooling), []).append(s)
    return {key: fit(members, spec, init) for key, members in sorted(groups.items())}


def numerical_hessian(func: Callable, x, rel_step: float = 1e-4, max_doublings: int = 8):
    """Central finite-difference Hessian.

    Each coordinate uses ``h = rel_step * max(|x_i|, 1)``, doubled while the
    second difference is below the evaluation noise floor.  Returns
    ``(hessian, n_evals)``.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    count = 0

    def f(v):
        nonlocal count
        count += 1
        return float(func(v))

    f0 = f(x)
    noise = 1e3 * np.finfo(float).eps * max(1.0, abs(f0))
    h = rel_step * np.maximum(np.abs(x), 1.0)
    diag = np.empty(n)
    for i in range(n):
        e = np.zeros(n)
        for _ in range(max_doublings + 1):
            e[i] = h[i]
            d2 = f(x + e) - 2.0 * f0 + f(x - e)
            if abs(d2) > noise:
                break
            h[i] *= 2.0
        diag[i] = d2 / h[i] ** 2
    hess = np.diag(diag)
    for i in range(n):
        for j in range(i + 1, n):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i] = h[i]
            ej[j] = h[j]
            v = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * h[i] * h[j])
            hess[i, j] = hess[j, i] = v
    return hess, count


def confidence_intervals(result: FitResult, data, rel_step: float = 1e-4,
                         max_condition: float = 1e12) -> FitResult:
    """Attach the Hessian and 95% intervals (or a singularity flag) to a fit."""
    series = as_series_list(data)
    transform = ParamTransform(result.params.variant)
    x = transform.to_vector(result.params)

    def obj(v):
        try:
            return neg_loglik(transform.from_vector(v), series, result.n_bins)
        except ValueError:
            return math.inf

    hess, n = numerical_hessian(obj, x, rel_step)
    result.n_evals += n
    result.hessian = hess
    ok = np.all(np.isfinite(hess))
    if ok:
        eig = np.linalg.eigvalsh(0.5 * (hess + hess.T))
        ok = eig.min() > 0 and eig.max() / eig.min() < max_condition
    if not ok:
        result.singular = True
        result.ci95 = None
        return result
    cov = np.linalg.inv(hess)
    se = np.sqrt(np.diag(cov))
    ci = {}
    for i, name in enumerate(transform.names):
        lo, hi = x[i] - Z95 * se[i], x[i] + Z95 * se[i]
        if transform.log_mask[i]:
            lo, hi = math.exp(lo), math.exp(hi)
        ci[name] = (float(lo), float(hi))
    if "mu1" in transform.names:
        i1, i2 = transform.names.index("mu1"), transform.names.index("mu2")
        c = np.zeros(len(x))
        c[i1], c[i2] = -1.0, 1.0
        shift = x[i2] - x[i1]
        sd = math.sqrt(max(float(c @ cov @ c), 0.0))
        ci["shift"] = (float(shift - Z95 * sd), float(shift + Z95 * sd))
    result.singular = False
    result.ci95 = ci
    return result
