"""Domain types and elementary densities of the biphasic cycle model.

The latent menstrual phase ``theta`` advances by a positive gamma increment
each day.  One unit of phase is one full cycle; the fractional part in
``[0, 0.5)`` is the first (follicular) stage and ``[0.5, 1)`` the second
(luteal) stage.  Both the increment distribution and the BBT observation
distribution switch with the stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Variant",
    "StageParams",
    "ModelParams",
    "CycleSeries",
    "stage",
    "gamma_pdf",
    "gamma_cdf",
    "gamma_sf",
    "transition_density",
    "bbt_likelihood",
    "menstruation_likelihood",
]


class Variant(str, Enum):
    """Model variants compared in the prediction benchmark."""

    FE = "FE"  # fully explicit
    RE = "RE"  # restricted explicit: one (alpha, beta) for both stages
    I1 = "I1"  # implicit, trigonometric mean with 1..3 harmonics
    I2 = "I2"
    I3 = "I3"

    @property
    def harmonics(self) -> int:
        return {"I1": 1, "I2": 2, "I3": 3}.get(self.value, 0)

    @property
    def implicit(self) -> bool:
        return self.harmonics > 0


@dataclass(frozen=True)
class StageParams:
    """Increment (gamma shape/rate) and BBT (mean/sd) parameters of one stage."""

    alpha: float
    beta: float
    mu: float
    sigma: float

    def __post_init__(self):
        for name in ("alpha", "beta", "sigma"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and > 0, got {value!r}")
        if not np.isfinite(self.mu):
            raise ValueError(f"mu must be finite, got {self.mu!r}")


@dataclass(frozen=True)
class ModelParams:
    """Full parameter set of a cycle model.

    For the implicit variants ``stage1`` and ``stage2`` must carry the same
    ``alpha``, ``beta`` and ``sigma``; their ``mu`` is ignored and the BBT mean
    is ``a + sum_m b_m cos(2 pi m theta) + c_m sin(2 pi m theta)`` with
    ``trig_coeffs = (a, b_1, c_1, ..., b_M, c_M)``.
    """

    stage1: StageParams
    stage2: StageParams
    variant: Variant = Variant.FE
    trig_coeffs: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        s1, s2 = self.stage1, self.stage2
        same_increment = s1.alpha == s2.alpha and s1.beta == s2.beta
        if self.variant is Variant.RE and not same_increment:
            raise ValueError("RE variant requires stage1 and stage2 to share (alpha, beta)")
        if self.variant.implicit:
            if not same_increment or s1.sigma != s2.sigma:
                raise ValueError("implicit variants use a single (alpha, beta, sigma)")
            if self.trig_coeffs is None:
                raise ValueError(f"{self.variant.value} requires trig_coeffs")
            coeffs = tuple(float(c) for c in self.trig_coeffs)
            if len(coeffs) != 1 + 2 * self.variant.harmonics:
                raise ValueError(
                    f"{self.variant.value} expects {1 + 2 * self.variant.harmonics} "
                    f"trig coefficients, got {len(coeffs)}"
                )
            if not all(np.isfinite(coeffs)):
                raise ValueError("trig coefficients must be finite")
            object.__setattr__(self, "trig_coeffs", coeffs)
        elif self.trig_coeffs is not None:
            raise ValueError("trig_coeffs are only valid for implicit variants")

    # -- constructors -----------------------------------------------------
    @classmethod
    def explicit(cls, alpha1, beta1, alpha2, beta2, mu1, sigma1, mu2, sigma2):
        """Fully explicit parameters in the order used by the estimates table."""
        return cls(
            StageParams(alpha1, beta1, mu1, sigma1),
            StageParams(alpha2, beta2, mu2, sigma2),
            Variant.FE,
        )

    @classmethod
    def restricted(cls, alpha, beta, mu1, sigma1, mu2, sigma2):
        return cls(
            StageParams(alpha, beta, mu1, sigma1),
            StageParams(alpha, beta, mu2, sigma2),
            Variant.RE,
        )

    @classmethod
    def implicit(cls, alpha, beta, sigma, trig_coeffs, harmonics=None):
        coeffs = tuple(float(c) for c in trig_coeffs)
        if harmonics is None:
            harmonics = (len(coeffs) - 1) // 2
        variant = Variant(f"I{harmonics}")
        s = StageParams(alpha, beta, coeffs[0], sigma)
        return cls(s, s, variant, coeffs)

    # -- accessors ---------------------------------------------------------
    def stage_params(self, s: int) -> StageParams:
        return self.stage1 if s == 1 else self.stage2

    @property
    def equal_increments(self) -> bool:
        return self.stage1.alpha == self.stage2.alpha and self.stage1.beta == self.stage2.beta

    def bbt_mean(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if self.variant.implicit:
            c = self.trig_coeffs
            mean = np.full_like(theta, c[0])
            for m in range(1, self.variant.harmonics + 1):
                arg = 2.0 * np.pi * m * theta
                mean = mean + c[2 * m - 1] * np.cos(arg) + c[2 * m] * np.sin(arg)
            return mean
        return np.where(stage(theta) == 1, self.stage1.mu, self.stage2.mu)

    def bbt_sd(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return np.where(stage(theta) == 1, self.stage1.sigma, self.stage2.sigma)

    def with_variant(self, variant) -> "ModelParams":
        """Nearest parameter set of another variant (used for warm starts)."""
        variant = Variant(variant)
        s1, s2 = self.stage1, self.stage2
        if variant is Variant.FE:
            if self.variant.implicit:
                return ModelParams.explicit(s1.alpha, s1.beta, s1.alpha, s1.beta,
                                            float(self.bbt_mean(0.25)), s1.sigma,
                                            float(self.bbt_mean(0.75)), s1.sigma)
            return replace(self, variant=Variant.FE, trig_coeffs=None)
        alpha = math.sqrt(s1.alpha * s2.alpha)
        beta = math.sqrt(s1.beta * s2.beta)
        if variant is Variant.RE:
            return ModelParams.restricted(alpha, beta, s1.mu, s1.sigma, s2.mu, s2.sigma)
        # square-wave mean projected onto the first harmonics
        mid = 0.5 * (s1.mu + s2.mu)
        amp = (s2.mu - s1.mu)
        coeffs = [mid]
        for m in range(1, variant.harmonics + 1):
            c_m = -2.0 * amp / (np.pi * m) if m % 2 else 0.0
            coeffs += [0.0, c_m]
        sigma = math.sqrt(0.5 * (s1.sigma ** 2 + s2.sigma ** 2))
        return ModelParams.implicit(alpha, beta, sigma, coeffs, variant.harmonics)

    def to_dict(self) -> dict:
        d = {
            "variant": self.variant.value,
            "stage1": {k: float(getattr(self.stage1, k)) for k in ("alpha", "beta", "mu", "sigma")},
            "stage2": {k: float(getattr(self.stage2, k)) for k in ("alpha", "beta", "mu", "sigma")},
        }
        if self.trig_coeffs is not None:
            d["trig_coeffs"] = [float(c) for c in self.trig_coeffs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        coeffs = d.get("trig_coeffs")
        return cls(
            StageParams(**d["stage1"]),
            StageParams(**d["stage2"]),
            Variant(d.get("variant", "FE")),
            tuple(coeffs) if coeffs is not None else None,
        )


@dataclass
class CycleSeries:
    """Daily records of one series (one cycle in the application).

    ``y`` holds standardized BBT with ``nan`` for missing days and ``z`` the
    onset indicator.  Simulated series additionally carry the true phase.
    """

    subject_id: str
    y: np.ndarray
    z: np.ndarray
    age_group: Optional[str] = None
    theta: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        z = np.asarray(self.z).ravel()
        if z.shape != self.y.shape:
            raise ValueError("y and z must have the same length")
        if len(z) == 0:
            raise ValueError("series must contain at least one day")
        if not np.all((z == 0) | (z == 1)):
            raise ValueError("z must be binary and never missing")
        self.z = z.astype(np.int8)
        if np.all(np.isnan(self.y)):
            raise ValueError(f"series {self.subject_id!r} has no BBT observation")
        if np.any(np.isinf(self.y)):
            raise ValueError("y must be finite or nan")
        if self.theta is not None:
            self.theta = np.asarray(self.theta, dtype=float).ravel()
            if self.theta.shape != self.y.shape:
                raise ValueError("theta must have the same length as y")

    def __len__(self) -> int:
        return len(self.z)

    @property
    def n_days(self) -> int:
        return len(self.z)

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.y)

    @property
    def onset_days(self) -> np.ndarray:
        """1-based day indices with z = 1."""
        return np.flatnonzero(self.z) + 1

    @property
    def cycle_length(self) -> Optional[int]:
        """Days from the first onset to the day before the last onset."""
        days = self.onset_days
        if len(days) < 2:
            return None
        return int(days[-1] - days[0])

    def truncated(self, n_days: int) -> "CycleSeries":
        """The first ``n_days`` days of the series."""
        theta = None if self.theta is None else self.theta[:n_days]
        return CycleSeries(self.subject_id, self.y[:n_days], self.z[:n_days],
                           self.age_group, theta, dict(self.meta))


def stage(theta):
    """Stage (1 or 2) of a phase; ``0.5`` belongs to stage 2."""
    theta = np.asarray(theta, dtype=float)
    frac = theta - np.floor(theta)
    out = np.where(frac < 0.5, 1, 2)
    return int(out) if out.ndim == 0 else out


def _check_shape_rate(shape, rate):
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if np.any(~(shape > 0)) or np.any(~(rate > 0)):
        raise ValueError("gamma shape and rate must be > 0")
    return shape, rate


def _scalar(out):
    return float(out) if np.ndim(out) == 0 else out


def gamma_pdf(x, shape, rate):
    """Gamma density with the shape/rate parametrization."""
    x = np.asarray(x, dtype=float)
    shape, rate = _check_shape_rate(shape, rate)
    if np.any(~(x > 0)):
        raise ValueError("gamma_pdf requires x > 0")
    logp = shape * np.log(rate) - special.gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x
    return _scalar(np.exp(logp))


def gamma_cdf(x, shape, rate):
    """Gamma distribution function; ``gamma_cdf(0, ...) == 0``."""
    x = np.asarray(x, dtype=float)
    shape, rate = _check_shape_rate(shape, rate)
    if np.any(~(x >= 0)):
        raise ValueError("gamma_cdf requires x >= 0")
    return _scalar(special.gammainc(shape, rate * x))


def gamma_sf(x, shape, rate):
    """Upper tail ``1 - gamma_cdf`` computed without cancellation."""
    x = np.asarray(x, dtype=float)
    shape, rate = _check_shape_rate(shape, rate)
    if np.any(~(x >= 0)):
        raise ValueError("gamma_sf requires x >= 0")
    return _scalar(special.gammaincc(shape, rate * x))


def transition_density(theta_next, theta_prev, params: ModelParams) -> float:
    """Density of ``theta_next`` given ``theta_prev``; zero for non-positive increments."""
    inc = float(theta_next) - float(theta_prev)
    if inc <= 0:
        return 0.0
    s = params.stage_params(stage(theta_prev))
    return gamma_pdf(inc, s.alpha, s.beta)


def bbt_likelihood(y, theta, params: ModelParams):
    """Gaussian density of standardized BBT ``y`` at phase ``theta``."""
    mean = params.bbt_mean(theta)
    sd = params.bbt_sd(theta)
    r = (np.asarray(y, dtype=float) - mean) / sd
    return _scalar(np.exp(-0.5 * r * r) / (sd * math.sqrt(2.0 * math.pi)))


def menstruation_likelihood(z, theta_next, theta_prev) -> int:
    """1 if the onset indicator is consistent with the phase pair, else 0."""
    if theta_next < theta_prev:
        raise ValueError("phase cannot decrease")
    crossed = math.floor(theta_next) > math.floor(theta_prev)
    return int(crossed) if z == 1 else int(not crossed)


def as_series_list(data) -> list:
    """Normalize a single series or an iterable of series to a list."""
    if isinstance(data, CycleSeries):
        return [data]
    out = list(data)
    for s in out:
        if not isinstance(s, CycleSeries):
            raise TypeError(f"expected CycleSeries, got {type(s).__name__}")
    return out

