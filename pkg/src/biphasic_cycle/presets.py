"""Published maximum likelihood estimates per age group, usable as presets."""

from __future__ import annotations

from .model import ModelParams

AGE_GROUPS = ("15-19", "20-24", "25-29", "30-34", "35-39", "40-44", "45-49", "50-54")

# alpha1, beta1, alpha2, beta2, mu1, sigma1, mu2, sigma2
_TABLE = {
    "15-19": (0.632, 34.923, 0.216, 1.837, -0.040, 0.231, 0.371, 0.247),
    "20-24": (0.942, 52.320, 0.271, 2.865, -0.040, 0.239, 0.374, 0.224),
    "25-29": (0.871, 43.145, 0.350, 5.141, -0.029, 0.228, 0.369, 0.220),
    "30-34": (1.316, 64.430, 0.364, 5.218, -0.012, 0.217, 0.377, 0.223),
    "35-39": (0.952, 40.455, 0.533, 8.669, -0.023, 0.252, 0.363, 0.205),
    "40-44": (1.000, 42.920, 0.398, 5.783, -0.024, 0.207, 0.333, 0.199),
    "45-49": (0.644, 26.902, 0.334, 4.472, -0.018, 0.203, 0.325, 0.196),
    "50-54": (0.054, 1.853, 0.177, 2.170, -0.054, 0.226, 0.345, 0.216),
}

PRESETS = {group: ModelParams.explicit(*values) for group, values in _TABLE.items()}

# Starting point for optimization when none is supplied.
DEFAULT_INIT = ModelParams.explicit(1.0, 40.0, 0.4, 6.0, 0.0, 0.25, 0.35, 0.25)


def preset(group: str) -> ModelParams:
    """Parameters for an age group such as ``"35-39"`` (``"35–39"`` also accepted)."""
    key = group.replace("–", "-").replace("_", "-").strip()
    try:
        return PRESETS[key]
    except KeyError:
        raise KeyError(f"unknown age group {group!r}; expected one of {AGE_GROUPS}") from None
