"""Explicit biphasic state-space model of the menstrual cycle."""

__version__ = "0.1.0"

from .model import (CycleSeries, ModelParams, StageParams, Variant, bbt_likelihood, gamma_cdf,
                    gamma_pdf, menstruation_likelihood, stage, transition_density)
from .presets import AGE_GROUPS, DEFAULT_INIT, PRESETS, preset
from .filtering import (FilterOutput, JointPredictive, PhaseDensity, PhaseGrid, ZeroLikelihood,
                        batch_loglik, filter_series, predict_step, smooth_series, update_step)
from .onset import (ConvolutionEngine, OnsetDistribution, TruncatedDensity, f_stage1, f_stage2,
                    onset_distribution, onset_probabilities, phi, point_predict)
from .stages import (CycleStageSummary, StageCall, population_stage_stats, prob_stage1,
                     stage_length_pmf, stage_lengths)
from .estimation import FitResult, FitSpec, Pooling, confidence_intervals, fit, fit_pooled, neg_loglik
from .simulate import SafetyCap, SimConfig, simulate
from .bench import BenchReport, CalendarModel, run_benchmark
from .estimator import BiphasicCycleModel

__all__ = [
    "CycleSeries", "ModelParams", "StageParams", "Variant", "bbt_likelihood", "gamma_cdf",
    "gamma_pdf", "menstruation_likelihood", "stage", "transition_density",
    "AGE_GROUPS", "DEFAULT_INIT", "PRESETS", "preset",
    "FilterOutput", "JointPredictive", "PhaseDensity", "PhaseGrid", "ZeroLikelihood",
    "batch_loglik", "filter_series", "predict_step", "smooth_series", "update_step",
    "ConvolutionEngine", "OnsetDistribution", "TruncatedDensity", "f_stage1", "f_stage2",
    "onset_distribution", "onset_probabilities", "phi", "point_predict",
    "CycleStageSummary", "StageCall", "population_stage_stats", "prob_stage1",
    "stage_length_pmf", "stage_lengths",
    "FitResult", "FitSpec", "Pooling", "confidence_intervals", "fit", "fit_pooled", "neg_loglik",
    "SafetyCap", "SimConfig", "simulate",
    "BenchReport", "CalendarModel", "run_benchmark",
    "BiphasicCycleModel",
]
