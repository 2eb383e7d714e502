"""Feature-based state space model toolkit for radio-telemetry tracking.

Grid-discretized latent locations, a softmax transition model over
user-defined spatial features, von Mises bearing observations, exact
forward-backward/Viterbi inference, and EM / stochastic-gradient parameter
estimation, plus a synthetic-experiment generator and CLI.
"""

from .estimation import (EMMonotonicityError, FitConfig, FitTrace, em_fit,
                         fit, iteration_cost_probe, sg_fit, vonmises_mle)
from .evalmetrics import EvalReport, aggregate, location_error, weight_distance
from .features import FeatureDef, FeatureSet, ZoneMap, single_distance_feature
from .grid import GridSpec, TowerSpec, bearing_to, wrap_angle
from .inference import GibbsChain, forward_backward, gibbs_sample_path, viterbi
from .model import (BearingSeries, ModelParams, bessel_ratio, complete_loglik,
                    grad_complete_loglik, log_bessel_i0, obs_logprob,
                    start_logprob, transition_row)
from .synth import Scenario, SynthSpec, make_scenario, sample_bearings, sample_path

__all__ = [
    "BearingSeries", "EMMonotonicityError", "EvalReport", "FeatureDef",
    "FeatureSet", "FitConfig", "FitTrace", "GibbsChain", "GridSpec",
    "ModelParams", "Scenario", "SynthSpec", "TowerSpec", "ZoneMap",
    "aggregate", "bearing_to", "bessel_ratio", "complete_loglik", "em_fit",
    "fit", "forward_backward", "gibbs_sample_path", "grad_complete_loglik",
    "iteration_cost_probe", "location_error", "log_bessel_i0",
    "make_scenario", "obs_logprob",
    "sample_bearings", "sample_path", "sg_fit", "single_distance_feature",
    "start_logprob", "transition_row", "viterbi", "vonmises_mle",
    "weight_distance", "wrap_angle",
]

__version__ = "0.1.0"
