"""Self-attentive Hawkes processes: simulation, classic Hawkes baselines,
the SAHP network, training and evaluation."""
from .data import DataError, Dataset, Event, Sequence, load_dataset, save_dataset, split_dataset, validate_sequence
from .estimator import SAHP
from .evaluation import EvalReport, PredictionResult, evaluate, next_event_density, predict_next, qq_data
from .hawkes import ExpHawkes, HawkesParams, hp_compensator, hp_fit, hp_intensity, hp_loglik
from .model import IntensityState, SAHPConfig, SAHPNetwork, intensity_at
from .simulation import HawkesSpec, intensity_trace, simulate_dataset, simulate_thinning, synthetic_spec, true_intensity
from .training import TrainConfig, train

__all__ = [
    "DataError", "Dataset", "Event", "Sequence", "load_dataset", "save_dataset", "split_dataset",
    "validate_sequence", "SAHP", "EvalReport", "PredictionResult", "evaluate", "next_event_density",
    "predict_next", "qq_data", "ExpHawkes", "HawkesParams", "hp_compensator", "hp_fit", "hp_intensity",
    "hp_loglik", "IntensityState", "SAHPConfig", "SAHPNetwork", "intensity_at", "HawkesSpec",
    "intensity_trace", "simulate_dataset", "simulate_thinning", "synthetic_spec", "true_intensity", "TrainConfig", "train",
]
__version__ = "0.1.0"
