"""Online task-free continual learning with replay and gradient-based memory editing."""

from .editing import EditConfig
from .estimator import ContinualClassifier
from .harness import ExperimentConfig, parse_config, run_experiment, tune_hyperparams
from .memory import ReplayMemory
from .metrics import RunMetrics
from .stream import StreamConfig, build_stream, load_mnist
from .trainer import TrainerState, new_state, train_step

__all__ = [
    "ContinualClassifier", "EditConfig", "ExperimentConfig", "ReplayMemory", "RunMetrics",
    "StreamConfig", "TrainerState", "build_stream", "load_mnist", "new_state", "parse_config",
    "run_experiment", "train_step", "tune_hyperparams",
]
