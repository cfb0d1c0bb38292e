"""Byzantine-robust decentralized stochastic optimization simulator."""

from .config import ExperimentConfig, load_config, parse_config_text
from .engine import RunResult, run_experiment

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "RunResult",
    "load_config",
    "parse_config_text",
    "run_experiment",
    "__version__",
]
