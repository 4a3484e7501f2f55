"""Early-stage ad ranking with multi-task distillation: a desk-scale simulator of a
retrieval -> early stage -> final stage -> auction funnel, the student and teacher
models, and the replay evaluation harness."""

from .errors import ConfigError, DataError, NumericalError, UsageError
from .experiment import (
    ABLATION_VARIANTS,
    VARIANTS,
    PhaseSizes,
    RunReport,
    ScenarioConfig,
    load_config,
    prepare,
    replay_eval,
    run_ablation_matrix,
    run_scenario,
    sweep,
)

__version__ = "0.1.0"

__all__ = [
    "ABLATION_VARIANTS", "VARIANTS", "ConfigError", "DataError", "NumericalError", "UsageError",
    "PhaseSizes", "RunReport", "ScenarioConfig", "load_config", "prepare", "replay_eval",
    "run_ablation_matrix", "run_scenario", "sweep",
]
