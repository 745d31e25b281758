"""rigidseg: segment RGB-D sequences into rigidly moving objects with
temporally consistent labels and per-frame object poses."""

from .config import PipelineConfig
from .errors import ConfigError, InputError, PipelineError
from .pipeline import PipelineResult, run_pipeline

__all__ = [
    "PipelineConfig",
    "ConfigError",
    "InputError",
    "PipelineError",
    "PipelineResult",
    "run_pipeline",
]

__version__ = "0.1.0"
