"""GLU adapters with iterative fine-tuning, on a synthetic speaker-verification lab."""
from .config import ExperimentConfig, load_config
from .core import make_rng
from .errors import ArtifactIOError, ConfigError, DataError, FormatError, GiftError, NumericError
from .models import ModelArch, build_stack, load_checkpoint, save_checkpoint

__all__ = [
    "ExperimentConfig", "load_config", "make_rng", "ModelArch", "build_stack",
    "load_checkpoint", "save_checkpoint", "GiftError", "ConfigError", "DataError",
    "FormatError", "NumericError", "ArtifactIOError",
]
__version__ = "0.1.0"
