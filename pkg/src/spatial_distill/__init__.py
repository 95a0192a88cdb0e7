"""Multi-task distillation of spatial reasoning into a small student with
learnable thinking tokens and uncertainty-weighted losses."""

from .config import RunConfig, load_config
from .dataset import Dataset, build_dataset, load_dataset, write_dataset
from .model import Student, init_params
from .trainer import RunRecord, load_checkpoint, train

__all__ = [
    "Dataset",
    "RunConfig",
    "RunRecord",
    "Student",
    "build_dataset",
    "init_params",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "train",
    "write_dataset",
]

__version__ = "0.1.0"
