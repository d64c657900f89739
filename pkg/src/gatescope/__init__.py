"""Checkpoint forensics and selective adaptation for transformer projection modules."""

from .adapt import LoraPair, ModuleSelection, merge_lora, parse_selection, selective_load, transplant
from .checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from .diff import (Aggregation, DiffMatrix, DiffRecord, DiffResult, Statistic, diff_checkpoints,
                   histogram_relative_changes, module_l2, rank_modules, relative_ratio)
from .errors import (DivergenceError, FormatError, GatescopeError, PairingError, ShapeError,
                     UsageError)
from .get import GetExperiment, TrainConfig, build_get_plan, train, trainable_fraction
from .heatmap import render_heatmap_svg
from .naming import ModuleKey, ModuleRole, NamingScheme, load_scheme
from .toy import ToyConfig, ToyModel, init_model

__version__ = "0.1.0"
