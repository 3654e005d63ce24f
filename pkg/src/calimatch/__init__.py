"""Calibrated pseudo-label selection for semi-supervised learning under class mismatch."""

__version__ = "0.1.0"

from .calibration import ReferenceTable, build_reference_table, lookup_reference, refresh_tables
from .config import PRESETS, TrainConfig, apply_preset
from .data import MismatchDataset, load_dataset, make_synthetic, save_dataset
from .estimator import CaliMatchClassifier
from .exceptions import (CaliMatchError, ConfigError, DomainError, IngestionError,
                         InvariantError, NumericError)
from .losses import loss_ce, loss_fix, loss_mcal, loss_ocal, loss_ood, loss_soft_consistency
from .metrics import MetricsReport, ece, evaluate
from .model import CaliMatchNet, ModelOutputs, load_checkpoint, save_checkpoint
from .selection import SelectionRecord, gate, score, select_batch
from .theory import AlignmentReport, CalibratedOracle, alignment_report, lemma_check
from .trainer import TrainResult, train

__all__ = [
    "AlignmentReport", "CaliMatchClassifier", "CaliMatchError", "CaliMatchNet",
    "CalibratedOracle", "ConfigError", "DomainError", "IngestionError", "InvariantError",
    "MetricsReport", "MismatchDataset", "ModelOutputs", "NumericError", "PRESETS",
    "ReferenceTable", "SelectionRecord", "TrainConfig", "TrainResult", "alignment_report",
    "apply_preset", "build_reference_table", "ece", "evaluate", "gate", "lemma_check",
    "load_checkpoint", "load_dataset", "lookup_reference", "loss_ce", "loss_fix", "loss_mcal",
    "loss_ocal", "loss_ood", "loss_soft_consistency", "make_synthetic", "refresh_tables",
    "save_checkpoint", "save_dataset", "score", "select_batch", "train",
]
