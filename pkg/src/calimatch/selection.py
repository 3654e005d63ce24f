"""Seen-class score, confidence and the two-threshold gate for unlabeled data."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import ConfigError
from .model import ModelOutputs

TAU1_DEFAULT = 0.5
TAU2_DEFAULT = 0.95
# fixed definitions used by the learning-curve diagnostics
HIGH_CONFIDENCE = 0.95
LOW_OOD = 0.5


def score(outputs: ModelOutputs):
    """Return ``(s, c, u)``: seen-class score, calibrated confidence, OOD score."""
    s = (outputs.p_s * outputs.q_s).sum(dim=-1)
    c = outputs.p_s.max(dim=-1).values
    return s, c, 1 - s


@dataclass(frozen=True)
class SelectionRecord:
    """Per-sample selection results for one unlabeled batch (numpy arrays)."""

    s: np.ndarray
    c: np.ndarray
    u: np.ndarray
    pseudo_label: np.ndarray
    selected: np.ndarray

    def __len__(self):
        return len(self.s)

    @property
    def mask(self) -> torch.Tensor:
        return torch.from_numpy(self.selected)


def _check_threshold(name, value):
    if not 0.0 < value < 1.0:
        raise ConfigError(f"{name} must lie in (0, 1), got {value}")


def gate(s, c, tau1: float, tau2: float, use_seen_gate: bool = True) -> np.ndarray:
    """Strict two-threshold gate; with ``use_seen_gate=False`` only ``c`` is tested."""
    _check_threshold("tau1", tau1)
    _check_threshold("tau2", tau2)
    s = np.asarray(s)
    c = np.asarray(c)
    keep = c > tau2
    if use_seen_gate:
        keep &= s > tau1
    return keep


@torch.no_grad()
def select_batch(outputs_weak: ModelOutputs, tau1: float = TAU1_DEFAULT,
                 tau2: float = TAU2_DEFAULT, use_seen_gate: bool = True) -> SelectionRecord:
    """Score and gate one batch of weak-view outputs.

    Without the seen-class gate (no OOD head) the confidence is the raw
    ``max p``, as in plain FixMatch.
    """
    s, c, u = score(outputs_weak)
    if not use_seen_gate:
        c = outputs_weak.p.max(dim=-1).values
    s, c, u = (t.cpu().numpy() for t in (s, c, u))
    return SelectionRecord(
        s=s, c=c, u=u,
        pseudo_label=outputs_weak.p.argmax(dim=-1).cpu().numpy(),
        selected=gate(s, c, tau1, tau2, use_seen_gate),
    )


def _ratio(num, den):
    return float(num) / float(den) if den else None


def selection_error_rate(records: SelectionRecord, true_labels) -> float | None:
    """Fraction of selected samples that are unseen or wrongly pseudo-labeled.

    ``true_labels`` uses seen-class indices, with ``-1`` marking unseen samples.
    """
    y = np.asarray(true_labels)
    sel = records.selected
    wrong = (y < 0) | (records.pseudo_label != y)
    return _ratio((wrong & sel).sum(), sel.sum())


def selection_diagnostics(records: SelectionRecord, true_labels) -> dict:
    """Learning-curve quantities computed against hidden ground truth.

    Undefined ratios (empty denominators) are reported as ``None``.
    """
    y = np.asarray(true_labels)
    seen = y >= 0
    sel = records.selected
    high_conf = records.c > HIGH_CONFIDENCE
    low_ood_high_conf = high_conf & (records.u < LOW_OOD)
    return {
        "pseudo_label_accuracy": _ratio((sel & seen & (records.pseudo_label == y)).sum(),
                                        (sel & seen).sum()),
        "seen_selected_fraction": _ratio((sel & seen).sum(), seen.sum()),
        "unseen_in_high_confidence": _ratio((high_conf & ~seen).sum(), high_conf.sum()),
        "unseen_in_low_ood_high_confidence": _ratio((low_ood_high_conf & ~seen).sum(),
                                                    low_ood_high_conf.sum()),
        "selection_error_rate": selection_error_rate(records, y),
        "n_selected": int(sel.sum()),
    }
