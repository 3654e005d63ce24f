"""Per-bin validation accuracy tables used as adaptive label-smoothing targets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import ConfigError, DomainError

DEFAULT_BINS = 30


def bin_edges(n_bins: int) -> np.ndarray:
    # m / M is correctly rounded, unlike linspace's start + m * step
    return np.arange(n_bins + 1) / n_bins


def bin_indices(confidences, n_bins: int) -> np.ndarray:
    """0-based bin index for each confidence.

    Bins are half-open ``((m-1)/M, m/M]``; a confidence of exactly 0 goes to the
    first bin.
    """
    if n_bins < 1:
        raise ConfigError(f"number of bins must be >= 1, got {n_bins}")
    conf = np.asarray(confidences, dtype=np.float64)
    if conf.size and (np.isnan(conf).any() or conf.min() < 0.0 or conf.max() > 1.0):
        raise DomainError("confidences must lie in [0, 1]")
    idx = np.searchsorted(bin_edges(n_bins), conf, side="left")
    return np.clip(idx, 1, n_bins) - 1


@dataclass(frozen=True)
class ReferenceTable:
    edges: np.ndarray
    values: np.ndarray
    counts: np.ndarray
    fallback: float

    @property
    def n_bins(self) -> int:
        return len(self.values)

    def lookup(self, confidences) -> np.ndarray:
        return self.values[bin_indices(confidences, self.n_bins)]

    def summary(self) -> dict:
        populated = self.counts > 0
        return {
            "populated_bins": int(populated.sum()),
            "fallback": float(self.fallback),
            "weighted_value": float((self.values * self.counts).sum() / max(self.counts.sum(), 1)),
        }

    def to_dict(self) -> dict:
        return {
            "values": self.values.tolist(),
            "counts": self.counts.tolist(),
            "fallback": float(self.fallback),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReferenceTable":
        values = np.asarray(d["values"], dtype=np.float64)
        return cls(edges=bin_edges(len(values)), values=values,
                   counts=np.asarray(d["counts"], dtype=np.int64),
                   fallback=float(d["fallback"]))

    def rows(self):
        """``(bin index, count, value)`` with 1-based bin indices."""
        for m, (c, v) in enumerate(zip(self.counts, self.values), start=1):
            yield m, int(c), float(v)


def build_reference_table(confidences, correct, n_bins: int = DEFAULT_BINS) -> ReferenceTable:
    """Accuracy of ``correct`` within each equal-width confidence bin.

    Empty bins take the overall accuracy.
    """
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    hit = np.asarray(correct, dtype=bool).ravel()
    if n_bins < 1:
        raise ConfigError(f"number of bins must be >= 1, got {n_bins}")
    if conf.size == 0:
        raise ValueError("cannot build a reference table from an empty set")
    if conf.shape != hit.shape:
        raise ValueError(f"length mismatch: {conf.size} confidences vs {hit.size} flags")

    idx = bin_indices(conf, n_bins)
    counts = np.bincount(idx, minlength=n_bins).astype(np.int64)
    hits = np.bincount(idx, weights=hit.astype(np.float64), minlength=n_bins)
    fallback = float(hit.mean())
    values = np.full(n_bins, fallback)
    nonempty = counts > 0
    values[nonempty] = hits[nonempty] / counts[nonempty]
    return ReferenceTable(edges=bin_edges(n_bins), values=values, counts=counts, fallback=fallback)


def lookup_reference(table: ReferenceTable, confidence: float) -> float:
    return float(table.lookup(np.array([confidence]))[0])


@torch.no_grad()
def refresh_tables(model, x_val, y_val, n_bins: int = DEFAULT_BINS):
    """Rebuild the classifier table (from ``p``) and the OOD table (from ``q``)."""
    if len(y_val) == 0:
        raise ValueError("validation set is empty")
    was_training = model.training
    model.eval()
    try:
        out = model(torch.as_tensor(x_val))
    finally:
        model.train(was_training)
    y = np.asarray(y_val)
    p = out.p.cpu().numpy()
    q = out.q.cpu().numpy()
    gamma = build_reference_table(p.max(axis=1), p.argmax(axis=1) == y, n_bins)
    delta = build_reference_table(q.max(axis=1), q.argmax(axis=1) == y, n_bins)
    return gamma, delta


def classifier_targets(labels: torch.Tensor, gammas: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Soft targets: ``gamma`` on the true class, ``(1-gamma)/(K-1)`` elsewhere."""
    _check_unit_interval(gammas, "gamma")
    onehot = torch.nn.functional.one_hot(labels, num_classes).to(gammas.dtype)
    g = gammas.unsqueeze(1)
    return g * onehot + (1 - g) / (num_classes - 1) * (1 - onehot)


def ood_target_weights(labels: torch.Tensor, deltas: torch.Tensor, num_classes: int):
    """Weights on ``log q_s`` and on ``log(1 - q_s)`` for each class."""
    _check_unit_interval(deltas, "delta")
    onehot = torch.nn.functional.one_hot(labels, num_classes).to(deltas.dtype)
    d = deltas.unsqueeze(1)
    pos = d * onehot + (1 - d) * (1 - onehot)
    neg = (1 - d) * onehot + d * (1 - onehot)
    return pos, neg


def _check_unit_interval(values: torch.Tensor, name: str):
    if values.numel() and (torch.isnan(values).any() or values.min() < 0 or values.max() > 1):
        raise DomainError(f"{name} values must lie in [0, 1]")
