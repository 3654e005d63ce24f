"""Loss terms of CaliMatch as functions of :class:`ModelOutputs`.

Every loss accepts ``reduction="mean"`` (divide the per-sample sum by the batch
size) or ``reduction="sum"``. Labels may be integer class indices or one-hot rows.
Probabilities are clamped to ``[1e-7, 1 - 1e-7]`` before any logarithm.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .calibration import classifier_targets, ood_target_weights
from .exceptions import ConfigError, DomainError
from .model import PROB_EPS, ModelOutputs

REDUCTIONS = ("mean", "sum")
OCAL_MIN_MODES = ("verbatim", "hard_negative")


@dataclass
class LossBreakdown:
    ce: float = 0.0
    ood: float = 0.0
    sc: float = 0.0
    mcal: float = 0.0
    ocal: float = 0.0
    fix: float = 0.0
    total: float = 0.0
    lambda_ood: float = 0.0
    lambda_ocal: float = 0.0
    lambda_sc: float = 0.0

    def as_dict(self):
        return asdict(self)


def _log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(PROB_EPS, 1 - PROB_EPS))


def _reduce(per_sample: torch.Tensor, reduction: str, denom: int | None = None) -> torch.Tensor:
    if reduction == "sum":
        return per_sample.sum()
    if reduction == "mean":
        n = per_sample.shape[0] if denom is None else denom
        return per_sample.sum() / max(n, 1)
    raise ConfigError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")


def as_class_indices(labels, num_classes: int) -> torch.Tensor:
    """Accept class indices or one-hot rows; return a 1-D long tensor."""
    labels = torch.as_tensor(labels)
    if labels.ndim == 1:
        if labels.dtype.is_floating_point:
            raise ValueError("class-index labels must be integers")
        if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError(f"labels must lie in [0, {num_classes})")
        return labels.long()
    if labels.ndim == 2 and labels.shape[1] == num_classes:
        is_binary = ((labels == 0) | (labels == 1)).all()
        if not is_binary or not (labels.sum(dim=1) == 1).all():
            raise ValueError("labels are not one-hot")
        return labels.argmax(dim=1)
    raise ValueError(f"labels of shape {tuple(labels.shape)} do not match {num_classes} classes")


def loss_ce(outputs: ModelOutputs, labels, reduction: str = "mean") -> torch.Tensor:
    """Cross-entropy of the classifier probabilities ``p``."""
    y = as_class_indices(labels, outputs.p.shape[1])
    per = -_log(outputs.p).gather(1, y[:, None]).squeeze(1)
    return _reduce(per, reduction)


def loss_ood(outputs: ModelOutputs, labels, reduction: str = "mean") -> torch.Tensor:
    """OvR binary cross-entropy with the hardest negative head."""
    k = outputs.q.shape[1]
    if k < 2:
        raise ConfigError("the OvR loss needs at least two classes")
    y = as_class_indices(labels, k)
    log_pos = _log(outputs.q).gather(1, y[:, None]).squeeze(1)
    log_neg = _log(1 - outputs.q)
    # exclude the true class from the min over negatives
    log_neg = log_neg.scatter(1, y[:, None], float("inf"))
    per = -(log_pos + log_neg.min(dim=1).values)
    return _reduce(per, reduction)


def loss_soft_consistency(outputs_w1: ModelOutputs, outputs_w2: ModelOutputs,
                          reduction: str = "mean") -> torch.Tensor:
    """Squared difference of OvR probabilities across two weak views."""
    if outputs_w1.q.shape != outputs_w2.q.shape:
        raise ValueError(
            f"view shapes differ: {tuple(outputs_w1.q.shape)} vs {tuple(outputs_w2.q.shape)}"
        )
    per = ((outputs_w1.q - outputs_w2.q) ** 2).sum(dim=1)
    return _reduce(per, reduction)


def loss_mcal(outputs: ModelOutputs, labels, gammas, reduction: str = "mean") -> torch.Tensor:
    """Cross-entropy of ``p_s`` against adaptively smoothed targets."""
    k = outputs.p_s.shape[1]
    y = as_class_indices(labels, k)
    gammas = torch.as_tensor(gammas, dtype=outputs.p_s.dtype)
    targets = classifier_targets(y, gammas, k)
    per = -(targets * _log(outputs.p_s)).sum(dim=1)
    return _reduce(per, reduction)


def loss_ocal(outputs: ModelOutputs, labels, deltas, reduction: str = "mean",
              min_mode: str = "verbatim") -> torch.Tensor:
    """Adaptively smoothed loss on the temperature-scaled OvR probabilities ``q_s``.

    ``min_mode="verbatim"`` takes the min over all K weighted ``log(1 - q_s)``
    terms. ``"hard_negative"`` restricts it to the non-true classes, mirroring
    the hardest-negative term of :func:`loss_ood`.
    """
    if min_mode not in OCAL_MIN_MODES:
        raise ConfigError(f"ocal_min_mode must be one of {OCAL_MIN_MODES}, got {min_mode!r}")
    k = outputs.q_s.shape[1]
    y = as_class_indices(labels, k)
    deltas = torch.as_tensor(deltas, dtype=outputs.q_s.dtype)
    if deltas.numel() and (torch.isnan(deltas).any() or deltas.min() < 0 or deltas.max() > 1):
        raise DomainError("delta values must lie in [0, 1]")
    pos_w, neg_w = ood_target_weights(y, deltas, k)
    first = (pos_w * _log(outputs.q_s)).sum(dim=1)
    neg_terms = neg_w * _log(1 - outputs.q_s)
    if min_mode == "hard_negative":
        neg_terms = neg_terms.scatter(1, y[:, None], float("inf"))
    per = -(first + neg_terms.min(dim=1).values)
    return _reduce(per, reduction)


def pseudo_labels(outputs_weak: ModelOutputs) -> torch.Tensor:
    return outputs_weak.p.detach().argmax(dim=1)


def loss_fix(outputs_weak: ModelOutputs, outputs_strong: ModelOutputs, mask,
             reduction: str = "mean") -> torch.Tensor:
    """Masked cross-entropy of the strong view against weak-view pseudo-labels.

    In mean mode the sum is divided by the full unlabeled batch size, not by
    the number of selected samples.
    """
    mask = torch.as_tensor(mask, dtype=torch.bool)
    n = outputs_strong.p.shape[0]
    if outputs_weak.p.shape != outputs_strong.p.shape or mask.shape != (n,):
        raise ValueError("weak view, strong view and mask must cover the same samples")
    if not mask.any():
        return outputs_strong.p.sum() * 0.0
    y_hat = pseudo_labels(outputs_weak)
    per = -_log(outputs_strong.p).gather(1, y_hat[:, None]).squeeze(1)
    return _reduce(per[mask], reduction, denom=n)
