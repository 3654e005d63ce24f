"""Empirical checks of the selection-error bound and of gradient alignment
between the masked pseudo-label loss and the true-label loss.

All gradients here use sum reduction.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch.nn import functional as F

from .calibration import DEFAULT_BINS, bin_indices
from .model import CaliMatchNet


def _as_input(model: CaliMatchNet, x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x)).to(model.T_M.dtype)


def _flat_grad(model: CaliMatchNet, loss: torch.Tensor, retain: bool = False) -> torch.Tensor:
    params = list(model.parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True, retain_graph=retain)
    return torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1)
                      for p, g in zip(params, grads)])


def _ce_sum(model, x, labels) -> torch.Tensor:
    z_f, _ = model.logits(x)
    return F.cross_entropy(z_f, torch.as_tensor(labels, dtype=torch.long), reduction="sum")


def n_parameters(model: CaliMatchNet) -> int:
    return sum(p.numel() for p in model.parameters())


def surrogate_gradient(model: CaliMatchNet, x_strong, pseudo_labels) -> torch.Tensor:
    """Gradient of the pseudo-label cross-entropy summed over the selected batch."""
    if len(pseudo_labels) == 0:
        return torch.zeros(n_parameters(model), dtype=model.T_M.dtype)
    return _flat_grad(model, _ce_sum(model, _as_input(model, x_strong), pseudo_labels))


def ideal_gradient(model: CaliMatchNet, x_strong, true_labels) -> torch.Tensor:
    """Gradient of the true-label cross-entropy over the in-distribution members.

    ``true_labels`` holds seen-class indices with ``-1`` for unseen samples,
    which are excluded. An empty restricted set gives the zero vector.
    """
    y = np.asarray(true_labels)
    keep = y >= 0
    if not keep.any():
        return torch.zeros(n_parameters(model), dtype=model.T_M.dtype)
    x = _as_input(model, x_strong)[torch.from_numpy(keep)]
    return _flat_grad(model, _ce_sum(model, x, y[keep]))


def logit_jacobians(model: CaliMatchNet, x) -> torch.Tensor:
    """Per-sample Jacobians of classifier logits w.r.t. all parameters, ``(n, K, P)``."""
    x = _as_input(model, x)
    rows = []
    for i in range(len(x)):
        z_f, _ = model.logits(x[i:i + 1])
        rows.append(torch.stack([_flat_grad(model, z_f[0, k], retain=True)
                                 for k in range(z_f.shape[1])]))
    return torch.stack(rows) if rows else torch.zeros(0, model.num_classes, n_parameters(model))


def logit_residual(probs: torch.Tensor, pseudo_label: int, true_label: int) -> torch.Tensor:
    """Difference of the per-sample softmax gradients for the pseudo and true label.

    For an unseen sample (``true_label < 0``) only the pseudo-label term remains.
    """
    k = probs.shape[-1]
    r = probs - F.one_hot(torch.tensor(pseudo_label), k).to(probs.dtype)
    if true_label >= 0:
        r = r - (probs - F.one_hot(torch.tensor(true_label), k).to(probs.dtype))
    return r


@dataclass
class AlignmentReport:
    n_selected: int
    n_errors: int
    epsilon_hat: float | None
    grad_diff_norm: float
    residual_sum_norm: float
    identity_error: float
    residual_norms: list = field(default_factory=list)
    logit_residual_l1_max: float = 0.0
    b_hat: float = 0.0
    l_hat: float = 0.0
    bound: float = 0.0
    bound_holds: bool = True

    def to_dict(self):
        return asdict(self)


def alignment_report(model: CaliMatchNet, x_strong, pseudo_labels, true_labels) -> AlignmentReport:
    """Compare batch gradients of the surrogate and ideal losses on a selected batch.

    The batch difference is computed by two whole-batch backward passes; the
    residual decomposition is rebuilt independently from per-sample Jacobians.
    """
    y_hat = np.asarray(pseudo_labels, dtype=np.int64)
    y = np.asarray(true_labels, dtype=np.int64)
    n = len(y_hat)
    if n == 0:
        return AlignmentReport(0, 0, None, 0.0, 0.0, 0.0)

    diff = surrogate_gradient(model, x_strong, y_hat) - ideal_gradient(model, x_strong, y)
    errors = np.flatnonzero((y < 0) | (y != y_hat))

    jac = logit_jacobians(model, x_strong)
    with torch.no_grad():
        z_f, _ = model.logits(_as_input(model, x_strong))
        probs = F.softmax(z_f, dim=-1)
    l_hat = max(float(torch.linalg.matrix_norm(j, ord=2)) for j in jac)

    residual_sum = torch.zeros_like(diff)
    norms, b_hat, l1_max = [], 0.0, 0.0
    for i in errors:
        r = logit_residual(probs[i], int(y_hat[i]), int(y[i]))
        g = jac[i].T @ r
        residual_sum += g
        norms.append(float(g.norm()))
        b_hat = max(b_hat, float(r.norm()))
        l1_max = max(l1_max, float(r.abs().sum()))

    eps = len(errors) / n
    grad_diff_norm = float(diff.norm())
    bound = l_hat * b_hat * eps * n
    return AlignmentReport(
        n_selected=n, n_errors=len(errors), epsilon_hat=eps,
        grad_diff_norm=grad_diff_norm,
        residual_sum_norm=float(residual_sum.norm()),
        identity_error=float((diff - residual_sum).norm()),
        residual_norms=norms, logit_residual_l1_max=l1_max,
        b_hat=b_hat, l_hat=l_hat, bound=bound,
        bound_holds=grad_diff_norm <= bound * (1 + 1e-9) + 1e-12,
    )


# ---------------------------------------------------------------- lemma check

@dataclass(frozen=True)
class CalibratedOracle:
    """Synthetic selection scores whose outcomes are calibrated up to ``eta``.

    Seen-class score ``s`` and confidence ``c`` are drawn from ``Beta(a, b)``.
    A sample is in-distribution with probability ``s - eta`` and correctly
    pseudo-labeled with probability ``c - eta`` (clipped to [0, 1]), i.e. the
    worst-case overconfident direction. ``coupling="shared"`` drives both events
    from one uniform draw, so an error on the higher-scored event implies an
    error on the lower one; ``"independent"`` uses separate draws.
    """

    eta: float = 0.0
    a: float = 4.0
    b: float = 1.0
    coupling: str = "shared"

    def sample(self, n: int, rng: np.random.Generator):
        s = rng.beta(self.a, self.b, n)
        c = rng.beta(self.a, self.b, n)
        u1 = rng.random(n)
        u2 = u1 if self.coupling == "shared" else rng.random(n)
        is_id = u1 < np.clip(s - self.eta, 0, 1)
        correct = u2 < np.clip(c - self.eta, 0, 1)
        return s, c, is_id, correct


def calibration_deviation(scores, events, n_bins: int = DEFAULT_BINS) -> float:
    """Largest per-bin ``|mean score - event rate|`` over populated bins."""
    scores = np.asarray(scores)
    events = np.asarray(events, dtype=float)
    idx = bin_indices(scores, n_bins)
    worst = 0.0
    for m in np.unique(idx):
        sel = idx == m
        worst = max(worst, abs(scores[sel].mean() - events[sel].mean()))
    return worst


def lemma_bound(tau1: float, tau2: float, eta: float) -> float:
    return 1 - min(tau1, tau2) + eta


def lemma_check(oracle: CalibratedOracle, tau1: float, tau2: float, n: int = 10_000,
                seed: int = 0) -> dict:
    """Simulate strict two-threshold selection and compare the error rate with the bound.

    The error rate counts selected samples that are unseen or mislabeled. A
    violation is flagged only beyond three binomial standard deviations.
    """
    rng = np.random.default_rng(seed)
    s, c, is_id, correct = oracle.sample(n, rng)
    selected = (s > tau1) & (c > tau2)
    n_sel = int(selected.sum())
    bound = lemma_bound(tau1, tau2, oracle.eta)
    report = {"tau1": tau1, "tau2": tau2, "eta": oracle.eta, "n": n, "n_selected": n_sel,
              "bound": bound, "epsilon_hat": None, "allowance": None, "violation": False}
    if n_sel:
        eps = float((selected & ~(is_id & correct)).sum() / n_sel)
        p = min(max(bound, 0.0), 1.0)
        allowance = 3 * np.sqrt(p * (1 - p) / n_sel)
        report.update(epsilon_hat=eps, allowance=float(allowance),
                      violation=bool(eps > bound + allowance))
    return report
