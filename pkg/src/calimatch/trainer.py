"""The CaliMatch training loop with warm-up gating and ablation switches.

Epochs are counted from 1. Iterations in epochs ``< warmup_epochs`` optimize the
labeled cross-entropy, the OvR loss and the soft consistency loss; from epoch
``warmup_epochs`` on, the calibration losses and the masked FixMatch loss are
added. Reference tables are rebuilt from the validation split at the end of
every epoch.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .calibration import ReferenceTable, refresh_tables
from .config import TrainConfig
from .data import AugmentationPair, MismatchDataset, TrainingView, augment
from .exceptions import ConfigError, InvariantError, NumericError
from .losses import (LossBreakdown, loss_ce, loss_fix, loss_mcal, loss_ocal, loss_ood,
                     loss_soft_consistency)
from .model import CaliMatchNet, ModelOutputs, make_toy_model, save_checkpoint
from .selection import SelectionRecord, select_batch, selection_diagnostics

LOG_FIELDS = ["epoch", "iteration", "ce", "ood", "sc", "mcal", "ocal", "fix", "total",
              "T_M", "T_O", "lr", "n_selected"]
DIAGNOSTIC_FIELDS = ["pseudo_label_accuracy", "seen_selected_fraction",
                     "unseen_in_high_confidence", "unseen_in_low_ood_high_confidence",
                     "selection_error_rate", "n_selected"]
EPOCH_FIELDS = (["epoch", "val_accuracy", "gamma_populated_bins", "gamma_fallback",
                 "gamma_weighted_value", "delta_populated_bins", "delta_fallback",
                 "delta_weighted_value", "T_M", "T_O"] + DIAGNOSTIC_FIELDS)
TABLE_FIELDS = ["epoch", "table", "bin", "count", "value"]


@dataclass
class TrainState:
    model: CaliMatchNet
    optimizer: torch.optim.Optimizer
    aug_rng: np.random.Generator
    batch_rng: np.random.Generator
    gamma: ReferenceTable | None = None
    delta: ReferenceTable | None = None
    epoch: int = 1
    iteration: int = 0
    last_selection: SelectionRecord | None = None


@dataclass
class TrainResult:
    model: CaliMatchNet
    best_state: dict
    best_val_accuracy: float
    log_rows: list = field(default_factory=list)
    epoch_rows: list = field(default_factory=list)
    table_rows: list = field(default_factory=list)
    gamma: ReferenceTable | None = None
    delta: ReferenceTable | None = None


def _validate_view(view: TrainingView, config: TrainConfig):
    problems = []
    if view.x_labeled.ndim != 2 or len(view.x_labeled) == 0:
        problems.append("labeled features must be a nonempty 2-D array")
    for name in ("x_unlabeled", "x_val"):
        x = getattr(view, name)
        if x.ndim != 2 or x.shape[1] != view.x_labeled.shape[1]:
            problems.append(f"{name} has shape {x.shape}, expected (n, {view.x_labeled.shape[1]})")
    if len(view.x_val) == 0:
        problems.append("validation split is empty")
    if len(view.x_unlabeled) == 0 and not config.disable_unlabeled:
        problems.append("unlabeled split is empty")
    for name in ("y_labeled", "y_val"):
        y = getattr(view, name)
        if len(y) and (y.min() < 0 or y.max() >= view.num_classes):
            problems.append(f"{name} contains labels outside the seen classes")
    if view.num_classes < 2:
        problems.append("at least two seen classes are required")
    if problems:
        raise ConfigError("dataset does not match the configuration", problems)


def init_state(view: TrainingView, config: TrainConfig) -> TrainState:
    model = make_toy_model(config.seed, view.input_dim, config.hidden_dims, view.num_classes)
    if config.optimizer == "adam":
        opt = torch.optim.Adam(model.network_parameters(), lr=config.lr,
                               weight_decay=config.weight_decay)
        opt.add_param_group({"params": model.temperature_parameters(), "weight_decay": 0.0})
    else:
        opt = torch.optim.SGD(model.network_parameters(), lr=config.lr, momentum=0.9, nesterov=True,
                              weight_decay=config.weight_decay)
        opt.add_param_group({"params": model.temperature_parameters(), "weight_decay": 0.0})
    aug_seq, batch_seq = np.random.SeedSequence(config.seed).spawn(2)
    return TrainState(model=model, optimizer=opt,
                      aug_rng=np.random.default_rng(aug_seq),
                      batch_rng=np.random.default_rng(batch_seq))


def total_from_components(c: dict, config: TrainConfig) -> torch.Tensor:
    """Weighted sum in a fixed order, so zeroed terms leave the value bit-identical."""
    total = c["ce"] + config.lambda_ood * c["ood"]
    total = total + config.lambda_sc * c["sc"]
    total = total + c["mcal"]
    total = total + config.lambda_ocal * c["ocal"]
    return total + c["fix"]


def compute_losses(state: TrainState, x_l, y_l, x_u, config: TrainConfig):
    """Augment, forward and assemble every loss term for one iteration.

    Returns ``(total, components, selection_record_or_None)``. Augmentations
    are drawn identically for every preset so paired runs share their noise.
    """
    pair = AugmentationPair(config.weak_sigma, config.strong_sigma, config.strong_dropout)
    rng = state.aug_rng
    xl = augment(pair, x_l, "weak", rng)
    xw1 = augment(pair, x_u, "weak", rng)
    xw2 = augment(pair, x_u, "weak", rng)
    xs = augment(pair, x_u, "strong", rng)

    model = state.model
    dtype = model.T_M.dtype
    nl, nu = len(xl), len(xw1)
    out = model(torch.from_numpy(np.concatenate([xl, xw1, xw2, xs])).to(dtype))
    out_l = out[:nl]
    out_w1, out_w2, out_s = out[nl:nl + nu], out[nl + nu:nl + 2 * nu], out[nl + 2 * nu:]
    y = torch.as_tensor(y_l, dtype=torch.long)
    red = config.reduction
    zero = torch.zeros((), dtype=dtype)

    c = dict(ce=loss_ce(out_l, y, red), ood=zero, sc=zero, mcal=zero, ocal=zero, fix=zero)
    if config.uses_ood_head:
        c["ood"] = loss_ood(out_l, y, red)
        c["sc"] = loss_soft_consistency(out_w1, out_w2, red)

    record = None
    if state.epoch >= config.warmup_epochs:
        if config.uses_mcal:
            if state.gamma is None:
                raise InvariantError("classifier reference table requested before it was built")
            gammas = state.gamma.lookup(out_l.p.detach().max(dim=1).values.numpy())
            c["mcal"] = loss_mcal(out_l, y, torch.from_numpy(gammas), red)
        if config.uses_ocal:
            if state.delta is None:
                raise InvariantError("OOD reference table requested before it was built")
            deltas = state.delta.lookup(out_l.q.detach().max(dim=1).values.numpy())
            c["ocal"] = loss_ocal(out_l, y, torch.from_numpy(deltas), red, config.ocal_min_mode)
        if not config.disable_unlabeled:
            record = select_batch(out_w1.detach(), config.tau1, config.tau2,
                                  use_seen_gate=config.uses_ood_head)
            c["fix"] = loss_fix(out_w1.detach(), out_s, record.mask, red)
    return total_from_components(c, config), c, record


def train_step(state: TrainState, x_l, y_l, x_u, config: TrainConfig):
    """One optimizer update of all parameters; returns ``(state, LossBreakdown)``."""
    state.model.train()
    total, c, record = compute_losses(state, x_l, y_l, x_u, config)
    for name, value in c.items():
        if not torch.isfinite(value):
            raise NumericError(f"non-finite {name} loss at iteration {state.iteration}")
    if not torch.isfinite(total):
        raise NumericError(f"non-finite total loss at iteration {state.iteration}")
    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()
    state.model.clamp_temperatures_()
    state.iteration += 1
    breakdown = LossBreakdown(
        **{k: v.item() for k, v in c.items()}, total=total.item(),
        lambda_ood=config.lambda_ood, lambda_ocal=config.lambda_ocal, lambda_sc=config.lambda_sc,
    )
    state.last_selection = record
    return state, breakdown


def _index_stream(rng: np.random.Generator, n: int, batch: int):
    """Endless minibatches drawn from successive shuffles of ``range(n)``."""
    buf = np.empty(0, dtype=np.int64)
    while True:
        while len(buf) < batch:
            buf = np.concatenate([buf, rng.permutation(n)])
        yield buf[:batch]
        buf = buf[batch:]


@torch.no_grad()
def predict_outputs(model: CaliMatchNet, x, batch_size: int = 4096):
    model.eval()
    x = torch.as_tensor(np.asarray(x)).to(model.T_M.dtype)
    parts = [model(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return ModelOutputs(*(torch.cat(ts) for ts in zip(*(p.as_tuple() for p in parts))))


def _accuracy(model, x, y) -> float:
    out = predict_outputs(model, x)
    return float((out.p.argmax(dim=1).numpy() == np.asarray(y)).mean())


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path, fieldnames, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k)) for k in fieldnames})


def _dump_selection(path, record: SelectionRecord):
    rows = [{"index": i, "s": float(record.s[i]), "c": float(record.c[i]), "u": float(record.u[i]),
             "pseudo_label": int(record.pseudo_label[i]), "selected": int(record.selected[i])}
            for i in range(len(record))]
    write_csv(path, ["index", "s", "c", "u", "pseudo_label", "selected"], rows)


def train(data, config: TrainConfig, out_dir=None, truth=None) -> TrainResult:
    """Run the full loop.

    ``data`` is a :class:`MismatchDataset` (its hidden unlabeled labels feed the
    diagnostics only) or a bare :class:`TrainingView` with optional ``truth``.
    With ``out_dir`` set, writes ``log.csv``, ``epochs.csv``, ``tables.csv``,
    ``checkpoint-best`` and ``checkpoint-last``.
    """
    if isinstance(data, MismatchDataset):
        view, truth = data.training_view(), data.unlabeled_truth()
    else:
        view = data
    _validate_view(view, config)

    state = init_state(view, config)
    n_u = max(len(view.x_unlabeled), 1)
    iters = config.iterations_per_epoch or math.ceil(n_u / config.batch_size_unlabeled)
    total_iters = iters * config.epochs
    decay_at = (config.lr_decay_iteration if config.lr_decay_iteration is not None
                else int(0.8 * total_iters))
    lab_stream = _index_stream(state.batch_rng, len(view.x_labeled), config.batch_size_labeled)
    unl_stream = _index_stream(state.batch_rng, n_u, config.batch_size_unlabeled)
    x_unl = view.x_unlabeled if len(view.x_unlabeled) else view.x_labeled[:1]

    if config.warmup_epochs <= 1:
        state.gamma, state.delta = refresh_tables(state.model, view.x_val, view.y_val, config.n_bins)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    cfg_hash = config.config_hash()
    result = TrainResult(model=state.model, best_state={}, best_val_accuracy=-1.0)

    for epoch in range(1, config.epochs + 1):
        state.epoch = epoch
        for _ in range(iters):
            lr = config.lr * (config.lr_decay_factor if state.iteration >= decay_at else 1.0)
            for group in state.optimizer.param_groups:
                group["lr"] = lr
            li, ui = next(lab_stream), next(unl_stream)
            _, b = train_step(state, view.x_labeled[li], view.y_labeled[li], x_unl[ui], config)
            rec = state.last_selection
            result.log_rows.append({
                "epoch": epoch, "iteration": state.iteration, **b.as_dict(),
                "T_M": state.model.T_M.item(), "T_O": state.model.T_O.item(), "lr": lr,
                "n_selected": int(rec.selected.sum()) if rec is not None else 0,
            })

        state.gamma, state.delta = refresh_tables(state.model, view.x_val, view.y_val, config.n_bins)
        row = {"epoch": epoch, "T_M": state.model.T_M.item(), "T_O": state.model.T_O.item()}
        for tname, table in (("gamma", state.gamma), ("delta", state.delta)):
            for k, v in table.summary().items():
                row[f"{tname}_{k}"] = v
            for m, count, value in table.rows():
                result.table_rows.append({"epoch": epoch, "table": tname, "bin": m,
                                          "count": count, "value": value})
        if epoch % config.eval_period == 0 or epoch == config.epochs:
            acc = _accuracy(state.model, view.x_val, view.y_val)
            row["val_accuracy"] = acc
            if acc > result.best_val_accuracy:
                result.best_val_accuracy = acc
                result.best_state = {k: v.clone() for k, v in state.model.state_dict().items()}
                if out is not None:
                    _save(out / "checkpoint-best", state, config, cfg_hash, epoch)
        if truth is not None and len(view.x_unlabeled) and not config.disable_unlabeled:
            record = select_batch(predict_outputs(state.model, view.x_unlabeled),
                                  config.tau1, config.tau2, use_seen_gate=config.uses_ood_head)
            row.update(selection_diagnostics(record, truth))
            if out is not None and config.dump_selection:
                _dump_selection(out / f"selection-epoch{epoch:03d}.csv", record)
        result.epoch_rows.append(row)

    result.gamma, result.delta = state.gamma, state.delta
    if out is not None:
        _save(out / "checkpoint-last", state, config, cfg_hash, config.epochs)
        write_csv(out / "log.csv", LOG_FIELDS, result.log_rows)
        write_csv(out / "epochs.csv", EPOCH_FIELDS, result.epoch_rows)
        write_csv(out / "tables.csv", TABLE_FIELDS, result.table_rows)
    return result


def _save(path, state: TrainState, config: TrainConfig, cfg_hash: str, epoch: int):
    meta = {"config": config.to_dict(), "epoch": epoch,
            "gamma": state.gamma.to_dict() if state.gamma else None,
            "delta": state.delta.to_dict() if state.delta else None}
    save_checkpoint(path, state.model, cfg_hash, meta)


def config_from_checkpoint_meta(meta: dict) -> TrainConfig:
    return TrainConfig.from_dict(meta["config"])
