"""Accuracy, ECE, OOD F1, reliability tables and threshold sweeps."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .calibration import bin_edges, bin_indices
from .config import TrainConfig
from .data import MismatchDataset
from .exceptions import ConfigError

ECE_BINS = 15
OOD_DECISION = 0.5
SWEEP_TAU1 = (0.5, 0.6, 0.7, 0.8)
RELIABILITY_COLUMNS = ["bin_lo", "bin_hi", "count", "mean_confidence", "accuracy", "gap"]


@dataclass(frozen=True)
class ReliabilityTable:
    edges: np.ndarray
    counts: np.ndarray
    mean_confidence: np.ndarray
    accuracy: np.ndarray

    @property
    def gap(self) -> np.ndarray:
        return np.abs(self.accuracy - self.mean_confidence)

    @property
    def ece(self) -> float:
        n = self.counts.sum()
        return float((self.counts / n * self.gap).sum()) if n else 0.0

    def rows(self):
        for b in range(len(self.counts)):
            yield {
                "bin_lo": float(self.edges[b]), "bin_hi": float(self.edges[b + 1]),
                "count": int(self.counts[b]),
                "mean_confidence": float(self.mean_confidence[b]),
                "accuracy": float(self.accuracy[b]), "gap": float(self.gap[b]),
            }


def reliability_table(confidences, correct, n_bins: int = ECE_BINS) -> ReliabilityTable:
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    hit = np.asarray(correct, dtype=np.float64).ravel()
    if conf.size == 0:
        raise ValueError("ECE needs at least one sample")
    if conf.shape != hit.shape:
        raise ValueError(f"length mismatch: {conf.size} confidences vs {hit.size} flags")
    idx = bin_indices(conf, n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    safe = np.maximum(counts, 1)
    mean_conf = np.bincount(idx, weights=conf, minlength=n_bins) / safe
    acc = np.bincount(idx, weights=hit, minlength=n_bins) / safe
    return ReliabilityTable(bin_edges(n_bins), counts.astype(np.int64), mean_conf, acc)


def ece(confidences, correct, n_bins: int = ECE_BINS):
    """Expected calibration error with equal-width bins; returns ``(ece, table)``."""
    table = reliability_table(confidences, correct, n_bins)
    return table.ece, table


def f1_score(predicted_positive, actual_positive) -> float | None:
    """F1 of the positive class; ``None`` when there are neither predicted nor actual positives."""
    pred = np.asarray(predicted_positive, dtype=bool)
    act = np.asarray(actual_positive, dtype=bool)
    tp = int((pred & act).sum())
    fp = int((pred & ~act).sum())
    fn = int((~pred & act).sum())
    if tp + fp + fn == 0:
        return None
    return 2 * tp / (2 * tp + fp + fn)


def emit_reliability_data(table: ReliabilityTable, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RELIABILITY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in table.rows():
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def read_reliability_data(path) -> ReliabilityTable:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    edges = [float(rows[0]["bin_lo"])] + [float(r["bin_hi"]) for r in rows]
    return ReliabilityTable(
        edges=np.array(edges),
        counts=np.array([int(r["count"]) for r in rows]),
        mean_confidence=np.array([float(r["mean_confidence"]) for r in rows]),
        accuracy=np.array([float(r["accuracy"]) for r in rows]),
    )


@dataclass
class MetricsReport:
    accuracy: float
    ece: float
    ece_raw: float
    ece_scaled: float
    confidence_source: str
    ood_f1: float | None
    ood_ece: float
    ood_accuracy: float
    n_test_seen: int
    n_test_all: int
    reliability: ReliabilityTable = field(repr=False)
    ood_reliability: ReliabilityTable = field(repr=False)
    sweep: list = field(default_factory=list)

    def scalars(self) -> dict:
        d = asdict(self)
        d.pop("reliability")
        d.pop("ood_reliability")
        return d

    def to_json(self) -> str:
        return json.dumps(self.scalars(), indent=2, sort_keys=True) + "\n"


def ood_scores(outputs, use_ood_head: bool):
    """Return ``(s, u)``; without an OOD head ``u = 1 - max p``."""
    if use_ood_head:
        s = (outputs.p_s * outputs.q_s).sum(dim=-1).numpy()
    else:
        s = outputs.p.max(dim=-1).values.numpy()
    return s, 1 - s


def threshold_sweep(s, unseen, seen_correct_by_s=None, tau1_grid=SWEEP_TAU1):
    """Rows of ``tau1 -> (accuracy, f1, selected_fraction)``.

    ``f1`` and ``selected_fraction`` use the samples whose detection confidence
    ``max(s, 1 - s)`` exceeds ``tau1``: F1 of the unseen-positive decision on
    that subset, and the share of seen-class samples kept. ``accuracy`` is the
    classification accuracy of seen-class test samples with ``s > tau1``;
    ``seen_correct_by_s`` is ``(s_seen, correct_seen)`` for that purpose.
    """
    s = np.asarray(s)
    unseen = np.asarray(unseen, dtype=bool)
    conf = np.maximum(s, 1 - s)
    decision = (1 - s) > OOD_DECISION
    rows = []
    for tau in tau1_grid:
        keep = conf > tau
        row = {
            "tau1": tau,
            "f1": f1_score(decision[keep], unseen[keep]),
            "selected_fraction": float(keep[~unseen].mean()) if (~unseen).any() else None,
            "accuracy": None,
        }
        if seen_correct_by_s is not None:
            s_seen, correct = (np.asarray(a) for a in seen_correct_by_s)
            accepted = s_seen > tau
            row["accuracy"] = float(correct[accepted].mean()) if accepted.any() else None
        rows.append(row)
    return rows


def evaluate(model, dataset: MismatchDataset, config: TrainConfig) -> MetricsReport:
    """Classification metrics on ``test_seen`` and OOD metrics on ``test_all``."""
    from .trainer import predict_outputs

    missing = [n for n in ("test_seen", "test_all") if n not in dataset.splits]
    if missing:
        raise ConfigError(f"dataset lacks test split(s): {', '.join(missing)}")
    seen_split, all_split = dataset["test_seen"], dataset["test_all"]
    if seen_split.x.shape[1] != model.input_dim:
        raise ConfigError(f"test features have {seen_split.x.shape[1]} dims, model expects {model.input_dim}")

    y_seen = dataset.seen_index(seen_split.y)
    out = predict_outputs(model, seen_split.x)
    pred = out.p.argmax(dim=1).numpy()
    correct = pred == y_seen
    ece_raw, table_raw = ece(out.p.max(dim=1).values.numpy(), correct)
    ece_scaled, table_scaled = ece(out.p_s.max(dim=1).values.numpy(), correct)
    calibrated = config.uses_mcal
    s_seen, _ = ood_scores(out, config.uses_ood_head)

    out_all = predict_outputs(model, all_split.x)
    unseen = dataset.seen_index(all_split.y) < 0
    s, u = ood_scores(out_all, config.uses_ood_head)
    decision = u > OOD_DECISION
    ood_ece, ood_table = ece(np.maximum(s, u), decision == unseen)

    return MetricsReport(
        accuracy=float(correct.mean()),
        ece=ece_scaled if calibrated else ece_raw,
        ece_raw=ece_raw,
        ece_scaled=ece_scaled,
        confidence_source="p_s" if calibrated else "p",
        ood_f1=f1_score(decision, unseen),
        ood_ece=ood_ece,
        ood_accuracy=float((decision == unseen).mean()),
        n_test_seen=len(seen_split),
        n_test_all=len(all_split),
        reliability=table_scaled if calibrated else table_raw,
        ood_reliability=ood_table,
        sweep=threshold_sweep(s, unseen, (s_seen, correct)),
    )


def write_report(report: MetricsReport, out_dir) -> dict:
    """Write ``report.json``, ``reliability_*.csv`` and ``sweep.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": out / "report.json",
        "reliability_multiclass": emit_reliability_data(report.reliability,
                                                        out / "reliability_multiclass.csv"),
        "reliability_ood": emit_reliability_data(report.ood_reliability, out / "reliability_ood.csv"),
        "sweep": out / "sweep.csv",
    }
    paths["report"].write_text(report.to_json())
    with open(paths["sweep"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["tau1", "accuracy", "f1", "selected_fraction"],
                           lineterminator="\n")
        w.writeheader()
        for row in report.sweep:
            w.writerow({k: "" if v is None else repr(v) for k, v in row.items()})
    return {k: str(v) for k, v in paths.items()}
