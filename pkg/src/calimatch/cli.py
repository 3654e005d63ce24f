"""Command-line entry point: ``calimatch {prepare,train,evaluate,theory-check,schema}``."""
from __future__ import annotations

import argparse
import inspect
import json
import os
import subprocess
import sys
import traceback
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import FIELD_TYPES, PRESETS, TrainConfig, apply_preset, json_schema
from .data import (AugmentationPair, augment, ingest_image_dataset, load_dataset,
                   make_synthetic, save_dataset)
from .exceptions import CaliMatchError, IngestionError
from .metrics import evaluate, write_report
from .model import load_checkpoint
from .selection import select_batch
from .theory import CalibratedOracle, alignment_report, lemma_check
from .trainer import config_from_checkpoint_meta, train

OUT_ROOT_ENV = "CALIMATCH_OUT_ROOT"
EXIT_USAGE = 2
EXIT_IO = 4
LEMMA_TAUS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
LEMMA_ETAS = (0.0, 0.02, 0.1, 0.2)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _git_dirty() -> bool | None:
    """``True``/``False`` when the package lives in a git work tree, else ``None``."""
    try:
        res = subprocess.run(["git", "status", "--porcelain"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return None
    return bool(res.stdout.strip()) if res.returncode == 0 else None


@dataclass
class RunManifest:
    command: str
    seed: int | None
    config_hash: str | None = None
    config: dict | None = None
    code_version: str = __version__
    started: str = field(default_factory=_now)
    finished: str | None = None
    artifacts: dict = field(default_factory=dict)
    dirty: bool | None = field(default_factory=_git_dirty)

    def finish(self, artifacts: dict) -> "RunManifest":
        self.artifacts = {k: str(v) for k, v in artifacts.items()}
        self.finished = _now()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def verify_manifest(path) -> bool:
    """Recompute the config hash stored in a run manifest."""
    data = json.loads(Path(path).read_text())
    run = data.get("run", data)
    if run.get("config") is None:
        return run.get("config_hash") is None
    return TrainConfig.from_dict(run["config"]).config_hash() == run["config_hash"]


class UsageError(Exception):
    pass


def _out_dir(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUT_ROOT_ENV)
    if not root:
        raise UsageError(f"--out is required (or set {OUT_ROOT_ENV})")
    return Path(root) / default_name


# ------------------------------------------------------------------ commands

def cmd_prepare(args) -> int:
    out = _out_dir(args, "data")
    if args.images:
        ds = ingest_image_dataset(args.images, seen_classes=tuple(args.seen_classes), kappa=args.kappa,
                                  labels_per_class=args.labels_per_class,
                                  n_unlabeled=args.counts[1], n_test=args.counts[2], seed=args.seed)
    else:
        n_labeled, n_unlabeled, n_test = args.counts
        ds = make_synthetic(seed=args.seed, num_seen=args.seen, num_unseen=args.unseen,
                            kappa=args.kappa, n_labeled=n_labeled, n_unlabeled=n_unlabeled,
                            n_test=n_test, dim=args.dim, cluster_spread=args.spread,
                            seen_radius=args.seen_radius, unseen_radius=args.unseen_radius,
                            unseen_lift=args.unseen_lift)
    run = RunManifest(command="prepare", seed=args.seed)
    path = save_dataset(ds, out)
    manifest = json.loads(path.read_text())
    manifest["run"] = run.finish({"manifest": path}).to_dict()
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(path)
    return 0


def _train_config(args) -> TrainConfig:
    base = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if args.preset:
        base = apply_preset(base, args.preset)
    overrides = {f.name: getattr(args, f.name) for f in fields(TrainConfig)
                 if getattr(args, f.name, None) is not None}
    return base.replace(**overrides) if overrides else base


def cmd_train(args) -> int:
    config = _train_config(args)
    out = _out_dir(args, "train")
    ds = load_dataset(args.data) if args.data else make_synthetic(seed=config.seed)
    run = RunManifest(command="train", seed=config.seed, config_hash=config.config_hash(),
                      config=config.to_dict())
    train(ds, config, out_dir=out)
    artifacts = {name: out / name for name in
                 ("log.csv", "epochs.csv", "tables.csv", "checkpoint-best", "checkpoint-last")}
    run.finish(artifacts).write(out)
    print(out / "manifest.json")
    return 0


def _load_checkpoint(path):
    try:
        return load_checkpoint(path)
    except (OSError, KeyError, ValueError) as exc:
        raise IngestionError(f"cannot read checkpoint {path}: {exc}") from exc


def cmd_evaluate(args) -> int:
    model, meta = _load_checkpoint(args.checkpoint)
    config = config_from_checkpoint_meta(meta)
    ds = load_dataset(args.data)
    out = _out_dir(args, "evaluate")
    run = RunManifest(command="evaluate", seed=config.seed, config_hash=config.config_hash(),
                      config=config.to_dict())
    paths = write_report(evaluate(model, ds, config), out)
    run.finish(paths).write(out)
    print(paths["report"])
    return 0


def theory_report(model, dataset, config: TrainConfig, seeds: int, batch_size: int = 64) -> dict:
    """Alignment checks on ``seeds`` random gated batches plus the threshold-grid simulation."""
    view = dataset.training_view()
    truth = dataset.unlabeled_truth()
    pair = AugmentationPair(config.weak_sigma, config.strong_sigma, config.strong_dropout)
    batches = []
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(view.x_unlabeled), size=min(batch_size, len(view.x_unlabeled)),
                         replace=False)
        x = view.x_unlabeled[idx]
        weak = augment(pair, x, "weak", rng)
        strong = augment(pair, x, "strong", rng)
        with torch.no_grad():
            record = select_batch(model(torch.from_numpy(weak)), config.tau1, config.tau2,
                                  use_seen_gate=config.uses_ood_head)
        sel = record.selected
        rep = alignment_report(model, strong[sel], record.pseudo_label[sel], truth[idx][sel])
        batches.append({"seed": seed, **rep.to_dict()})
    grid = [lemma_check(CalibratedOracle(eta=eta), t1, t2, n=10_000, seed=i)
            for i, (t1, t2, eta) in enumerate((a, b, e) for e in LEMMA_ETAS
                                              for a in LEMMA_TAUS for b in LEMMA_TAUS)]
    populated = [b for b in batches if b["n_selected"]]
    return {
        "alignment": batches,
        "alignment_summary": {
            "batches": len(batches), "nonempty": len(populated),
            "bound_holds": sum(b["bound_holds"] for b in populated),
            "max_identity_error": max((b["identity_error"] for b in populated), default=0.0),
            "max_logit_residual_l1": max((b["logit_residual_l1_max"] for b in populated),
                                         default=0.0),
        },
        "lemma": grid,
        "lemma_summary": {"cells": len(grid), "violations": sum(c["violation"] for c in grid),
                          "undefined": sum(c["epsilon_hat"] is None for c in grid)},
    }


def cmd_theory(args) -> int:
    model, meta = _load_checkpoint(args.checkpoint)
    config = config_from_checkpoint_meta(meta)
    ds = load_dataset(args.data)
    if args.out:
        out = Path(args.out)
    elif os.environ.get(OUT_ROOT_ENV):
        out = Path(os.environ[OUT_ROOT_ENV]) / "theory" / "report.json"
    else:
        raise UsageError(f"--out is required (or set {OUT_ROOT_ENV})")
    out.parent.mkdir(parents=True, exist_ok=True)
    run = RunManifest(command="theory-check", seed=config.seed, config_hash=config.config_hash(),
                      config=config.to_dict())
    report = theory_report(model, ds, config, args.seeds)
    report["run"] = run.finish({"report": out}).to_dict()
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(out)
    return 0


def cmd_schema(args) -> int:
    text = json.dumps(json_schema(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# ------------------------------------------------------------------ parser

def _add_config_flags(parser):
    group = parser.add_argument_group("training configuration overrides")
    for name, (kind, nullable) in FIELD_TYPES.items():
        flag = "--" + name.replace("_", "-")
        if kind == "boolean":
            group.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None)
        elif kind == "array":
            group.add_argument(flag, dest=name, type=int, nargs="+", default=None, metavar="N")
        else:
            conv = {"integer": int, "number": float, "string": str}[kind]
            group.add_argument(flag, dest=name, type=conv, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calimatch", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--debug", action="store_true", help="print tracebacks on failure")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="generate or ingest a mismatch dataset")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kappa", type=float, default=0.6)
    p.add_argument("--seen", type=int, default=6, help="number of seen classes (synthetic)")
    p.add_argument("--unseen", type=int, default=4, help="number of unseen classes (synthetic)")
    p.add_argument("--counts", type=int, nargs=3, metavar=("LABELED", "UNLABELED", "TEST"),
                   default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--spread", type=float, default=None)
    p.add_argument("--seen-radius", type=float, default=None)
    p.add_argument("--unseen-radius", type=float, default=None)
    p.add_argument("--unseen-lift", type=float, default=None,
                   help="offset of unseen means along the third axis")
    p.add_argument("--images", help="directory of binary image records to ingest")
    p.add_argument("--seen-classes", type=int, nargs="+", default=[2, 3, 4, 5, 6, 7])
    p.add_argument("--labels-per-class", type=int, default=400)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="JSON file with training configuration fields")
    p.add_argument("--out")
    p.add_argument("--data", help="dataset manifest; defaults to the synthetic benchmark")
    p.add_argument("--preset", choices=list(PRESETS))
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("theory-check", help="gradient-alignment and selection-bound checks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--out", help="report file path")
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("schema", help="print the training-configuration JSON schema")
    p.add_argument("--out")
    p.set_defaults(func=cmd_schema)
    return parser


def _check_prepare_args(parser, args):
    if args.command != "prepare":
        return
    synthetic = {"dim": "dim", "spread": "cluster_spread", "seen_radius": "seen_radius",
                 "unseen_radius": "unseen_radius", "unseen_lift": "unseen_lift"}
    if args.images and any(getattr(args, a) is not None for a in synthetic):
        parser.error("--dim/--spread/--*-radius/--unseen-lift apply to synthetic data only")
    if args.images:
        if args.counts is None:
            args.counts = [0, 20000, 0]
        args.counts[2] = args.counts[2] or None
    else:
        args.counts = args.counts or [300, 5000, 2000]
        for attr, name in synthetic.items():
            if getattr(args, attr) is None:
                setattr(args, attr, _synthetic_default(name))


def _synthetic_default(name):
    return inspect.signature(make_synthetic).parameters[name].default


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _check_prepare_args(parser, args)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"calimatch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CaliMatchError as exc:
        if args.debug:
            traceback.print_exc()
        print(f"calimatch: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        if args.debug:
            traceback.print_exc()
        print(f"calimatch: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
