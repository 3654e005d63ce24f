"""Training configuration, validation, presets and the JSON schema."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .exceptions import ConfigError
from .losses import OCAL_MIN_MODES, REDUCTIONS

OPTIMIZERS = ("adam", "sgd")


@dataclass
class TrainConfig:
    epochs: int = 30
    iterations_per_epoch: int | None = None
    warmup_epochs: int = 5
    lr: float = 0.003
    lr_decay_factor: float = 0.2
    lr_decay_iteration: int | None = None
    optimizer: str = "adam"
    weight_decay: float = 0.0
    batch_size_labeled: int = 50
    batch_size_unlabeled: int = 50
    lambda_ood: float = 0.1
    lambda_ocal: float = 0.001
    lambda_sc: float = 0.5
    tau1: float = 0.5
    tau2: float = 0.95
    n_bins: int = 30
    seed: int = 0
    hidden_dims: list = field(default_factory=lambda: [64, 64])
    weak_sigma: float = 0.1
    strong_sigma: float = 0.4
    strong_dropout: float = 0.0
    disable_mcal: bool = False
    disable_ocal: bool = False
    disable_ood_head: bool = False
    disable_unlabeled: bool = False
    ocal_min_mode: str = "verbatim"
    reduction: str = "mean"
    eval_period: int = 1
    dump_selection: bool = False

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError("invalid training configuration", problems)

    def problems(self) -> list:
        out, bad = [], set()
        for f in fields(self):
            kind, nullable = FIELD_TYPES[f.name]
            value = getattr(self, f.name)
            if value is None and nullable:
                continue
            if not _type_ok(value, kind):
                out.append(f"{f.name}: expected {kind}, got {value!r}")
                bad.add(f.name)
        for names, check, msg in _VALUE_CHECKS:
            if not bad.intersection(names) and not check(self):
                out.append(f"{names[0]}: {msg}")
        return out

    # the "calibrated" flags decide which probability is reported as confidence
    @property
    def uses_mcal(self) -> bool:
        return not (self.disable_mcal or self.disable_unlabeled)

    @property
    def uses_ocal(self) -> bool:
        return not (self.disable_ocal or self.disable_ood_head or self.disable_unlabeled)

    @property
    def uses_ood_head(self) -> bool:
        return not (self.disable_ood_head or self.disable_unlabeled)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - names)
        problems = [f"{k}: unknown key" for k in unknown]
        try:
            cfg = cls.__new__(cls)
            defaults = cls()
            for f in fields(cls):
                setattr(cfg, f.name, data.get(f.name, getattr(defaults, f.name)))
            problems += cfg.problems()
        except ConfigError as exc:  # pragma: no cover - defaults are valid
            problems += exc.problems
        if problems:
            raise ConfigError("invalid training configuration", problems)
        return cfg

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(data)

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update(changes)
        return TrainConfig.from_dict(d)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


_VALUE_CHECKS = [
    (("epochs",), lambda c: c.epochs >= 1, "must be >= 1"),
    (("iterations_per_epoch",),
     lambda c: c.iterations_per_epoch is None or c.iterations_per_epoch >= 1, "must be >= 1"),
    (("warmup_epochs",), lambda c: c.warmup_epochs >= 1, "must be >= 1"),
    (("lr",), lambda c: c.lr > 0, "must be > 0"),
    (("lr_decay_factor",), lambda c: 0 < c.lr_decay_factor <= 1, "must lie in (0, 1]"),
    (("lr_decay_iteration",),
     lambda c: c.lr_decay_iteration is None or c.lr_decay_iteration >= 0, "must be >= 0"),
    (("optimizer",), lambda c: c.optimizer in OPTIMIZERS, f"must be one of {OPTIMIZERS}"),
    (("weight_decay",), lambda c: c.weight_decay >= 0, "must be >= 0"),
    (("batch_size_labeled",), lambda c: c.batch_size_labeled >= 1, "must be >= 1"),
    (("batch_size_unlabeled",), lambda c: c.batch_size_unlabeled >= 1, "must be >= 1"),
    (("lambda_ood",), lambda c: c.lambda_ood >= 0, "must be >= 0"),
    (("lambda_ocal",), lambda c: c.lambda_ocal >= 0, "must be >= 0"),
    (("lambda_sc",), lambda c: c.lambda_sc >= 0, "must be >= 0"),
    (("tau1",), lambda c: 0 < c.tau1 < 1, "must lie in (0, 1)"),
    (("tau2",), lambda c: 0 < c.tau2 < 1, "must lie in (0, 1)"),
    (("n_bins",), lambda c: c.n_bins >= 1, "must be >= 1"),
    (("hidden_dims",),
     lambda c: len(c.hidden_dims) >= 1 and all(_type_ok(h, "integer") and h >= 1 for h in c.hidden_dims),
     "must be a nonempty list of positive integers"),
    (("weak_sigma",), lambda c: c.weak_sigma >= 0, "must be >= 0"),
    (("strong_sigma",), lambda c: c.strong_sigma >= 0, "must be >= 0"),
    (("strong_dropout",), lambda c: 0 <= c.strong_dropout < 1, "must lie in [0, 1)"),
    (("ocal_min_mode",), lambda c: c.ocal_min_mode in OCAL_MIN_MODES,
     f"must be one of {OCAL_MIN_MODES}"),
    (("reduction",), lambda c: c.reduction in REDUCTIONS, f"must be one of {REDUCTIONS}"),
    (("eval_period",), lambda c: c.eval_period >= 1, "must be >= 1"),
]

FIELD_TYPES = {
    "epochs": ("integer", False),
    "iterations_per_epoch": ("integer", True),
    "warmup_epochs": ("integer", False),
    "lr": ("number", False),
    "lr_decay_factor": ("number", False),
    "lr_decay_iteration": ("integer", True),
    "optimizer": ("string", False),
    "weight_decay": ("number", False),
    "batch_size_labeled": ("integer", False),
    "batch_size_unlabeled": ("integer", False),
    "lambda_ood": ("number", False),
    "lambda_ocal": ("number", False),
    "lambda_sc": ("number", False),
    "tau1": ("number", False),
    "tau2": ("number", False),
    "n_bins": ("integer", False),
    "seed": ("integer", False),
    "hidden_dims": ("array", False),
    "weak_sigma": ("number", False),
    "strong_sigma": ("number", False),
    "strong_dropout": ("number", False),
    "disable_mcal": ("boolean", False),
    "disable_ocal": ("boolean", False),
    "disable_ood_head": ("boolean", False),
    "disable_unlabeled": ("boolean", False),
    "ocal_min_mode": ("string", False),
    "reduction": ("string", False),
    "eval_period": ("integer", False),
    "dump_selection": ("boolean", False),
}

_ENUMS = {"optimizer": OPTIMIZERS, "ocal_min_mode": OCAL_MIN_MODES, "reduction": REDUCTIONS}


def _type_ok(value, kind) -> bool:
    if kind == "integer":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind == "boolean":
        return isinstance(value, bool)
    if kind == "string":
        return isinstance(value, str)
    if kind == "array":
        return isinstance(value, list)
    return False


PRESETS = {
    "calimatch": {"disable_mcal": False, "disable_ocal": False,
                  "disable_ood_head": False, "disable_unlabeled": False},
    "openmatch": {"disable_mcal": True, "disable_ocal": True,
                  "disable_ood_head": False, "disable_unlabeled": False},
    "fixmatch": {"disable_mcal": True, "disable_ocal": True,
                 "disable_ood_head": True, "disable_unlabeled": False},
    "supervised": {"disable_mcal": True, "disable_ocal": True,
                   "disable_ood_head": True, "disable_unlabeled": True},
}


def apply_preset(config: TrainConfig, preset: str) -> TrainConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; valid presets: {', '.join(PRESETS)}")
    return config.replace(**PRESETS[preset])


def json_schema() -> dict:
    defaults = TrainConfig().to_dict()
    props = {}
    for name, (kind, nullable) in FIELD_TYPES.items():
        prop = {"type": [kind, "null"] if nullable else kind, "default": defaults[name]}
        if kind == "array":
            prop["items"] = {"type": "integer", "minimum": 1}
        if name in _ENUMS:
            prop["enum"] = list(_ENUMS[name])
        props[name] = prop
    return {
        "$schema": "http://json-schema.org/draft-07/schema#",
        "title": "TrainConfig",
        "type": "object",
        "properties": props,
        "additionalProperties": False,
    }
