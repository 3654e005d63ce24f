"""Shared-encoder network with a softmax classifier head, a one-vs-rest OOD
head and two learnable temperatures, plus checkpoint serialization.

Checkpoint layout (``.npz``-compatible zip, readable with ``numpy.load``):

* one ``<parameter-name>.npy`` member per tensor of the state dict
  (``T_M`` and ``T_O`` are stored as 0-d arrays like any other parameter);
* ``__meta__.npy``: a 0-d unicode array holding a JSON document with the
  architecture (``input_dim``, ``hidden_dims``, ``num_classes``), the creating
  ``config_hash`` and any extra metadata (reference tables, config).

Member timestamps are pinned so identical models produce identical bytes.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .exceptions import ConfigError, NumericError

TEMPERATURE_INIT = 1.5
TEMPERATURE_MIN = 0.05
TEMPERATURE_MAX = 10.0
PROB_EPS = 1e-7

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class ModelOutputs:
    """The probability views of one forward pass (batched, shape ``(n, K)``)."""

    z_f: torch.Tensor
    z_g: torch.Tensor
    p: torch.Tensor
    q: torch.Tensor
    p_s: torch.Tensor
    q_s: torch.Tensor

    def __len__(self):
        return self.z_f.shape[0]

    def detach(self) -> "ModelOutputs":
        return ModelOutputs(*(t.detach() for t in self.as_tuple()))

    def as_tuple(self):
        return (self.z_f, self.z_g, self.p, self.q, self.p_s, self.q_s)

    def __getitem__(self, index) -> "ModelOutputs":
        return ModelOutputs(*(t[index] for t in self.as_tuple()))


def outputs_from_logits(z_f, z_g, t_m, t_o) -> ModelOutputs:
    """Build all probability views from raw logits and the two temperatures."""
    return ModelOutputs(
        z_f=z_f,
        z_g=z_g,
        p=F.softmax(z_f, dim=-1),
        q=torch.sigmoid(z_g),
        p_s=F.softmax(z_f / t_m, dim=-1),
        q_s=F.softmax(z_g / t_o, dim=-1),
    )


class CaliMatchNet(nn.Module):
    """MLP encoder feeding a K-way classifier head and a K-output OvR head."""

    def __init__(self, input_dim: int, hidden_dims: Sequence[int], num_classes: int):
        super().__init__()
        if num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
        if not hidden_dims:
            raise ConfigError("hidden_dims must be nonempty")
        if input_dim < 1 or any(h < 1 for h in hidden_dims):
            raise ConfigError(f"layer widths must be positive: {input_dim}, {list(hidden_dims)}")
        self.input_dim = int(input_dim)
        self.hidden_dims = [int(h) for h in hidden_dims]
        self.num_classes = int(num_classes)

        layers = []
        width = self.input_dim
        for h in self.hidden_dims:
            layers += [nn.Linear(width, h), nn.ReLU()]
            width = h
        self.encoder = nn.Sequential(*layers)
        self.classifier = nn.Linear(width, num_classes)
        self.ood_head = nn.Linear(width, num_classes)
        self.T_M = nn.Parameter(torch.tensor(TEMPERATURE_INIT))
        self.T_O = nn.Parameter(torch.tensor(TEMPERATURE_INIT))

    @property
    def architecture(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "num_classes": self.num_classes,
        }

    def logits(self, x: torch.Tensor):
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ConfigError(
                f"expected input of shape (n, {self.input_dim}), got {tuple(x.shape)}"
            )
        if x.shape[0] < 1:
            raise ConfigError("batch must contain at least one sample")
        h = self.encoder(x)
        z_f = self.classifier(h)
        z_g = self.ood_head(h)
        for name, z in (("classifier", z_f), ("ood_head", z_g)):
            if not torch.isfinite(z).all():
                raise NumericError(f"non-finite logits from the {name} head")
        return z_f, z_g

    def forward(self, x: torch.Tensor) -> ModelOutputs:
        z_f, z_g = self.logits(x)
        return outputs_from_logits(z_f, z_g, self.T_M, self.T_O)

    def temperature_parameters(self):
        return [self.T_M, self.T_O]

    def network_parameters(self):
        """Every parameter except the temperatures."""
        temps = {id(self.T_M), id(self.T_O)}
        return [p for p in self.parameters() if id(p) not in temps]

    @torch.no_grad()
    def clamp_temperatures_(self):
        self.T_M.clamp_(TEMPERATURE_MIN, TEMPERATURE_MAX)
        self.T_O.clamp_(TEMPERATURE_MIN, TEMPERATURE_MAX)


def make_toy_model(seed: int, input_dim: int, hidden_dims: Sequence[int],
                   num_classes: int, dtype=torch.float64) -> CaliMatchNet:
    """Deterministically initialized model; temperatures start at 1.5."""
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    # fork_rng keeps the caller's global torch stream untouched
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = CaliMatchNet(input_dim, hidden_dims, num_classes)
    return model.to(dtype)


def _write_member(zf: zipfile.ZipFile, name: str, array: np.ndarray):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.asarray(array), allow_pickle=False)
    info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, buf.getvalue())


def save_checkpoint(path, model: CaliMatchNet, config_hash: str = "", meta: dict | None = None):
    header = {"architecture": model.architecture, "config_hash": config_hash}
    header.update(meta or {})
    with zipfile.ZipFile(path, "w") as zf:
        for name, tensor in model.state_dict().items():
            _write_member(zf, name, tensor.detach().cpu().numpy())
        _write_member(zf, "__meta__", np.array(json.dumps(header, sort_keys=True)))


def load_checkpoint(path, dtype=torch.float64):
    """Return ``(model, meta)`` from a file written by :func:`save_checkpoint`."""
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["__meta__"]))
        arch = meta["architecture"]
        model = CaliMatchNet(arch["input_dim"], arch["hidden_dims"], arch["num_classes"]).to(dtype)
        state = {k: torch.from_numpy(archive[k].copy()).to(dtype)
                 for k in archive.files if k != "__meta__"}
    model.load_state_dict(state)
    return model, meta
