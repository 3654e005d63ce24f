"""Label-distribution-mismatch datasets and vector augmentations.

On-disk layout written by :func:`save_dataset` (one directory per dataset):

``manifest.json``
    ``{"format", "seed", "kappa", "seen_classes", "unseen_classes", "dim",
    "counts": {split: n}, "files": [...], "checksum"}``; ``checksum`` is the
    SHA-256 of the split files concatenated in ``files`` order.

``<split>.x.bin`` / ``<split>.y.bin`` / ``<split>.ids.bin``
    Flat arrays with a 28-byte header: 8-byte magic ``b"CMARRAY1"``,
    little-endian ``uint32`` column count, ``uint64`` row count, 8-byte ASCII
    numpy dtype string (space padded, e.g. ``"<f8     "``), followed by
    row-major little-endian data. ``x`` is float64 features, ``y`` int64
    original class ids, ``ids`` int64 sample identifiers.

Image ingestion reads CIFAR-style binary records: each record is one label
byte followed by ``prod(record_shape)`` uint8 pixel bytes. Every ``*.bin`` file
whose name starts with ``test`` is test data, all others are training data.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, IngestionError

SPLITS = ("labeled", "validation", "unlabeled", "test_seen", "test_all")
VALIDATION_FRACTION = 0.1
CIFAR10_SEEN = (2, 3, 4, 5, 6, 7)

_MAGIC = b"CMARRAY1"
_HEADER = struct.Struct("<8sIQ8s")


@dataclass(frozen=True)
class Split:
    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass(frozen=True)
class TrainingView:
    """What the training loop may see: no hidden unlabeled labels."""

    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    num_classes: int

    @property
    def input_dim(self) -> int:
        return self.x_labeled.shape[1]


@dataclass(frozen=True)
class MismatchDataset:
    splits: dict
    seen_classes: tuple
    unseen_classes: tuple
    kappa: float
    seed: int
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name) -> Split:
        return self.splits[name]

    @property
    def dim(self) -> int:
        return self.splits["labeled"].x.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.seen_classes)

    def seen_index(self, labels) -> np.ndarray:
        """Map original class ids to seen-class indices, ``-1`` for unseen."""
        lookup = {c: i for i, c in enumerate(self.seen_classes)}
        return np.array([lookup.get(int(c), -1) for c in labels], dtype=np.int64)

    def training_view(self) -> TrainingView:
        lab, val = self.splits["labeled"], self.splits["validation"]
        return TrainingView(
            x_labeled=lab.x, y_labeled=self.seen_index(lab.y),
            x_unlabeled=self.splits["unlabeled"].x,
            x_val=val.x, y_val=self.seen_index(val.y),
            num_classes=self.num_classes,
        )

    def unlabeled_truth(self) -> np.ndarray:
        """Hidden seen-class indices of the unlabeled split (``-1`` = unseen)."""
        return self.seen_index(self.splits["unlabeled"].y)

    def counts(self) -> dict:
        return {name: len(self.splits[name]) for name in SPLITS}


@dataclass(frozen=True)
class AugmentationPair:
    """Weak: Gaussian jitter. Strong: larger jitter plus optional coordinate dropout."""

    weak_sigma: float = 0.1
    strong_sigma: float = 0.4
    strong_dropout: float = 0.0


def augment(pair: AugmentationPair, x, kind: str, seed) -> np.ndarray:
    """Apply the weak or strong operator; ``seed`` may be an int or a Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    if kind == "weak":
        return x + pair.weak_sigma * rng.standard_normal(x.shape)
    if kind == "strong":
        out = x + pair.strong_sigma * rng.standard_normal(x.shape)
        keep = rng.random(x.shape) >= pair.strong_dropout
        return out * keep
    raise ValueError(f"augmentation kind must be 'weak' or 'strong', got {kind!r}")


def _balanced_counts(total: int, n_groups: int) -> np.ndarray:
    counts = np.full(n_groups, total // n_groups, dtype=np.int64)
    counts[: total % n_groups] += 1
    return counts


def class_means(num_seen: int, num_unseen: int, dim: int,
                seen_radius: float = 2.0, unseen_radius: float = 3.5,
                unseen_lift: float = 0.0) -> np.ndarray:
    """Seen means on one circle, unseen means on a rotated circle of radius
    ``unseen_radius`` raised by ``unseen_lift`` along the third axis."""
    if dim < 2:
        raise ConfigError(f"dim must be >= 2, got {dim}")
    if unseen_lift and dim < 3:
        raise ConfigError("unseen_lift needs dim >= 3")
    means = np.zeros((num_seen + num_unseen, dim))
    a_seen = 2 * np.pi * np.arange(num_seen) / num_seen
    means[:num_seen, 0] = seen_radius * np.cos(a_seen)
    means[:num_seen, 1] = seen_radius * np.sin(a_seen)
    if num_unseen:
        a_unseen = 2 * np.pi * (np.arange(num_unseen) + 0.5) / num_unseen
        means[num_seen:, 0] = unseen_radius * np.cos(a_unseen)
        means[num_seen:, 1] = unseen_radius * np.sin(a_unseen)
        if unseen_lift:
            means[num_seen:, 2] = unseen_lift
    return means


def make_synthetic(seed: int = 0, num_seen: int = 6, num_unseen: int = 4, kappa: float = 0.6,
                   n_labeled: int = 300, n_unlabeled: int = 5000, n_test: int = 2000,
                   dim: int = 5, cluster_spread: float = 1.0, seen_radius: float = 4.0,
                   unseen_radius: float = 4.0, unseen_lift: float = 0.0) -> MismatchDataset:
    """Gaussian-cluster dataset with a ``kappa`` fraction of unseen-class unlabeled data.

    ``n_labeled`` is the labeled pool; 10% of it is held out as validation.
    Each split draws from its own random stream, so changing ``kappa`` only
    changes the unlabeled split.
    """
    problems = []
    if num_seen < 2:
        problems.append(f"num_seen must be >= 2, got {num_seen}")
    if num_unseen < 0:
        problems.append(f"num_unseen must be >= 0, got {num_unseen}")
    if not 0.0 <= kappa <= 1.0:
        problems.append(f"kappa must lie in [0, 1], got {kappa}")
    if kappa > 0 and num_unseen == 0:
        problems.append("kappa > 0 requires num_unseen >= 1")
    for name, n in (("n_labeled", n_labeled), ("n_unlabeled", n_unlabeled), ("n_test", n_test)):
        if n < 1:
            problems.append(f"{name} must be >= 1, got {n}")
    if n_labeled < 2 * num_seen:
        problems.append(f"n_labeled must be >= {2 * num_seen} to hold out validation data")
    if dim < 2:
        problems.append(f"dim must be >= 2, got {dim}")
    if cluster_spread <= 0:
        problems.append(f"cluster_spread must be > 0, got {cluster_spread}")
    if seen_radius <= 0 or unseen_radius < 0:
        problems.append("radii must satisfy seen_radius > 0 and unseen_radius >= 0")
    if unseen_lift and dim < 3:
        problems.append("unseen_lift needs dim >= 3")
    if problems:
        raise ConfigError("invalid synthetic dataset parameters", problems)

    means = class_means(num_seen, num_unseen, dim, seen_radius, unseen_radius, unseen_lift)
    seen = np.arange(num_seen)
    unseen = np.arange(num_seen, num_seen + num_unseen)
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]
    next_id = [0]

    def draw(rng, classes, total):
        labels = np.repeat(classes, _balanced_counts(total, len(classes)))
        labels = labels[rng.permutation(len(labels))]
        x = means[labels] + cluster_spread * rng.standard_normal((len(labels), dim))
        ids = np.arange(next_id[0], next_id[0] + len(labels), dtype=np.int64)
        next_id[0] += len(labels)
        return Split(x, labels.astype(np.int64), ids)

    pool = draw(streams[0], seen, n_labeled)
    n_val = int(round(VALIDATION_FRACTION * n_labeled))
    order = streams[0].permutation(n_labeled)
    val_idx, lab_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    labeled = Split(pool.x[lab_idx], pool.y[lab_idx], pool.ids[lab_idx])
    validation = Split(pool.x[val_idx], pool.y[val_idx], pool.ids[val_idx])

    test_seen = draw(streams[1], seen, n_test)
    test_all = draw(streams[2], np.concatenate([seen, unseen]), n_test)

    n_out = int(round(kappa * n_unlabeled))
    # unlabeled ids come last so kappa never shifts the other splits' ids
    u_rng = streams[3]
    parts = [draw(u_rng, seen, n_unlabeled - n_out) if n_unlabeled - n_out else None,
             draw(u_rng, unseen, n_out) if n_out else None]
    parts = [p for p in parts if p is not None]
    x = np.concatenate([p.x for p in parts])
    y = np.concatenate([p.y for p in parts])
    ids = np.concatenate([p.ids for p in parts])
    perm = u_rng.permutation(len(y))
    unlabeled = Split(x[perm], y[perm], ids[perm])

    return MismatchDataset(
        splits={"labeled": labeled, "validation": validation, "unlabeled": unlabeled,
                "test_seen": test_seen, "test_all": test_all},
        seen_classes=tuple(int(c) for c in seen),
        unseen_classes=tuple(int(c) for c in unseen),
        kappa=float(kappa), seed=int(seed),
        meta={"source": "synthetic", "dim": dim, "cluster_spread": cluster_spread,
              "seen_radius": seen_radius, "unseen_radius": unseen_radius,
              "unseen_lift": unseen_lift},
    )


# ---------------------------------------------------------------- persistence

def write_array(path, array: np.ndarray):
    array = np.asarray(array)
    if array.dtype.kind == "f":
        array = array.astype("<f8")
    else:
        array = array.astype("<i8")
    cols = 1 if array.ndim == 1 else array.shape[1]
    header = _HEADER.pack(_MAGIC, cols, array.shape[0], array.dtype.str.ljust(8).encode())
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(array).tobytes())


def read_array(path, vector: bool = False) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise IngestionError(f"{path}: truncated header")
    magic, cols, rows, dtype = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise IngestionError(f"{path}: bad magic {magic!r}")
    data = np.frombuffer(raw, dtype=np.dtype(dtype.decode().strip()), offset=_HEADER.size)
    if data.size != rows * cols:
        raise IngestionError(f"{path}: expected {rows * cols} values, found {data.size}")
    data = data.copy()
    return data if vector else data.reshape(rows, cols)


def _sha256(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def save_dataset(dataset: MismatchDataset, out_dir) -> Path:
    """Write split arrays plus ``manifest.json``; return the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for name in SPLITS:
        split = dataset.splits[name]
        for part, arr in (("x", split.x), ("y", split.y), ("ids", split.ids)):
            fname = f"{name}.{part}.bin"
            write_array(out / fname, arr)
            files.append(fname)
    manifest = {
        "format": "calimatch-dataset/1",
        "seed": dataset.seed,
        "kappa": dataset.kappa,
        "seen_classes": list(dataset.seen_classes),
        "unseen_classes": list(dataset.unseen_classes),
        "dim": dataset.dim,
        "counts": dataset.counts(),
        "files": files,
        "checksum": _sha256(out / f for f in files),
        "meta": dataset.meta,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(manifest_path) -> MismatchDataset:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read dataset manifest {path}: {exc}") from exc
    root = path.parent
    try:
        checksum = _sha256(root / f for f in manifest["files"])
    except OSError as exc:
        raise IngestionError(f"missing split file: {exc}") from exc
    if checksum != manifest["checksum"]:
        raise IngestionError(f"{path}: checksum mismatch")
    splits = {}
    for name in SPLITS:
        splits[name] = Split(
            x=read_array(root / f"{name}.x.bin"),
            y=read_array(root / f"{name}.y.bin", vector=True),
            ids=read_array(root / f"{name}.ids.bin", vector=True),
        )
    return MismatchDataset(
        splits=splits,
        seen_classes=tuple(manifest["seen_classes"]),
        unseen_classes=tuple(manifest["unseen_classes"]),
        kappa=float(manifest["kappa"]), seed=int(manifest["seed"]),
        meta=dict(manifest.get("meta", {}), checksum=manifest["checksum"]),
    )


# ------------------------------------------------------------ image ingestion

def read_image_records(files, record_shape=(3, 32, 32)):
    """Concatenate CIFAR-style records from ``files``; return ``(pixels, labels)``."""
    size = int(np.prod(record_shape))
    chunks = []
    for f in files:
        raw = np.fromfile(f, dtype=np.uint8)
        if raw.size % (size + 1):
            raise IngestionError(f"{f}: size {raw.size} is not a multiple of record size {size + 1}")
        chunks.append(raw.reshape(-1, size + 1))
    if not chunks:
        return np.empty((0, size), dtype=np.uint8), np.empty(0, dtype=np.int64)
    records = np.concatenate(chunks)
    return records[:, 1:], records[:, 0].astype(np.int64)


def _take_per_class(rng, labels, available, classes, per_class, what):
    picked = []
    for cls, n in zip(classes, per_class):
        pool = np.flatnonzero((labels == cls) & available)
        if n > len(pool):
            raise IngestionError(
                f"class {cls}: {what} needs {n} samples but only {len(pool)} are available"
            )
        chosen = rng.choice(pool, size=n, replace=False) if n else np.empty(0, dtype=np.int64)
        available[chosen] = False
        picked.append(chosen)
    return np.concatenate(picked) if picked else np.empty(0, dtype=np.int64)


def ingest_image_dataset(path, seen_classes=CIFAR10_SEEN, kappa: float = 0.6,
                         labels_per_class: int = 400, n_unlabeled: int = 20000,
                         n_test: int | None = None, seed: int = 0,
                         record_shape=(3, 32, 32), flatten: bool = True) -> MismatchDataset:
    """Build a mismatch dataset from a directory of CIFAR-style binary records.

    The labeled pool has ``labels_per_class`` images for each seen class (10%
    held out as validation); the unlabeled split has ``n_unlabeled`` images, a
    ``kappa`` fraction of them from classes outside ``seen_classes``.
    """
    root = Path(path)
    if not root.is_dir():
        raise IngestionError(f"{root} is not a directory")
    bins = sorted(root.glob("*.bin"))
    train_files = [f for f in bins if not f.name.startswith("test")]
    test_files = [f for f in bins if f.name.startswith("test")]
    if not train_files or not test_files:
        raise IngestionError(f"{root}: need training and test_*.bin record files")
    if not 0.0 <= kappa <= 1.0:
        raise ConfigError(f"kappa must lie in [0, 1], got {kappa}")

    x_tr, y_tr = read_image_records(train_files, record_shape)
    x_te, y_te = read_image_records(test_files, record_shape)
    seen = np.array(sorted(seen_classes), dtype=np.int64)
    all_classes = np.unique(np.concatenate([y_tr, y_te]))
    missing = [int(c) for c in seen if c not in all_classes]
    if missing:
        raise IngestionError(f"seen class {missing[0]} has no records")
    unseen = np.array([c for c in all_classes if c not in set(seen.tolist())], dtype=np.int64)
    n_out = int(round(kappa * n_unlabeled))
    if n_out and not len(unseen):
        raise IngestionError("kappa > 0 but the records contain no unseen classes")

    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]
    available = np.ones(len(y_tr), dtype=bool)
    lab_idx = _take_per_class(streams[0], y_tr, available, seen,
                              [labels_per_class] * len(seen), "the labeled split")
    lab_idx = lab_idx[streams[0].permutation(len(lab_idx))]
    n_val = int(round(VALIDATION_FRACTION * len(lab_idx)))
    val_idx, lab_idx = np.sort(lab_idx[:n_val]), np.sort(lab_idx[n_val:])

    u_rng = streams[1]
    u_idx = np.concatenate([
        _take_per_class(u_rng, y_tr, available, seen,
                        _balanced_counts(n_unlabeled - n_out, len(seen)), "the unlabeled split"),
        _take_per_class(u_rng, y_tr, available, unseen,
                        _balanced_counts(n_out, len(unseen)) if len(unseen) else [],
                        "the unlabeled split"),
    ])
    u_idx = u_idx[u_rng.permutation(len(u_idx))]

    seen_mask = np.isin(y_te, seen)
    te_seen = np.flatnonzero(seen_mask)
    te_all = np.arange(len(y_te))
    if n_test is not None:
        te_seen = np.sort(streams[2].choice(te_seen, size=min(n_test, len(te_seen)), replace=False))
        te_all = np.sort(streams[2].choice(te_all, size=min(n_test, len(te_all)), replace=False))

    def feats(x):
        x = x.astype(np.float64) / 255.0
        return x if flatten else x.reshape((-1, *record_shape))

    def split(x, y, idx, offset):
        return Split(feats(x[idx]), y[idx].astype(np.int64), (idx + offset).astype(np.int64))

    test_offset = len(y_tr)
    return MismatchDataset(
        splits={
            "labeled": split(x_tr, y_tr, lab_idx, 0),
            "validation": split(x_tr, y_tr, val_idx, 0),
            "unlabeled": split(x_tr, y_tr, u_idx, 0),
            "test_seen": split(x_te, y_te, te_seen, test_offset),
            "test_all": split(x_te, y_te, te_all, test_offset),
        },
        seen_classes=tuple(int(c) for c in seen),
        unseen_classes=tuple(int(c) for c in unseen),
        kappa=float(kappa), seed=int(seed),
        meta={"source": str(root), "record_shape": list(record_shape)},
    )
