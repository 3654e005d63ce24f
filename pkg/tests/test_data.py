import json

import numpy as np
import pytest

from calimatch.data import (CIFAR10_SEEN, SPLITS, AugmentationPair, augment, class_means,
                            ingest_image_dataset, load_dataset, make_synthetic, read_array,
                            save_dataset, write_array)
from calimatch.exceptions import ConfigError, IngestionError


def test_kappa_controls_unlabeled_composition():
    ds = make_synthetic(seed=0, kappa=0.6, n_unlabeled=1000)
    truth = ds.unlabeled_truth()
    assert (truth < 0).sum() == 600 and (truth >= 0).sum() == 400
    assert np.all(make_synthetic(seed=0, kappa=0.0, n_unlabeled=500).unlabeled_truth() >= 0)


def test_validation_is_ten_percent_of_labeled_pool():
    ds = make_synthetic(seed=0, n_labeled=300)
    assert len(ds["validation"]) == 30 and len(ds["labeled"]) == 270


def test_test_splits_follow_evaluation_semantics():
    ds = make_synthetic(seed=1)
    assert set(ds["test_seen"].y) <= set(ds.seen_classes)
    assert set(ds["test_all"].y) & set(ds.unseen_classes)
    assert not set(ds["labeled"].y) & set(ds.unseen_classes)


def test_same_seed_bit_identical():
    a, b = make_synthetic(seed=5), make_synthetic(seed=5)
    for name in SPLITS:
        assert np.array_equal(a[name].x, b[name].x) and np.array_equal(a[name].ids, b[name].ids)


def test_kappa_changes_only_unlabeled_split():
    a, b = make_synthetic(seed=2, kappa=0.3), make_synthetic(seed=2, kappa=0.6)
    for name in ("labeled", "validation", "test_seen", "test_all"):
        assert np.array_equal(a[name].x, b[name].x)
    assert not np.array_equal(a["unlabeled"].y, b["unlabeled"].y)


def test_ids_unique_across_splits():
    ds = make_synthetic(seed=0)
    ids = np.concatenate([ds[n].ids for n in SPLITS])
    assert len(np.unique(ids)) == len(ids)


def test_invalid_parameters_listed_together():
    with pytest.raises(ConfigError) as info:
        make_synthetic(kappa=1.5, n_test=0, dim=1)
    msg = str(info.value)
    assert "kappa" in msg and "n_test" in msg and "dim" in msg


def test_class_means_layout():
    m = class_means(6, 4, 5, seen_radius=2.0, unseen_radius=3.0, unseen_lift=1.5)
    assert np.allclose(np.linalg.norm(m[:6, :2], axis=1), 2.0)
    assert np.allclose(m[6:, 2], 1.5) and np.allclose(m[:6, 2:], 0.0)


def test_augmentation_identity_and_moments():
    x = np.random.default_rng(0).standard_normal((10_000, 4))
    assert np.array_equal(augment(AugmentationPair(0.0, 0.0, 0.0), x, "strong", 1), x)
    pair = AugmentationPair(0.1, 0.5, 0.0)
    disp = ((augment(pair, x, "strong", 3) - x) ** 2).sum(axis=1).mean()
    assert disp == pytest.approx(4 * 0.5 ** 2, rel=0.1)
    assert not np.array_equal(augment(pair, x, "weak", 1), augment(pair, x, "weak", 2))
    with pytest.raises(ValueError):
        augment(pair, x, "medium", 0)


def test_array_round_trip_and_corruption(tmp_path):
    arr = np.arange(12, dtype=np.float64).reshape(4, 3)
    write_array(tmp_path / "a.bin", arr)
    assert np.array_equal(read_array(tmp_path / "a.bin"), arr)
    raw = (tmp_path / "a.bin").read_bytes()
    assert raw[:8] == b"CMARRAY1" and len(raw) == 28 + arr.nbytes
    (tmp_path / "b.bin").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(IngestionError):
        read_array(tmp_path / "b.bin")


def test_dataset_round_trip_and_checksum(tmp_path):
    ds = make_synthetic(seed=4, n_unlabeled=200, n_test=100)
    m1 = save_dataset(ds, tmp_path / "one")
    m2 = save_dataset(make_synthetic(seed=4, n_unlabeled=200, n_test=100), tmp_path / "two")
    assert json.loads(m1.read_text())["checksum"] == json.loads(m2.read_text())["checksum"]
    back = load_dataset(m1)
    assert back.kappa == 0.6 and back.seen_classes == ds.seen_classes
    for name in SPLITS:
        assert np.array_equal(back[name].x, ds[name].x)
    # tamper with a split file
    path = tmp_path / "one" / "labeled.x.bin"
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 1
    path.write_bytes(bytes(raw))
    with pytest.raises(IngestionError, match="checksum"):
        load_dataset(m1)


def _fake_records(path, labels, shape=(3, 2, 2), seed=0):
    rng = np.random.default_rng(seed)
    size = int(np.prod(shape))
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None],
                          rng.integers(0, 256, (len(labels), size), dtype=np.uint8)], axis=1)
    rec.tofile(path)


def test_image_ingestion(tmp_path):
    labels = np.repeat(np.arange(10), 30)
    _fake_records(tmp_path / "data_batch_1.bin", labels)
    _fake_records(tmp_path / "test_batch.bin", np.repeat(np.arange(10), 5), seed=1)
    ds = ingest_image_dataset(tmp_path, labels_per_class=10, n_unlabeled=50, kappa=0.6,
                              record_shape=(3, 2, 2))
    assert ds.seen_classes == CIFAR10_SEEN
    assert len(ds["labeled"]) + len(ds["validation"]) == 60
    assert (ds.unlabeled_truth() < 0).sum() == 30
    assert ds.dim == 12 and ds["labeled"].x.max() <= 1.0
    other = ingest_image_dataset(tmp_path, labels_per_class=10, n_unlabeled=50, kappa=0.3,
                                 record_shape=(3, 2, 2))
    assert np.array_equal(other["labeled"].ids, ds["labeled"].ids)
    assert not np.array_equal(other["unlabeled"].y, ds["unlabeled"].y)
    with pytest.raises(IngestionError, match="class"):
        ingest_image_dataset(tmp_path, labels_per_class=40, record_shape=(3, 2, 2))
    with pytest.raises(IngestionError):
        ingest_image_dataset(tmp_path / "missing")
