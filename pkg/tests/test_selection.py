import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from calimatch.exceptions import ConfigError
from calimatch.model import ModelOutputs, outputs_from_logits
from calimatch.selection import (SelectionRecord, gate, score, select_batch,
                                 selection_diagnostics, selection_error_rate)

T = lambda v: torch.tensor(v, dtype=torch.float64)


def _probs(ps, qs, p=None):
    ps, qs = T(ps), T(qs)
    z = torch.zeros_like(ps)
    return ModelOutputs(z, z, ps if p is None else T(p), qs, ps, qs)


def test_score_hand_value():
    s, c, u = score(_probs([[0.97, 0.02, 0.01]], [[0.90, 0.05, 0.05]]))
    assert s.item() == pytest.approx(0.8745) and c.item() == pytest.approx(0.97)
    assert u.item() == pytest.approx(1 - 0.8745)


def test_score_extremes():
    s, _, u = score(_probs([[1.0, 0.0]], [[1.0, 0.0]]))
    assert s.item() == pytest.approx(1.0) and u.item() == pytest.approx(0.0)
    s, _, _ = score(_probs([[0.1] * 10], [[0.1] * 10]))
    assert s.item() == pytest.approx(0.1)


def test_gate_examples():
    assert gate([0.8745], [0.97], 0.5, 0.95)[0]
    assert not gate([0.8745], [0.94], 0.5, 0.95)[0]
    assert not gate([0.5], [0.99], 0.5, 0.95)[0]
    assert not gate([0.9], [0.95], 0.5, 0.95)[0]


def test_gate_rejects_bad_thresholds():
    with pytest.raises(ConfigError):
        gate([0.5], [0.5], 1.0, 0.5)
    with pytest.raises(ConfigError):
        gate([0.5], [0.5], 0.5, 0.0)


def test_gate_without_seen_gate_uses_raw_confidence():
    out = _probs([[0.9, 0.1]], [[0.0, 1.0]], p=[[0.97, 0.03]])
    assert not select_batch(out).selected[0]              # s = 0.1 fails the seen gate
    assert select_batch(out, use_seen_gate=False).selected[0]   # raw max p = 0.97


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1),
       t1=st.floats(0.05, 0.9), t2=st.floats(0.05, 0.9), d1=st.floats(0, 0.09), d2=st.floats(0, 0.09))
def test_threshold_monotonicity(seed, t1, t2, d1, d2):
    rng = np.random.default_rng(seed)
    s, c = rng.random(200), rng.random(200)
    loose = gate(s, c, t1, t2)
    strict = gate(s, c, t1 + d1, t2 + d2)
    assert not np.any(strict & ~loose)


def test_argmax_invariant_under_temperature():
    rng = np.random.default_rng(0)
    z = T(rng.standard_normal((10_000, 6)) * 3)
    for t in (0.05, 0.5, 1.5, 10.0):
        out = outputs_from_logits(z, z, T(t), T(1.0))
        assert torch.equal(out.p.argmax(1), out.p_s.argmax(1))


def test_selection_record_mask_and_error_rate():
    rec = SelectionRecord(s=np.array([0.9, 0.9, 0.9, 0.2]), c=np.array([0.99, 0.99, 0.99, 0.99]),
                          u=np.array([0.1, 0.1, 0.1, 0.8]), pseudo_label=np.array([0, 1, 2, 0]),
                          selected=np.array([True, True, True, False]))
    truth = np.array([0, 1, 1, 0])
    diag = selection_diagnostics(rec, truth)
    assert diag["pseudo_label_accuracy"] == pytest.approx(2 / 3)
    assert selection_error_rate(rec, truth) == pytest.approx(1 / 3)
    assert rec.mask.dtype == torch.bool and int(rec.mask.sum()) == 3


def test_clean_seen_batch_diagnostics():
    rec = SelectionRecord(s=np.array([0.9, 0.8]), c=np.array([0.99, 0.97]), u=np.array([0.1, 0.2]),
                          pseudo_label=np.array([0, 1]), selected=np.array([True, True]))
    diag = selection_diagnostics(rec, np.array([0, 1]))
    assert diag["pseudo_label_accuracy"] == 1.0
    assert diag["unseen_in_high_confidence"] == 0.0
    assert diag["selection_error_rate"] == 0.0


def test_empty_selection_is_undefined():
    rec = SelectionRecord(s=np.array([0.1]), c=np.array([0.1]), u=np.array([0.9]),
                          pseudo_label=np.array([0]), selected=np.array([False]))
    diag = selection_diagnostics(rec, np.array([-1]))
    assert diag["pseudo_label_accuracy"] is None and diag["selection_error_rate"] is None
