import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from calimatch.model import make_toy_model
from calimatch.theory import (CalibratedOracle, alignment_report, calibration_deviation,
                              ideal_gradient, lemma_bound, lemma_check, logit_residual,
                              n_parameters, surrogate_gradient)


def _batch(seed, n=10, dim=3, k=4):
    rng = np.random.default_rng(seed)
    model = make_toy_model(seed, dim, [6], k)
    x = rng.standard_normal((n, dim))
    with torch.no_grad():
        pseudo = model(torch.from_numpy(x)).p.argmax(1).numpy()
    return model, x, pseudo, rng


def test_empty_restricted_set_gives_zero():
    model, x, _, _ = _batch(0)
    g = ideal_gradient(model, x, -np.ones(len(x), dtype=int))
    assert g.shape == (n_parameters(model),) and torch.count_nonzero(g) == 0


def test_single_correct_sample_matches_surrogate():
    model, x, pseudo, _ = _batch(1, n=1)
    assert torch.equal(ideal_gradient(model, x, pseudo), surrogate_gradient(model, x, pseudo))


def test_ideal_gradient_is_additive():
    model, x, pseudo, rng = _batch(2)
    y = rng.integers(0, 4, len(x))
    whole = ideal_gradient(model, x, y)
    parts = sum(ideal_gradient(model, x[i:i + 1], y[i:i + 1]) for i in range(len(x)))
    assert torch.allclose(whole, parts, atol=1e-12, rtol=0)


def test_clean_batch_has_zero_difference():
    model, x, pseudo, _ = _batch(3)
    rep = alignment_report(model, x, pseudo, pseudo)
    assert rep.epsilon_hat == 0 and rep.grad_diff_norm <= 1e-9 and rep.bound_holds


def test_one_flipped_label_equals_its_residual():
    model, x, pseudo, _ = _batch(4)
    truth = pseudo.copy()
    truth[3] = (truth[3] + 1) % 4
    rep = alignment_report(model, x, pseudo, truth)
    assert rep.n_errors == 1
    assert rep.grad_diff_norm == pytest.approx(rep.residual_norms[0], rel=1e-9)
    assert rep.identity_error <= 1e-9


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 12), flips=st.floats(0, 1))
def test_identity_and_bound_on_random_batches(seed, n, flips):
    model, x, pseudo, rng = _batch(seed, n=n)
    truth = pseudo.copy()
    err = rng.random(n) < flips
    truth[err] = rng.integers(-1, 4, err.sum())   # -1 marks an unseen sample
    rep = alignment_report(model, x, pseudo, truth)
    assert rep.identity_error <= 1e-9
    assert rep.bound_holds
    assert rep.logit_residual_l1_max <= 2 + 1e-12


def test_empty_selection_reported_not_raised():
    model, x, _, _ = _batch(5)
    rep = alignment_report(model, x[:0], np.array([], dtype=int), np.array([], dtype=int))
    assert rep.n_selected == 0 and rep.epsilon_hat is None


@settings(max_examples=100, deadline=None)
@given(k=st.integers(2, 8), seed=st.integers(0, 2**31 - 1))
def test_logit_residual_l1_at_most_two(k, seed):
    rng = np.random.default_rng(seed)
    probs = torch.softmax(torch.from_numpy(rng.standard_normal(k) * 4), 0)
    a, b = rng.integers(0, k), rng.integers(-1, k)
    assert logit_residual(probs, int(a), int(b)).abs().sum().item() <= 2 + 1e-12


def test_lemma_bound_examples():
    assert lemma_bound(0.95, 0.95, 0.02) == pytest.approx(0.07)
    assert lemma_bound(0.7, 0.9, 0.2) - lemma_bound(0.7, 0.9, 0.0) == pytest.approx(0.2)
    assert lemma_bound(0.6, 0.9, 0.1) > lemma_bound(0.8, 0.9, 0.1)


def test_lemma_check_perfect_oracle():
    rep = lemma_check(CalibratedOracle(eta=0.0), 0.95, 0.95, n=10_000)
    assert rep["n_selected"] > 0
    assert rep["epsilon_hat"] <= 0.05 + rep["allowance"]
    assert not rep["violation"]


def test_oracle_calibration_deviation_tracks_eta():
    rng = np.random.default_rng(0)
    s, c, is_id, correct = CalibratedOracle(eta=0.1).sample(200_000, rng)
    assert calibration_deviation(s, is_id) == pytest.approx(0.1, abs=0.02)
    assert calibration_deviation(c, correct) == pytest.approx(0.1, abs=0.02)


def test_independent_coupling_errs_more():
    shared = lemma_check(CalibratedOracle(eta=0.02), 0.95, 0.95, seed=1)
    indep = lemma_check(CalibratedOracle(eta=0.02, coupling="independent"), 0.95, 0.95, seed=1)
    assert indep["epsilon_hat"] > shared["epsilon_hat"]


def test_lemma_empty_selection_undefined():
    rep = lemma_check(CalibratedOracle(a=1.0, b=50.0), 0.95, 0.95, n=1000)
    assert rep["n_selected"] == 0 and rep["epsilon_hat"] is None and not rep["violation"]
