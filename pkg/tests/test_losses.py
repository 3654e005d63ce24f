import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from calimatch.exceptions import ConfigError, DomainError
from calimatch.losses import (as_class_indices, loss_ce, loss_fix, loss_mcal, loss_ocal,
                              loss_ood, loss_soft_consistency)
from calimatch.model import ModelOutputs

import oracles

T = lambda v: torch.tensor(v, dtype=torch.float64)


def probs(p=None, q=None, ps=None, qs=None, n=1, k=3):
    """ModelOutputs with probabilities set directly (logits unused)."""
    fill = lambda v: T(v) if v is not None else torch.full((n, k), 1 / k, dtype=torch.float64)
    p, q, ps, qs = fill(p), fill(q), fill(ps), fill(qs)
    z = torch.zeros_like(p)
    return ModelOutputs(z, z, p, q, ps, qs)


# ------------------------------------------------------------------ hand values

def test_ce_values():
    assert loss_ce(probs(p=[[0.5, 0.25, 0.25]]), [0]).item() == pytest.approx(math.log(2), abs=1e-12)
    assert loss_ce(probs(p=[[1.0, 0.0, 0.0]]), [0]).item() == pytest.approx(0.0, abs=1e-6)


def test_ce_additivity_and_one_hot_labels():
    single = loss_ce(probs(p=[[0.6, 0.3, 0.1]]), [1], "sum")
    double = loss_ce(probs(p=[[0.6, 0.3, 0.1]] * 2, n=2), [1, 1], "sum")
    assert double.item() == 2 * single.item()
    onehot = loss_ce(probs(p=[[0.6, 0.3, 0.1]]), [[0, 1, 0]], "sum")
    assert onehot.item() == single.item()


def test_ood_values():
    out = probs(q=[[0.8, 0.3]], k=2)
    assert loss_ood(out, [0]).item() == pytest.approx(-(math.log(0.8) + math.log(0.7)), abs=1e-12)
    assert loss_ood(out, [0]).item() == pytest.approx(0.5798, abs=1e-4)
    out = probs(q=[[0.9, 0.6, 0.2]])
    assert loss_ood(out, [0]).item() == pytest.approx(1.0217, abs=1e-4)


def test_ood_ideal_detector_goes_to_zero():
    eps = 1e-5
    out = probs(q=[[1 - eps, eps, eps]])
    assert loss_ood(out, [0]).item() < 1e-4


def test_ood_rejects_single_class():
    with pytest.raises(ConfigError):
        loss_ood(probs(q=[[0.5]], k=1), [0])


def test_soft_consistency_values():
    a, b = probs(q=[[1.0, 0.0]], k=2), probs(q=[[0.0, 1.0]], k=2)
    assert loss_soft_consistency(a, b).item() == 2.0
    assert loss_soft_consistency(a, a).item() == 0.0
    assert loss_soft_consistency(b, a).item() == loss_soft_consistency(a, b).item()


def test_mcal_values():
    out = probs(ps=[[0.9, 0.05, 0.05]])
    assert loss_mcal(out, [0], T([0.9])).item() == pytest.approx(0.3944, abs=1e-4)
    # gamma = 1 recovers cross-entropy on p_s
    ps = [[0.6, 0.3, 0.1]]
    assert loss_mcal(probs(ps=ps), [1], T([1.0])).item() == pytest.approx(
        loss_ce(probs(p=ps), [1]).item(), abs=1e-12)


def test_mcal_minimum_is_target_entropy():
    target = np.array([0.7, 0.15, 0.15])
    entropy = -(target * np.log(target)).sum()
    assert loss_mcal(probs(ps=[target.tolist()]), [0], T([0.7])).item() == pytest.approx(entropy)


def test_ocal_values():
    out = probs(qs=[[0.7, 0.3]], k=2)
    assert loss_ocal(out, [0], T([0.8])).item() == pytest.approx(0.8115, abs=1e-4)
    doubled = probs(qs=[[0.7, 0.3]] * 2, n=2, k=2)
    assert loss_ocal(doubled, [0, 0], T([0.8, 0.8]), "sum").item() == pytest.approx(
        2 * loss_ocal(out, [0], T([0.8]), "sum").item())


def test_ocal_hard_negative_mode_excludes_true_class():
    out = probs(qs=[[0.7, 0.2, 0.1]])
    d = T([0.9])
    verbatim = loss_ocal(out, [0], d).item()
    hard = loss_ocal(out, [0], d, min_mode="hard_negative").item()
    assert verbatim == pytest.approx(oracles.np_ocal(np.array([[0.7, 0.2, 0.1]]), [0], [0.9]))
    first = 0.9 * math.log(0.7) + 0.1 * math.log(0.2) + 0.1 * math.log(0.1)
    assert hard == pytest.approx(-(first + 0.9 * math.log(0.8)))
    with pytest.raises(ConfigError):
        loss_ocal(out, [0], d, min_mode="other")


def test_ocal_one_hot_stays_finite():
    out = probs(qs=[[1.0, 0.0, 0.0]])
    assert math.isfinite(loss_ocal(out, [0], T([1.0])).item())


def test_fix_values():
    weak = probs(p=[[0.98, 0.01, 0.01]])
    strong = probs(p=[[0.5, 0.25, 0.25]])
    assert loss_fix(weak, strong, [True]).item() == pytest.approx(math.log(2), abs=1e-12)
    assert loss_fix(weak, strong, [False]).item() == 0.0


def test_fix_mean_divides_by_full_batch():
    weak = probs(p=[[0.98, 0.01, 0.01], [0.9, 0.05, 0.05]], n=2)
    strong = probs(p=[[0.5, 0.25, 0.25], [0.5, 0.25, 0.25]], n=2)
    assert loss_fix(weak, strong, [True, False]).item() == pytest.approx(math.log(2) / 2)


def test_fix_does_not_backprop_through_weak_view():
    z = torch.zeros(1, 3, dtype=torch.float64, requires_grad=True)
    p = torch.softmax(z, 1)
    weak = ModelOutputs(z, z, p, p, p, p)
    strong = probs(p=[[0.5, 0.25, 0.25]])
    loss = loss_fix(weak, strong, [True])
    assert not loss.requires_grad


def test_domain_and_label_errors():
    with pytest.raises(DomainError):
        loss_mcal(probs(), [0], T([1.2]))
    with pytest.raises(DomainError):
        loss_ocal(probs(), [0], T([-0.1]))
    with pytest.raises(ValueError):
        as_class_indices([[0.5, 0.5, 0.0]], 3)
    with pytest.raises(ValueError):
        as_class_indices([3], 3)
    with pytest.raises(ConfigError):
        loss_ce(probs(), [0], reduction="median")


# ------------------------------------------------------------------ numpy oracle agreement

@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 6), k=st.integers(2, 6))
def test_losses_match_numpy_oracles(seed, n, k):
    rng = np.random.default_rng(seed)
    inst = oracles.fd_instance(rng, n, k)
    out = oracles.outputs(**inst)
    y = rng.integers(0, k, n)
    g = rng.uniform(0, 1, n)
    assert loss_ce(out, y).item() == pytest.approx(oracles.np_ce(out.p.numpy(), y), rel=1e-10)
    assert loss_ood(out, y).item() == pytest.approx(oracles.np_ood(out.q.numpy(), y), rel=1e-10)
    assert loss_mcal(out, y, T(g)).item() == pytest.approx(
        oracles.np_mcal(out.p_s.numpy(), y, g), rel=1e-10)
    assert loss_ocal(out, y, T(g)).item() == pytest.approx(
        oracles.np_ocal(out.q_s.numpy(), y, g), rel=1e-10, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_losses_non_negative(seed):
    rng = np.random.default_rng(seed)
    out = oracles.outputs(**oracles.fd_instance(rng, 4, 5))
    y = rng.integers(0, 5, 4)
    g = T(rng.uniform(0, 1, 4))
    for value in (loss_ce(out, y), loss_ood(out, y), loss_soft_consistency(out, out),
                  loss_mcal(out, y, g), loss_ocal(out, y, g)):
        assert value.item() >= -1e-12


# ------------------------------------------------------------------ finite differences

def _fd_cases():
    return ["ce", "ood", "sc", "mcal", "ocal", "fix"]


def make_loss(name, rng, n=3, k=4):
    """Return ``(fn, params)`` for a random, kink-free instance of one loss."""
    while True:
        inst = oracles.fd_instance(rng, n, k)
        y = torch.from_numpy(rng.integers(0, k, n))
        w = T(rng.uniform(0.05, 0.95, n))
        out = oracles.outputs(**inst)
        if name == "ood":
            terms = np.log(1 - out.q.numpy())
            terms[np.arange(n), y.numpy()] = np.inf  # true class is not in the min
            if oracles.min_gap(terms) < 1e-2:
                continue
        if name == "ocal":
            qs = out.q_s.numpy()
            onehot = np.eye(k)[y.numpy()]
            neg = np.where(onehot, 1 - w.numpy()[:, None], w.numpy()[:, None])
            if oracles.min_gap(neg * np.log(1 - qs)) < 1e-2:
                continue
        break
    if name == "sc":
        other = oracles.fd_instance(rng, n, k)
        inst["z_g2"] = other["z_g"]

        def fn(z_f, z_g, T_M, T_O, z_g2):
            return loss_soft_consistency(oracles.outputs(z_f, z_g, T_M, T_O),
                                         oracles.outputs(z_f, z_g2, T_M, T_O))
        return fn, inst
    if name == "fix":
        weak = oracles.outputs(**oracles.fd_instance(rng, n, k))
        mask = torch.from_numpy(rng.random(n) < 0.7)
        mask[0] = True

        def fn(z_f, z_g, T_M, T_O):
            return loss_fix(weak, oracles.outputs(z_f, z_g, T_M, T_O), mask)
        return fn, inst
    losses = {
        "ce": lambda o: loss_ce(o, y),
        "ood": lambda o: loss_ood(o, y),
        "mcal": lambda o: loss_mcal(o, y, w),
        "ocal": lambda o: loss_ocal(o, y, w),
    }

    def fn(z_f, z_g, T_M, T_O):
        return losses[name](oracles.outputs(z_f, z_g, T_M, T_O))
    return fn, inst


@pytest.mark.parametrize("name", _fd_cases())
def test_gradients_match_central_differences(name):
    rng = np.random.default_rng(_fd_cases().index(name))
    worst = 0.0
    for _ in range(20):
        fn, params = make_loss(name, rng)
        worst = max(worst, oracles.relative_error(oracles.autograd_gradient(fn, params),
                                                  oracles.central_difference(fn, params)))
    assert worst < 1e-4
