import numpy as np
import pytest

from symmpo.domain import HyperParams
from symmpo.objectives import LossValue, loss_pair
from symmpo.partition import GroundTruthReward
from symmpo.verify import (
    LOSS_IDS,
    cancellation_check,
    finite_diff_grad,
    gradcheck,
    random_instance,
    rel_error,
    run_battery,
    symmetry_check,
)

from conftest import random_params, random_samples
from oracles import log_sig, rho


def test_finite_diff_quadratic():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    W = np.array([[0.3, -0.7]])

    def f(x):
        v = x.reshape(-1)
        return 0.5 * v @ A @ v

    np.testing.assert_allclose(finite_diff_grad(f, W), (A @ W.reshape(-1)).reshape(1, 2), atol=1e-9)


def test_finite_diff_constant_and_bad_h():
    assert not finite_diff_grad(lambda W: 3.0, np.ones((2, 3))).any()
    with pytest.raises(ValueError):
        finite_diff_grad(lambda W: 0.0, np.ones(2), h=0.0)


def test_rel_error_floor():
    err, coord = rel_error(np.array([[0.0, 1e-12]]), np.array([[0.0, 0.0]]))
    assert err == pytest.approx(1e-4) and coord == (0, 1)
    err, _ = rel_error(np.array([2.0]), np.array([1.0]))
    assert err == 0.5


def test_random_instance_bounds():
    rng = np.random.default_rng(0)
    for _ in range(50):
        inst = random_instance(rng)
        assert inst.params.d <= 16 and inst.params.K <= 16
        assert 1 <= len(inst.samples) <= 4


def test_small_battery_passes():
    reports = run_battery(n_instances=5, seed=11)
    assert len(reports) == 5 * len(LOSS_IDS)
    assert all(r.passed for r in reports), max(r.max_rel_err for r in reports)


def test_gradcheck_catches_wrong_gradient(monkeypatch):
    import symmpo.verify as verify

    inst = random_instance(np.random.default_rng(3))
    real = verify.loss_function

    def broken(loss_id, inst):
        value, grad = real(loss_id, inst)
        return value, lambda: grad() * 1.01

    monkeypatch.setattr(verify, "loss_function", broken)
    assert not gradcheck("dpo_m", inst).passed


def test_cancellation_on_shared_arms():
    rng = np.random.default_rng(5)
    hp = HyperParams()
    for s in random_samples(rng, 20):
        params, ref = random_params(rng, 5, 2, 4), random_params(rng, 5, 2, 4)
        rep = cancellation_check(s, params, ref, GroundTruthReward(), hp)
        assert rep.shared_ok, rep.shared_max_err
        if abs(rep.c) > 0.1:
            assert rep.discrepancy > 1e-4


def test_symmetry_check_passes_real_losses(rng, hp):
    for s in random_samples(rng, 20):
        assert symmetry_check(s, random_params(rng, 5, 2, 4), random_params(rng, 5, 2, 4), hp)


def test_symmetry_check_catches_one_sided_pair(rng, hp):
    def pair_first_term_only(batch, params, ref, hp, want_grad=True):
        s = batch[0]
        gap = rho(params, ref, s.image, s.prompt, s.y_w) - rho(params, ref, s.image, s.prompt, s.y_w_c)
        return LossValue(-log_sig(hp.beta * gap), {}), None

    s = random_samples(rng, 1)[0]
    params, ref = random_params(rng, 5, 2, 4), random_params(rng, 5, 2, 4)
    assert not symmetry_check(s, params, ref, hp, losses=[pair_first_term_only])
    assert symmetry_check(s, params, ref, hp, losses=[loss_pair])
