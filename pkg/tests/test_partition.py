import math
from dataclasses import replace

import numpy as np
import pytest

from symmpo.domain import HyperParams, Prompt, SymmetricSample
from symmpo.partition import (
    GroundTruthReward,
    IdentityViolation,
    compare_vco_gradients,
    gradient_coefficients,
    log_partition,
    loss_vco_star,
    offset_c,
    partition_z,
    ratio_identity_error,
)
from symmpo.objectives import loss_vco
from symmpo.policy import PolicyParams, full_distribution
from symmpo.verify import finite_diff_grad, rel_error

from conftest import random_params, random_samples
from oracles import log_sig, rho


class ConstantReward:
    def __init__(self, value, K):
        self.value, self.K = value, K

    def values(self, image, prompt):
        return np.full(self.K, self.value)


def brute_force_z(ref, image, prompt, beta, scale=1.0):
    """Sum over every response, rewards counted assertion by assertion."""
    dist = full_distribution(ref, image, prompt)
    total = 0.0
    for y in range(prompt.catalog_size):
        score = 0
        for t, pos in enumerate(prompt.queried):
            truth = 1 if image[pos] > 0.5 else 0
            score += 1 if ((y >> t) & 1) == truth else -1
        total += float(dist[y]) * math.exp(scale * score / beta)
    return total


def test_reward_values():
    p = Prompt(0, (0, 1))
    r = GroundTruthReward().values((1.0, 0.0), p)
    # truth = bit0 set, bit1 clear -> y=1
    assert r.tolist() == [0.0, 2.0, -2.0, 0.0]
    assert GroundTruthReward(0.5).values((1.0, 0.0), p).tolist() == [0.0, 1.0, -1.0, 0.0]


def test_zero_reward_gives_unit_partition(rng):
    ref = random_params(rng, 5, 2, 4)
    s = random_samples(rng, 1)[0]
    hp = HyperParams()
    assert partition_z(ref, GroundTruthReward(0.0), s.image, s.prompt, hp) == pytest.approx(1.0, abs=1e-15)
    assert partition_z(ref, ConstantReward(0.0, 4), s.image, s.prompt, hp) == pytest.approx(1.0, abs=1e-15)


def test_constant_reward(rng):
    ref = random_params(rng, 5, 2, 4)
    s = random_samples(rng, 1)[0]
    hp = HyperParams(beta=0.5)
    lz = log_partition(ref, ConstantReward(0.3, 4), s.image, s.prompt, hp)
    assert lz == pytest.approx(0.6, abs=1e-14)


def test_uniform_reference_closed_form():
    p = Prompt(0, (0,))
    ref = PolicyParams.zeros(1, 1, 2)
    hp = HyperParams(beta=1.0)
    # rewards +1 (correct) and -1 (wrong), uniform reference
    assert partition_z(ref, GroundTruthReward(), (1.0,), p, hp) == pytest.approx(math.cosh(1.0), rel=1e-15)


@pytest.mark.parametrize("seed", range(20))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    q = int(rng.integers(1, 5))
    d_img = q + int(rng.integers(0, 4))
    ref = random_params(rng, d_img, 2, 1 << q, 2.0)
    s = random_samples(rng, 1, d_img=d_img, n_prompts=2, q=q)[0]
    beta = float(rng.uniform(0.1, 2.0))
    z = partition_z(ref, GroundTruthReward(), s.image, s.prompt, HyperParams(beta=beta))
    assert abs(z - brute_force_z(ref, s.image, s.prompt, beta)) <= 1e-12 * z


def test_offset_zero_cases(rng):
    ref = random_params(rng, 5, 2, 4)
    s = random_samples(rng, 1)[0]
    hp = HyperParams()
    assert offset_c(ref, GroundTruthReward(), s.image, s.image, s.prompt, hp) == 0.0
    assert offset_c(ref, GroundTruthReward(0.0), s.image, s.image_c, s.prompt, hp) == 0.0


def test_offset_antisymmetric(rng):
    ref = random_params(rng, 5, 2, 4)
    s = random_samples(rng, 1)[0]
    hp = HyperParams()
    a = offset_c(ref, GroundTruthReward(), s.image, s.image_c, s.prompt, hp)
    assert offset_c(ref, GroundTruthReward(), s.image_c, s.image, s.prompt, hp) == -a


def test_offset_ignores_policy(rng):
    ref = random_params(rng, 5, 2, 4)
    samples = random_samples(rng, 4)
    hp = HyperParams()
    base = loss_vco_star(samples, random_params(rng, 5, 2, 4), ref, GroundTruthReward(), hp)
    from symmpo.partition import batch_offsets

    c = batch_offsets(samples, ref, GroundTruthReward(), hp)
    for _ in range(5):
        assert np.array_equal(batch_offsets(samples, ref, GroundTruthReward(), hp), c)
        params = random_params(rng, 5, 2, 4, 5.0)
        v = loss_vco_star(samples, params, ref, GroundTruthReward(), hp, offsets=c)[0].total
        v2 = loss_vco_star(samples, params, ref, GroundTruthReward(), hp)[0].total
        assert v == v2
    assert base[0].total > 0


def test_vco_star_matches_oracle(rng):
    samples = random_samples(rng, 5)
    params, ref = random_params(rng, 5, 2, 4), random_params(rng, 5, 2, 4)
    hp = HyperParams(beta=0.4)
    reward = GroundTruthReward()
    expected = 0.0
    for s in samples:
        c = hp.beta * (
            math.log(brute_force_z(ref, s.image, s.prompt, hp.beta)) - math.log(brute_force_z(ref, s.image_c, s.prompt, hp.beta))
        )
        u = hp.beta * (rho(params, ref, s.image, s.prompt, s.y_w) - rho(params, ref, s.image_c, s.prompt, s.y_w))
        expected -= log_sig(u + c)
    expected /= len(samples)
    assert loss_vco_star(samples, params, ref, reward, hp)[0].total == pytest.approx(expected, abs=1e-11)


def test_vco_star_equals_vco_without_reward(rng):
    samples = random_samples(rng, 5)
    params, ref = random_params(rng, 5, 2, 4), random_params(rng, 5, 2, 4)
    hp = HyperParams()
    a = loss_vco_star(samples, params, ref, GroundTruthReward(0.0), hp)
    b = loss_vco(samples, params, ref, hp)
    assert a[0].total == b[0].total
    assert np.array_equal(a[1], b[1])


def test_vco_star_at_reference(rng):
    samples = random_samples(rng, 1)
    ref = random_params(rng, 5, 2, 4)
    hp = HyperParams()
    s = samples[0]
    c = offset_c(ref, GroundTruthReward(), s.image, s.image_c, s.prompt, hp)
    assert loss_vco_star(samples, ref, ref, GroundTruthReward(), hp)[0].total == pytest.approx(-log_sig(c), abs=1e-14)


def test_gradient_coefficient_examples():
    star, plain = gradient_coefficients(0.0, 0.5)
    assert star == pytest.approx(0.3775406687981454, abs=1e-15)
    assert plain == 0.5
    assert gradient_coefficients(0.0, 30.0)[0] <= 1e-12
    assert gradient_coefficients(0.2, 0.0)[0] == gradient_coefficients(0.2, 0.0)[1]


def test_vco_star_gradient_finite_difference(rng):
    samples = random_samples(rng, 3)
    params, ref = random_params(rng, 5, 2, 4), random_params(rng, 5, 2, 4)
    hp = HyperParams()
    reward = GroundTruthReward()
    _, grad = loss_vco_star(samples, params, ref, reward, hp)

    def value(W):
        return loss_vco_star(samples, params.with_W(W), ref, reward, hp, want_grad=False)[0].total

    numeric = finite_diff_grad(value, params.W.astype(np.longdouble))
    assert rel_error(grad, numeric)[0] <= 1e-5


def test_compare_reports(rng):
    samples = random_samples(rng, 20)
    params, ref = random_params(rng, 5, 2, 4), random_params(rng, 5, 2, 4)
    hp = HyperParams()
    reports = compare_vco_gradients(samples, params, ref, GroundTruthReward(), hp)
    assert len(reports) == 20
    for r in reports:
        assert set(r.record()) == {"u", "c", "coef_star", "coef_plain", "loss_vco", "loss_vco_star"}
        assert r.c == pytest.approx(hp.beta * (math.log(r.z_w) - math.log(r.z_l)), abs=1e-12)
        if abs(r.c) > 0.1:
            assert abs(r.loss_vco - r.loss_vco_star) > 1e-4


def test_ratio_identity_detects_wrong_gradient(rng):
    s = random_samples(rng, 1)
    params, ref = random_params(rng, 5, 2, 4), random_params(rng, 5, 2, 4)
    hp = HyperParams()
    _, g = loss_vco(s, params, ref, hp)
    assert ratio_identity_error(g, g, 0.3, 0.0) == 0.0
    assert ratio_identity_error(1.1 * g, g, 0.3, 0.0) > 0.05


def test_identity_violation_is_raised(rng, monkeypatch):
    import symmpo.partition as part

    samples = random_samples(rng, 2)
    params, ref = random_params(rng, 5, 2, 4), random_params(rng, 5, 2, 4)
    monkeypatch.setattr(part, "gradient_coefficients", lambda u, c: (0.9, 0.5))
    with pytest.raises(IdentityViolation):
        compare_vco_gradients(samples, params, ref, GroundTruthReward(), HyperParams())
