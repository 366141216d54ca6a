import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from symmpo.domain import DegenerateSampleError, HyperParams
from symmpo.objectives import (
    UsageError,
    bt_probability,
    encode_batch,
    log_ratio,
    loss_ancpo,
    loss_dpo_m,
    loss_margin,
    loss_pair,
    loss_symmpo,
    loss_vco,
    margin_delta,
)
from symmpo.policy import PolicyParams, log_prob

from conftest import LN2, random_params, random_samples
from oracles import batch_mean

LOSSES = {
    "dpo_m": loss_dpo_m,
    "vco": loss_vco,
    "pair": loss_pair,
    "margin": loss_margin,
    "ancpo": loss_ancpo,
}


def setup(rng, n=6, scale=1.0):
    samples = random_samples(rng, n)
    params = random_params(rng, 5, 2, 4, scale)
    ref = random_params(rng, 5, 2, 4, scale)
    return samples, params, ref


# ---------------------------------------------------------------- log_ratio / bt


def test_log_ratio_identities(rng):
    samples, params, ref = setup(rng, 1)
    s = samples[0]
    assert log_ratio(params, params, s.image, s.prompt, s.y_w) == 0.0
    a = log_ratio(params, ref, s.image, s.prompt, s.y_w)
    assert log_ratio(ref, params, s.image, s.prompt, s.y_w) == -a
    expected = log_prob(params, s.image, s.prompt, s.y_w) - log_prob(ref, s.image, s.prompt, s.y_w)
    assert a == pytest.approx(expected, abs=1e-15)


def test_bt_probability_examples():
    assert bt_probability(0.0, 0.0) == 0.5
    assert bt_probability(math.log(3.0), 0.0) == pytest.approx(0.75, abs=1e-15)
    a, b = 1.3, -0.4
    assert bt_probability(a, b) == pytest.approx(math.exp(a) / (math.exp(a) + math.exp(b)), abs=1e-15)


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_bt_complement(a, b):
    assert abs(bt_probability(a, b) + bt_probability(b, a) - 1.0) <= 1e-15


# ---------------------------------------------------------------- individual losses


@pytest.mark.parametrize("name", sorted(LOSSES))
def test_matches_scalar_reevaluation(name, rng):
    samples, params, ref = setup(rng)
    hp = HyperParams(beta=0.7, delta=0.3)
    value = LOSSES[name](samples, params, ref, hp)[0].total
    assert value == pytest.approx(batch_mean(name, samples, params, ref, hp), abs=1e-12)


def test_margin_with_beta_flag_matches_oracle(rng):
    samples, params, ref = setup(rng)
    hp = HyperParams(margin_uses_beta=True, beta=0.5)
    assert loss_margin(samples, params, ref, hp)[0].total == pytest.approx(
        batch_mean("margin", samples, params, ref, hp), abs=1e-12
    )
    plain = loss_margin(samples, params, ref, replace(hp, margin_uses_beta=False))[0].total
    assert loss_margin(samples, params, ref, hp)[0].total == pytest.approx(0.25 * plain, rel=1e-12)


@pytest.mark.parametrize(
    "name, expected",
    [("dpo_m", LN2), ("vco", LN2), ("pair", 2 * LN2), ("margin", 0.0), ("ancpo", 2 * LN2)],
)
def test_value_at_reference(name, expected, rng):
    samples, params, _ = setup(rng)
    assert LOSSES[name](samples, params, params, HyperParams())[0].total == pytest.approx(expected, abs=1e-15)


def test_dpo_monotone_in_preferred_logit(rng, hp):
    samples, params, ref = setup(rng, 1)
    s = samples[0]
    base = loss_dpo_m(samples, params, ref, hp)[0].total
    W = params.W.copy()
    W[-1, s.y_w] += 1e-3  # bias row raises the y_w logit
    assert loss_dpo_m(samples, params.with_W(W), ref, hp)[0].total < base


def test_vco_identical_images(rng, hp):
    samples, params, ref = setup(rng)
    same = [replace(s, image_c=s.image) for s in samples]
    assert loss_vco(same, params, ref, hp)[0].total == pytest.approx(LN2, abs=1e-15)


def test_pair_swap_symmetry(rng, hp):
    samples, params, ref = setup(rng)
    a = loss_pair(samples, params, ref, hp)[0].total
    b = loss_pair([s.swapped() for s in samples], params, ref, hp)[0].total
    assert abs(a - b) <= 1e-12


def test_margin_delta_properties(rng):
    samples, params, ref = setup(rng, 1)
    s = samples[0]
    assert margin_delta(params, ref, s.image, s.prompt, 2, 2) == 0.0
    d = margin_delta(params, ref, s.image, s.prompt, s.y_w, s.y_w_c)
    assert margin_delta(params, ref, s.image, s.prompt, s.y_w_c, s.y_w) == pytest.approx(-d, abs=1e-15)
    assert margin_delta(params, params, s.image, s.prompt, 0, 3) == 0.0


def test_margin_identical_images(rng, hp):
    samples, params, ref = setup(rng, 1)
    s = replace(samples[0], image_c=samples[0].image)
    d = margin_delta(params, ref, s.image, s.prompt, s.y_w, s.y_w_c)
    assert loss_margin([s], params, ref, hp)[0].total == pytest.approx((2 * d) ** 2, abs=1e-12)


def test_ancpo_saturates(rng):
    samples, params, _ = setup(rng)
    assert loss_ancpo(samples, params, params, HyperParams(delta=0.0))[0].total == pytest.approx(2 * LN2, abs=1e-15)
    assert loss_ancpo(samples, params, params, HyperParams(delta=-30.0))[0].total <= 1e-12


def test_empty_batch_rejected(rng, hp):
    params = random_params(rng, 5, 2, 4)
    for fn in list(LOSSES.values()) + [loss_symmpo]:
        with pytest.raises(UsageError):
            fn([], params, params, hp)


def test_degenerate_sample_rejected(rng, hp):
    samples, params, ref = setup(rng, 3)
    bad = samples[:2] + [replace(samples[2], y_w_c=samples[2].y_w)]
    for fn in (loss_pair, loss_margin, loss_ancpo, loss_symmpo):
        with pytest.raises(DegenerateSampleError):
            fn(bad, params, ref, hp)
    loss_dpo_m(bad, params, ref, hp)  # does not use the symmetric arm


# ---------------------------------------------------------------- composite


def test_symmpo_at_reference_is_four_ln2(rng):
    samples, _, _ = setup(rng)
    params = PolicyParams.zeros(5, 2, 4)
    value = loss_symmpo(samples, params, params, HyperParams())[0]
    assert abs(value.total - 4 * LN2) <= 1e-12
    assert set(value.components) == {"dpo_m", "pair", "margin", "ancpo"}


def test_symmpo_reduces_to_dpo(rng):
    samples, params, ref = setup(rng)
    hp = HyperParams(lam=0.0, gamma=0.0, eta=0.0)
    v1, g1 = loss_symmpo(samples, params, ref, hp)
    v2, g2 = loss_dpo_m(samples, params, ref, hp)
    assert v1.total == v2.total
    assert np.array_equal(g1, g2)
    assert v1.components == {"dpo_m": v2.total}


def test_symmpo_component_decomposition(rng):
    samples, params, ref = setup(rng)
    hp = HyperParams(lam=0.3, gamma=0.01, eta=0.7, delta=0.2)
    value, grad = loss_symmpo(samples, params, ref, hp)
    parts = {n: LOSSES[n](samples, params, ref, hp) for n in ("dpo_m", "pair", "margin", "ancpo")}
    total = parts["dpo_m"][0].total + 0.3 * parts["pair"][0].total + 0.01 * parts["margin"][0].total + 0.7 * parts["ancpo"][0].total
    assert value.total == pytest.approx(total, abs=1e-12)
    g = parts["dpo_m"][1] + 0.3 * parts["pair"][1] + 0.01 * parts["margin"][1] + 0.7 * parts["ancpo"][1]
    np.testing.assert_allclose(grad, g, rtol=0, atol=1e-12)
    for n in parts:
        assert value.components[n] == pytest.approx(parts[n][0].total, abs=1e-15)


# ---------------------------------------------------------------- properties


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_losses_nonnegative_and_batch_linear(seed):
    rng = np.random.default_rng(seed)
    samples, params, ref = setup(rng, 8, scale=2.0)
    hp = HyperParams(beta=float(rng.uniform(0.05, 2.0)), delta=float(rng.uniform(-1, 1)))
    for name, fn in LOSSES.items():
        whole = fn(samples, params, ref, hp)[0].total
        first = fn(samples[:4], params, ref, hp)[0].total
        second = fn(samples[4:], params, ref, hp)[0].total
        assert whole >= 0.0
        assert abs(whole - 0.5 * (first + second)) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_pair_and_margin_swap_invariant(seed):
    rng = np.random.default_rng(seed)
    samples, params, ref = setup(rng, 5, scale=2.0)
    hp = HyperParams()
    swapped = [s.swapped() for s in samples]
    for fn in (loss_pair, loss_margin, loss_ancpo):
        assert abs(fn(samples, params, ref, hp)[0].total - fn(swapped, params, ref, hp)[0].total) <= 1e-12


def test_margin_zero_iff_margins_equal(rng, hp):
    samples, params, ref = setup(rng, 1)
    assert loss_margin(samples, params, ref, hp)[0].total > 0
    s = samples[0]
    # antisymmetric arms: identical image with y_w <-> y_w_c roles gives equal margins only at the reference
    assert loss_margin([s], params, params, hp)[0].total == 0.0


def test_batch_object_and_list_agree(rng, hp):
    samples, params, ref = setup(rng)
    b = encode_batch(samples, 5, 2, 4)
    for fn in LOSSES.values():
        v1, g1 = fn(samples, params, ref, hp)
        v2, g2 = fn(b, params, ref, hp)
        assert v1.total == v2.total and np.array_equal(g1, g2)
