"""Independent checks: finite-difference gradients, partition cancellation, arm symmetry.

Finite differences are evaluated in extended precision (``np.longdouble``):
with h = 1e-5 a float64 loss carries ~1e-11 of round-off into each
difference quotient, which is larger than the 1e-5 relative tolerance
allows on gradient entries below ~1e-6.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .domain import HyperParams, Prompt, SymmetricSample
from .objectives import (
    encode_batch,
    log_ratio,
    log_sigmoid,
    loss_ancpo,
    loss_dpo_m,
    loss_margin,
    loss_pair,
    loss_symmpo,
    loss_vco,
    loss_vco_with_offsets,
)
from .partition import GroundTruthReward, batch_offsets, log_partition
from .policy import PolicyParams

LOSS_IDS = ("dpo_m", "vco", "vco_star", "pair", "margin", "ancpo", "symmpo")
DEFAULT_TOLERANCE = 1e-5
DEFAULT_H = 1e-5
EXACT_DTYPE = np.longdouble


@dataclass(frozen=True)
class GradCheckReport:
    loss_id: str
    instance: int
    max_rel_err: float
    worst_coordinate: tuple[int, int]
    passed: bool

    def record(self) -> dict:
        d = asdict(self)
        d["worst_coordinate"] = list(self.worst_coordinate)
        return d


def rel_error(a: np.ndarray, b: np.ndarray) -> tuple[float, tuple[int, int]]:
    """Max of |a-b| / max(|a|, |b|, 1e-8) and where it occurs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    err = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    flat = int(np.argmax(err))
    coord = np.unravel_index(flat, err.shape)
    return float(err.flat[flat]), tuple(int(c) for c in coord)


def finite_diff_grad(loss_evaluator: Callable[[np.ndarray], float], params: np.ndarray, h: float = DEFAULT_H) -> np.ndarray:
    """Central differences (L(W + h e) - L(W - h e)) / 2h, computed in the dtype of ``params``."""
    if h <= 0:
        raise ValueError("h must be positive")
    W = np.array(params, copy=True)
    grad = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        orig = W[idx]
        W[idx] = orig + h
        up = loss_evaluator(W)
        W[idx] = orig - h
        down = loss_evaluator(W)
        W[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


@dataclass
class Instance:
    samples: list[SymmetricSample]
    params: PolicyParams
    ref_params: PolicyParams
    hp: HyperParams
    reward: GroundTruthReward


def random_instance(rng: np.random.Generator, max_d: int = 16, max_K: int = 16, batch: int | None = None) -> Instance:
    """Random world dims, Bernoulli(0.5) images, uniform[-1, 1] parameters."""
    max_q = int(np.log2(max_K))
    q = int(rng.integers(1, max_q + 1))
    n_prompts = int(rng.integers(1, 4))
    d_img = int(rng.integers(q, max_d - n_prompts))  # d = d_img + n_prompts + 1 <= max_d
    K = 1 << q
    prompts = [Prompt(k, tuple(sorted(rng.choice(d_img, size=q, replace=False).tolist()))) for k in range(n_prompts)]
    n = int(rng.integers(1, 5)) if batch is None else batch
    samples = []
    for _ in range(n):
        prompt = prompts[int(rng.integers(n_prompts))]
        y_w = int(rng.integers(K))
        others = [y for y in range(K) if y != y_w] or [y_w]
        y_l = int(rng.choice(others)) if K > 1 else y_w
        y_w_c = int(rng.choice(others)) if K > 1 else y_w
        samples.append(
            SymmetricSample(
                prompt,
                tuple(rng.integers(0, 2, size=d_img).astype(float).tolist()),
                tuple(rng.integers(0, 2, size=d_img).astype(float).tolist()),
                y_w,
                y_l,
                y_w_c,
            )
        )
    d = d_img + n_prompts + 1
    params = PolicyParams(rng.uniform(-1, 1, size=(d, K)), d_img, n_prompts)
    ref = PolicyParams(rng.uniform(-1, 1, size=(d, K)), d_img, n_prompts)
    hp = HyperParams(delta=float(rng.uniform(-0.5, 0.5)))
    return Instance(samples, params, ref, hp, GroundTruthReward(1.0))


def loss_function(loss_id: str, inst: Instance):
    """(value_fn(W), analytic_grad()) for one loss on one instance."""
    b = encode_batch(inst.samples, inst.params.d_img, inst.params.n_prompts, inst.params.K)
    ref, hp = inst.ref_params, inst.hp
    if loss_id == "vco_star":
        offsets = batch_offsets(inst.samples, ref, inst.reward, hp)

        def fn(p, want_grad=True):
            return loss_vco_with_offsets(b, p, ref, hp, offsets, want_grad)
    else:
        base = {
            "dpo_m": loss_dpo_m,
            "vco": loss_vco,
            "pair": loss_pair,
            "margin": loss_margin,
            "ancpo": loss_ancpo,
            "symmpo": loss_symmpo,
        }[loss_id]

        def fn(p, want_grad=True):
            return base(b, p, ref, hp, want_grad)

    def value(W):
        return fn(inst.params.with_W(W), want_grad=False)[0].total

    return value, lambda: fn(inst.params)[1]


def gradcheck(loss_id: str, inst: Instance, instance_no: int = 0, h: float = DEFAULT_H, tolerance: float = DEFAULT_TOLERANCE) -> GradCheckReport:
    value, analytic = loss_function(loss_id, inst)
    numeric = finite_diff_grad(value, inst.params.W.astype(EXACT_DTYPE), h)
    err, coord = rel_error(analytic(), numeric)
    return GradCheckReport(loss_id, instance_no, err, coord, err <= tolerance)


def run_battery(
    losses=LOSS_IDS,
    n_instances: int = 100,
    seed: int = 0,
    h: float = DEFAULT_H,
    tolerance: float = DEFAULT_TOLERANCE,
    on_report: Callable[[GradCheckReport], None] | None = None,
) -> list[GradCheckReport]:
    """Every requested loss on the same ``n_instances`` seeded random instances."""
    rng = np.random.default_rng(seed)
    instances = [random_instance(rng) for _ in range(n_instances)]
    reports = []
    for loss_id in losses:
        for i, inst in enumerate(instances):
            rep = gradcheck(loss_id, inst, i, h, tolerance)
            reports.append(rep)
            if on_report is not None:
                on_report(rep)
    return reports


@dataclass(frozen=True)
class CancellationReport:
    c: float
    shared_max_err: float
    shared_ok: bool
    loss_vco: float
    loss_vco_star: float
    discrepancy: float


def _explicit_reward(params, ref, reward, hp, image, prompt, y):
    """Full implicit reward beta*rho + beta*ln Z, assembled term by term."""
    return hp.beta * log_ratio(params, ref, image, prompt, y) + hp.beta * log_partition(ref, reward, image, prompt, hp)


def cancellation_check(sample: SymmetricSample, params, ref_params, reward, hp: HyperParams, tol: float = 1e-10) -> CancellationReport:
    """Compare Z-free losses with their explicit-partition-function versions.

    Arms sharing an image must agree within ``tol``; the vision-contrastive
    pair generally does not, and its gap is reported.
    """
    def r(image, y):
        return _explicit_reward(params, ref_params, reward, hp, image, sample.prompt, y)

    s = sample
    dpo_explicit = -float(log_sigmoid(r(s.image, s.y_w) - r(s.image, s.y_l)))
    pair1 = -float(log_sigmoid(r(s.image, s.y_w) - r(s.image, s.y_w_c)))
    pair2 = -float(log_sigmoid(r(s.image_c, s.y_w_c) - r(s.image_c, s.y_w)))
    dpo_plain = loss_dpo_m([s], params, ref_params, hp, want_grad=False)[0].total
    pair_plain = loss_pair([s], params, ref_params, hp, want_grad=False)[0].total
    pair1_plain = -float(log_sigmoid(hp.beta * (
        log_ratio(params, ref_params, s.image, s.prompt, s.y_w) - log_ratio(params, ref_params, s.image, s.prompt, s.y_w_c)
    )))
    pair2_plain = pair_plain - pair1_plain
    errs = [abs(dpo_explicit - dpo_plain), abs(pair1 - pair1_plain), abs(pair2 - pair2_plain), abs(pair1 + pair2 - pair_plain)]
    shared = max(errs)

    vco_plain = loss_vco([s], params, ref_params, hp, want_grad=False)[0].total
    vco_explicit = -float(log_sigmoid(r(s.image, s.y_w) - r(s.image_c, s.y_w)))
    c = hp.beta * (
        log_partition(ref_params, reward, s.image, s.prompt, hp) - log_partition(ref_params, reward, s.image_c, s.prompt, hp)
    )
    return CancellationReport(c, shared, shared <= tol, vco_plain, vco_explicit, abs(vco_explicit - vco_plain))


def symmetry_check(sample: SymmetricSample, params, ref_params, hp: HyperParams, losses=None, tol: float = 1e-12) -> bool:
    """True iff the pair, margin and anchored losses are unchanged by swapping the two arms."""
    if losses is None:
        losses = (loss_pair, loss_margin, loss_ancpo)
    swapped = sample.swapped()
    for fn in losses:
        a = fn([sample], params, ref_params, hp, want_grad=False)[0].total
        b = fn([swapped], params, ref_params, hp, want_grad=False)[0].total
        if not abs(a - b) <= tol:
            return False
    return True


def timed_battery(**kwargs) -> tuple[list[GradCheckReport], float]:
    t0 = time.perf_counter()
    reports = run_battery(**kwargs)
    return reports, time.perf_counter() - t0
