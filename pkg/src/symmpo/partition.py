"""Exact partition functions and the offset they contribute to vision-contrastive DPO.

With a ground-truth reward r*(m, x, y) the DPO partition function

    Z(m, x) = sum_y pi_ref(y | m, x) * exp(r*(m, x, y) / beta)

is a finite sum over the response catalog.  When the two Bradley-Terry arms
share the conditioning it cancels; when they condition on different images
(m, m') it leaves the offset c = beta * (ln Z(m, x) - ln Z(m', x)), which
never depends on the trained policy and rescales the gradient coefficient
from sigma(-u) to sigma(-(u + c)).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .domain import HyperParams, Prompt, correct_response
from .objectives import LossValue, as_batch, log_ratio, loss_vco, loss_vco_with_offsets, sigmoid
from .policy import PolicyParams, context_features, logits, logsumexp


class IdentityViolation(AssertionError):
    pass


@dataclass(frozen=True)
class GroundTruthReward:
    """r*(m, x, y) = scale * (#correct - #incorrect assertions of y)."""

    scale: float = 1.0

    def values(self, image, prompt: Prompt) -> np.ndarray:
        truth = correct_response(image, prompt)
        q = prompt.q
        ys = np.arange(1 << q)
        wrong = np.array([bin(int(y) ^ truth).count("1") for y in ys], dtype=np.float64)
        return self.scale * (q - 2.0 * wrong)


@dataclass(frozen=True)
class PartitionReport:
    z_w: float
    z_l: float
    u: float
    c: float
    coef_star: float
    coef_plain: float
    loss_vco: float
    loss_vco_star: float

    def record(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in ("u", "c", "coef_star", "coef_plain", "loss_vco", "loss_vco_star")}


def log_partition(ref_params: PolicyParams, reward, image, prompt: Prompt, hp: HyperParams) -> float:
    # ln sum exp(z + r/beta) - ln sum exp(z): a zero reward cancels exactly
    z = logits(ref_params, context_features(image, prompt, ref_params))
    return float(logsumexp(z + reward.values(image, prompt) / hp.beta) - logsumexp(z))


def partition_z(ref_params: PolicyParams, reward, image, prompt: Prompt, hp: HyperParams) -> float:
    return float(np.exp(log_partition(ref_params, reward, image, prompt, hp)))


def offset_c(ref_params, reward, image, image_c, prompt, hp: HyperParams) -> float:
    return hp.beta * (
        log_partition(ref_params, reward, image, prompt, hp) - log_partition(ref_params, reward, image_c, prompt, hp)
    )


def batch_offsets(samples, ref_params, reward, hp: HyperParams) -> np.ndarray:
    return np.array([offset_c(ref_params, reward, s.image, s.image_c, s.prompt, hp) for s in samples])


def loss_vco_star(batch, params, ref_params, reward, hp: HyperParams, want_grad: bool = True, offsets=None):
    """-mean log sigma(u + c); c is computed from ref_params and the reward only."""
    b = as_batch(batch, params)
    if offsets is None:
        offsets = batch_offsets(b.samples, ref_params, reward, hp)
    return loss_vco_with_offsets(b, params, ref_params, hp, offsets, want_grad)


def gradient_coefficients(u: float, c: float) -> tuple[float, float]:
    """Coefficients of du/dtheta in the corrected and the plain gradient."""
    return float(sigmoid(-(np.float64(u) + c))), float(sigmoid(-np.float64(u)))


def ratio_identity_error(g_star: np.ndarray, g_plain: np.ndarray, u: float, c: float) -> float:
    """max |g_star - sigma(-(u+c))/sigma(-u) * g_plain|, relative to max |g_star|.

    Measured against the largest entry rather than entrywise: entries where the
    m and m' contributions nearly cancel carry round-off that is unrelated
    to the identity being checked.
    """
    coef_star, coef_plain = gradient_coefficients(u, c)
    diff = np.max(np.abs(g_star - (coef_star / coef_plain) * g_plain))
    scale = np.max(np.abs(g_star))
    return float(diff / scale) if scale > 0 else float(diff)


def compare_vco_gradients(batch, params, ref_params, reward, hp: HyperParams, tol: float = 1e-10) -> list[PartitionReport]:
    b = as_batch(batch, params)
    if not b.samples:
        raise ValueError("compare_vco_gradients needs the sample list, not a bare array batch")
    reports = []
    for s in b.samples:
        lz_w = log_partition(ref_params, reward, s.image, s.prompt, hp)
        lz_l = log_partition(ref_params, reward, s.image_c, s.prompt, hp)
        c = hp.beta * (lz_w - lz_l)
        plain, g_plain = loss_vco([s], params, ref_params, hp)
        star, g_star = loss_vco_with_offsets([s], params, ref_params, hp, [c])
        u = hp.beta * (
            log_ratio(params, ref_params, s.image, s.prompt, s.y_w)
            - log_ratio(params, ref_params, s.image_c, s.prompt, s.y_w)
        )
        coef_star, coef_plain = gradient_coefficients(u, c)
        err = ratio_identity_error(g_star, g_plain, u, c)
        if err > tol:
            raise IdentityViolation(f"gradient ratio identity violated: rel err {err:.3e} > {tol:.1e}")
        reports.append(
            PartitionReport(
                z_w=float(np.exp(lz_w)),
                z_l=float(np.exp(lz_l)),
                u=float(u),
                c=float(c),
                coef_star=coef_star,
                coef_plain=coef_plain,
                loss_vco=plain.total,
                loss_vco_star=star.total,
            )
        )
    return reports


__all__ = [
    "GroundTruthReward",
    "IdentityViolation",
    "LossValue",
    "PartitionReport",
    "batch_offsets",
    "compare_vco_gradients",
    "gradient_coefficients",
    "log_partition",
    "loss_vco_star",
    "offset_c",
    "partition_z",
    "ratio_identity_error",
]
