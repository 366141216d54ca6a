"""Preference-optimization losses with analytic gradients.

Every loss here is a batch mean of per-sample terms that depend on the
policy only through log-ratios ``rho(y | m) = log pi(y|m,x) - log pi_ref(y|m,x)``
under two conditionings: the image m and the contrastive image m'.  Each
loss therefore reduces to per-sample sensitivities ``A[i, y] = dl_i / d rho(y|.)``
and the parameter gradient follows from

    d rho(y|f) / dW = outer(f, e_y - pi(.|f))

so ``dL/dW = mean_i outer(f_i, A_i - sum(A_i) * pi_i)`` summed over both
conditionings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .domain import DegenerateSampleError, HyperParams, SymmetricSample
from .policy import PolicyParams, feature_matrix, log_prob, log_softmax, logits

COMPONENTS = ("dpo_m", "pair", "margin", "ancpo", "vco", "vco_star")


class UsageError(ValueError):
    pass


@dataclass
class LossValue:
    total: float
    components: dict[str, float] = field(default_factory=dict)


@dataclass(eq=False)
class Batch:
    """Array view of a list of SymmetricSample."""

    F_m: np.ndarray
    F_c: np.ndarray
    y_w: np.ndarray
    y_l: np.ndarray
    y_w_c: np.ndarray
    samples: Sequence[SymmetricSample] = ()

    @property
    def n(self) -> int:
        return self.F_m.shape[0]


def encode_batch(samples: Sequence[SymmetricSample], d_img: int, n_prompts: int, K: int | None = None) -> Batch:
    if len(samples) == 0:
        raise UsageError("empty batch")
    if K is not None:
        for s in samples:
            if s.prompt.catalog_size != K:
                raise UsageError(f"prompt {s.prompt.id} has catalog size {s.prompt.catalog_size}, policy has K={K}")
    images = np.array([s.image for s in samples], dtype=np.float64)
    images_c = np.array([s.image_c for s in samples], dtype=np.float64)
    pids = np.array([s.prompt.id for s in samples], dtype=np.int64)
    return Batch(
        F_m=feature_matrix(images, pids, d_img, n_prompts),
        F_c=feature_matrix(images_c, pids, d_img, n_prompts),
        y_w=np.array([s.y_w for s in samples], dtype=np.int64),
        y_l=np.array([s.y_l for s in samples], dtype=np.int64),
        y_w_c=np.array([s.y_w_c for s in samples], dtype=np.int64),
        samples=tuple(samples),
    )


def as_batch(batch, params: PolicyParams) -> Batch:
    if isinstance(batch, Batch):
        if batch.n == 0:
            raise UsageError("empty batch")
        return batch
    return encode_batch(list(batch), params.d_img, params.n_prompts, params.K)


def softplus(x):
    return np.logaddexp(0.0, x)


def log_sigmoid(x):
    return -softplus(-x)


def sigmoid(x):
    return np.exp(-softplus(-x))


def _scalar(v):
    """Plain float for float64 results; wider dtypes pass through for precision checks."""
    v = np.asarray(v)
    return float(v) if v.dtype == np.float64 else v[()]


def bt_probability(r_w: float, r_l: float) -> float:
    """Bradley-Terry preference probability sigma(r_w - r_l)."""
    return float(sigmoid(np.float64(r_w) - np.float64(r_l)))


class _Eval:
    """Log-ratios and policy probabilities of a batch under both conditionings."""

    def __init__(self, batch: Batch, params: PolicyParams, ref_params: PolicyParams):
        self.batch = batch
        self.params = params
        params.check_finite()
        ref_params.check_finite()
        z_m, z_c = logits(params, batch.F_m), logits(params, batch.F_c)
        zr_m, zr_c = logits(ref_params, batch.F_m), logits(ref_params, batch.F_c)
        lp_m, lp_c = log_softmax(z_m), log_softmax(z_c)
        self.rho_m = lp_m - log_softmax(zr_m)
        self.rho_c = lp_c - log_softmax(zr_c)
        # logit gaps: log-ratio differences under one conditioning, normalizers cancelled exactly
        self._gap = {"m": z_m - zr_m, "c": z_c - zr_c}
        self._lp_m, self._lp_c = lp_m, lp_c
        self.rows = np.arange(batch.n)

    def rho(self, arm: str, y: np.ndarray) -> np.ndarray:
        table = self.rho_m if arm == "m" else self.rho_c
        return table[self.rows, y]

    def diff(self, arm: str, y_a: np.ndarray, y_b: np.ndarray) -> np.ndarray:
        """rho(y_a|arm) - rho(y_b|arm)."""
        g = self._gap[arm]
        return g[self.rows, y_a] - g[self.rows, y_b]

    def sens(self):
        dt = self.rho_m.dtype
        return np.zeros_like(self.rho_m, dtype=dt), np.zeros_like(self.rho_c, dtype=dt)

    def finish(self, per_sample: np.ndarray, A_m: np.ndarray, A_c: np.ndarray, want_grad: bool):
        n = self.batch.n
        value = np.sum(per_sample) / n
        if not want_grad:
            return value, None
        G_m = A_m - np.sum(A_m, axis=1, keepdims=True) * np.exp(self._lp_m)
        G_c = A_c - np.sum(A_c, axis=1, keepdims=True) * np.exp(self._lp_c)
        grad = np.einsum("nd,nk->dk", self.batch.F_m, G_m) + np.einsum("nd,nk->dk", self.batch.F_c, G_c)
        return value, grad / n


def _dpo_m_terms(ev: _Eval, hp: HyperParams):
    b = ev.batch
    z = hp.beta * ev.diff("m", b.y_w, b.y_l)
    A_m, A_c = ev.sens()
    g = -hp.beta * sigmoid(-z)
    A_m[ev.rows, b.y_w] += g
    A_m[ev.rows, b.y_l] -= g
    return softplus(-z), A_m, A_c


def _vco_terms(ev: _Eval, hp: HyperParams, offsets=None):
    b = ev.batch
    z = hp.beta * (ev.rho("m", b.y_w) - ev.rho("c", b.y_w))
    if offsets is not None:
        z = z + offsets
    A_m, A_c = ev.sens()
    g = -hp.beta * sigmoid(-z)
    A_m[ev.rows, b.y_w] += g
    A_c[ev.rows, b.y_w] -= g
    return softplus(-z), A_m, A_c


def _pair_terms(ev: _Eval, hp: HyperParams):
    b = ev.batch
    z1 = hp.beta * ev.diff("m", b.y_w, b.y_w_c)
    z2 = hp.beta * ev.diff("c", b.y_w_c, b.y_w)
    A_m, A_c = ev.sens()
    g1 = -hp.beta * sigmoid(-z1)
    g2 = -hp.beta * sigmoid(-z2)
    A_m[ev.rows, b.y_w] += g1
    A_m[ev.rows, b.y_w_c] -= g1
    A_c[ev.rows, b.y_w_c] += g2
    A_c[ev.rows, b.y_w] -= g2
    return softplus(-z1) + softplus(-z2), A_m, A_c


def _margin_terms(ev: _Eval, hp: HyperParams):
    b = ev.batch
    s = hp.beta if hp.margin_uses_beta else 1.0
    d_m = s * ev.diff("m", b.y_w, b.y_w_c)
    d_c = s * ev.diff("c", b.y_w_c, b.y_w)
    gap = d_m - d_c
    A_m, A_c = ev.sens()
    g = 2.0 * s * gap
    A_m[ev.rows, b.y_w] += g
    A_m[ev.rows, b.y_w_c] -= g
    A_c[ev.rows, b.y_w_c] -= g
    A_c[ev.rows, b.y_w] += g
    return gap * gap, A_m, A_c


def _ancpo_terms(ev: _Eval, hp: HyperParams):
    b = ev.batch
    z1 = hp.beta * ev.rho("m", b.y_w) - hp.delta
    z2 = hp.beta * ev.rho("c", b.y_w_c) - hp.delta
    A_m, A_c = ev.sens()
    A_m[ev.rows, b.y_w] += -hp.beta * sigmoid(-z1)
    A_c[ev.rows, b.y_w_c] += -hp.beta * sigmoid(-z2)
    return softplus(-z1) + softplus(-z2), A_m, A_c


_TERMS = {
    "dpo_m": _dpo_m_terms,
    "vco": _vco_terms,
    "pair": _pair_terms,
    "margin": _margin_terms,
    "ancpo": _ancpo_terms,
}
_NEEDS_SYMMETRIC_ARM = {"pair", "margin", "ancpo"}


def _reject_degenerate(b: Batch) -> None:
    bad = np.flatnonzero(b.y_w == b.y_w_c)
    if bad.size:
        raise DegenerateSampleError(f"sample {int(bad[0])}: y_w == y_w_c ({int(b.y_w[bad[0]])})")


def _single(name: str, batch, params, ref_params, hp, want_grad=True):
    b = as_batch(batch, params)
    if name in _NEEDS_SYMMETRIC_ARM:
        _reject_degenerate(b)
    ev = _Eval(b, params, ref_params)
    value, grad = ev.finish(*_TERMS[name](ev, hp), want_grad)
    return LossValue(_scalar(value), {name: _scalar(value)}), grad


def log_ratio(params: PolicyParams, ref_params: PolicyParams, image, prompt, y: int) -> float:
    """log pi_theta(y|m,x) - log pi_ref(y|m,x), unscaled by beta."""
    return log_prob(params, image, prompt, y) - log_prob(ref_params, image, prompt, y)


def margin_delta(params, ref_params, image, prompt, y_a: int, y_b: int) -> float:
    """Preference margin rho(y_a) - rho(y_b) under one conditioning (no beta)."""
    return log_ratio(params, ref_params, image, prompt, y_a) - log_ratio(params, ref_params, image, prompt, y_b)


def loss_dpo_m(batch, params, ref_params, hp: HyperParams, want_grad: bool = True):
    return _single("dpo_m", batch, params, ref_params, hp, want_grad)


def loss_vco(batch, params, ref_params, hp: HyperParams, want_grad: bool = True):
    return _single("vco", batch, params, ref_params, hp, want_grad)


def loss_pair(batch, params, ref_params, hp: HyperParams, want_grad: bool = True):
    return _single("pair", batch, params, ref_params, hp, want_grad)


def loss_margin(batch, params, ref_params, hp: HyperParams, want_grad: bool = True):
    return _single("margin", batch, params, ref_params, hp, want_grad)


def loss_ancpo(batch, params, ref_params, hp: HyperParams, want_grad: bool = True):
    return _single("ancpo", batch, params, ref_params, hp, want_grad)


def loss_vco_with_offsets(batch, params, ref_params, hp: HyperParams, offsets, want_grad: bool = True):
    """L_VCO with a fixed per-sample additive offset inside the sigmoid (the corrected objective)."""
    b = as_batch(batch, params)
    ev = _Eval(b, params, ref_params)
    value, grad = ev.finish(*_vco_terms(ev, hp, np.asarray(offsets, dtype=np.float64)), want_grad)
    return LossValue(_scalar(value), {"vco_star": _scalar(value)}), grad


def symmpo_weights(hp: HyperParams) -> dict[str, float]:
    return {"dpo_m": 1.0, "pair": hp.lam, "margin": hp.gamma, "ancpo": hp.eta}


def loss_symmpo(batch, params, ref_params, hp: HyperParams, want_grad: bool = True):
    """dpo_m + lam * pair + gamma * margin + eta * ancpo.

    Components with zero weight are neither evaluated nor recorded, so an
    all-zero weighting reproduces loss_dpo_m bit for bit.
    """
    b = as_batch(batch, params)
    weights = {k: w for k, w in symmpo_weights(hp).items() if w != 0.0}
    if any(k in _NEEDS_SYMMETRIC_ARM for k in weights):
        _reject_degenerate(b)
    ev = _Eval(b, params, ref_params)
    total = None
    grad = None
    components = {}
    for name, w in weights.items():
        value, g = ev.finish(*_TERMS[name](ev, hp), want_grad)
        components[name] = _scalar(value)
        if total is None:
            total = w * value
            grad = None if g is None else w * g
        else:
            total = total + w * value
            if g is not None:
                grad = grad + w * g
    return LossValue(_scalar(total), components), grad
