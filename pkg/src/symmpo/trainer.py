"""Deterministic mini-batch training of the toy policy and its evaluation metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .domain import ConfigError, HyperParams, SymmetricSample
from .objectives import (
    Batch,
    as_batch,
    encode_batch,
    loss_dpo_m,
    loss_symmpo,
    loss_vco,
    loss_vco_with_offsets,
    sigmoid,
    _Eval,
)
from .partition import GroundTruthReward, batch_offsets
from .policy import NumericError, PolicyParams, logits
from .rng import stream

OBJECTIVES = (
    "dpo",
    "vco",
    "vco_star",
    "symmpo",
    "symmpo_wo_pair",
    "symmpo_wo_margin",
    "symmpo_wo_ancpo",
)
OPTIMIZERS = ("sgd", "adam")
_SHUFFLE = 4


class TrainingError(RuntimeError):
    def __init__(self, message: str, log: "MetricsLog"):
        super().__init__(message)
        self.log = log


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "symmpo"
    hyper: HyperParams = field(default_factory=HyperParams)
    optimizer: str = "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    shuffle_seed: int = 0
    eval_every: int = 0
    reward_scale: float = 1.0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")
        if self.reward_scale < 0:
            raise ConfigError("reward_scale must be >= 0")

    def effective_hyper(self) -> HyperParams:
        """Hyperparameters after applying the ablation implied by the objective name."""
        hp = self.hyper
        if self.objective == "symmpo_wo_pair":
            return replace(hp, lam=0.0)
        if self.objective == "symmpo_wo_margin":
            return replace(hp, gamma=0.0)
        if self.objective == "symmpo_wo_ancpo":
            return replace(hp, eta=0.0)
        return hp


@dataclass
class MetricsLog:
    records: list[dict] = field(default_factory=list)

    def steps(self) -> list[dict]:
        return [r for r in self.records if r["kind"] == "step"]

    def evals(self) -> list[dict]:
        return [r for r in self.records if r["kind"] == "eval"]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in self.records)

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_jsonl())


class HallucinationResult(NamedTuple):
    rate: float
    mention_rate: float


def _take(batch: Batch, idx: np.ndarray) -> Batch:
    return Batch(
        F_m=batch.F_m[idx],
        F_c=batch.F_c[idx],
        y_w=batch.y_w[idx],
        y_l=batch.y_l[idx],
        y_w_c=batch.y_w_c[idx],
        samples=tuple(batch.samples[i] for i in idx) if batch.samples else (),
    )


def evaluate_hallucination_rate(params: PolicyParams, samples) -> HallucinationResult:
    """Fraction of (image, prompt) pairs whose greedy response makes any wrong assertion.

    The mention-level analog is the mean fraction of wrong assertions.
    """
    b = as_batch(samples, params)
    greedy = np.argmax(logits(params, b.F_m), axis=1)
    wrong = greedy ^ b.y_w
    q = int(round(math.log2(params.K)))
    bits = np.array([bin(int(v)).count("1") for v in wrong])
    return HallucinationResult(float(np.mean(bits > 0)), float(np.mean(bits / q)))


def evaluate_contrastive_accuracy(params: PolicyParams, ref_params: PolicyParams, samples, hp: HyperParams) -> float:
    """Fraction of samples ranking y_w over y_w' under m and y_w' over y_w under m' (strictly)."""
    b = as_batch(samples, params)
    ev = _Eval(b, params, ref_params)
    p_m = sigmoid(hp.beta * ev.rho("m", b.y_w) - hp.beta * ev.rho("m", b.y_w_c))
    p_c = sigmoid(hp.beta * ev.rho("c", b.y_w_c) - hp.beta * ev.rho("c", b.y_w))
    return float(np.mean((p_m > 0.5) & (p_c > 0.5)))


def make_objective(config: TrainConfig, ref_params: PolicyParams, samples: Sequence[SymmetricSample]):
    """Return f(batch, params, idx) -> (LossValue, grad) for the configured objective."""
    hp = config.effective_hyper()
    name = config.objective
    if name == "dpo":
        return lambda b, p, idx: loss_dpo_m(b, p, ref_params, hp)
    if name == "vco":
        return lambda b, p, idx: loss_vco(b, p, ref_params, hp)
    if name == "vco_star":
        offsets = batch_offsets(samples, ref_params, GroundTruthReward(config.reward_scale), hp)
        return lambda b, p, idx: loss_vco_with_offsets(b, p, ref_params, hp, offsets[idx])
    return lambda b, p, idx: loss_symmpo(b, p, ref_params, hp)


def _eval_record(step, params, ref_params, heldout, hp) -> dict:
    hall = evaluate_hallucination_rate(params, heldout)
    return {
        "kind": "eval",
        "step": step,
        "hallucination_rate": hall.rate,
        "mention_rate": hall.mention_rate,
        "contrastive_accuracy": evaluate_contrastive_accuracy(params, ref_params, heldout, hp),
    }


def train(
    train_samples: Sequence[SymmetricSample],
    config: TrainConfig,
    init_params: PolicyParams,
    heldout: Sequence[SymmetricSample] = (),
) -> tuple[PolicyParams, MetricsLog]:
    """Mini-batch training with pi_ref frozen at ``init_params``."""
    hp = config.hyper
    n = len(train_samples)
    if n == 0:
        raise ConfigError("empty training set")
    if hp.batch_size > n:
        raise ConfigError(f"batch_size {hp.batch_size} exceeds dataset size {n}")
    ref = init_params.copy()
    params = init_params.copy()
    full = encode_batch(list(train_samples), params.d_img, params.n_prompts, params.K)
    held = encode_batch(list(heldout), params.d_img, params.n_prompts, params.K) if heldout else None
    objective = make_objective(config, ref, train_samples)
    log = MetricsLog()

    m = np.zeros_like(params.W)
    v = np.zeros_like(params.W)
    step = 0
    for epoch in range(hp.epochs):
        order = np.array(stream(config.shuffle_seed, _SHUFFLE, epoch).permutation(n), dtype=np.int64)
        for start in range(0, n, hp.batch_size):
            idx = order[start : start + hp.batch_size]
            loss, grad = objective(_take(full, idx), params, idx)
            grad_norm = math.sqrt(float(np.sum(grad * grad)))
            record = {"kind": "step", "step": step, "epoch": epoch, "loss_total": loss.total}
            record.update(loss.components)
            record["grad_norm"] = grad_norm
            if not (math.isfinite(loss.total) and math.isfinite(grad_norm)):
                record["kind"] = "abort"
                log.records.append(record)
                raise TrainingError(f"non-finite loss at step {step}", log)
            log.records.append(record)

            if config.optimizer == "sgd":
                update = hp.lr * grad
            else:
                t = step + 1
                m = config.adam_beta1 * m + (1.0 - config.adam_beta1) * grad
                v = config.adam_beta2 * v + (1.0 - config.adam_beta2) * grad * grad
                m_hat = m / (1.0 - config.adam_beta1**t)
                v_hat = v / (1.0 - config.adam_beta2**t)
                update = hp.lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
            params = params.with_W(params.W - update)
            step += 1
            if held is not None and config.eval_every and step % config.eval_every == 0:
                log.records.append(_eval_record(step, params, ref, held, hp))
    if held is not None and not (config.eval_every and step % config.eval_every == 0 and step > 0):
        log.records.append(_eval_record(step, params, ref, held, hp))
    try:
        params.check_finite()
    except NumericError as exc:
        raise TrainingError(str(exc), log) from exc
    return params, log


def config_dict(world, config: TrainConfig) -> dict:
    return {"world": asdict(world) if world is not None else None, "train": asdict(config)}
