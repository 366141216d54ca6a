"""Log-linear softmax policy over an enumerated response catalog.

The conditioning (image m, prompt x) is encoded as the feature vector
``[image || one_hot(prompt) || 1]`` and the policy is
``pi(y | m, x) = softmax(W^T f)[y]``.  Everything is float64 (or wider when
the caller passes a wider W), and reductions avoid BLAS so results do not
depend on thread counts.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .domain import ConfigError, Prompt

CHECKPOINT_MAGIC = b"SYMP"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sBIIII")


class NumericError(FloatingPointError):
    """Non-finite parameters or losses."""


@dataclass(eq=False)
class PolicyParams:
    W: np.ndarray
    d_img: int
    n_prompts: int

    def __post_init__(self):
        if self.W.ndim != 2 or self.W.shape[0] != self.d_img + self.n_prompts + 1:
            raise ConfigError(
                f"W shape {self.W.shape} inconsistent with d_img={self.d_img}, n_prompts={self.n_prompts}"
            )

    @property
    def d(self) -> int:
        return self.W.shape[0]

    @property
    def K(self) -> int:
        return self.W.shape[1]

    @classmethod
    def zeros(cls, d_img: int, n_prompts: int, K: int) -> "PolicyParams":
        return cls(np.zeros((d_img + n_prompts + 1, K)), d_img, n_prompts)

    @classmethod
    def for_world(cls, world) -> "PolicyParams":
        return cls.zeros(world.d_img, world.n_prompts, world.catalog_size)

    def with_W(self, W: np.ndarray) -> "PolicyParams":
        return PolicyParams(W, self.d_img, self.n_prompts)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.W.copy(), self.d_img, self.n_prompts)

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.W)):
            raise NumericError("policy parameters contain non-finite entries")


def context_features(image, prompt: Prompt, dims) -> np.ndarray:
    """[image || one_hot(prompt.id) || 1]; ``dims`` is any object with d_img and n_prompts."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape != (dims.d_img,):
        raise ConfigError(f"image length {img.shape} != d_img {dims.d_img}")
    if not 0 <= prompt.id < dims.n_prompts:
        raise ConfigError(f"prompt id {prompt.id} outside [0, {dims.n_prompts})")
    f = np.zeros(dims.d_img + dims.n_prompts + 1)
    f[: dims.d_img] = img
    f[dims.d_img + prompt.id] = 1.0
    f[-1] = 1.0
    return f


def feature_matrix(images: np.ndarray, prompt_ids: np.ndarray, d_img: int, n_prompts: int) -> np.ndarray:
    """Row-wise context_features for a batch."""
    n = images.shape[0]
    if images.shape[1] != d_img:
        raise ConfigError(f"image width {images.shape[1]} != d_img {d_img}")
    F = np.zeros((n, d_img + n_prompts + 1))
    F[:, :d_img] = images
    F[np.arange(n), d_img + prompt_ids] = 1.0
    F[:, -1] = 1.0
    return F


def logsumexp(z: np.ndarray, axis: int = -1) -> np.ndarray:
    zmax = np.max(z, axis=axis, keepdims=True)
    out = zmax + np.log(np.sum(np.exp(z - zmax), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def log_softmax(z: np.ndarray) -> np.ndarray:
    return z - logsumexp(z, axis=-1)[..., None]


def logits(params: PolicyParams, features: np.ndarray) -> np.ndarray:
    """f @ W for one feature vector or a batch of rows, without BLAS."""
    if features.ndim == 1:
        return np.einsum("d,dk->k", features, params.W)
    return np.einsum("nd,dk->nk", features, params.W)


def batch_log_probs(params: PolicyParams, features: np.ndarray) -> np.ndarray:
    """(n, K) matrix of log pi(y | row)."""
    params.check_finite()
    return log_softmax(logits(params, features))


def full_distribution(params: PolicyParams, image, prompt: Prompt) -> np.ndarray:
    params.check_finite()
    z = logits(params, context_features(image, prompt, params))
    return np.exp(log_softmax(z))


def log_prob(params: PolicyParams, image, prompt: Prompt, y: int) -> float:
    params.check_finite()
    z = logits(params, context_features(image, prompt, params))
    return float(z[y] - logsumexp(z))


def log_prob_grad(params: PolicyParams, image, prompt: Prompt, y: int) -> np.ndarray:
    """d log pi(y|m,x) / dW; column j is f * (1[j == y] - pi(j))."""
    params.check_finite()
    f = context_features(image, prompt, params)
    p = np.exp(log_softmax(logits(params, f)))
    coef = -p
    coef[y] += 1.0
    return np.outer(f, coef)


def argmax_response(params: PolicyParams, image, prompt: Prompt) -> int:
    """Greedy response; np.argmax already returns the lowest maximizing index."""
    z = logits(params, context_features(image, prompt, params))
    return int(np.argmax(z))


def save_checkpoint(path: str | Path, params: PolicyParams) -> None:
    W = np.ascontiguousarray(params.W, dtype="<f8")
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.d, params.K, params.n_prompts, params.d_img)
    with open(path, "wb") as f:
        f.write(header)
        f.write(W.tobytes(order="C"))


def load_checkpoint(path: str | Path) -> PolicyParams:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ConfigError(f"{path}: truncated checkpoint")
    magic, version, d, K, n_prompts, d_img = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    body = data[_HEADER.size:]
    if len(body) != 8 * d * K:
        raise ConfigError(f"{path}: expected {8 * d * K} payload bytes, found {len(body)}")
    W = np.frombuffer(body, dtype="<f8").reshape(d, K).astype(np.float64)
    return PolicyParams(W, d_img, n_prompts)
