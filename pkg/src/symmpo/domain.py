"""Value types shared across the package, validation, and the JSONL sample format."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

ImageFeat = tuple  # tuple[float, ...], attribute values in [0, 1]

CONTRASTIVE_MODES = ("similar", "black", "cropped", "noisy", "synthetic")


class ConfigError(ValueError):
    """Inconsistent dimensions or an invalid configuration."""


class DegenerateSampleError(ValueError):
    """A sample whose two preferred responses coincide."""


@dataclass(frozen=True)
class Prompt:
    id: int
    queried: tuple[int, ...]

    @property
    def q(self) -> int:
        return len(self.queried)

    @property
    def catalog_size(self) -> int:
        return 1 << len(self.queried)


@dataclass(frozen=True)
class SymmetricSample:
    """One record: prompt x, image m, contrastive image m', y_w, y_l, and y_w' for m'."""

    prompt: Prompt
    image: ImageFeat
    image_c: ImageFeat
    y_w: int
    y_l: int
    y_w_c: int
    neighbor_id: int = -1

    def swapped(self) -> "SymmetricSample":
        """Exchange the two arms (image, y_w) <-> (image_c, y_w_c); y_l is kept."""
        return SymmetricSample(
            prompt=self.prompt,
            image=self.image_c,
            image_c=self.image,
            y_w=self.y_w_c,
            y_l=self.y_l,
            y_w_c=self.y_w,
            neighbor_id=self.neighbor_id,
        )


@dataclass(frozen=True)
class HyperParams:
    beta: float = 0.1
    delta: float = 0.0
    lam: float = 0.5
    gamma: float = 1e-4
    eta: float = 1.0
    lr: float = 0.1
    epochs: int = 2
    batch_size: int = 64
    margin_uses_beta: bool = False

    def __post_init__(self):
        for name in ("beta", "delta", "lam", "gamma", "eta", "lr"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if min(self.lam, self.gamma, self.eta) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.lr < 0:
            raise ConfigError("lr must be nonnegative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


# Learning rate of 5e-6 used for billion-parameter backbones; it does not move a toy policy.
FULL_SCALE_LR = 5e-6


@dataclass(frozen=True)
class WorldConfig:
    d_img: int = 12
    n_prompts: int = 4
    q: int = 3
    n_images: int = 512
    flip_count: int = 1
    contrastive_mode: str = "similar"
    noise_sigma: float = 0.8
    synthetic_drop: int = 2
    heldout_fraction: float = 0.1
    seed: int = 7

    def __post_init__(self):
        if self.d_img < 1 or self.n_prompts < 1 or self.n_images < 2:
            raise ConfigError("d_img, n_prompts must be >= 1 and n_images >= 2")
        if not 1 <= self.q <= self.d_img:
            raise ConfigError("q must lie in [1, d_img]")
        if (1 << self.q) > 64:
            raise ConfigError("catalog size 2^q must not exceed 64")
        if not 1 <= self.flip_count <= self.q:
            raise ConfigError("flip_count must lie in [1, q]")
        if self.contrastive_mode not in CONTRASTIVE_MODES:
            raise ConfigError(f"unknown contrastive mode {self.contrastive_mode!r}")
        if not (self.noise_sigma >= 0 and math.isfinite(self.noise_sigma)):
            raise ConfigError("noise_sigma must be finite and >= 0")
        if not 0 <= self.synthetic_drop <= self.d_img:
            raise ConfigError("synthetic_drop must lie in [0, d_img]")
        if not 0.0 <= self.heldout_fraction < 1.0:
            raise ConfigError("heldout_fraction must lie in [0, 1)")
        if not 0 <= self.seed < (1 << 64):
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @property
    def catalog_size(self) -> int:
        return 1 << self.q

    @property
    def feature_dim(self) -> int:
        return self.d_img + self.n_prompts + 1


def config_hash(obj) -> str:
    """Stable digest of a JSON-serializable config (dataclasses are flattened)."""
    if hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class ValidationReport:
    problems: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return not self.problems

    def __contains__(self, text: str) -> bool:
        return any(text in p for p in self.problems)


def validate_sample(sample: SymmetricSample, world: WorldConfig) -> ValidationReport:
    """Collect every violated invariant of ``sample``; never raises."""
    problems = []
    prompt = sample.prompt
    queried = list(prompt.queried)
    if not 1 <= len(queried) <= world.d_img:
        problems.append("queried position count out of range")
    if any(b <= a for a, b in zip(queried, queried[1:])):
        problems.append("queried positions not strictly increasing")
    if any(not 0 <= p < world.d_img for p in queried):
        problems.append("queried position out of image range")
    if not 0 <= prompt.id < world.n_prompts:
        problems.append("prompt id out of range")
    for name in ("image", "image_c"):
        img = getattr(sample, name)
        if len(img) != world.d_img:
            problems.append(f"{name} length {len(img)} != d_img {world.d_img}")
        if any(not math.isfinite(v) or v < 0.0 or v > 1.0 for v in img):
            problems.append(f"{name} has entries outside [0, 1]")
    k = 1 << len(queried)
    for name in ("y_w", "y_l", "y_w_c"):
        y = getattr(sample, name)
        if not 0 <= y < k:
            problems.append(f"{name}={y}: response out of catalog (K={k})")
    if sample.y_w == sample.y_l:
        problems.append("degenerate preference pair (y_w == y_l)")
    if sample.y_w == sample.y_w_c:
        problems.append("degenerate symmetric pair (y_w == y_w_c)")
    return ValidationReport(problems)


def sample_to_record(sample: SymmetricSample) -> dict:
    return {
        "prompt": sample.prompt.id,
        "queried": list(sample.prompt.queried),
        "image": [float(v) for v in sample.image],
        "image_c": [float(v) for v in sample.image_c],
        "y_w": sample.y_w,
        "y_l": sample.y_l,
        "y_w_c": sample.y_w_c,
        "neighbor_id": sample.neighbor_id,
    }


def record_to_sample(rec: dict) -> SymmetricSample:
    return SymmetricSample(
        prompt=Prompt(int(rec["prompt"]), tuple(int(p) for p in rec["queried"])),
        image=tuple(float(v) for v in rec["image"]),
        image_c=tuple(float(v) for v in rec["image_c"]),
        y_w=int(rec["y_w"]),
        y_l=int(rec["y_l"]),
        y_w_c=int(rec["y_w_c"]),
        neighbor_id=int(rec["neighbor_id"]),
    )


def encode_sample(sample: SymmetricSample) -> str:
    return json.dumps(sample_to_record(sample), separators=(",", ":"))


def decode_sample(line: str) -> SymmetricSample:
    return record_to_sample(json.loads(line))


def write_jsonl(path: str | Path, samples: Iterable[SymmetricSample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in samples:
            f.write(encode_sample(s) + "\n")


def iter_jsonl(path: str | Path) -> Iterator[SymmetricSample]:
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                yield decode_sample(line)


def load_samples(path: str | Path, world: WorldConfig | None = None) -> list[SymmetricSample]:
    """Read a JSONL file; with ``world`` given, reject malformed or degenerate samples."""
    samples = list(iter_jsonl(path))
    if world is not None:
        for i, s in enumerate(samples):
            report = validate_sample(s, world)
            if not report:
                raise DegenerateSampleError(f"{path}:{i + 1}: " + "; ".join(report.problems))
    return samples


def check_nondegenerate(samples: Sequence[SymmetricSample]) -> None:
    for i, s in enumerate(samples):
        if s.y_w == s.y_w_c:
            raise DegenerateSampleError(f"sample {i}: y_w == y_w_c ({s.y_w})")


def correct_response(image: Sequence[float], prompt: Prompt) -> int:
    """Response id whose bit t asserts image[queried[t]] > 0.5."""
    y = 0
    for t, pos in enumerate(prompt.queried):
        if image[pos] > 0.5:
            y |= 1 << t
    return y
