"""Synthetic "hallucination grid-world" preference data.

Images are binary attribute vectors, a prompt asks about q of the
attributes, and a response is a q-bit assertion vector.  For every
(image, prompt) pair the generator emits

* y_w: the response asserting the true attribute values,
* y_l: y_w with ``flip_count`` assertions flipped (the hallucination),
* image_c: a contrastive image (nearest neighbour, black, cropped, noisy,
  or a lossy reconstruction), and y_w_c: the true response for image_c.

Every random draw comes from a per-sample SplitMix64 stream, so the output
is a pure function of the WorldConfig.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .domain import (
    ConfigError,
    Prompt,
    SymmetricSample,
    WorldConfig,
    config_hash,
    correct_response,
    load_samples,
    validate_sample,
    write_jsonl,
)
from .rng import SplitMix64, stream

log = logging.getLogger(__name__)

MAX_ATTEMPTS = 8
_IMAGES, _PROMPTS, _SAMPLES, _SPLIT = 0, 1, 2, 3


class GenerationError(RuntimeError):
    pass


@dataclass
class Dataset:
    config: WorldConfig
    train: list[SymmetricSample]
    heldout: list[SymmetricSample]
    drops: dict[str, int] = field(default_factory=dict)
    retries: int = 0

    @property
    def samples(self) -> list[SymmetricSample]:
        return self.train + self.heldout

    def metadata(self) -> dict:
        return {
            "config": asdict(self.config),
            "config_hash": config_hash(self.config),
            "n_train": len(self.train),
            "n_heldout": len(self.heldout),
            "drops": dict(sorted(self.drops.items())),
            "retries": self.retries,
        }


def generate_world(config: WorldConfig) -> tuple[list[tuple], list[Prompt]]:
    img_rng = stream(config.seed, _IMAGES)
    images = [
        tuple(float(img_rng.bernoulli(0.5)) for _ in range(config.d_img)) for _ in range(config.n_images)
    ]
    p_rng = stream(config.seed, _PROMPTS)
    prompts = []
    if config.n_prompts * config.q <= config.d_img:
        perm = p_rng.permutation(config.d_img)
        for k in range(config.n_prompts):
            prompts.append(Prompt(k, tuple(sorted(perm[k * config.q : (k + 1) * config.q]))))
    else:
        for k in range(config.n_prompts):
            prompts.append(Prompt(k, tuple(sorted(p_rng.sample(config.d_img, config.q)))))
    return images, prompts


def preferred_response(image, prompt: Prompt) -> int:
    return correct_response(image, prompt)


def hallucinated_response(image, prompt: Prompt, flip_count: int, rng: SplitMix64) -> int:
    if not 1 <= flip_count <= prompt.q:
        raise ConfigError("flip_count must lie in [1, q]")
    y = preferred_response(image, prompt)
    for t in rng.sample(prompt.q, flip_count):
        y ^= 1 << t
    return y


def cosine_matrix(images: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity; rows with zero norm get similarity 0."""
    norms = np.sqrt(np.einsum("nd,nd->n", images, images))
    safe = np.where(norms > 0, norms, 1.0)
    unit = images / safe[:, None]
    sims = np.einsum("id,jd->ij", unit, unit)
    sims[norms == 0, :] = 0.0
    sims[:, norms == 0] = 0.0
    return sims


def neighbor_ranking(images: np.ndarray, idx: int, sims: np.ndarray | None = None) -> list[int]:
    """Other images ordered by descending cosine similarity, ties to the lower index.

    Exact duplicates of ``images[idx]`` are left out: they can never supply a
    distinct preferred response.
    """
    if images.shape[0] < 2:
        raise GenerationError("nearest-neighbour pairing needs at least two images")
    row = cosine_matrix(images)[idx] if sims is None else sims[idx]
    order = np.lexsort((np.arange(images.shape[0]), -row))
    dup = np.all(images == images[idx], axis=1)
    return [int(j) for j in order if j != idx and not dup[j]]


def nearest_neighbor_pair(images, idx: int, sims: np.ndarray | None = None) -> int:
    ranking = neighbor_ranking(np.asarray(images, dtype=np.float64), idx, sims)
    if not ranking:
        raise GenerationError(f"image {idx} has no non-duplicate neighbour")
    return ranking[0]


def contrastive_image(image, mode: str, config: WorldConfig, rng: SplitMix64, images=None, idx=None) -> tuple:
    d = len(image)
    if mode == "similar":
        if images is None or idx is None:
            raise ConfigError("similar mode needs the image pool and the source index")
        return tuple(images[nearest_neighbor_pair(images, idx)])
    if mode == "black":
        return (0.0,) * d
    if mode == "cropped":
        keep = d // 2
        start = rng.below(d - keep + 1)
        return tuple(float(v) if start <= i < start + keep else 0.0 for i, v in enumerate(image))
    if mode == "noisy":
        out = []
        for v in image:
            # draw even when sigma == 0 so the stream layout does not depend on sigma
            noise = rng.normal()
            out.append(min(1.0, max(0.0, float(v) + config.noise_sigma * noise)))
        return tuple(out)
    if mode == "synthetic":
        dropped = set(rng.sample(d, config.synthetic_drop))
        return tuple(0.0 if i in dropped else (1.0 if v > 0.5 else 0.0) for i, v in enumerate(image))
    raise ConfigError(f"unknown contrastive mode {mode!r}")


def build_preference_dataset(config: WorldConfig) -> Dataset:
    images, prompts = generate_world(config)
    pool = np.array(images, dtype=np.float64)
    sims = cosine_matrix(pool) if config.contrastive_mode == "similar" else None
    n_held = int(round(config.heldout_fraction * config.n_images))
    held = set(stream(config.seed, _SPLIT).permutation(config.n_images)[:n_held])

    train, heldout = [], []
    drops = {"no_neighbor": 0, "no_distinct_response": 0}
    retries = 0
    total = 0
    for i, image in enumerate(images):
        ranking = neighbor_ranking(pool, i, sims) if sims is not None else None
        for prompt in prompts:
            total += 1
            rng = stream(config.seed, _SAMPLES, i * config.n_prompts + prompt.id)
            y_w = preferred_response(image, prompt)
            y_l = hallucinated_response(image, prompt, config.flip_count, rng)
            found = None
            if ranking is not None:
                if not ranking:
                    drops["no_neighbor"] += 1
                    continue
                for attempt, j in enumerate(ranking[:MAX_ATTEMPTS]):
                    y_c = preferred_response(images[j], prompt)
                    if y_c != y_w:
                        found = (images[j], y_c, j)
                        retries += attempt
                        break
            else:
                for attempt in range(MAX_ATTEMPTS):
                    img_c = contrastive_image(image, config.contrastive_mode, config, rng)
                    y_c = preferred_response(img_c, prompt)
                    if y_c != y_w:
                        found = (img_c, y_c, -1)
                        retries += attempt
                        break
            if found is None:
                drops["no_distinct_response"] += 1
                continue
            img_c, y_c, j = found
            sample = SymmetricSample(prompt, image, img_c, y_w, y_l, y_c, j)
            report = validate_sample(sample, config)
            if not report:
                raise GenerationError(f"generator produced an invalid sample: {report.problems}")
            (heldout if i in held else train).append(sample)

    dropped = sum(drops.values())
    if dropped:
        log.info("dropped %d of %d samples: %s", dropped, total, drops)
    if dropped > total / 2:
        raise GenerationError(f"drop rate {dropped}/{total} exceeds 50%; world too small or degenerate")
    return Dataset(config, train, heldout, drops, retries)


def write_dataset(dataset: Dataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "train.jsonl", dataset.train)
    write_jsonl(out / "heldout.jsonl", dataset.heldout)
    with open(out / "metadata.json", "w", encoding="utf-8", newline="\n") as f:
        json.dump(dataset.metadata(), f, indent=2, sort_keys=True)
        f.write("\n")


def read_dataset(data_dir: str | Path) -> Dataset:
    data = Path(data_dir)
    meta = json.loads((data / "metadata.json").read_text(encoding="utf-8"))
    config = WorldConfig(**meta["config"])
    train = load_samples(data / "train.jsonl", config)
    heldout = load_samples(data / "heldout.jsonl", config)
    return Dataset(config, train, heldout, meta.get("drops", {}), meta.get("retries", 0))


def median_pairwise_similarity(images) -> float:
    sims = cosine_matrix(np.asarray(images, dtype=np.float64))
    iu = np.triu_indices(sims.shape[0], k=1)
    return float(np.median(sims[iu]))


__all__ = [
    "Dataset",
    "GenerationError",
    "MAX_ATTEMPTS",
    "build_preference_dataset",
    "contrastive_image",
    "cosine_matrix",
    "generate_world",
    "hallucinated_response",
    "median_pairwise_similarity",
    "nearest_neighbor_pair",
    "neighbor_ranking",
    "preferred_response",
    "read_dataset",
    "write_dataset",
]
