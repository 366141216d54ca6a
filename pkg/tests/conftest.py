import math

import numpy as np
import pytest

from symmpo.datagen import build_preference_dataset
from symmpo.domain import HyperParams, Prompt, SymmetricSample, WorldConfig
from symmpo.policy import PolicyParams


def random_params(rng, d_img, n_prompts, K, scale=1.0):
    return PolicyParams(rng.uniform(-scale, scale, size=(d_img + n_prompts + 1, K)), d_img, n_prompts)


def random_samples(rng, n, d_img=5, n_prompts=2, q=2):
    K = 1 << q
    prompts = [Prompt(k, tuple(sorted(rng.choice(d_img, size=q, replace=False).tolist()))) for k in range(n_prompts)]
    out = []
    for _ in range(n):
        y_w = int(rng.integers(K))
        others = [y for y in range(K) if y != y_w]
        out.append(
            SymmetricSample(
                prompts[int(rng.integers(n_prompts))],
                tuple(rng.integers(0, 2, d_img).astype(float).tolist()),
                tuple(rng.integers(0, 2, d_img).astype(float).tolist()),
                y_w,
                int(rng.choice(others)),
                int(rng.choice(others)),
            )
        )
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def hp():
    return HyperParams()


@pytest.fixture(scope="session")
def small_world():
    return WorldConfig(d_img=6, n_prompts=2, q=2, n_images=64, seed=3)


@pytest.fixture(scope="session")
def small_dataset(small_world):
    return build_preference_dataset(small_world)


@pytest.fixture(scope="session")
def default_dataset():
    return build_preference_dataset(WorldConfig())


LN2 = math.log(2.0)
