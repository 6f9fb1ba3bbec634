"""Shared fixtures: cheap toy encoders everywhere, one cached backend per session.

The pretrained backend is expensive to build from scratch, so it is
loaded once (from the on-disk cache when warm) and shared read-only by
every test that needs generation-quality weights.  Tests that mutate
state deep-copy what they touch.
"""

import numpy as np
import pytest
import torch

from objimplant.backend import BackendConfig, pretrain_backend
from objimplant.encoders import Vocabulary, build_encoders
from objimplant.shapes import sample_shape
from objimplant.util import seeded_rng

torch.set_num_threads(1)

WORDS = ("a", "photo", "of", "and", "on", "the", "dog", "cat", "square", "circle", "triangle")


@pytest.fixture()
def vocab() -> Vocabulary:
    return Vocabulary.build(WORDS, embedding_dim=16)


@pytest.fixture()
def encoders(vocab):
    return build_encoders(vocab, seeded_rng(7, "test-encoders"))


@pytest.fixture(scope="session")
def backend():
    return pretrain_backend(BackendConfig())


@pytest.fixture(scope="session")
def shape_sample():
    return sample_shape(seeded_rng(42, "crit8-object"))


def rand_latent(rng: np.random.Generator, *shape: int) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal(shape)).to(torch.float64)
