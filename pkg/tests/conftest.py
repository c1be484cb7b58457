import numpy as np
import pytest

from helpers import random_lattice
from utils.core_types import LabelSet, Lattice, McSampleSet, Scheme


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def bio_labels():
    return LabelSet(("O", "B-PER", "I-PER", "B-LOC", "I-LOC"), Scheme.BIO)


@pytest.fixture
def tag_labels():
    return LabelSet(("N", "V", "D"))


@pytest.fixture
def sample_set(rng):
    """Five perturbed copies of one 4 x 3 lattice."""
    base = random_lattice(rng, 4, 3)
    return McSampleSet(tuple(
        Lattice(unary=base.unary + 0.3 * rng.normal(size=base.unary.shape),
                transition=base.transition + 0.3 * rng.normal(size=base.transition.shape))
        for _ in range(5)
    ))
