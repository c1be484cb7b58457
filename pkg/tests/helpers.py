"""Brute-force oracles and builders shared by the test modules."""
import itertools
import math

import numpy as np

from services.decode_service import sequence_score, viterbi_path
from utils.core_types import Instance, Lattice, McSampleSet, SampledInstance, Task


def random_lattice(rng, length, n_labels, scale=1.0):
    return Lattice(
        unary=scale * rng.normal(size=(length, n_labels)),
        transition=scale * rng.normal(size=(n_labels, n_labels)),
    )


def enumerate_sequences(lattice):
    """Every label sequence with its score, best first (ties lexicographic)."""
    scored = [
        (sequence_score(lattice, labels), labels)
        for labels in itertools.product(range(lattice.n_labels), repeat=lattice.length)
    ]
    return sorted(scored, key=lambda item: (-item[0], item[1]))


def enumerated_log_partition(lattice):
    scores = np.array([score for score, _ in enumerate_sequences(lattice)])
    top = scores.max()
    return top + math.log(np.exp(scores - top).sum())


def tagging_records(rng, labels, n=30, length=4, m=5, with_gold=True, noise=0.5):
    """Sequence-labeling records whose gold is the best path of one perturbed sample."""
    records = []
    for i in range(n):
        base = random_lattice(rng, length, labels.size)
        samples = McSampleSet(tuple(
            Lattice(unary=base.unary + noise * rng.normal(size=base.unary.shape), transition=base.transition)
            for _ in range(m)
        ))
        gold = labels.decode(viterbi_path(samples.samples[0])) if with_gold else None
        instance = Instance(f"r{i}", [f"w{j}" for j in range(length)], Task.SEQUENCE_LABELING, gold=gold)
        records.append(SampledInstance(instance=instance, samples=samples))
    return records
