"""Synthetic few-shot classification corpus.

Each class is a random prototype in patch space; images are the prototype
plus Gaussian noise. Samples are pre-assigned to a train pool (pretraining
and few-shot support) and a test pool, recorded in the manifest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderConfig

TRAIN_POOL = "train"
TEST_POOL = "test"


@dataclass
class SyntheticCorpus:
    config: EncoderConfig
    prototypes: np.ndarray      # (K, patch_count, patch_dim)
    images: np.ndarray          # (N, patch_count, patch_dim)
    labels: np.ndarray          # (N,)
    pools: np.ndarray           # (N,) of TRAIN_POOL/TEST_POOL
    noise: float
    seed: int

    def manifest(self) -> list[dict]:
        return [
            {
                "index": i,
                "class_id": int(self.labels[i]),
                "class_token_id": self.config.class_token_id(int(self.labels[i])),
                "pool": str(self.pools[i]),
            }
            for i in range(len(self.labels))
        ]

    def pool_indices(self, pool: str, class_id: int | None = None) -> np.ndarray:
        mask = self.pools == pool
        if class_id is not None:
            mask &= self.labels == class_id
        return np.nonzero(mask)[0]

    @property
    def train_images(self) -> np.ndarray:
        idx = self.pool_indices(TRAIN_POOL)
        return self.images[idx]

    @property
    def train_labels(self) -> np.ndarray:
        idx = self.pool_indices(TRAIN_POOL)
        return self.labels[idx]


def generate_dataset(config: EncoderConfig, per_class: int = 64, noise: float = 0.25,
                     seed: int = 0, train_fraction: float = 0.5) -> SyntheticCorpus:
    """Well-separated class prototypes plus Gaussian noise, deterministic
    under seed."""
    k = config.class_count
    if config.template_len + k + 1 > config.vocab:
        raise ValueError(
            f"{k} classes exceed the synthetic vocabulary capacity ({config.vocab} ids)"
        )
    if per_class < 2:
        raise ValueError("need at least two samples per class")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(21,)))
    shape = (config.patch_count, config.patch_dim)
    prototypes = rng.standard_normal((k, *shape))
    images = np.empty((k * per_class, *shape))
    labels = np.empty(k * per_class, dtype=np.int64)
    pools = np.empty(k * per_class, dtype=object)
    n_train = max(1, int(per_class * train_fraction))
    pos = 0
    for c in range(k):
        for j in range(per_class):
            images[pos] = prototypes[c] + noise * rng.standard_normal(shape)
            labels[pos] = c
            pools[pos] = TRAIN_POOL if j < n_train else TEST_POOL
            pos += 1
    return SyntheticCorpus(
        config=config, prototypes=prototypes, images=images, labels=labels,
        pools=pools, noise=noise, seed=seed,
    )


def nearest_prototype_accuracy(corpus: SyntheticCorpus, pool: str = TEST_POOL) -> float:
    """Brute-force nearest-prototype classifier, used as a separability oracle."""
    idx = corpus.pool_indices(pool)
    flat_protos = corpus.prototypes.reshape(len(corpus.prototypes), -1)
    hits = 0
    for i in idx:
        dists = ((flat_protos - corpus.images[i].reshape(-1)) ** 2).sum(axis=1)
        hits += int(np.argmin(dists)) == corpus.labels[i]
    return hits / len(idx)


@dataclass
class FewShotTask:
    base_class_ids: list[int]
    novel_class_ids: list[int]
    support_images: np.ndarray
    support_labels: np.ndarray
    base_test_images: np.ndarray
    base_test_labels: np.ndarray
    novel_test_images: np.ndarray
    novel_test_labels: np.ndarray


def split_base_novel(corpus: SyntheticCorpus, shots: int = 16, seed: int = 0) -> FewShotTask:
    """Half the classes become base, the rest novel; the support set holds
    ``shots`` train-pool samples per base class."""
    k = corpus.config.class_count
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(22,)))
    order = rng.permutation(k)
    n_base = math.ceil(k / 2)
    base = sorted(int(c) for c in order[:n_base])
    novel = sorted(int(c) for c in order[n_base:])

    support_idx: list[int] = []
    for c in base:
        pool = corpus.pool_indices(TRAIN_POOL, c)
        if len(pool) < shots:
            raise ValueError(
                f"class {c} has {len(pool)} train samples, fewer than {shots} shots"
            )
        chosen = rng.permutation(pool)[:shots]
        support_idx.extend(int(i) for i in chosen)

    def gather_test(classes):
        idx = [i for c in classes for i in corpus.pool_indices(TEST_POOL, c)]
        return corpus.images[idx], corpus.labels[idx]

    base_x, base_y = gather_test(base)
    novel_x, novel_y = gather_test(novel)
    return FewShotTask(
        base_class_ids=base,
        novel_class_ids=novel,
        support_images=corpus.images[support_idx],
        support_labels=corpus.labels[support_idx],
        base_test_images=base_x,
        base_test_labels=base_y,
        novel_test_images=novel_x,
        novel_test_labels=novel_y,
    )
