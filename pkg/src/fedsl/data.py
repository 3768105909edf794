"""Synthetic Gaussian-blob classification task, IID client shards and seeded minibatching."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedsl.errors import InputError
from fedsl.nn import STREAM_DATA, STREAM_PARTITION, STREAM_SHUFFLE, make_rng


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


def make_blobs(
    seed: int,
    n_train: int,
    n_test: int,
    dim: int,
    n_classes: int,
    center_scale: float = 1.5,
    noise_std: float = 1.0,
) -> Dataset:
    """Class centres ~ N(0, center_scale^2 I); samples = centre + N(0, noise_std^2 I)."""
    if n_train < 1 or n_test < 1 or dim < 1 or n_classes < 2:
        raise InputError("blob task needs n_train, n_test, dim >= 1 and n_classes >= 2")
    rng = make_rng(seed, STREAM_DATA)
    centers = rng.normal(0.0, center_scale, size=(n_classes, dim))

    def draw(n):
        y = rng.integers(0, n_classes, size=n)
        x = centers[y] + rng.normal(0.0, noise_std, size=(n, dim))
        return x, y

    x_train, y_train = draw(n_train)
    x_test, y_test = draw(n_test)
    return Dataset(x_train, y_train, x_test, y_test)


def partition_iid(seed: int, n: int, n_clients: int) -> list[np.ndarray]:
    """Shuffle sample indices and cut them into ``n_clients`` near-equal shards."""
    if n_clients < 1 or n < n_clients:
        raise InputError(f"cannot split {n} samples across {n_clients} clients")
    perm = make_rng(seed, STREAM_PARTITION).permutation(n)
    return [np.sort(s) for s in np.array_split(perm, n_clients)]


class BatchSampler:
    """Deterministic minibatches for one client: a fresh seeded shuffle every epoch.

    Round ``t`` (1-based) takes the next slice of the current epoch's
    permutation; the last slice of an epoch may be short.
    """

    def __init__(self, seed: int, client_id: int, n: int, batch_size: int):
        if n < 1 or batch_size < 1:
            raise InputError("sampler needs at least one sample and a positive batch size")
        self.seed = seed
        self.client_id = client_id
        self.n = n
        self.batch_size = min(batch_size, n)
        self.batches_per_epoch = -(-n // self.batch_size)
        self._epoch = -1
        self._perm = None

    def indices(self, t: int) -> np.ndarray:
        if t < 1:
            raise InputError(f"rounds are 1-based, got {t}")
        epoch, pos = divmod(t - 1, self.batches_per_epoch)
        if epoch != self._epoch:
            self._perm = make_rng(self.seed, STREAM_SHUFFLE, self.client_id, epoch).permutation(self.n)
            self._epoch = epoch
        return self._perm[pos * self.batch_size : (pos + 1) * self.batch_size]
