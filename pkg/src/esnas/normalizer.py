"""Welford running mean/variance with associative merging."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STD_FLOOR = 1e-8


@dataclass
class RunningNormalizer:
    dim: int
    count: int = 0
    mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    m2: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.mean = np.zeros(self.dim) if self.mean is None else np.asarray(self.mean, dtype=float).copy()
        self.m2 = np.zeros(self.dim) if self.m2 is None else np.asarray(self.m2, dtype=float).copy()
        if self.mean.shape != (self.dim,) or self.m2.shape != (self.dim,):
            raise ValueError("mean / m2 must have shape (dim,)")
        if self.count < 0:
            raise ValueError("count must be nonnegative")

    def update(self, x) -> None:
        x = np.asarray(x, dtype=float)
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (x - self.mean)

    def update_batch(self, rows) -> None:
        for row in np.asarray(rows, dtype=float):
            self.update(row)

    def merge(self, other: RunningNormalizer) -> None:
        """Chan et al. pairwise combination of two accumulators."""
        if other.count == 0:
            return
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, other.mean.copy(), other.m2.copy()
            return
        n = self.count + other.count
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.count / n)
        self.m2 = self.m2 + other.m2 + delta * delta * (self.count * other.count / n)
        self.count = n

    @property
    def variance(self) -> np.ndarray:
        if self.count == 0:
            return np.ones(self.dim)
        return np.maximum(self.m2 / self.count, 0.0)

    @property
    def std(self) -> np.ndarray:
        return np.maximum(np.sqrt(self.variance), STD_FLOOR)

    def normalize(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.count == 0:
            return x.copy()
        return (x - self.mean) / self.std

    def copy(self) -> RunningNormalizer:
        return RunningNormalizer(self.dim, self.count, self.mean, self.m2)

    def to_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean.tolist(), "m2": self.m2.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> RunningNormalizer:
        mean = np.asarray(data["mean"], dtype=float)
        return cls(len(mean), int(data["count"]), mean, np.asarray(data["m2"], dtype=float))


def normalize_state(normalizer: RunningNormalizer, s, training: bool = False) -> np.ndarray:
    """Normalize with the current statistics, then absorb ``s`` when training."""
    z = normalizer.normalize(s)
    if training:
        normalizer.update(s)
    return z
