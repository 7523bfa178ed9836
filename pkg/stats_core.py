"""
Module: stats_core.py
Mergeable per-feature moments and standardization against global statistics.

Each center summarizes its rows as (count, mean, m2). Summaries merge pairwise
with the parallel-moments update, so the coordinator can reduce them in any
order and still recover the pooled mean and population standard deviation.
"""

from dataclasses import dataclass, field
from functools import reduce
from typing import Iterable, Optional, Sequence

import numpy as np

from codec import Reader, content_sorted, pack_floats, pack_u64
from exceptions import EmptyAccumulator, EmptyCenter, ShapeMismatch


def as_matrix(array, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, promoting vectors to a single column."""
    matrix = np.asarray(array, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix.reshape(-1, 1)
    if matrix.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {matrix.shape}")
    return matrix


@dataclass(frozen=True)
class FeatureMoments:
    count: int
    mean: np.ndarray
    m2: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.m2.shape or self.mean.ndim != 1:
            raise ShapeMismatch(
                f"mean {self.mean.shape} and m2 {self.m2.shape} must be equal-length vectors"
            )
        if self.count < 0:
            raise ValueError("count must be nonnegative")

    @classmethod
    def empty(cls, n_features: int) -> "FeatureMoments":
        return cls(0, np.zeros(n_features), np.zeros(n_features))

    @property
    def n_features(self) -> int:
        return self.mean.shape[0]

    def to_bytes(self) -> bytes:
        return pack_u64(self.n_features, self.count) + pack_floats(self.mean) + pack_floats(self.m2)

    @classmethod
    def read(cls, reader: Reader) -> "FeatureMoments":
        n_features, count = reader.u64(2)
        mean = reader.floats(n_features)
        m2 = reader.floats(n_features)
        return cls(count, mean, m2)

    @classmethod
    def from_bytes(cls, payload: bytes) -> "FeatureMoments":
        reader = Reader(payload)
        moments = cls.read(reader)
        reader.finish()
        return moments


@dataclass(frozen=True)
class GlobalStats:
    mean: np.ndarray
    std: np.ndarray
    n_total: int

    @property
    def n_features(self) -> int:
        return self.mean.shape[0]

    def to_bytes(self) -> bytes:
        return pack_u64(self.n_features, self.n_total) + pack_floats(self.mean) + pack_floats(self.std)

    @classmethod
    def read(cls, reader: Reader) -> "GlobalStats":
        n_features, n_total = reader.u64(2)
        return cls(reader.floats(n_features), reader.floats(n_features), n_total)

    @classmethod
    def from_bytes(cls, payload: bytes) -> "GlobalStats":
        reader = Reader(payload)
        stats = cls.read(reader)
        reader.finish()
        return stats


@dataclass
class CenterData:
    """A center's private rows: features x (N_c x F), covariates y (N_c x q)."""

    x: np.ndarray
    y: np.ndarray
    labels: Optional[Sequence[str]] = None
    covariate_table: Optional[dict] = field(default=None, repr=False)

    def __post_init__(self):
        self.x = as_matrix(self.x, "x")
        self.y = as_matrix(self.y, "y")
        if self.x.shape[0] == 0:
            raise EmptyCenter("a center needs at least one subject")
        if self.x.shape[0] != self.y.shape[0]:
            raise ShapeMismatch(
                f"x has {self.x.shape[0]} rows but y has {self.y.shape[0]}"
            )
        if self.labels is not None and len(self.labels) != self.x.shape[0]:
            raise ShapeMismatch(
                f"{len(self.labels)} labels for {self.x.shape[0]} subjects"
            )

    @property
    def n_subjects(self) -> int:
        return self.x.shape[0]


def accumulate_local(x) -> FeatureMoments:
    x = as_matrix(x, "x")
    if x.shape[0] == 0 or x.shape[1] == 0:
        raise EmptyCenter(f"cannot summarize an empty matrix of shape {x.shape}")
    mean = x.mean(axis=0)
    m2 = ((x - mean) ** 2).sum(axis=0)
    return FeatureMoments(x.shape[0], mean, m2)


def merge(a: FeatureMoments, b: FeatureMoments) -> FeatureMoments:
    """Pairwise parallel-moments update; symmetric in a and b."""
    if a.n_features != b.n_features:
        raise ShapeMismatch(f"cannot merge {a.n_features} features with {b.n_features}")
    if b.count == 0:
        return a
    if a.count == 0:
        return b
    n = a.count + b.count
    delta = b.mean - a.mean
    mean = (a.mean * a.count + b.mean * b.count) / n
    m2 = a.m2 + b.m2 + delta**2 * (a.count * b.count / n)
    return FeatureMoments(n, mean, m2)


def merge_all(moments: Iterable[FeatureMoments], n_features: Optional[int] = None) -> FeatureMoments:
    """Merge in content order, so the result does not depend on which center came first."""
    moments = content_sorted(moments, FeatureMoments.to_bytes)
    if not moments:
        if n_features is None:
            raise EmptyAccumulator("nothing to merge")
        return FeatureMoments.empty(n_features)
    return reduce(merge, moments)


def finalize(m: FeatureMoments) -> GlobalStats:
    if m.count == 0:
        raise EmptyAccumulator("cannot finalize moments of zero subjects")
    std = np.sqrt(np.clip(m.m2, 0.0, None) / m.count)
    return GlobalStats(m.mean.copy(), std, m.count)


def _check_features(x: np.ndarray, g: GlobalStats) -> None:
    if x.shape[1] != g.n_features:
        raise ShapeMismatch(
            f"data has {x.shape[1]} features, statistics have {g.n_features}"
        )


def standardize(x, g: GlobalStats) -> np.ndarray:
    """Center and scale by global statistics; zero-variance columns become 0."""
    x = as_matrix(x, "x")
    _check_features(x, g)
    varying = g.std > 0
    scale = np.where(varying, g.std, 1.0)
    out = (x - g.mean) / scale
    out[:, ~varying] = 0.0
    return out


def destandardize(xhat, g: GlobalStats) -> np.ndarray:
    """Inverse of standardize on columns with nonzero std."""
    xhat = as_matrix(xhat, "xhat")
    _check_features(xhat, g)
    return xhat * g.std + g.mean
