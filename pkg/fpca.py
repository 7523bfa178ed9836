"""
Module: fpca.py
Federated PCA from truncated local eigen-packs.

A center shares U_c (F x k_c) and the singular values Σ_c of its corrected
data E_c. The global covariance is approximated by Σ_c U_c Σ_c² U_cᵀ, whose
eigenvectors are the left singular vectors of the stacked matrix
[U_1Σ_1 | ... | U_CΣ_C], so no F x F matrix is ever formed.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import eigh, svd

from codec import Reader, content_sorted, pack_floats, pack_u64
from constants import DEFAULT_VARIANCE_THRESHOLD, EIGENVALUE_CUTOFF
from exceptions import DegenerateData, NoCenters, ShapeMismatch
from stats_core import as_matrix

logger = logging.getLogger(__name__)


def canonicalize_signs(components: np.ndarray) -> np.ndarray:
    """Flip columns so that each column's largest-magnitude entry is nonnegative."""
    components = np.array(components, dtype=np.float64, copy=True)
    if components.size == 0:
        return components
    pivots = np.argmax(np.abs(components), axis=0)
    signs = np.sign(components[pivots, np.arange(components.shape[1])])
    signs[signs == 0] = 1.0
    return components * signs


def select_rank(eigenvalues: np.ndarray, threshold: float, total: Optional[float] = None) -> int:
    """Smallest k whose cumulative share of `total` reaches `threshold`."""
    if not 0 < threshold <= 1:
        raise ValueError(f"variance threshold must lie in (0, 1], got {threshold}")
    if eigenvalues.size == 0:
        return 0
    total = eigenvalues.sum() if total is None else total
    cumulative = np.cumsum(eigenvalues) / total
    reached = np.nonzero(cumulative >= threshold * (1 - 1e-12))[0]
    return int(reached[0]) + 1 if reached.size else int(eigenvalues.size)


@dataclass(frozen=True)
class LocalEigenpack:
    basis: np.ndarray
    singular_values: np.ndarray
    n_local: int
    variance_captured: float

    @property
    def n_features(self) -> int:
        return self.basis.shape[0]

    @property
    def rank(self) -> int:
        return self.singular_values.shape[0]

    @property
    def total_variance(self) -> float:
        """Trace of E_cᵀE_c, recovered from the retained share."""
        return float(np.sum(self.singular_values**2) / self.variance_captured)

    def to_bytes(self) -> bytes:
        return (
            pack_u64(self.n_features, self.rank, self.n_local)
            + pack_floats(self.singular_values)
            + pack_floats(self.basis, order="F")
            + pack_floats(np.array([self.variance_captured]))
        )

    @classmethod
    def read(cls, reader: Reader) -> "LocalEigenpack":
        n_features, rank, n_local = reader.u64(3)
        singular_values = reader.floats(rank)
        basis = reader.floats(n_features * rank).reshape((n_features, rank), order="F")
        (variance_captured,) = reader.floats(1)
        return cls(np.ascontiguousarray(basis), singular_values, n_local, float(variance_captured))

    @classmethod
    def from_bytes(cls, payload: bytes) -> "LocalEigenpack":
        reader = Reader(payload)
        pack = cls.read(reader)
        reader.finish()
        return pack


@dataclass(frozen=True)
class GlobalBasis:
    components: np.ndarray
    eigenvalues: np.ndarray
    explained_fraction: np.ndarray

    @property
    def n_features(self) -> int:
        return self.components.shape[0]

    @property
    def n_components(self) -> int:
        return self.components.shape[1]

    def to_bytes(self) -> bytes:
        return (
            pack_u64(self.n_features, self.n_components)
            + pack_floats(self.eigenvalues)
            + pack_floats(self.explained_fraction)
            + pack_floats(self.components, order="F")
        )

    @classmethod
    def read(cls, reader: Reader) -> "GlobalBasis":
        n_features, m = reader.u64(2)
        eigenvalues = reader.floats(m)
        explained = reader.floats(m)
        components = reader.floats(n_features * m).reshape((n_features, m), order="F")
        return cls(np.ascontiguousarray(components), eigenvalues, explained)

    @classmethod
    def from_bytes(cls, payload: bytes) -> "GlobalBasis":
        reader = Reader(payload)
        basis = cls.read(reader)
        reader.finish()
        return basis


@dataclass(frozen=True)
class Scores:
    coords: np.ndarray


def _descending_eigh(matrix: np.ndarray):
    values, vectors = eigh(matrix)
    order = np.argsort(values)[::-1]
    return np.clip(values[order], 0.0, None), vectors[:, order]


def local_eigendecomposition(e, variance_threshold: float = DEFAULT_VARIANCE_THRESHOLD) -> LocalEigenpack:
    """
    Truncated eigen-pack of a center's corrected data.

    Uses the N_c x N_c Gram matrix E·Eᵀ when N_c <= F and maps its eigenvectors
    to feature space with U_c = Eᵀ·V·diag(1/σ); otherwise eigendecomposes the
    F x F matrix EᵀE directly.
    """
    e = as_matrix(e, "e")
    if not 0 < variance_threshold <= 1:
        raise ValueError(f"variance threshold must lie in (0, 1], got {variance_threshold}")
    if e.shape[0] == 0:
        raise DegenerateData("no subjects to decompose")
    if not np.any(e):
        raise DegenerateData("corrected data is identically zero")

    n_local, n_features = e.shape
    if n_local <= n_features:
        eigenvalues, vectors = _descending_eigh(e @ e.T)
    else:
        eigenvalues, basis = _descending_eigh(e.T @ e)

    keep = eigenvalues > EIGENVALUE_CUTOFF * eigenvalues[0]
    eigenvalues = eigenvalues[keep]
    total = eigenvalues.sum()
    k = select_rank(eigenvalues, variance_threshold, total)
    singular_values = np.sqrt(eigenvalues[:k])

    if n_local <= n_features:
        basis = e.T @ (vectors[:, :k] / singular_values)
    else:
        basis = basis[:, :k]

    captured = float(eigenvalues[:k].sum() / total)
    logger.debug("local eigenpack: kept %d of %d components (%.3f of variance)", k, keep.sum(), captured)
    return LocalEigenpack(canonicalize_signs(basis), singular_values, n_local, captured)


def select_components(
    eigenvalues: np.ndarray,
    total: float,
    m: Optional[int],
    variance_threshold: Optional[float],
) -> int:
    available = eigenvalues.size
    if m is not None:
        if m < 1:
            raise ValueError(f"m must be at least 1, got {m}")
        return min(m, available)
    threshold = DEFAULT_VARIANCE_THRESHOLD if variance_threshold is None else variance_threshold
    return select_rank(eigenvalues, threshold, total)


def aggregate(
    packs: Sequence[LocalEigenpack],
    m: Optional[int] = None,
    variance_threshold: Optional[float] = None,
) -> GlobalBasis:
    """Global basis of Σ_c U_cΣ_c²U_cᵀ via the SVD of the stacked weighted bases."""
    if not packs:
        raise NoCenters("aggregate needs at least one eigenpack")
    n_features = packs[0].n_features
    for pack in packs:
        if pack.n_features != n_features:
            raise ShapeMismatch(f"eigenpack has {pack.n_features} features, expected {n_features}")

    packs = content_sorted(packs, LocalEigenpack.to_bytes)
    stacked = np.hstack([pack.basis * pack.singular_values for pack in packs])
    left, singular_values, _ = svd(stacked, full_matrices=False)
    eigenvalues = singular_values**2
    if eigenvalues.size and eigenvalues[0] > 0:
        nonzero = eigenvalues > EIGENVALUE_CUTOFF * eigenvalues[0]
        eigenvalues, left = eigenvalues[nonzero], left[:, nonzero]

    total = sum(pack.total_variance for pack in packs)
    k = select_components(eigenvalues, total, m, variance_threshold)
    return GlobalBasis(
        canonicalize_signs(left[:, :k]),
        eigenvalues[:k],
        eigenvalues[:k] / total,
    )


def project(e, basis: GlobalBasis) -> Scores:
    e = as_matrix(e, "e")
    if e.shape[1] != basis.n_features:
        raise ShapeMismatch(f"data has {e.shape[1]} features, basis has {basis.n_features}")
    return Scores(e @ basis.components)
