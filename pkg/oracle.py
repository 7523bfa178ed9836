"""
Module: oracle.py
Centralized reference computations on pooled data and the metrics that
compare a federated result against them.
"""

from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, subspace_angles, svd

from confound_admm import ConsensusWeights
from exceptions import NoCenters, ShapeMismatch, SingularSystem
from fpca import GlobalBasis, select_components, canonicalize_signs
from stats_core import CenterData, GlobalStats, as_matrix, standardize


@dataclass(frozen=True)
class CentralizedResult:
    stats: GlobalStats
    w_ols: np.ndarray
    basis: GlobalBasis
    corrected: np.ndarray


@dataclass(frozen=True)
class ComparisonReport:
    stats_max_rel_err: float
    w_rel_frobenius_err: float
    eigenvalue_rel_errs: np.ndarray
    principal_angles_rad: np.ndarray
    pc_cosines: np.ndarray

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, np.ndarray):
                value = " ".join(f"{v:.12g}" for v in value)
            else:
                value = f"{value:.12g}"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def to_rows(self) -> List[dict]:
        """Long-format rows: metric, index, value."""
        rows = [
            {"metric": "stats_max_rel_err", "index": 0, "value": self.stats_max_rel_err},
            {"metric": "w_rel_frobenius_err", "index": 0, "value": self.w_rel_frobenius_err},
        ]
        for metric in ("eigenvalue_rel_errs", "principal_angles_rad", "pc_cosines"):
            rows += [
                {"metric": metric, "index": j + 1, "value": float(v)}
                for j, v in enumerate(getattr(self, metric))
            ]
        return rows


def pool(centers: Sequence[CenterData]):
    if not centers:
        raise NoCenters("nothing to pool")
    return np.vstack([c.x for c in centers]), np.vstack([c.y for c in centers])


def pooled_ols(xhat, y) -> np.ndarray:
    """(YᵀY)⁻¹YᵀX̂ through a Cholesky solve."""
    xhat, y = as_matrix(xhat, "xhat"), as_matrix(y, "y")
    try:
        factor = cho_factor(y.T @ y)
    except LinAlgError as exc:
        raise SingularSystem("pooled covariates are rank deficient") from exc
    return cho_solve(factor, y.T @ xhat)


def centralized_pca(
    e,
    m: Optional[int] = None,
    variance_threshold: Optional[float] = None,
) -> GlobalBasis:
    e = as_matrix(e, "e")
    _, singular_values, vt = svd(e, full_matrices=False)
    eigenvalues = singular_values**2
    total = float(eigenvalues.sum())
    k = select_components(eigenvalues, total, m, variance_threshold)
    return GlobalBasis(canonicalize_signs(vt[:k].T), eigenvalues[:k], eigenvalues[:k] / total)


def centralized_pipeline(
    centers: Sequence[CenterData],
    m: Optional[int] = None,
    variance_threshold: Optional[float] = None,
    weights: Optional[np.ndarray] = None,
    y: Optional[np.ndarray] = None,
) -> CentralizedResult:
    """
    The computation federation replaces: pooled statistics, pooled OLS and
    PCA of the pooled corrected data. `weights` replaces the OLS solution in
    the correction step (to isolate the PCA stage); `y` replaces the pooled
    covariates (e.g. after center-side derivation).
    """
    x, pooled_y = pool(centers)
    y = pooled_y if y is None else as_matrix(y, "y")
    stats = GlobalStats(x.mean(axis=0), x.std(axis=0), x.shape[0])
    xhat = standardize(x, stats)
    w_ols = pooled_ols(xhat, y)
    correction = w_ols if weights is None else np.asarray(weights)
    corrected = xhat - y @ correction
    basis = centralized_pca(corrected, m, variance_threshold)
    return CentralizedResult(stats, w_ols, basis, corrected)


def _max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    if not a.size:
        return 0.0
    # entries near zero are compared on the scale of the whole vector
    floor = 1e-12 * max(float(np.abs(b).max()), 1.0)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))


def principal_angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Principal angles between the spans of a and b, ascending, in radians."""
    if a.shape[0] != b.shape[0]:
        raise ShapeMismatch(f"bases live in {a.shape[0]} and {b.shape[0]} dimensions")
    return np.clip(np.sort(subspace_angles(a, b)), 0.0, np.pi / 2)


def compare(federated, centralized: CentralizedResult, m: int) -> ComparisonReport:
    """
    Compare a federated AnalysisResult with the centralized oracle on the
    first m components. Loading cosines are absolute, so a component and its
    negation count as equal.
    """
    fed_basis, cen_basis = federated.basis, centralized.basis
    if fed_basis.n_features != cen_basis.n_features:
        raise ShapeMismatch(
            f"federated basis has {fed_basis.n_features} features, centralized {cen_basis.n_features}"
        )
    w_tilde = federated.w_tilde.w_tilde if isinstance(federated.w_tilde, ConsensusWeights) else federated.w_tilde
    if w_tilde.shape != centralized.w_ols.shape:
        raise ShapeMismatch(f"W̃ {w_tilde.shape} vs W_ols {centralized.w_ols.shape}")
    m = min(m, fed_basis.n_components, cen_basis.n_components)

    stats_err = max(
        _max_rel_err(federated.global_stats.mean, centralized.stats.mean),
        _max_rel_err(federated.global_stats.std, centralized.stats.std),
    )
    w_norm = np.linalg.norm(centralized.w_ols)
    w_err = float(np.linalg.norm(w_tilde - centralized.w_ols) / w_norm) if w_norm > 0 else float(np.linalg.norm(w_tilde))

    fed_u, cen_u = fed_basis.components[:, :m], cen_basis.components[:, :m]
    eig_errs = np.abs(fed_basis.eigenvalues[:m] - cen_basis.eigenvalues[:m]) / np.maximum(
        np.abs(cen_basis.eigenvalues[:m]), np.finfo(float).tiny
    )
    angles = principal_angles(fed_u, cen_u) if m else np.zeros(0)
    cosines = np.clip(np.abs(np.sum(fed_u * cen_u, axis=0)), 0.0, 1.0)
    return ComparisonReport(stats_err, w_err, eig_errs, angles, cosines)
