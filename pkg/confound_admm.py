"""
Module: confound_admm.py
Consensus ADMM estimation of the covariate weight matrix and residualization.

Every center minimizes ||X̂_c - Y_c W_c||² subject to W_c = W̃. One iteration
runs the local solve, the consensus average and the dual ascent, in that order.
W maps covariates to features and has shape q x F.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from codec import Reader, content_sorted, pack_matrix
from constants import DEFAULT_ADMM_ITERATIONS, DEFAULT_RHO, RHO_BALANCE_RATIO, RHO_SCALING
from exceptions import DivergenceDetected, NoCenters, ShapeMismatch, SingularSystem
from stats_core import as_matrix

logger = logging.getLogger(__name__)


class AdmmConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    rho: float = Field(DEFAULT_RHO, gt=0, description="Penalty / dual step length")
    iterations: int = Field(DEFAULT_ADMM_ITERATIONS, ge=1)
    tolerance: Optional[float] = Field(
        None, ge=0, description="Stop once max_c ||W_c - W̃||_F falls below this"
    )
    adaptive_rho: bool = Field(False, description="Residual-balancing penalty updates")


@dataclass
class LocalAdmmState:
    w: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        if self.w.shape != self.alpha.shape:
            raise ShapeMismatch(f"w {self.w.shape} and alpha {self.alpha.shape} differ")

    def to_bytes(self) -> bytes:
        return pack_matrix(self.w) + pack_matrix(self.alpha)


@dataclass(frozen=True)
class ConsensusWeights:
    w_tilde: np.ndarray

    def to_bytes(self) -> bytes:
        return pack_matrix(self.w_tilde)

    @classmethod
    def from_bytes(cls, payload: bytes) -> "ConsensusWeights":
        reader = Reader(payload)
        w_tilde = reader.matrix()
        reader.finish()
        return cls(w_tilde)


@dataclass(frozen=True)
class CorrectedData:
    e: np.ndarray


@dataclass(frozen=True)
class AdmmDiagnostics:
    iteration: int
    max_primal_residual: float
    mse_vs_truth: Optional[float] = None
    rho: float = DEFAULT_RHO


def _check_design(xhat: np.ndarray, y: np.ndarray) -> None:
    if xhat.shape[0] != y.shape[0]:
        raise ShapeMismatch(f"xhat has {xhat.shape[0]} rows but y has {y.shape[0]}")


def _check_weights(w: np.ndarray, q: int, n_features: int, name: str) -> None:
    if w.shape != (q, n_features):
        raise ShapeMismatch(f"{name} has shape {w.shape}, expected {(q, n_features)}")


class LocalSolver:
    """
    Center-side W_c solver. Y_c never changes across iterations, so the
    Cholesky factor of (YᵀY + ρ/2·I) and YᵀX̂ are computed once per rho.
    """

    def __init__(self, xhat, y, rho: float):
        self.xhat = as_matrix(xhat, "xhat")
        self.y = as_matrix(y, "y")
        _check_design(self.xhat, self.y)
        self.gram = self.y.T @ self.y
        self.cross = self.y.T @ self.xhat
        self.rho = None
        self._factor = None
        self.set_rho(rho)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.cross.shape

    def set_rho(self, rho: float) -> None:
        if rho < 0:
            raise ValueError(f"rho must be nonnegative, got {rho}")
        if rho == self.rho:
            return
        system = self.gram + (rho / 2.0) * np.eye(self.gram.shape[0])
        try:
            self._factor = cho_factor(system)
        except LinAlgError as exc:
            raise SingularSystem(
                "YᵀY + (rho/2)I is not positive definite; covariates are rank deficient"
            ) from exc
        self.rho = rho

    def solve(self, w_tilde: np.ndarray, alpha: np.ndarray) -> np.ndarray:
        _check_weights(w_tilde, *self.shape, "w_tilde")
        _check_weights(alpha, *self.shape, "alpha")
        rhs = self.cross - alpha / 2.0 + (self.rho / 2.0) * w_tilde
        # non-finite iterates are caught at the consensus step
        return cho_solve(self._factor, rhs, check_finite=False)


def local_update(xhat, y, w_tilde: ConsensusWeights, alpha, rho: float) -> np.ndarray:
    return LocalSolver(xhat, y, rho).solve(w_tilde.w_tilde, np.asarray(alpha, dtype=np.float64))


def dual_update(alpha, w_new, w_tilde_new: ConsensusWeights, rho: float) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    w_new = np.asarray(w_new, dtype=np.float64)
    if not (alpha.shape == w_new.shape == w_tilde_new.w_tilde.shape):
        raise ShapeMismatch(
            f"alpha {alpha.shape}, w {w_new.shape} and w_tilde "
            f"{w_tilde_new.w_tilde.shape} must match"
        )
    return alpha + rho * (w_new - w_tilde_new.w_tilde)


def consensus_update(locals: Sequence[LocalAdmmState], rho: float) -> ConsensusWeights:
    """W̃ = mean_c(α_c/ρ + W_c), summed in content order."""
    if not locals:
        raise NoCenters("consensus needs at least one center")
    shape = locals[0].w.shape
    total = np.zeros(shape)
    for state in content_sorted(locals, LocalAdmmState.to_bytes):
        if state.w.shape != shape:
            raise ShapeMismatch(f"center weights {state.w.shape} differ from {shape}")
        total += state.alpha / rho + state.w
    return ConsensusWeights(total / len(locals))


def primal_residuals(locals: Sequence[LocalAdmmState], consensus: ConsensusWeights) -> np.ndarray:
    return np.array([np.linalg.norm(s.w - consensus.w_tilde) for s in locals])


def balance_rho(rho: float, primal: float, dual: float) -> float:
    """Residual balancing: grow rho when the primal residual dominates, shrink it otherwise."""
    if primal > RHO_BALANCE_RATIO * dual:
        return rho * RHO_SCALING
    if dual > RHO_BALANCE_RATIO * primal:
        return rho / RHO_SCALING
    return rho


def weights_mse(w_truth: np.ndarray, w_tilde: np.ndarray) -> float:
    return float(np.mean((np.asarray(w_truth) - w_tilde) ** 2))


def check_finite(consensus: ConsensusWeights, iteration: int, rho: float) -> None:
    if not np.all(np.isfinite(consensus.w_tilde)):
        raise DivergenceDetected(
            f"non-finite consensus weights at iteration {iteration} (rho={rho}); "
            "try a different rho"
        )


def run_admm(
    centers: Sequence[Tuple[np.ndarray, np.ndarray]],
    config: AdmmConfig,
    w_truth: Optional[np.ndarray] = None,
) -> Tuple[ConsensusWeights, List[AdmmDiagnostics]]:
    """Run consensus ADMM over in-memory centers, returning W̃ and a per-iteration trace."""
    if not centers:
        raise NoCenters("run_admm needs at least one center")
    solvers = [LocalSolver(xhat, y, config.rho) for xhat, y in centers]
    shape = solvers[0].shape
    for solver in solvers[1:]:
        if solver.shape != shape:
            raise ShapeMismatch(f"center problem {solver.shape} differs from {shape}")

    rho = config.rho
    states = [LocalAdmmState(np.zeros(shape), np.zeros(shape)) for _ in solvers]
    consensus = ConsensusWeights(np.zeros(shape))
    trace: List[AdmmDiagnostics] = []

    for iteration in range(1, config.iterations + 1):
        for solver, state in zip(solvers, states):
            solver.set_rho(rho)
            state.w = solver.solve(consensus.w_tilde, state.alpha)
        previous = consensus
        consensus = consensus_update(states, rho)
        check_finite(consensus, iteration, rho)
        for state in states:
            state.alpha = dual_update(state.alpha, state.w, consensus, rho)

        residuals = primal_residuals(states, consensus)
        mse = weights_mse(w_truth, consensus.w_tilde) if w_truth is not None else None
        trace.append(AdmmDiagnostics(iteration, float(residuals.max()), mse, rho))
        logger.debug("admm iteration %d: max primal residual %.3e", iteration, residuals.max())

        if config.tolerance is not None and residuals.max() < config.tolerance:
            logger.info("admm converged after %d iterations", iteration)
            break
        if config.adaptive_rho:
            dual = rho * np.sqrt(len(states)) * np.linalg.norm(consensus.w_tilde - previous.w_tilde)
            rho = balance_rho(rho, float(np.linalg.norm(np.sort(residuals))), float(dual))

    return consensus, trace


def correct(xhat, y, w_tilde: ConsensusWeights) -> CorrectedData:
    xhat = as_matrix(xhat, "xhat")
    y = as_matrix(y, "y")
    _check_design(xhat, y)
    _check_weights(w_tilde.w_tilde, y.shape[1], xhat.shape[1], "w_tilde")
    return CorrectedData(xhat - y @ w_tilde.w_tilde)
