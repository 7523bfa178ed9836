import numpy as np
import pytest
from numpy.testing import assert_allclose
from pydantic import ValidationError

from confound_admm import (
    AdmmConfig,
    ConsensusWeights,
    LocalAdmmState,
    LocalSolver,
    balance_rho,
    consensus_update,
    correct,
    dual_update,
    local_update,
    run_admm,
)
from exceptions import DivergenceDetected, NoCenters, ShapeMismatch, SingularSystem
from oracle import pooled_ols
from synthdata import build_spec, generate


def make_problem(seed=0, n_centers=4, n_per_center=60, q=3, n_features=8, noise=0.1):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(q, n_features))
    centers = []
    for _ in range(n_centers):
        y = rng.normal(size=(n_per_center, q))
        y[:, 0] = 1.0
        x = y @ w + noise * rng.normal(size=(n_per_center, n_features))
        centers.append((x, y))
    return centers, w


def rel_err(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


class TestAdmmConfig:
    def test_defaults(self):
        """Ten iterations at rho = 1 by default."""
        config = AdmmConfig()
        assert config.rho == 1.0
        assert config.iterations == 10
        assert config.tolerance is None
        assert config.adaptive_rho is False

    def test_invalid_values(self):
        """rho must be positive and iterations at least one."""
        with pytest.raises(ValidationError):
            AdmmConfig(rho=0)
        with pytest.raises(ValidationError):
            AdmmConfig(iterations=0)


class TestLocalUpdate:
    def test_first_iteration_is_shrunk_ols(self):
        """With zero dual and consensus, W_c = (YᵀY + ρ/2 I)⁻¹ YᵀX̂."""
        (x, y), *_ = make_problem()[0]
        rho = 2.0
        w = local_update(x, y, ConsensusWeights(np.zeros((3, 8))), np.zeros((3, 8)), rho)
        expected = np.linalg.solve(y.T @ y + rho / 2 * np.eye(3), y.T @ x)
        assert_allclose(w, expected, rtol=1e-10)

    def test_zero_rho_is_ols(self):
        """rho = 0 reduces the local update to ordinary least squares."""
        (x, y), *_ = make_problem()[0]
        w = local_update(x, y, ConsensusWeights(np.zeros((3, 8))), np.zeros((3, 8)), 0.0)
        assert_allclose(w, np.linalg.lstsq(y, x, rcond=None)[0], rtol=1e-8)

    def test_large_rho_pins_to_consensus(self):
        """As rho grows the local solution is pulled onto W̃."""
        (x, y), *_ = make_problem()[0]
        rng = np.random.default_rng(1)
        w_tilde = rng.normal(size=(3, 8))
        w = local_update(x, y, ConsensusWeights(w_tilde), rng.normal(size=(3, 8)), 1e8)
        assert_allclose(w, w_tilde, atol=1e-4)

    def test_local_ols_is_a_fixed_point(self):
        """With zero dual and W̃ at the local OLS fit, the update returns that fit."""
        (x, y), *_ = make_problem()[0]
        ols = np.linalg.solve(y.T @ y, y.T @ x)
        w = local_update(x, y, ConsensusWeights(ols), np.zeros((3, 8)), 1.0)
        assert_allclose(w, ols, rtol=1e-10, atol=1e-12)

    def test_rank_deficient_covariates(self):
        """An all-zero covariate column with rho = 0 is singular."""
        y = np.column_stack([np.ones(10), np.zeros(10)])
        with pytest.raises(SingularSystem):
            LocalSolver(np.zeros((10, 3)), y, 0.0)

    def test_set_rho_reuses_factor(self):
        """The factorization is rebuilt only when rho changes."""
        (x, y), *_ = make_problem()[0]
        solver = LocalSolver(x, y, 1.0)
        factor = solver._factor
        solver.set_rho(1.0)
        assert solver._factor is factor
        solver.set_rho(2.0)
        assert solver._factor is not factor
        assert solver.rho == 2.0

    def test_shape_checks(self):
        """Consensus weights of the wrong shape are rejected."""
        (x, y), *_ = make_problem()[0]
        with pytest.raises(ShapeMismatch):
            local_update(x, y, ConsensusWeights(np.zeros((2, 8))), np.zeros((3, 8)), 1.0)


class TestConsensusAndDual:
    def test_consensus_average(self):
        """W̃ = mean(α/ρ + W)."""
        a = LocalAdmmState(np.ones((2, 2)), 2.0 * np.ones((2, 2)))
        b = LocalAdmmState(3.0 * np.ones((2, 2)), np.zeros((2, 2)))
        w_tilde = consensus_update([a, b], rho=2.0).w_tilde
        assert_allclose(w_tilde, np.full((2, 2), 2.5))

    def test_consensus_examples(self):
        """Unanimous centers agree with themselves; opposite centers cancel."""
        w = np.random.default_rng(2).normal(size=(3, 4))
        same = [LocalAdmmState(w.copy(), np.zeros((3, 4))) for _ in range(3)]
        assert_allclose(consensus_update(same, rho=1.0).w_tilde, w)
        opposite = [LocalAdmmState(w, np.zeros((3, 4))), LocalAdmmState(-w, np.zeros((3, 4)))]
        assert_allclose(consensus_update(opposite, rho=1.0).w_tilde, 0.0, atol=1e-15)

    def test_consensus_matches_direct_mean(self):
        """Random states average to the elementwise mean of α/ρ + W."""
        rng = np.random.default_rng(3)
        states = [LocalAdmmState(rng.normal(size=(3, 5)), rng.normal(size=(3, 5))) for _ in range(7)]
        expected = np.mean([s.alpha / 0.7 + s.w for s in states], axis=0)
        assert_allclose(consensus_update(states, rho=0.7).w_tilde, expected, rtol=1e-12, atol=1e-12)

    def test_consensus_ignores_center_order(self):
        """Reordering the centers gives bit-identical consensus weights."""
        rng = np.random.default_rng(4)
        states = [LocalAdmmState(rng.normal(size=(3, 5)), rng.normal(size=(3, 5))) for _ in range(6)]
        forward = consensus_update(states, rho=1.3).to_bytes()
        assert consensus_update(states[::-1], rho=1.3).to_bytes() == forward

    def test_consensus_no_centers(self):
        """An empty center list raises NoCenters."""
        with pytest.raises(NoCenters):
            consensus_update([], rho=1.0)

    def test_dual_update(self):
        """α ← α + ρ(W − W̃)."""
        alpha = dual_update(np.zeros((1, 2)), np.array([[1.0, 2.0]]), ConsensusWeights(np.array([[0.5, 0.5]])), 2.0)
        assert_allclose(alpha, [[1.0, 3.0]])

    def test_dual_examples(self):
        """Consensus leaves α alone; a constant gap advances it linearly."""
        alpha = np.arange(4.0).reshape(2, 2)
        w = np.ones((2, 2))
        assert_allclose(dual_update(alpha, w, ConsensusWeights(w), 3.0), alpha)
        gap = np.full((2, 2), 0.25)
        once = dual_update(alpha, w + gap, ConsensusWeights(w), 3.0)
        twice = dual_update(once, w + gap, ConsensusWeights(w), 3.0)
        assert_allclose(twice - alpha, 2 * 3.0 * gap)

    def test_duals_sum_to_zero(self):
        """After a consensus step the dual variables sum to zero."""
        states = [LocalAdmmState(np.random.default_rng(i).normal(size=(3, 8)), np.zeros((3, 8))) for i in range(4)]
        consensus = consensus_update(states, rho=1.5)
        duals = [dual_update(s.alpha, s.w, consensus, 1.5) for s in states]
        assert_allclose(np.sum(duals, axis=0), 0.0, atol=1e-12)

    def test_balance_rho(self):
        """rho doubles or halves when one residual dominates by more than 10x."""
        assert balance_rho(1.0, primal=100.0, dual=1.0) == 2.0
        assert balance_rho(1.0, primal=1.0, dual=100.0) == 0.5
        assert balance_rho(1.0, primal=2.0, dual=1.0) == 1.0


class TestRunAdmm:
    def test_converges_to_pooled_ols(self):
        """With rho matched to the covariate scale, W̃ reaches the pooled OLS solution."""
        centers, _ = make_problem(seed=3)
        x = np.vstack([c[0] for c in centers])
        y = np.vstack([c[1] for c in centers])
        w_tilde, trace = run_admm(centers, AdmmConfig(rho=120.0, iterations=100))
        assert len(trace) == 100
        assert rel_err(w_tilde.w_tilde, pooled_ols(x, y)) < 1e-8
        assert trace[-1].max_primal_residual < trace[0].max_primal_residual

    def test_error_decreases_at_default_settings(self):
        """Ten iterations at rho = 1 beat the first iteration."""
        centers, _ = make_problem(seed=4)
        x = np.vstack([c[0] for c in centers])
        y = np.vstack([c[1] for c in centers])
        ols = pooled_ols(x, y)
        first, _ = run_admm(centers, AdmmConfig(iterations=1))
        tenth, _ = run_admm(centers, AdmmConfig(iterations=10))
        assert rel_err(tenth.w_tilde, ols) < rel_err(first.w_tilde, ols)
        assert rel_err(tenth.w_tilde, ols) < 1e-1

    def test_single_center_matches_ols(self):
        """One center converges to its own OLS fit."""
        centers, _ = make_problem(seed=5, n_centers=1)
        w_tilde, _ = run_admm(centers, AdmmConfig(rho=120.0, iterations=80))
        x, y = centers[0]
        assert rel_err(w_tilde.w_tilde, pooled_ols(x, y)) < 1e-8

    def test_single_center_at_default_rho(self):
        """A lone center reaches its OLS fit within fifty rounds at rho = 1."""
        centers, _ = make_problem(seed=10, n_centers=1)
        w_tilde, _ = run_admm(centers, AdmmConfig(iterations=50))
        x, y = centers[0]
        assert rel_err(w_tilde.w_tilde, pooled_ols(x, y)) < 1e-6

    def test_noiseless_at_default_rho(self):
        """Noise-free data: fifty rounds at rho = 1 leave MSE(W, W̃) below 1e-8."""
        centers, w = make_problem(seed=11, noise=0.0)
        _, trace = run_admm(centers, AdmmConfig(iterations=50), w_truth=w)
        assert trace[-1].mse_vs_truth < 1e-8

    def test_columns_are_independent(self):
        """Fitting one feature alone gives the matching column of the full fit."""
        centers, _ = make_problem(seed=12)
        full, _ = run_admm(centers, AdmmConfig(rho=3.0, iterations=30))
        for column in (0, 5):
            single, _ = run_admm([(x[:, [column]], y) for x, y in centers], AdmmConfig(rho=3.0, iterations=30))
            assert_allclose(single.w_tilde[:, 0], full.w_tilde[:, column], rtol=1e-10, atol=1e-10)

    def test_noiseless_recovers_truth(self):
        """Without noise the consensus recovers the generating weights."""
        centers, w = make_problem(seed=6, noise=0.0)
        w_tilde, trace = run_admm(centers, AdmmConfig(rho=120.0, iterations=100), w_truth=w)
        assert rel_err(w_tilde.w_tilde, w) < 1e-8
        assert trace[-1].mse_vs_truth < trace[0].mse_vs_truth

    def test_tolerance_stops_early(self):
        """A tolerance ends the loop before the iteration budget."""
        centers, _ = make_problem(seed=7)
        _, trace = run_admm(centers, AdmmConfig(rho=120.0, iterations=500, tolerance=1e-6))
        assert len(trace) < 500
        assert trace[-1].max_primal_residual < 1e-6

    def test_adaptive_rho_changes_penalty(self):
        """Residual balancing moves rho away from a badly scaled start."""
        centers, _ = make_problem(seed=8)
        x = np.vstack([c[0] for c in centers])
        y = np.vstack([c[1] for c in centers])
        ols = pooled_ols(x, y)
        fixed, _ = run_admm(centers, AdmmConfig(rho=1e-3, iterations=200))
        adaptive, trace = run_admm(centers, AdmmConfig(rho=1e-3, iterations=200, adaptive_rho=True))
        assert len({d.rho for d in trace}) > 1
        assert rel_err(adaptive.w_tilde, ols) < 0.1 * rel_err(fixed.w_tilde, ols)

    def test_divergence_detected(self):
        """Non-finite inputs surface as DivergenceDetected."""
        centers, _ = make_problem(seed=9, n_centers=2)
        x, y = centers[0]
        x = x.copy()
        x[0, 0] = np.inf
        with pytest.raises(DivergenceDetected):
            run_admm([(x, y), centers[1]], AdmmConfig())

    def test_no_centers(self):
        """run_admm needs at least one center."""
        with pytest.raises(NoCenters):
            run_admm([], AdmmConfig())


class TestFullScale:
    """2400 subjects, 500 features, 20 covariates and 20% noise, split over C centers."""

    @staticmethod
    def problem(n_centers):
        spec = build_spec(seed=0, n_total=2400, n_features=500, q=20, n_centers=n_centers, noise_frac=0.2)
        dataset = generate(spec)
        x, y = dataset.pooled()
        return [(c.x, c.y) for c in dataset.centers], pooled_ols(x, y)

    @staticmethod
    def errors(trace, ols):
        """Relative Frobenius error per round, recovered from the traced MSE against OLS."""
        return [np.sqrt(d.mse_vs_truth * ols.size) / np.linalg.norm(ols) for d in trace]

    @pytest.mark.parametrize("n_centers", [2, 10, 50, 100])
    def test_default_rho(self, n_centers):
        """Ten rounds at rho = 1 get within 10% of pooled OLS and keep improving."""
        centers, ols = self.problem(n_centers)
        _, trace = run_admm(centers, AdmmConfig(iterations=50), w_truth=ols)
        errors = self.errors(trace, ols)
        assert errors[9] < 1e-1
        assert errors[9] < errors[0]
        assert errors[49] < errors[9]

    @pytest.mark.parametrize("n_centers", [2, 10])
    def test_rho_on_center_scale(self, n_centers):
        """rho = 2 N_c reaches 1e-3 of pooled OLS within fifty rounds."""
        centers, ols = self.problem(n_centers)
        rho = 2.0 * 2400 / n_centers
        _, trace = run_admm(centers, AdmmConfig(rho=rho, iterations=50), w_truth=ols)
        assert self.errors(trace, ols)[-1] < 1e-3


class TestCorrect:
    def test_residuals(self):
        """E = X̂ − Y W̃."""
        (x, y), *_ = make_problem()[0]
        w = np.linalg.lstsq(y, x, rcond=None)[0]
        e = correct(x, y, ConsensusWeights(w)).e
        assert e.shape == x.shape
        assert_allclose(e, x - y @ w)
        assert_allclose(y.T @ e, 0.0, atol=1e-8)

    def test_shape_mismatch(self):
        """W̃ must be q x F."""
        with pytest.raises(ShapeMismatch):
            correct(np.zeros((4, 3)), np.zeros((4, 2)), ConsensusWeights(np.zeros((3, 3))))


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
