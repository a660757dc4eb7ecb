"""
Test the rank-constrained offset refinement
"""

import numpy as np
import pytest

from src.calibration.rank_refinement import RankProblem, rank_optimize, reference_column
from src.core.exceptions import MatrixTooSmall


def test_reference_column_is_most_observed():
    mask = np.array([[1, 1, 1], [0, 1, 1], [0, 1, 0]], dtype=bool)
    assert reference_column(mask) == 1


def test_recovers_offsets_from_perturbed_start(dense_problem):
    _, _, offsets, U = dense_problem
    start = offsets + np.random.default_rng(1).normal(0.0, 0.01, len(offsets))
    result = rank_optimize(U, np.ones_like(U, dtype=bool), start, K=3)
    assert result.converged
    assert np.allclose(result.offsets, offsets, atol=1e-5)
    assert np.all(np.diff(result.history) <= 0)
    assert result.approximant.shape == (9, 11)
    assert np.linalg.matrix_rank(result.approximant, tol=1e-8) == 3


def test_missing_entries_are_ignored(dense_problem):
    _, _, offsets, U = dense_problem
    mask = np.ones_like(U, dtype=bool)
    mask[5, 3] = mask[7, 8] = mask[2, 10] = False
    U = np.where(mask, U, np.nan)
    start = offsets + np.random.default_rng(2).normal(0.0, 0.005, len(offsets))
    result = rank_optimize(U, mask, start, K=3, reference=0)
    assert result.reference == 0
    assert result.other_columns.tolist() == list(range(1, 12))
    assert np.allclose(result.offsets, offsets, atol=1e-4)


def test_cost_never_increases_on_noisy_data(dense_problem):
    _, _, offsets, U = dense_problem
    noisy = U + np.random.default_rng(3).normal(0.0, 0.01, U.shape)
    noisy[0] = U[0]
    result = rank_optimize(noisy, np.ones_like(U, dtype=bool), offsets, K=3, max_iter=30)
    assert result.cost <= result.history[0]
    assert result.iterations <= 30


@pytest.mark.parametrize("seed, missing", [(0, 0.0), (1, 0.0), (2, 0.15)])
def test_jacobian_matches_finite_differences(dense_problem, seed, missing):
    _, _, offsets, U = dense_problem
    rng = np.random.default_rng(seed)
    mask = rng.random(U.shape) >= missing
    mask[0] = True
    problem = RankProblem(U, mask, K=3)
    o = offsets[problem.order] + rng.normal(0.0, 0.05, len(offsets))
    Q, W = problem.initial_state(o)
    J = problem.jacobian(o, Q, W)
    assert J.shape == (int(problem.omega.sum()), problem.n_params)
    x0 = np.zeros(problem.n_params)
    step = 1e-6
    for k in range(problem.n_params):
        dx = x0.copy()
        dx[k] = step
        numeric = (problem.residual_at(o, Q, W, dx) - problem.residual_at(o, Q, W, -dx)) / (2 * step)
        assert np.allclose(J[:, k], numeric, atol=1e-5), f"column {k}"


def test_too_small():
    U = np.zeros((4, 4))
    with pytest.raises(MatrixTooSmall):
        rank_optimize(U, np.ones_like(U, dtype=bool), np.zeros(4), K=3)


def test_needs_finite_start(dense_problem):
    _, _, offsets, U = dense_problem
    start = offsets.copy()
    start[2] = np.nan
    with pytest.raises(ValueError):
        rank_optimize(U, np.ones_like(U, dtype=bool), start)
