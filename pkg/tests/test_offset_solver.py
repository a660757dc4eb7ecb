"""
Test the offset solvers: compaction, minimal cases and RANSAC
"""

import time

import numpy as np
import pytest

from src.calibration import offset_solver
from src.calibration.offset_solver import (
    MINIMAL_CASES,
    OffsetSolution,
    compaction,
    compaction_terms,
    filter_valid_offsets,
    ransac_offsets,
    rank_residual,
    select_case,
    solve_minimal,
)
from src.core.exceptions import DegenerateInstance, InsufficientData, MatrixTooSmall, NoConsensus
from src.core.model import TdoaMatrix
from src.simulation.scene_simulator import NoiseSpec, anechoic_noise, generate_anechoic_scene, synth_tdoa


def physical_matrix(m, n, seed, planar=False):
    rng = np.random.default_rng(seed)
    mics = rng.standard_normal((m, 3))
    if planar:
        mics[:, 2] = 0.0
    sources = rng.standard_normal((n, 3))
    distances = np.linalg.norm(sources[None, :, :] - mics[:, None, :], axis=2)
    offsets = -distances[0]
    return distances + offsets[None, :], offsets


class TestCompaction:
    def test_true_offsets_give_rank_three(self, dense_problem):
        _, _, offsets, U = dense_problem
        F = compaction(U, offsets).F
        assert F.shape == (9, 11)
        assert rank_residual(F, 3) < 1e-9

    def test_wrong_offsets_break_the_rank(self, dense_problem):
        _, _, offsets, U = dense_problem
        assert rank_residual(compaction(U, offsets - 0.5).F, 3) > 1e-4

    def test_terms_are_affine_in_offsets(self, dense_problem):
        _, _, offsets, U = dense_problem
        F0, A, b = compaction_terms(U)
        assert np.allclose(F0 + A * offsets[None, 1:] - b[:, None] * offsets[0], compaction(U, offsets).F)

    def test_planar_microphones_give_rank_two(self):
        U, offsets = physical_matrix(10, 12, seed=23, planar=True)
        sigma = np.linalg.svd(compaction(U, offsets).F, compute_uv=False)
        assert sigma[2] / sigma[1] < 1e-8

    def test_squared_distances_have_rank_five(self, dense_problem):
        _, _, offsets, U = dense_problem
        sigma = np.linalg.svd(compaction(U, offsets).D, compute_uv=False)
        assert sigma[5] / sigma[4] < 1e-8
        assert sigma[4] / sigma[0] > 1e-6

    def test_rank_residual_needs_room(self):
        with pytest.raises(MatrixTooSmall):
            rank_residual(np.ones((3, 3)), 3)


class TestSelectCase:
    def test_auto_prefers_single_solution(self):
        assert select_case(12).label == "9r/5s"
        assert select_case(7).label == "7r/6s"
        assert select_case(6).label == "6r/8s"
        assert select_case(7, K=2).label == "7r/4s"

    def test_named_cases(self):
        assert select_case(10, 3, "7r/6s").n == 6
        assert select_case(10, 3, (3, 6, 8)).max_solutions == 14
        with pytest.raises(ValueError):
            select_case(10, 3, "4r/4s")

    def test_too_few_microphones(self):
        with pytest.raises(InsufficientData):
            select_case(5, 3)


class TestMinimalSolvers:
    def test_linear_rank_three_case(self):
        case = select_case(9, 3, "9r/5s")
        U, offsets = physical_matrix(9, 5, seed=21)
        solutions = solve_minimal(U, case)
        assert len(solutions) == 1
        assert np.allclose(solutions[0].offsets, offsets, atol=1e-6)
        assert solutions[0].valid

    def test_linear_planar_case(self):
        case = select_case(7, 2, "7r/4s")
        U, offsets = physical_matrix(7, 4, seed=22, planar=True)
        solutions = solve_minimal(U, case)
        assert len(solutions) == 1
        assert np.allclose(solutions[0].offsets, offsets, atol=1e-6)

    def test_shape_is_checked(self):
        with pytest.raises(ValueError):
            solve_minimal(np.zeros((8, 5)), MINIMAL_CASES[0])

    @pytest.mark.slow
    @pytest.mark.parametrize("label, K", [("7r/6s", 3), ("6r/8s", 3), ("5r/6s", 2)])
    def test_nonlinear_case_contains_truth(self, label, K):
        case = select_case(10, K, label)
        hits, degenerate, times = 0, 0, []
        for seed in range(20):
            U, offsets = physical_matrix(case.m, case.n, seed=300 + seed, planar=K == 2)
            start = time.perf_counter()
            try:
                solutions = solve_minimal(U, case, seed=seed)
            except DegenerateInstance:
                degenerate += 1
                continue
            finally:
                times.append(time.perf_counter() - start)
            assert 1 <= len(solutions) <= case.max_solutions
            errors = [np.max(np.abs(s.offsets - offsets)) for s in solutions]
            hits += min(errors) < 1e-6 * np.linalg.norm(offsets)
        assert hits + degenerate == 20
        assert hits >= 19
        assert np.median(times) <= 0.1

    @pytest.mark.parametrize("label", ["7r/6s", "9r/5s"])
    def test_planar_microphones_are_degenerate_for_rank_three(self, label):
        case = select_case(10, 3, label)
        U, _ = physical_matrix(case.m, case.n, seed=31, planar=True)
        with pytest.raises(DegenerateInstance):
            solve_minimal(U, case, seed=0)

    @pytest.mark.parametrize("roots", [[], [np.zeros(6)]])
    def test_no_rank_satisfying_root_raises(self, monkeypatch, roots):
        case = select_case(10, 3, "7r/6s")
        U, _ = physical_matrix(case.m, case.n, seed=32)
        monkeypatch.setattr(offset_solver, "_solve_homotopy", lambda *args: roots)
        with pytest.raises(DegenerateInstance, match="no real root"):
            solve_minimal(U, case, seed=0)


class TestFilterValid:
    def test_drops_complex_and_infeasible(self):
        U = np.array([[0.0, 0.0], [1.0, 2.0]])
        kept = filter_valid_offsets([
            np.array([-1.0, -2.0]),
            np.array([-1.0 + 0.1j, -2.0]),
            np.array([0.5, -2.0]),
        ], U)
        assert len(kept) == 1
        assert kept[0].offsets.tolist() == [-1.0, -2.0]

    def test_keeps_solution_objects(self):
        U = np.array([[0.0], [1.0]])
        solution = OffsetSolution(offsets=np.array([-1.0 + 0j]), valid=False,
                                  inlier_columns=np.array([0]), residual=0.0)
        kept = filter_valid_offsets([solution], U)
        assert kept[0] is solution and solution.valid


class TestRansac:
    def test_clean_matrix_keeps_every_column(self, random_scene, clean_tdoa):
        solution = ransac_offsets(clean_tdoa, select_case(10), iterations=50, seed=1)
        assert len(solution.inlier_columns) >= 36
        columns = solution.inlier_columns
        assert np.allclose(solution.offsets[columns], random_scene.offsets[columns], atol=1e-4)
        outside = np.setdiff1d(np.arange(clean_tdoa.n), columns)
        assert np.all(np.isnan(solution.offsets[outside]))

    def test_outlier_columns_are_rejected(self, random_scene):
        tdoa, inliers = synth_tdoa(random_scene, NoiseSpec(outlier_columns=0.2, seed=4))
        solution = ransac_offsets(tdoa, select_case(10), iterations=200, seed=2)
        bad = np.flatnonzero(~inliers[1:].all(axis=0))
        assert len(bad) > 0
        assert not set(solution.inlier_columns.tolist()) & set(bad.tolist())

    def test_no_consensus_on_noise(self):
        U = np.random.default_rng(0).uniform(0.0, 5.0, (9, 8))
        U[0] = 0.0
        tdoa = TdoaMatrix(U=U, mask=np.ones_like(U, dtype=bool), event_times=np.arange(8.0))
        with pytest.raises(NoConsensus):
            ransac_offsets(tdoa, select_case(9), epsilon=1e-6, iterations=5, seed=0)

    def test_too_few_rows(self, clean_tdoa):
        small = TdoaMatrix(U=clean_tdoa.U[:6], mask=clean_tdoa.mask[:6], event_times=clean_tdoa.event_times)
        with pytest.raises(InsufficientData):
            ransac_offsets(small, select_case(9, 3, "9r/5s"))

    def test_reproducible(self, clean_tdoa):
        first = ransac_offsets(clean_tdoa, select_case(10), iterations=20, seed=7)
        second = ransac_offsets(clean_tdoa, select_case(10), iterations=20, seed=7)
        assert np.array_equal(first.inlier_columns, second.inlier_columns)
        assert first.to_dict() == second.to_dict()

    @pytest.mark.slow
    def test_anechoic_profile_consensus(self):
        scene = generate_anechoic_scene(seed=12)
        tdoa, inliers = synth_tdoa(scene, anechoic_noise(seed=13))
        solution = ransac_offsets(tdoa, select_case(tdoa.m), epsilon=0.05, iterations=300, seed=14)
        assert 65 <= len(solution.inlier_columns) <= 90
        clean = (inliers == tdoa.mask).all(axis=0)
        assert clean[solution.inlier_columns].mean() >= 0.95
