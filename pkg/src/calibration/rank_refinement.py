"""
Joint refinement of offsets and a rank-K approximant of the compaction matrix.

Minimizes ||F(U, o) - A||^2 over observed entries subject to rank(A) = K.
A is kept as Q[:, :K] W with Q orthogonal; each Gauss-Newton step perturbs

    o -> o + y
    Q -> Q expm(sum_pq z_pq B_pq)      B_pq = e_q e_p^T - e_p e_q^T, p < K <= q
    W -> W + dW

Offsets of single columns and the matching column of W only touch one column
of the residual, so they are eliminated per column and the remaining global
system (reference offset and rotation generators) is solved by its Schur
complement.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.linalg import expm

from src.calibration.offset_solver import compaction_terms
from src.core.exceptions import Diverged, MatrixTooSmall

logger = logging.getLogger(__name__)


@dataclass
class RankRefinement:
    """
    Refined offsets (original column order) and the rank-K approximant.

    `approximant` is (m-1) x (n-1) with rows for microphones 2..m and columns
    `other_columns`, compacted against column `reference`.
    """
    offsets: np.ndarray
    approximant: np.ndarray
    reference: int
    other_columns: np.ndarray
    cost: float
    iterations: int
    converged: bool
    history: List[float] = field(default_factory=list)


def reference_column(mask: np.ndarray) -> int:
    """Most observed column; ties go to the lowest index."""
    return int(np.argmax(np.asarray(mask, dtype=bool).sum(axis=0)))


class RankProblem:
    """Residual and Jacobian of the rank-constrained objective at a given state."""

    def __init__(self, U: np.ndarray, mask: np.ndarray, K: int = 3, reference: Optional[int] = None):
        U = np.asarray(U, dtype=float)
        mask = np.asarray(mask, dtype=bool) & np.isfinite(U)
        self.K = K
        self.reference = reference_column(mask) if reference is None else int(reference)
        self.order = np.r_[self.reference, np.delete(np.arange(U.shape[1]), self.reference)]
        Up = np.where(mask, U, 0.0)[:, self.order]
        mp = mask[:, self.order]
        self.F0, self.A, self.b = compaction_terms(Up)
        self.omega = (mp[1:, 1:] & mp[1:, :1] & mp[:1, 1:] & mp[0, 0]).astype(float)
        self.M, self.N = self.F0.shape
        if self.M < K + 1 or self.N < K:
            raise MatrixTooSmall(f"Rank-{K} refinement needs at least {K + 2} microphones and {K + 1} columns")
        self.n_global = 1 + K * (self.M - K)
        self.n_params = self.N + 1 + K * (self.M - K) + K * self.N

    # -- model --------------------------------------------------------------

    def F(self, o: np.ndarray) -> np.ndarray:
        return self.F0 + self.A * o[None, 1:] - self.b[:, None] * o[0]

    def residual_matrix(self, o: np.ndarray, Q: np.ndarray, W: np.ndarray) -> np.ndarray:
        return (self.F(o) - Q[:, :self.K] @ W) * self.omega

    def cost(self, o, Q, W) -> float:
        return 0.5 * float(np.sum(self.residual_matrix(o, Q, W) ** 2))

    def generator(self, z: np.ndarray) -> np.ndarray:
        K, M = self.K, self.M
        Z = np.zeros((M, M))
        block = z.reshape(K, M - K)
        Z[K:, :K] = block.T
        Z[:K, K:] = -block
        return Z

    def initial_state(self, o: np.ndarray, impute_iterations: int = 100) -> Tuple[np.ndarray, np.ndarray]:
        """Q, W from a truncated SVD of F(o), missing entries filled by hard impute."""
        F = self.F(o)
        observed = self.omega > 0
        column_mean = np.where(observed.any(axis=0),
                               np.sum(F * self.omega, axis=0) / np.maximum(observed.sum(axis=0), 1), 0.0)
        X = np.where(observed, F, column_mean[None, :])
        if not observed.all():
            for _ in range(impute_iterations):
                u, s, vt = np.linalg.svd(X, full_matrices=False)
                low = (u[:, :self.K] * s[:self.K]) @ vt[:self.K]
                X = np.where(observed, F, low)
        u, s, vt = np.linalg.svd(X, full_matrices=True)
        return u, s[:self.K, None] * vt[:self.K]

    # -- derivatives ----------------------------------------------------------

    def blocks(self, Q: np.ndarray, W: np.ndarray):
        """Per-column local Jacobian (y_j, W[:, j]) and the global Jacobian (y_ref, z)."""
        K, M, N = self.K, self.M, self.N
        weight = self.omega[:, :, None]
        local = np.empty((M, N, K + 1))
        local[:, :, 0] = self.A
        local[:, :, 1:] = -Q[:, None, :K]
        local *= weight
        glob = np.empty((M, N, self.n_global))
        glob[:, :, 0] = -self.b[:, None]
        glob[:, :, 1:] = -np.einsum("iq,pc->icpq", Q[:, K:], W).reshape(M, N, K * (M - K))
        glob *= weight
        return local, glob

    def apply(self, o, Q, W, delta_local, delta_global):
        o_new = o.copy()
        o_new[0] += delta_global[0]
        o_new[1:] += delta_local[:, 0]
        Q_new = Q @ expm(self.generator(delta_global[1:]))
        W_new = W + delta_local[:, 1:].T
        return o_new, Q_new, W_new

    # -- flat views for derivative checks -----------------------------------

    def unflatten(self, x: np.ndarray):
        K, N = self.K, self.N
        y = x[:N + 1]
        z = x[N + 1:N + 1 + K * (self.M - K)]
        w = x[N + 1 + K * (self.M - K):].reshape(K, N)
        return y, z, w

    def residual_at(self, o, Q, W, x: np.ndarray) -> np.ndarray:
        """Observed residuals after the local perturbation x = (y, z, w)."""
        y, z, w = self.unflatten(x)
        r = self.residual_matrix(o + y, Q @ expm(self.generator(z)), W + w)
        return r[self.omega > 0]

    def jacobian(self, o, Q, W) -> np.ndarray:
        """Dense Jacobian of residual_at at x = 0."""
        K, M, N = self.K, self.M, self.N
        local, glob = self.blocks(Q, W)
        J = np.zeros((M, N, self.n_params))
        J[:, :, 0] = glob[:, :, 0]
        for c in range(N):
            J[:, c, 1 + c] = local[:, c, 0]
            for p in range(K):
                J[:, c, N + 1 + K * (M - K) + p * N + c] = local[:, c, 1 + p]
        J[:, :, N + 1:N + 1 + K * (M - K)] = glob[:, :, 1:]
        return J[self.omega > 0]


def rank_optimize(
    U: np.ndarray,
    mask: np.ndarray,
    o_init: np.ndarray,
    K: int = 3,
    max_iter: int = 200,
    tolerance: float = 1e-12,
    max_failures: int = 10,
    reference: Optional[int] = None,
) -> RankRefinement:
    """
    Damped Gauss-Newton on offsets and the rank-K approximant.

    Stops when an accepted step lowers the objective by less than `tolerance`
    relative, or after max_iter iterations. The objective never increases.

    Raises:
        Diverged: max_failures consecutive damped steps all raised the objective
    """
    problem = RankProblem(U, mask, K, reference)
    o = np.asarray(o_init, dtype=float)[problem.order].copy()
    if not np.all(np.isfinite(o)):
        raise ValueError("rank_optimize needs finite initial offsets")
    Q, W = problem.initial_state(o)
    cost = problem.cost(o, Q, W)
    scale = 0.5 * float(np.sum((problem.F0 * problem.omega) ** 2)) + 1e-300
    history = [cost]
    damping = None
    converged = cost <= 1e-30 * scale
    iterations = 0

    while not converged and iterations < max_iter:
        iterations += 1
        r = problem.residual_matrix(o, Q, W)
        local, glob = problem.blocks(Q, W)
        H_ll = np.einsum("icp,icq->cpq", local, local)
        H_lg = np.einsum("icp,icq->cpq", local, glob)
        H_gg = np.einsum("icp,icq->pq", glob, glob)
        g_l = np.einsum("icp,ic->cp", local, r)
        g_g = np.einsum("icp,ic->p", glob, r)
        if damping is None:
            damping = 1e-3 * max(float(np.max(np.diagonal(H_ll, axis1=1, axis2=2))),
                                 float(np.max(np.diag(H_gg))), 1e-300)

        accepted = False
        trial_costs = []
        for _ in range(max_failures):
            eye_l = damping * np.eye(K + 1)
            H_inv = np.linalg.inv(H_ll + eye_l)
            schur = H_gg + damping * np.eye(problem.n_global) - np.einsum("cpg,cpq,cqh->gh", H_lg, H_inv, H_lg)
            rhs = -g_g + np.einsum("cpg,cpq,cq->g", H_lg, H_inv, g_l)
            try:
                delta_g = np.linalg.solve(schur, rhs)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            delta_l = np.einsum("cpq,cq->cp", H_inv, -g_l - np.einsum("cpg,g->cp", H_lg, delta_g))
            o_new, Q_new, W_new = problem.apply(o, Q, W, delta_l, delta_g)
            new_cost = problem.cost(o_new, Q_new, W_new)
            trial_costs.append(new_cost)
            if np.isfinite(new_cost) and new_cost < cost:
                accepted = True
                break
            damping *= 10.0

        if not accepted:
            if trial_costs and min(trial_costs) <= cost * (1.0 + 1e-10) + 1e-30 * scale:
                converged = True
                break
            raise Diverged(f"Rank refinement: {max_failures} damped steps raised the objective")

        decrease = (cost - new_cost) / max(cost, 1e-300)
        o, Q, W, cost = o_new, Q_new, W_new, new_cost
        history.append(cost)
        damping = max(damping / 10.0, 1e-15)
        logger.debug(f"Rank refinement iteration {iterations}: cost {cost:.6e}")
        if decrease < tolerance or cost <= 1e-30 * scale:
            converged = True

    offsets = np.empty_like(o)
    offsets[problem.order] = o
    approximant = Q[:, :K] @ W
    logger.info(f"Rank refinement: cost {history[0]:.3e} -> {cost:.3e} in {iterations} iterations")
    return RankRefinement(
        offsets=offsets,
        approximant=approximant,
        reference=problem.reference,
        other_columns=problem.order[1:],
        cost=cost,
        iterations=iterations,
        converged=converged,
        history=history,
    )
