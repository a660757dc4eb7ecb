"""
Per-column time offsets from the rank constraint on the compaction matrix.

With d_ij = u_ij^2 - 2 u_ij o_j, the double compaction
F_ij = -(d_ij - d_i1 - d_1j + d_11) / 2 equals (r_i - r_1)^T (s_j - s_1) for
the true offsets, so F has rank 3 (rank 2 for planar layouts). Each entry of
F is affine in o:

    F_ij = F0_ij + (u_ij - u_1j) o_j - (u_i1 - u_11) o_1

Minimal solvers find all offsets making a small F rank deficient; RANSAC
scores them on the full matrix through a provisional geometry.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.calibration.geometry_solver import (
    factorize,
    locate_sources,
    refine_point,
    solve_upgrade,
    trilaterate_linear,
    upgrade_positions,
)
from src.core.exceptions import (
    CalibrationError,
    DegenerateInstance,
    InsufficientData,
    MatrixTooSmall,
    NoConsensus,
)
from src.core.model import TdoaMatrix
from src.core.seeding import SeedLike, as_generator

logger = logging.getLogger(__name__)

RANK_SATISFIED = 1e-6
IMAG_TOLERANCE = 1e-6
VALIDITY_SLACK = 1e-9


@dataclass(frozen=True)
class MinimalCase:
    """Minimal problem: rank K with m receivers and n sound events."""
    K: int
    m: int
    n: int
    max_solutions: int

    @property
    def label(self) -> str:
        return f"{self.m}r/{self.n}s"

    @property
    def is_linear(self) -> bool:
        return self.n - 1 == self.K + 1 and self.m - 1 >= 2 * (self.n - 1)

    def to_dict(self) -> Dict[str, int]:
        return {"K": self.K, "m": self.m, "n": self.n}


MINIMAL_CASES: Tuple[MinimalCase, ...] = (
    MinimalCase(3, 9, 5, 1),
    MinimalCase(3, 7, 6, 5),
    MinimalCase(3, 6, 8, 14),
    MinimalCase(2, 7, 4, 1),
    MinimalCase(2, 5, 6, 5),
)


@dataclass(frozen=True)
class CompactionPair:
    D: np.ndarray
    F: np.ndarray


@dataclass
class OffsetSolution:
    """
    Offsets for the consensus columns; other entries are NaN.

    residual is the rank residual for minimal solutions and the RMS geometric
    residual (meters) over inlier entries for RANSAC results.
    """
    offsets: np.ndarray
    valid: bool
    inlier_columns: np.ndarray
    residual: float
    case: Optional[MinimalCase] = None
    mics: Optional[np.ndarray] = None
    sources: Optional[np.ndarray] = None
    iterations: int = 0
    extras: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "offsets": [None if not np.isfinite(o) else float(o) for o in self.offsets],
            "inlier_columns": [int(j) for j in self.inlier_columns],
            "residual": float(self.residual),
            "case": self.case.to_dict() if self.case else None,
        }


def select_case(m: int, K: int = 3, name: Union[str, Sequence[int], None] = "auto") -> MinimalCase:
    """
    Pick a minimal case for m available rows.

    `name` is "auto", a label such as "7r/6s", or a (K, m, n) triple. Auto
    prefers the single-solution cases, then fewer solutions.
    """
    if name not in (None, "auto"):
        for case in MINIMAL_CASES:
            if name == case.label and case.K == K:
                return case
            if not isinstance(name, str) and tuple(name) == (case.K, case.m, case.n):
                return case
        raise ValueError(f"Unknown minimal case {name!r} for K={K}")
    usable = [c for c in MINIMAL_CASES if c.K == K and c.m <= m]
    if not usable:
        raise InsufficientData(f"No rank-{K} minimal case fits {m} microphones")
    return min(usable, key=lambda c: (c.max_solutions, c.n))


# ============================================
# Compaction and rank
# ============================================

def compaction(U: np.ndarray, o: np.ndarray) -> CompactionPair:
    """D = U^2 - 2 U o (column-wise o) and its double compaction F."""
    U = np.asarray(U, dtype=float)
    o = np.asarray(o, dtype=float)
    D = U ** 2 - 2.0 * U * o[None, :]
    F = -(D[1:, 1:] - D[1:, :1] - D[:1, 1:] + D[0, 0]) / 2.0
    return CompactionPair(D=D, F=F)


def compaction_terms(U: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(F0, A, b) with F(o) = F0 + A * o[1:] - b o[0]."""
    U = np.asarray(U, dtype=float)
    V = U ** 2
    F0 = -(V[1:, 1:] - V[1:, :1] - V[:1, 1:] + V[0, 0]) / 2.0
    A = U[1:, 1:] - U[:1, 1:]
    b = U[1:, 0] - U[0, 0]
    return F0, A, b


def rank_residual(F: np.ndarray, K: int) -> float:
    """
    sigma_{K+1}(F) / sigma_K(F).

    Raises:
        MatrixTooSmall: F smaller than (K+1) x (K+1)
    """
    F = np.asarray(F, dtype=float)
    if min(F.shape) < K + 1:
        raise MatrixTooSmall(f"Rank-{K} residual needs a {K + 1}x{K + 1} matrix, got {F.shape}")
    sigma = np.linalg.svd(F, compute_uv=False)
    if sigma[K - 1] == 0:
        return 0.0 if sigma[K] == 0 else float("inf")
    return float(sigma[K] / sigma[K - 1])


def filter_valid_offsets(
    candidates: Sequence[Any],
    U_sub: np.ndarray,
    mask: Optional[np.ndarray] = None,
    slack: float = VALIDITY_SLACK,
) -> List[OffsetSolution]:
    """
    Keep real candidates with u_ij >= o_j - slack on observed entries.

    Candidates may be offset vectors (possibly complex) or OffsetSolutions.
    """
    U_sub = np.asarray(U_sub, dtype=float)
    observed = np.isfinite(U_sub) if mask is None else np.asarray(mask, dtype=bool)
    kept: List[OffsetSolution] = []
    for candidate in candidates:
        base = candidate if isinstance(candidate, OffsetSolution) else None
        o = np.asarray(base.offsets if base else candidate)
        if np.iscomplexobj(o):
            if np.max(np.abs(o.imag)) > IMAG_TOLERANCE:
                continue
            o = o.real
        o = o.astype(float)
        if not np.all(np.isfinite(o)):
            continue
        if np.any((U_sub < o[None, :] - slack) & observed):
            continue
        if base is not None:
            base.offsets, base.valid = o, True
            kept.append(base)
        else:
            kept.append(OffsetSolution(offsets=o, valid=True,
                                       inlier_columns=np.arange(len(o)), residual=float("nan")))
    return kept


# ============================================
# Minimal solvers
# ============================================

def _solve_linear(U_sub: np.ndarray, case: MinimalCase) -> List[np.ndarray]:
    """
    Single-solution cases: the K + 1 columns of F have a null combination
    lambda. Substituting mu_j = lambda_j o_j and nu = o_1 sum(lambda) makes
    sum_j lambda_j f_j(o) = 0 linear in (lambda, mu, nu).
    """
    F0, A, b = compaction_terms(U_sub)
    N = F0.shape[1]
    S = np.hstack([F0, A, -b[:, None]])
    scale = np.linalg.norm(S, axis=0)
    scale[scale == 0] = 1.0
    _, sigma, Vt = np.linalg.svd(S / scale, full_matrices=True)
    padded = np.r_[sigma, np.zeros(S.shape[1] - len(sigma))]
    if padded[-2] < 1e-10 * padded[0]:
        raise DegenerateInstance(f"Minimal instance {case.label} has a degenerate null space")
    z = Vt[-1] / scale
    lam, mu, nu = z[:N], z[N:2 * N], z[2 * N]
    if np.min(np.abs(lam)) < 1e-10 * np.max(np.abs(lam)) or abs(lam.sum()) < 1e-12 * np.max(np.abs(lam)):
        raise DegenerateInstance(f"Minimal instance {case.label} has a vanishing column weight")
    return [np.r_[nu / lam.sum(), mu / lam]]


# Continuation of the reduced system from a product start system. The
# unknowns are o_1 and the offsets of the first K compaction columns; every
# other column j has to fall into the span of those K columns, which after
# eliminating o_j reads rank [c_1 .. c_K, p_j, a_j] <= K + 1. The minors of
# that matrix are affine in each unknown separately, so a start system of
# products of K + 1 linear factors reaches every isolated root.

STEP_INITIAL = 0.02
STEP_MAX = 0.1
STEP_MIN = 1e-10
MAX_STEPS = 400
CORRECTOR_STEPS = 3
FIRST_CORRECTION = 0.1
TRACK_TOLERANCE = 1e-6
DIVERGENCE_LIMIT = 1e6
POLISH_STEPS = 3
SINGULAR_ROOT = 1e-8
ROOT_BOUND = 1e3
BASIS_CONDITION = 1e-6

_RUNNING, _FINISHED, _FAILED = 0, 1, -1


def _subsets(n: int) -> np.ndarray:
    """All 2^n subsets of n variables as boolean rows."""
    return np.array(list(itertools.product((False, True), repeat=n)), dtype=bool)


def _monomials(x: np.ndarray, subsets: np.ndarray) -> np.ndarray:
    return np.prod(np.where(subsets[None], x[:, None, :], 1.0), axis=2)


def _monomial_jacobian(x: np.ndarray, subsets: np.ndarray) -> np.ndarray:
    n = subsets.shape[1]
    others = subsets[:, None, :] & ~np.eye(n, dtype=bool)[None]
    partial = np.prod(np.where(others[None], x[:, None, None, :], 1.0), axis=3)
    return np.where(subsets[None], partial, 0.0)


def _batched_solve(J: np.ndarray, r: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(J, r[..., None])[..., 0]
    except np.linalg.LinAlgError:
        return (np.linalg.pinv(J) @ r[..., None])[..., 0]


def _admits_lower_rank(U_sub: np.ndarray, case: MinimalCase) -> bool:
    """
    True when offsets exist that bring F down to rank K - 1 (microphones or
    sources spanning a plane in a rank-3 case). Checked through the linear
    rank K - 1 case on the leading block, then the remaining rows and columns.
    """
    lower = [c for c in MINIMAL_CASES
             if c.K == case.K - 1 and c.is_linear and c.m <= case.m and c.n <= case.n]
    if not lower:
        return False
    sub = lower[0]
    try:
        head = _solve_linear(U_sub[:sub.m, :sub.n], sub)[0]
    except DegenerateInstance:
        return True
    F0, A, b = compaction_terms(U_sub)
    F_head = F0[:, :sub.n - 1] + A[:, :sub.n - 1] * head[None, 1:] - b[:, None] * head[0]
    if rank_residual(F_head, sub.K) >= RANK_SATISFIED:
        return False
    W = np.linalg.svd(F_head, full_matrices=False)[0][:, :sub.K]
    for j in range(sub.n - 1, F0.shape[1]):
        p = F0[:, j] - b * head[0]
        pp, pa = p - W @ (W.T @ p), A[:, j] - W @ (W.T @ A[:, j])
        if pa @ pa == 0:
            return False
        o_j = -(pa @ pp) / (pa @ pa)
        column = p + o_j * A[:, j]
        if np.linalg.norm(pp + o_j * pa) > RANK_SATISFIED * max(float(np.linalg.norm(column)), 1e-300):
            return False
    return True


class _ReducedSystem:
    """Multiaffine equations in x = (o_1, o_B) for one minimal instance."""

    def __init__(self, U_sub: np.ndarray, case: MinimalCase, rng: np.random.Generator):
        self.F0, self.A, self.b = compaction_terms(U_sub)
        self.K = case.K
        self.M, self.N = self.F0.shape
        self.n = self.K + 1
        self.subsets = _subsets(self.n)

        excess = self.M - self.K - 1
        equations = []
        for j in range(self.K, self.N):
            if excess == 1:
                equations.append((j, np.eye(self.M)))
            else:
                equations.extend((j, rng.standard_normal((self.K + 2, self.M))) for _ in range(excess))
        if len(equations) != self.n:
            raise ValueError(f"{case.label} does not reduce to a square system")

        vertices = self.subsets.astype(float)
        values = np.array([
            np.linalg.det(R[None] @ self.columns(vertices, j))
            for j, R in equations
        ])
        coefficients = np.linalg.solve(_monomials(vertices, self.subsets), values.T).T
        norms = np.linalg.norm(coefficients, axis=1)
        if np.any(norms < 1e-14 * max(float(norms.max()), 1e-300)):
            raise DegenerateInstance(f"Minimal instance {case.label} has a vanishing equation")
        self.coefficients = coefficients / norms[:, None]

    def basis(self, x: np.ndarray) -> np.ndarray:
        """The K leading compaction columns for each row of x, shape (P, M, K)."""
        return self.F0[None, :, :self.K] + self.A[None, :, :self.K] * x[:, None, 1:] - self.b[None, :, None] * x[:, None, :1]

    def columns(self, x: np.ndarray, j: int) -> np.ndarray:
        """[c_1 .. c_K, p_j, a_j] for each row of x."""
        p = self.F0[None, :, j] - self.b[None, :] * x[:, :1]
        a = np.broadcast_to(self.A[:, j], p.shape)
        return np.concatenate([self.basis(x), p[:, :, None], a[:, :, None]], axis=2)

    def evaluate(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        f = _monomials(x, self.subsets) @ self.coefficients.T
        fx = np.einsum("ks,psi->pki", self.coefficients, _monomial_jacobian(x, self.subsets))
        return f, fx

    def polish(self, x: np.ndarray) -> np.ndarray:
        """Newton on f at t = 1; rows that blow up keep their tracked value."""
        if len(x) == 0:
            return x
        start = x
        for _ in range(POLISH_STEPS):
            f, fx = self.evaluate(x)
            x = x + _batched_solve(fx, -f)
        bad = ~np.all(np.isfinite(x), axis=1)
        x[bad] = start[bad]
        return x

    def basis_condition(self, x: np.ndarray) -> float:
        sigma = np.linalg.svd(self.basis(x[None])[0], compute_uv=False)
        return float(sigma[-1] / sigma[0]) if sigma[0] > 0 else 0.0

    def offsets(self, x: np.ndarray) -> Optional[np.ndarray]:
        """Full real offset vector, each extra o_j read off the null vector of its block."""
        o = np.empty(self.N + 1)
        o[:self.n] = x
        for j in range(self.K, self.N):
            z = np.linalg.svd(self.columns(x[None], j)[0])[2][-1]
            if abs(z[self.K]) < 1e-9 * np.max(np.abs(z)):
                return None
            o[j + 1] = z[self.K + 1] / z[self.K]
        return o


def _track_paths(system: _ReducedSystem, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Track H = (1 - t) gamma g + t f from t = 0 to 1 for all (K+1)! start roots
    at once. Returns the endpoints and a mask of paths that reached t = 1.
    """
    n = system.n
    targets = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    gamma = np.exp(2j * np.pi * rng.uniform())
    order = list(itertools.permutations(range(n)))
    x = np.zeros((len(order), n), dtype=complex)
    for p, perm in enumerate(order):
        for k, i in enumerate(perm):
            x[p, i] = targets[k, i]

    others = ~np.eye(n, dtype=bool)

    def homotopy(xs, ts):
        f, fx = system.evaluate(xs)
        diffs = xs[:, None, :] - targets[None]
        g = np.prod(diffs, axis=2)
        gx = np.prod(np.where(others[None, None], diffs[:, :, None, :], 1.0), axis=3)
        s = ts[:, None]
        H = (1.0 - s) * gamma * g + s * f
        Hx = (1.0 - s)[:, :, None] * gamma * gx + s[:, :, None] * fx
        return H, Hx, f - gamma * g

    t = np.zeros(len(x))
    dt = np.full(len(x), STEP_INITIAL)
    state = np.full(len(x), _RUNNING)
    for _ in range(MAX_STEPS):
        run = np.flatnonzero(state == _RUNNING)
        if len(run) == 0:
            break
        xs, ts = x[run], t[run]
        h = np.minimum(dt[run], 1.0 - ts)
        _, Hx, Ht = homotopy(xs, ts)
        xp = xs + h[:, None] * _batched_solve(Hx, -Ht)
        tp = ts + h
        first = last = None
        for _ in range(CORRECTOR_STEPS):
            H, Hx, _ = homotopy(xp, tp)
            delta = _batched_solve(Hx, -H)
            xp = xp + delta
            last = np.linalg.norm(delta, axis=1)
            first = last if first is None else first
        size = 1.0 + np.linalg.norm(xp, axis=1)
        ok = np.isfinite(last) & (first <= FIRST_CORRECTION * size) & (last <= TRACK_TOLERANCE * size)

        accepted, rejected = run[ok], run[~ok]
        x[accepted], t[accepted] = xp[ok], tp[ok]
        dt[accepted] = np.minimum(2.0 * dt[accepted], STEP_MAX)
        dt[rejected] *= 0.5
        state[accepted[t[accepted] >= 1.0 - 1e-12]] = _FINISHED
        state[accepted[np.linalg.norm(x[accepted], axis=1) > DIVERGENCE_LIMIT]] = _FAILED
        state[rejected[dt[rejected] < STEP_MIN]] = _FAILED
    return x, state == _FINISHED


def _distinct(points: List[np.ndarray]) -> bool:
    for a, b in itertools.combinations(points, 2):
        if np.linalg.norm(a - b) <= 1e-6 * (1.0 + np.linalg.norm(a)):
            return False
    return True


def _solve_homotopy(U_sub: np.ndarray, case: MinimalCase, rng: np.random.Generator) -> List[np.ndarray]:
    scale = max(float(np.max(np.abs(U_sub))), 1e-12)
    system = _ReducedSystem(U_sub / scale, case, rng)
    for attempt in range(2):
        ends, finished = _track_paths(system, rng)
        roots = []
        for x in system.polish(ends[finished]):
            if not np.all(np.isfinite(x)) or system.basis_condition(x) < BASIS_CONDITION:
                continue
            sigma = np.linalg.svd(system.evaluate(x[None])[1][0], compute_uv=False)
            if np.linalg.norm(x) <= ROOT_BOUND and sigma[-1] < SINGULAR_ROOT * sigma[0]:
                raise DegenerateInstance(f"Minimal instance {case.label} has a singular root")
            roots.append(x)
        if _distinct(roots):
            break
        # two paths met at one regular root, so another root was skipped
        logger.debug(f"Minimal solve {case.label}: paths merged, retracking (attempt {attempt + 1})")

    offsets = []
    for x in roots:
        if np.max(np.abs(x.imag)) > IMAG_TOLERANCE * (1.0 + np.linalg.norm(x)):
            continue
        o = system.offsets(x.real)
        if o is not None:
            offsets.append(o * scale)
    return offsets


def solve_minimal(U_sub: np.ndarray, case: MinimalCase, seed: SeedLike = None) -> List[OffsetSolution]:
    """
    All real offset vectors making F(U_sub, o) rank K, at most case.max_solutions.

    The single-solution cases are solved by linear elimination; the others by
    homotopy continuation on the reduced system, which is non-iterative in
    the sense that the number of tracked paths is fixed by the case.

    Raises:
        DegenerateInstance: the instance is rank deficient at a root, or no
            real root satisfies the rank constraint
    """
    U_sub = np.asarray(U_sub, dtype=float)
    if U_sub.shape != (case.m, case.n) or not np.all(np.isfinite(U_sub)):
        raise ValueError(f"solve_minimal needs a dense {case.m}x{case.n} submatrix, got {U_sub.shape}")
    if _admits_lower_rank(U_sub, case):
        raise DegenerateInstance(f"Minimal instance {case.label} reaches rank {case.K - 1}: flat microphone or source span")
    if case.is_linear:
        roots = _solve_linear(U_sub, case)
    else:
        roots = _solve_homotopy(U_sub, case, as_generator(seed))

    solutions = []
    for o in roots:
        residual = rank_residual(compaction(U_sub, o).F, case.K)
        if residual < RANK_SATISFIED:
            solutions.append(OffsetSolution(offsets=o, valid=False, inlier_columns=np.arange(case.n),
                                            residual=residual, case=case))
    if not solutions:
        raise DegenerateInstance(f"Minimal instance {case.label} has no real root satisfying the rank")
    solutions = filter_valid_offsets(solutions, U_sub)
    solutions.sort(key=lambda s: s.residual)
    if not solutions:
        logger.debug(f"Minimal solve {case.label}: no valid real solution")
    return solutions[:case.max_solutions]


# ============================================
# RANSAC
# ============================================

@dataclass
class _Hypothesis:
    inliers: np.ndarray
    rms: float
    offsets: np.ndarray
    mics: Optional[np.ndarray] = None
    sources: Optional[np.ndarray] = None

    @property
    def key(self) -> Tuple[int, float]:
        return len(self.inliers), -self.rms


def _score_geometric(tdoa: TdoaMatrix, rows: np.ndarray, cols: np.ndarray, o_sub: np.ndarray,
                     epsilon: float, min_observations: int, upgrade_starts: int,
                     rng: np.random.Generator) -> Optional[_Hypothesis]:
    U_sub = tdoa.U[np.ix_(rows, cols)]
    try:
        fact = factorize(compaction(U_sub, o_sub).F)
        up = solve_upgrade(fact, -o_sub + U_sub[0], U_sub[:, 0] - o_sub[0],
                           use_source_equations=True, starts=upgrade_starts, seed=rng)
    except CalibrationError as exc:
        logger.debug(f"Hypothesis rejected during provisional geometry: {exc}")
        return None
    mics_sub, sources_sub = upgrade_positions(fact, up)

    mics = np.full((tdoa.m, 3), np.nan)
    mics[rows] = mics_sub
    for i in range(tdoa.m):
        if i in rows:
            continue
        seen = tdoa.mask[i, cols]
        if seen.sum() >= 5:
            distances = tdoa.U[i, cols][seen] - o_sub[seen]
            guess = trilaterate_linear(sources_sub[seen], distances)
            mics[i] = refine_point(sources_sub[seen], distances, guess)

    sources, offsets, residuals = locate_sources(mics, tdoa.U, tdoa.mask)
    observed = np.isfinite(residuals)
    worst = np.where(observed, np.abs(residuals), 0.0).max(axis=0)
    valid = np.all(~observed | (tdoa.U >= offsets[None, :] - VALIDITY_SLACK), axis=0)
    inliers = np.flatnonzero((observed.sum(axis=0) >= min_observations) & (worst <= epsilon) & valid)
    if len(inliers) == 0:
        return None
    rms = float(np.sqrt(np.nanmean(residuals[:, inliers] ** 2)))
    return _Hypothesis(inliers=inliers, rms=rms, offsets=offsets, mics=mics, sources=sources)


def _score_subspace(tdoa: TdoaMatrix, rows: np.ndarray, cols: np.ndarray, o_sub: np.ndarray,
                    epsilon: float) -> Optional[_Hypothesis]:
    """Planar arrays: distance of each column to the rank-2 column space, in meters."""
    U_sub = tdoa.U[np.ix_(rows, cols)]
    F = compaction(U_sub, o_sub).F
    Q = np.linalg.svd(F, full_matrices=False)[0][:, :2]
    P = np.eye(len(Q)) - Q @ Q.T

    j0, o0 = cols[0], o_sub[0]
    testable = np.flatnonzero(tdoa.mask[rows].all(axis=0))
    Ur = tdoa.U[np.ix_(rows, testable)]
    ref = tdoa.U[rows, j0]
    F0 = -(Ur[1:] ** 2 - ref[1:, None] ** 2 - Ur[:1] ** 2 + ref[0] ** 2) / 2.0
    a = Ur[1:] - Ur[:1]
    g = F0 - (ref[1:] - ref[0])[:, None] * o0
    pa, pg = P @ a, P @ g
    denom = np.sum(pa * pa, axis=0)
    o = np.where(denom > 0, -np.sum(pa * pg, axis=0) / np.where(denom > 0, denom, 1.0), np.nan)
    residual = pg + pa * o[None, :]
    distance = np.maximum(Ur[1:] - o[None, :], 0.1)
    meters = np.abs(residual) / distance
    worst = meters.max(axis=0)
    valid = np.all(Ur >= o[None, :] - VALIDITY_SLACK, axis=0)
    good = np.isfinite(worst) & (worst <= epsilon) & valid
    good |= testable == j0
    o = np.where(testable == j0, o0, o)
    inliers = testable[good]
    if len(inliers) == 0:
        return None
    offsets = np.full(tdoa.n, np.nan)
    offsets[inliers] = o[good]
    rms = float(np.sqrt(np.mean(meters[:, good] ** 2)))
    return _Hypothesis(inliers=inliers, rms=rms, offsets=offsets)


def ransac_offsets(
    tdoa: TdoaMatrix,
    case: MinimalCase,
    epsilon: float = 0.02,
    iterations: int = 500,
    seed: SeedLike = None,
    confidence: float = 0.99,
    upgrade_starts: int = 5,
    min_observations: int = 5,
) -> OffsetSolution:
    """
    Robust offsets: minimal solves on jointly observed row x column samples,
    scored by how many columns a provisional geometry explains within epsilon.

    Rank-3 hypotheses are extended to all microphones by trilateration from the
    sampled sources, then every column's source and offset are located and the
    column counts as an inlier when all its observed residuals are <= epsilon.
    Rank-2 hypotheses use a column-space test instead. The loop stops early once
    the usual confidence bound on the inlier ratio is met.

    Raises:
        InsufficientData: fewer rows or jointly observed columns than the case needs
        NoConsensus: best consensus below n_req + 2 columns
    """
    rng = as_generator(seed)
    if tdoa.m < case.m:
        raise InsufficientData(f"{case.label} needs {case.m} microphones, have {tdoa.m}")
    counts = tdoa.mask.sum(axis=0)
    eligible = np.flatnonzero(tdoa.mask[0] & (tdoa.mask[1:].sum(axis=0) >= case.m - 1))
    if len(eligible) < case.n:
        raise InsufficientData(f"{case.label} needs {case.n} columns with {case.m} observations, have {len(eligible)}")
    testable = max(int(np.sum(counts >= min_observations)), 1)

    best: Optional[_Hypothesis] = None
    needed, done, attempts = iterations, 0, 0
    while done < needed and attempts < 10 * iterations:
        attempts += 1
        j0 = int(rng.choice(eligible))
        available = np.flatnonzero(tdoa.mask[1:, j0]) + 1
        rows = np.r_[0, np.sort(rng.choice(available, case.m - 1, replace=False))]
        joint = eligible[(eligible != j0) & tdoa.mask[np.ix_(rows, eligible)].all(axis=0)]
        if len(joint) < case.n - 1:
            continue
        cols = np.r_[j0, rng.choice(joint, case.n - 1, replace=False)]
        done += 1
        try:
            solutions = solve_minimal(tdoa.U[np.ix_(rows, cols)], case, seed=rng)
        except DegenerateInstance as exc:
            logger.debug(f"RANSAC iteration {done}: {exc}")
            continue
        for solution in solutions:
            if case.K == 3:
                hypothesis = _score_geometric(tdoa, rows, cols, solution.offsets, epsilon,
                                              min_observations, upgrade_starts, rng)
            else:
                hypothesis = _score_subspace(tdoa, rows, cols, solution.offsets, epsilon)
            if hypothesis is not None and (best is None or hypothesis.key > best.key):
                best = hypothesis
        if best is not None:
            ratio = min(len(best.inliers) / testable, 1.0)
            if ratio >= 1.0:
                needed = done
            elif ratio > 0:
                bound = math.log(1.0 - confidence) / math.log(1.0 - ratio ** case.n)
                needed = min(iterations, max(int(math.ceil(bound)), 1))

    if best is None or len(best.inliers) < case.n + 2:
        found = 0 if best is None else len(best.inliers)
        raise NoConsensus(f"RANSAC found {found} inlier columns, need {case.n + 2}")

    offsets = np.full(tdoa.n, np.nan)
    offsets[best.inliers] = best.offsets[best.inliers]
    logger.info(
        f"RANSAC {case.label}: {len(best.inliers)}/{tdoa.n} inlier columns after {done} iterations "
        f"(rms {best.rms:.4f} m)"
    )
    return OffsetSolution(
        offsets=offsets,
        valid=True,
        inlier_columns=best.inliers,
        residual=best.rms,
        case=case,
        mics=best.mics,
        sources=best.sources,
        iterations=done,
    )
