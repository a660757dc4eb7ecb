"""
Metric geometry from offset-corrected distances.

With r_1 at the origin the double-compacted matrix factors as
F_ij = (r_i - r_1)^T (s_j - s_1) = R~_i^T S~_j. The remaining ambiguity is a
triangular L and a vector b:

    r_1 = 0,  s_1 = L b,  r_i = L^-T R~_i,  s_j = L (S~_j + b)

with H = (L^T L)^-1 and b recovered from the border distances d_i1, d_1j.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares
from scipy.sparse import coo_matrix

from src.core.exceptions import (
    AmbiguousMirror,
    DegenerateConfiguration,
    DegenerateGeometry,
    Diverged,
    IndefiniteH,
    InsufficientEquations,
    MatrixTooSmall,
    NoIntersection,
    RankDeficient,
)
from src.core.model import TdoaMatrix, Vec3
from src.core.seeding import SeedLike, as_generator

logger = logging.getLogger(__name__)

RANK_TOLERANCE = 1e-10
PD_TOLERANCE = 1e-12
DENSE_SOLVER_LIMIT = 600
_SYM_INDEX = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


@dataclass(frozen=True)
class Factorization:
    """Rank-3 split F ~ Rt^T St."""
    Rt: np.ndarray
    St: np.ndarray
    residual: float


@dataclass(frozen=True)
class Upgrade:
    """H = (L^T L)^-1 positive definite, L upper triangular."""
    H: np.ndarray
    b: np.ndarray
    L: np.ndarray


@dataclass
class BundleResult:
    mics: np.ndarray
    sources: np.ndarray
    offsets: np.ndarray
    residuals: np.ndarray
    cost: float
    initial_cost: float
    nfev: int
    status: int

    @property
    def rms(self) -> float:
        values = self.residuals[np.isfinite(self.residuals)]
        return float(np.sqrt(np.mean(values ** 2))) if len(values) else 0.0


@dataclass
class Expansion:
    inlier_columns: np.ndarray
    mask: np.ndarray
    bundle: BundleResult
    admitted: List[int] = field(default_factory=list)


# ============================================
# Factorization and upgrade
# ============================================

def factorize(matrix: np.ndarray) -> Factorization:
    """
    Truncated rank-3 SVD, each factor taking sqrt of the singular values.

    Raises:
        MatrixTooSmall: fewer than 3 rows or columns
        RankDeficient: sigma_3 / sigma_1 < 1e-10 (planar or linear layouts)
    """
    B = np.asarray(matrix, dtype=float)
    if B.ndim != 2 or min(B.shape) < 3:
        raise MatrixTooSmall(f"factorize needs at least a 3x3 matrix, got {B.shape}")
    U, sigma, Vt = np.linalg.svd(B, full_matrices=False)
    if sigma[0] == 0 or sigma[2] / sigma[0] < RANK_TOLERANCE:
        raise RankDeficient(f"Compacted matrix has rank < 3 (sigma3/sigma1 = {sigma[2] / max(sigma[0], 1e-300):.2e})")
    root = np.sqrt(sigma[:3])
    Rt = (U[:, :3] * root).T
    St = root[:, None] * Vt[:3]
    return Factorization(Rt=Rt, St=St, residual=float(np.sqrt(np.sum(sigma[3:] ** 2))))


def _quadratic_rows(X: np.ndarray) -> np.ndarray:
    """Rows [x^2, 2xy, 2xz, y^2, 2yz, z^2] so that row . h = x^T H x."""
    x, y, z = X
    return np.column_stack([x * x, 2 * x * y, 2 * x * z, y * y, 2 * y * z, z * z])


def _symmetric(h: np.ndarray) -> np.ndarray:
    H = np.empty((3, 3))
    for value, (a, c) in zip(h, _SYM_INDEX):
        H[a, c] = H[c, a] = value
    return H


def _is_positive_definite(H: np.ndarray) -> bool:
    eig = np.linalg.eigvalsh(H)
    return bool(eig[0] > PD_TOLERANCE * max(abs(eig[-1]), 1e-300))


def _finish_upgrade(H: np.ndarray, b: np.ndarray) -> Upgrade:
    H = 0.5 * (H + H.T)
    if not _is_positive_definite(H):
        raise IndefiniteH(f"Upgrade matrix H is not positive definite (eigenvalues {np.linalg.eigvalsh(H)})")
    lower = np.linalg.cholesky(np.linalg.inv(H))
    return Upgrade(H=H, b=np.asarray(b, dtype=float), L=lower.T)


def solve_upgrade(
    fact: Factorization,
    d_row: np.ndarray,
    d_col: np.ndarray,
    use_source_equations: bool = True,
    starts: int = 20,
    seed: SeedLike = None,
) -> Upgrade:
    """
    Estimate H and b from the border distances.

    d_row[j] = ||s_j - r_1|| over all sources and d_col[i] = ||r_i - s_1|| over
    all microphones; NaN entries drop their equation. Microphone equations
    d_i1^2 - d_11^2 = R~_i^T H R~_i - 2 b^T R~_i are linear in (H, b); source
    equations d_1j^2 - d_11^2 = S~_j^T G S~_j + 2 g^T S~_j are linear in
    (G, g) = (H^-1, H^-1 b). When neither side has 9 equations on its own, the
    larger side's affine solution set is searched with multi-start least squares
    against the other side plus d_11^2 = b^T H^-1 b.

    Raises:
        InsufficientEquations: fewer than 9 usable equations
        IndefiniteH: the solution has no positive definite H
    """
    d_row = np.asarray(d_row, dtype=float)
    d_col = np.asarray(d_col, dtype=float)
    d11 = d_row[0] if np.isfinite(d_row[0]) else d_col[0]

    mic_ok = np.isfinite(d_col[1:])
    src_ok = np.isfinite(d_row[1:])
    mic_A = np.hstack([_quadratic_rows(fact.Rt[:, mic_ok]), -2.0 * fact.Rt[:, mic_ok].T])
    mic_y = d_col[1:][mic_ok] ** 2 - d11 ** 2
    src_A = np.hstack([_quadratic_rows(fact.St[:, src_ok]), 2.0 * fact.St[:, src_ok].T])
    src_y = d_row[1:][src_ok] ** 2 - d11 ** 2

    mic_rank = np.linalg.matrix_rank(mic_A) if len(mic_y) else 0
    src_rank = np.linalg.matrix_rank(src_A) if len(src_y) and use_source_equations else 0
    if mic_rank >= 9:
        x = np.linalg.lstsq(mic_A, mic_y, rcond=None)[0]
        return _finish_upgrade(_symmetric(x[:6]), x[6:])
    if src_rank >= 9:
        x = np.linalg.lstsq(src_A, src_y, rcond=None)[0]
        G = _symmetric(x[:6])
        if not _is_positive_definite(G):
            raise IndefiniteH("Source-side upgrade produced an indefinite H^-1")
        H = np.linalg.inv(G)
        return _finish_upgrade(H, H @ x[6:])
    if not use_source_equations or len(mic_y) + len(src_y) + 1 < 9:
        raise InsufficientEquations(
            f"Upgrade needs 9 equations, have {len(mic_y)} from microphones"
            + (f" and {len(src_y)} from sources" if use_source_equations else "")
        )
    return _hybrid_upgrade(mic_A, mic_y, src_A, src_y, d11, starts, seed)


def _hybrid_upgrade(mic_A, mic_y, src_A, src_y, d11, starts, seed) -> Upgrade:
    mic_side = len(mic_y) >= len(src_y)
    A, y = (mic_A, mic_y) if mic_side else (src_A, src_y)
    particular = np.linalg.lstsq(A, y, rcond=None)[0]
    _, sigma, Vt = np.linalg.svd(A)
    rank = int(np.sum(sigma > RANK_TOLERANCE * sigma[0])) if len(sigma) else 0
    null = Vt[rank:].T

    def unpack(t):
        x = particular + null @ t
        M = _symmetric(x[:6])
        if mic_side:
            return M, x[6:]
        H = np.linalg.inv(M)
        return H, H @ x[6:]

    def residual(t):
        x = particular + null @ t
        M = _symmetric(x[:6])
        try:
            M_inv = np.linalg.inv(M)
        except np.linalg.LinAlgError:
            return np.full(len(mic_y) + len(src_y) + 1, 1e6)
        if mic_side:
            b = x[6:]
            other = src_A @ np.r_[_upper(M_inv), M_inv @ b] - src_y
            closing = b @ M_inv @ b - d11 ** 2
        else:
            H, b = M_inv, M_inv @ x[6:]
            other = mic_A @ np.r_[_upper(H), b] - mic_y
            closing = x[6:] @ H @ x[6:] - d11 ** 2
        return np.r_[A @ x - y, other, closing]

    rng = as_generator(seed)
    scale = max(float(np.linalg.norm(particular)), 1.0)
    best, best_cost = None, np.inf
    for k in range(max(starts, 1)):
        t0 = np.zeros(null.shape[1]) if k == 0 else rng.standard_normal(null.shape[1]) * scale * 0.5
        if null.shape[1] == 0:
            t = t0
        else:
            t = least_squares(residual, t0, method="trf", xtol=1e-14, ftol=1e-14, gtol=1e-14,
                              max_nfev=200).x
        H, b = unpack(t)
        cost = float(np.sum(residual(t) ** 2))
        if np.all(np.isfinite(H)) and _is_positive_definite(0.5 * (H + H.T)) and cost < best_cost:
            best, best_cost = (H, b), cost
        if null.shape[1] == 0:
            break
    if best is None:
        raise IndefiniteH("No positive definite H found for the reduced upgrade problem")
    return _finish_upgrade(*best)


def _upper(M: np.ndarray) -> np.ndarray:
    return np.array([M[a, c] for a, c in _SYM_INDEX])


def upgrade_positions(fact: Factorization, up: Upgrade) -> Tuple[np.ndarray, np.ndarray]:
    """Microphones (m x 3) with r_1 at the origin and sources (n x 3)."""
    m, n = fact.Rt.shape[1] + 1, fact.St.shape[1] + 1
    mics = np.zeros((m, 3))
    mics[1:] = np.linalg.solve(up.L.T, fact.Rt).T
    sources = np.empty((n, 3))
    sources[0] = up.L @ up.b
    sources[1:] = (up.L @ (fact.St + up.b[:, None])).T
    return mics, sources


# ============================================
# Bundle adjustment
# ============================================

def gauge_transform(mics: np.ndarray, sources: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Rigidly move r_1 to the origin, r_2 onto +x and r_3 into the xy half-plane y >= 0."""
    mics = np.asarray(mics, dtype=float)
    sources = np.asarray(sources, dtype=float)
    if len(mics) < 3:
        raise DegenerateConfiguration("Gauge fixing needs at least 3 microphones")
    origin = mics[0].copy()
    e1 = mics[1] - origin
    if np.linalg.norm(e1) < 1e-12:
        raise DegenerateConfiguration("First two microphones coincide")
    e1 = e1 / np.linalg.norm(e1)
    v = mics[2] - origin
    v = v - (v @ e1) * e1
    if np.linalg.norm(v) < 1e-12:
        raise DegenerateConfiguration("First three microphones are collinear")
    e2 = v / np.linalg.norm(v)
    R = np.vstack([e1, e2, np.cross(e1, e2)])
    return (mics - origin) @ R.T, (sources - origin) @ R.T


class BundleProblem:
    """
    Residuals ||r_i - s_j|| + o_j - u_ij over observed entries.

    Parameter layout: r_2.x, r_3.x, r_3.y, r_4..r_m (xyz), s_1..s_n (xyz), o_1..o_n.
    """

    def __init__(self, U: np.ndarray, mask: np.ndarray):
        self.U = np.asarray(U, dtype=float)
        self.mask = np.asarray(mask, dtype=bool)
        self.m, self.n = self.U.shape
        self.rows, self.cols = np.nonzero(self.mask)
        self.u = self.U[self.rows, self.cols]
        self.r_index = -np.ones((self.m, 3), dtype=int)
        self.r_index[1, 0] = 0
        self.r_index[2, :2] = [1, 2]
        if self.m > 3:
            self.r_index[3:] = 3 + np.arange(3 * (self.m - 3)).reshape(-1, 3)
        self.n_mic_params = 3 + 3 * max(self.m - 3, 0)
        self.n_params = self.n_mic_params + 4 * self.n

    def pack(self, mics: np.ndarray, sources: np.ndarray, offsets: np.ndarray) -> np.ndarray:
        x = np.zeros(self.n_params)
        free = self.r_index >= 0
        x[self.r_index[free]] = np.asarray(mics)[free]
        x[self.n_mic_params:self.n_mic_params + 3 * self.n] = np.asarray(sources).reshape(-1)
        x[self.n_mic_params + 3 * self.n:] = offsets
        return x

    def unpack(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        mics = np.zeros((self.m, 3))
        free = self.r_index >= 0
        mics[free] = x[self.r_index[free]]
        sources = x[self.n_mic_params:self.n_mic_params + 3 * self.n].reshape(self.n, 3)
        offsets = x[self.n_mic_params + 3 * self.n:]
        return mics, sources, offsets

    def residual(self, x: np.ndarray) -> np.ndarray:
        mics, sources, offsets = self.unpack(x)
        diff = mics[self.rows] - sources[self.cols]
        return np.linalg.norm(diff, axis=1) + offsets[self.cols] - self.u

    def jacobian(self, x: np.ndarray):
        mics, sources, _ = self.unpack(x)
        diff = mics[self.rows] - sources[self.cols]
        unit = diff / np.maximum(np.linalg.norm(diff, axis=1), 1e-12)[:, None]
        k = np.arange(len(self.rows))

        rows, cols, vals = [], [], []
        for c in range(3):
            idx = self.r_index[self.rows, c]
            free = idx >= 0
            rows.append(k[free])
            cols.append(idx[free])
            vals.append(unit[free, c])
            rows.append(k)
            cols.append(self.n_mic_params + 3 * self.cols + c)
            vals.append(-unit[:, c])
        rows.append(k)
        cols.append(self.n_mic_params + 3 * self.n + self.cols)
        vals.append(np.ones(len(k)))
        J = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                       shape=(len(k), self.n_params)).tocsr()
        return J.toarray() if self.n_params <= DENSE_SOLVER_LIMIT else J


def bundle_adjust(
    U: np.ndarray,
    mask: np.ndarray,
    mics: np.ndarray,
    sources: np.ndarray,
    offsets: np.ndarray,
    max_iter: int = 100,
    tolerance: float = 1e-12,
) -> BundleResult:
    """
    Levenberg-Marquardt style refinement of microphones, sources and offsets.

    The gauge is pinned first (r_1 origin, r_2 on +x, r_3 in the xy plane).
    Every column must have at least one observed entry.

    Raises:
        Diverged: the solver failed or ended above its starting cost
    """
    mask = np.asarray(mask, dtype=bool) & np.isfinite(U)
    if np.any(mask.sum(axis=0) == 0):
        raise ValueError("bundle_adjust needs every column observed at least once")
    mics, sources = gauge_transform(mics, sources)
    problem = BundleProblem(np.where(mask, U, 0.0), mask)
    x0 = problem.pack(mics, sources, np.asarray(offsets, dtype=float))
    initial_cost = 0.5 * float(np.sum(problem.residual(x0) ** 2))

    dense = problem.n_params <= DENSE_SOLVER_LIMIT
    result = least_squares(
        problem.residual, x0, jac=problem.jacobian, method="trf",
        tr_solver="exact" if dense else "lsmr",
        ftol=tolerance, xtol=tolerance, gtol=tolerance, max_nfev=max_iter,
    )
    if result.status < 0 or not np.isfinite(result.cost) or result.cost > initial_cost * (1 + 1e-12) + 1e-30:
        raise Diverged(f"Bundle adjustment failed: {result.message}")

    r, s, o = problem.unpack(result.x)
    residuals = np.full(np.shape(U), np.nan)
    residuals[problem.rows, problem.cols] = result.fun
    logger.info(
        f"Bundle adjustment: cost {initial_cost:.3e} -> {result.cost:.3e} in {result.nfev} evaluations"
    )
    return BundleResult(mics=r, sources=s, offsets=o, residuals=residuals, cost=float(result.cost),
                        initial_cost=initial_cost, nfev=int(result.nfev), status=int(result.status))


# ============================================
# Trilateration
# ============================================

def sphere_intersection(points: np.ndarray, distances: Sequence[float],
                        tolerance: float = 1e-9) -> Tuple[Vec3, Vec3]:
    """
    The two intersections of three spheres, mirrored across the centres' plane.

    Raises:
        DegenerateGeometry: centres are collinear
        NoIntersection: spheres miss each other by more than the tolerance
    """
    p1, p2, p3 = np.asarray(points, dtype=float)[:3]
    d1, d2, d3 = (float(d) for d in distances[:3])
    span = np.linalg.norm(p2 - p1)
    if span < 1e-12:
        raise DegenerateGeometry("Sphere centres coincide")
    ex = (p2 - p1) / span
    i = ex @ (p3 - p1)
    ey = p3 - p1 - i * ex
    if np.linalg.norm(ey) < 1e-12 * max(span, 1.0):
        raise DegenerateGeometry("Sphere centres are collinear")
    ey /= np.linalg.norm(ey)
    ez = np.cross(ex, ey)
    j = ey @ (p3 - p1)

    x = (d1 ** 2 - d2 ** 2 + span ** 2) / (2 * span)
    y = (d1 ** 2 - d3 ** 2 + i ** 2 + j ** 2) / (2 * j) - (i / j) * x
    z2 = d1 ** 2 - x ** 2 - y ** 2
    if z2 < 0:
        if z2 < -(2 * abs(d1) * tolerance + tolerance ** 2):
            raise NoIntersection(f"Spheres do not intersect (z^2 = {z2:.3e})")
        z2 = 0.0
    base = p1 + x * ex + y * ey
    z = np.sqrt(z2)
    return base + z * ez, base - z * ez


def trilaterate_linear(points: np.ndarray, distances: np.ndarray) -> Vec3:
    """Least-squares point from >= 4 range measurements (first point as reference)."""
    points = np.asarray(points, dtype=float)
    distances = np.asarray(distances, dtype=float)
    A = 2.0 * (points[1:] - points[0])
    y = (distances[0] ** 2 - distances[1:] ** 2
         + np.sum(points[1:] ** 2, axis=1) - np.sum(points[0] ** 2))
    return np.linalg.lstsq(A, y, rcond=None)[0]


def refine_point(points: np.ndarray, distances: np.ndarray, x0: Vec3) -> Vec3:
    def residual(x):
        return np.linalg.norm(points - x, axis=1) - distances

    def jacobian(x):
        diff = x - points
        return diff / np.maximum(np.linalg.norm(diff, axis=1), 1e-12)[:, None]

    return least_squares(residual, x0, jac=jacobian, method="lm", xtol=1e-14, ftol=1e-14).x


def trilaterate(
    points: np.ndarray,
    distances: np.ndarray,
    inlier_tol: float = 0.05,
    iterations: int = 200,
    seed: SeedLike = None,
) -> Vec3:
    """
    Robust point from range measurements: RANSAC over support triples, both
    sphere-intersection branches scored, then a least-squares polish.

    Raises:
        NoIntersection: no triple gives a consistent intersection
        AmbiguousMirror: the supporting points are coplanar so both branches fit
    """
    points = np.asarray(points, dtype=float)
    distances = np.asarray(distances, dtype=float)
    if len(points) < 3:
        raise ValueError("trilaterate needs at least 3 points")
    rng = as_generator(seed)
    triples = list(itertools.combinations(range(len(points)), 3))
    if len(triples) > iterations:
        triples = [triples[i] for i in np.sort(rng.choice(len(triples), iterations, replace=False))]

    best, best_key = None, None
    for triple in triples:
        try:
            candidates = sphere_intersection(points[list(triple)], distances[list(triple)], inlier_tol)
        except (NoIntersection, DegenerateGeometry):
            continue
        for candidate in candidates:
            error = np.abs(np.linalg.norm(points - candidate, axis=1) - distances)
            inliers = error < inlier_tol
            key = (int(inliers.sum()), -float(np.sum(error[inliers])))
            if best_key is None or key > best_key:
                best, best_key = candidate, key
    if best is None:
        raise NoIntersection("No support triple produced an intersection")

    inliers = np.abs(np.linalg.norm(points - best, axis=1) - distances) < inlier_tol
    support = points[inliers]
    centred = support - support.mean(axis=0)
    sigma = np.linalg.svd(centred, compute_uv=False)
    if len(support) < 4 or sigma[2] < 1e-6 * max(sigma[0], 1e-12):
        normal = np.linalg.svd(centred)[2][2]
        if abs((best - support.mean(axis=0)) @ normal) > inlier_tol:
            raise AmbiguousMirror("Supporting points are coplanar; both mirror branches fit")
    return refine_point(support, distances[inliers], best)


def locate_sources(
    mics: np.ndarray,
    U: np.ndarray,
    mask: np.ndarray,
    refine_steps: int = 2,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Per-column source position and offset from known microphones.

    Linear in (s_j, o_j) after subtracting the reference-row equation, then a
    few batched Gauss-Newton steps. Columns with fewer than 5 usable rows come
    back as NaN. Returns (sources n x 3, offsets n, residuals m x n).
    """
    mics = np.asarray(mics, dtype=float)
    U = np.asarray(U, dtype=float)
    usable = np.asarray(mask, dtype=bool) & np.isfinite(U) & np.all(np.isfinite(mics), axis=1)[:, None]
    m, n = U.shape
    origin = mics[0]
    rel = mics - origin
    Uz = np.where(usable, U, 0.0)

    # 2 r_i . s - 2 u_ij o = |r_i|^2 - u_ij^2 for rows i >= 1
    w = usable[1:].astype(float)
    A = np.zeros((m - 1, n, 4))
    A[:, :, :3] = 2.0 * rel[1:, None, :]
    A[:, :, 3] = -2.0 * Uz[1:]
    y = np.sum(rel[1:] ** 2, axis=1)[:, None] - Uz[1:] ** 2
    A *= w[:, :, None]
    y = y * w
    normal = np.einsum("icp,icq->cpq", A, A)
    rhs = np.einsum("icp,ic->cp", A, y)
    enough = usable[0] & (usable[1:].sum(axis=0) >= 4)
    solution = np.full((n, 4), np.nan)
    if np.any(enough):
        ridge = 1e-12 * np.trace(normal[enough], axis1=1, axis2=2)[:, None, None] * np.eye(4)
        solution[enough] = np.linalg.solve(normal[enough] + ridge, rhs[enough][:, :, None])[:, :, 0]

    weights = usable.astype(float)
    for _ in range(refine_steps):
        s, o = solution[:, :3], solution[:, 3]
        diff = s[None, :, :] - rel[:, None, :]
        dist = np.maximum(np.linalg.norm(diff, axis=2), 1e-12)
        e = (dist + o[None, :] - Uz) * weights
        J = np.concatenate([diff / dist[:, :, None], np.ones((m, n, 1))], axis=2) * weights[:, :, None]
        JtJ = np.einsum("icp,icq->cpq", J, J)
        Jte = np.einsum("icp,ic->cp", J, e)
        ok = enough & np.all(np.isfinite(JtJ), axis=(1, 2))
        if not np.any(ok):
            break
        ridge = 1e-12 * np.trace(JtJ[ok], axis1=1, axis2=2)[:, None, None] * np.eye(4)
        step = np.linalg.solve(JtJ[ok] + ridge, Jte[ok][:, :, None])[:, :, 0]
        solution[ok] -= step

    sources = solution[:, :3] + origin
    offsets = solution[:, 3]
    residuals = np.linalg.norm(sources[None, :, :] - mics[:, None, :], axis=2) + offsets[None, :] - U
    residuals[~usable] = np.nan
    residuals[:, ~enough] = np.nan
    return sources, offsets, residuals


# ============================================
# Inlier expansion
# ============================================

def _locate_column_robust(mics: np.ndarray, u: np.ndarray, observed: np.ndarray,
                          res_tol: float) -> Tuple[Optional[np.ndarray], int]:
    rows = np.flatnonzero(observed[1:]) + 1
    best, best_count = None, -1
    for subset in itertools.combinations(rows, 4):
        chosen = np.zeros(len(u), dtype=bool)
        chosen[0] = True
        chosen[list(subset)] = True
        s, o, _ = locate_sources(mics, u[:, None], chosen[:, None], refine_steps=3)
        if not np.all(np.isfinite(s)):
            continue
        res = np.abs(np.linalg.norm(mics - s[0], axis=1) + o[0] - u)
        count = int(np.sum((res < res_tol) & observed))
        if count > best_count:
            best, best_count = res, count
    return best, best_count


def expand_inliers(
    tdoa: TdoaMatrix,
    mics: np.ndarray,
    sources: np.ndarray,
    offsets: np.ndarray,
    inlier_columns: Sequence[int],
    res_tol: float = 0.05,
    min_count: int = 5,
    max_iter: int = 100,
) -> Expansion:
    """
    Re-admit rejected columns that agree with the current microphones.

    For each rejected column a source and offset are located from every
    5-row subset containing the reference row; the column is admitted when
    at least min_count entries fit within res_tol, and its misfitting entries
    are masked. Bundle adjustment then runs on the enlarged set.
    """
    inliers = sorted(int(j) for j in inlier_columns)
    mask = tdoa.mask.copy()
    sources = np.array(sources, dtype=float)
    offsets = np.array(offsets, dtype=float)
    admitted: List[int] = []
    for j in range(tdoa.n):
        if j in inliers or tdoa.mask[1:, j].sum() < 4:
            continue
        res, count = _locate_column_robust(mics, tdoa.U[:, j], tdoa.mask[:, j], res_tol)
        if res is None or count < min_count:
            continue
        good = res < res_tol
        mask[:, j] &= good
        s, o, _ = locate_sources(mics, tdoa.U[:, j:j + 1], mask[:, j:j + 1])
        sources[j], offsets[j] = s[0], o[0]
        admitted.append(j)

    columns = np.array(sorted(inliers + admitted), dtype=int)
    logger.info(f"Inlier expansion admitted {len(admitted)} columns ({len(columns)} total)")
    bundle = bundle_adjust(tdoa.U[:, columns], mask[:, columns], mics, sources[columns],
                           offsets[columns], max_iter=max_iter)
    return Expansion(inlier_columns=columns, mask=mask, bundle=bundle, admitted=admitted)
