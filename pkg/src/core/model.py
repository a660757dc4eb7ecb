"""
Core geometric types shared by every calibration stage.

Positions are numpy arrays in meters, times are seconds. Microphone ids are
1-based in the serialized form; arrays are indexed from 0 internally.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.core.exceptions import CountMismatch, DegenerateConfiguration, DegenerateMirrorPair

logger = logging.getLogger(__name__)

Vec3 = np.ndarray

NORMAL_TOLERANCE = 1e-12
COLLINEAR_TOLERANCE = 1e-9


def as_vec3(values: Sequence[float]) -> Vec3:
    """Convert to a finite float (3,) array."""
    vec = np.asarray(values, dtype=float).reshape(3)
    if not np.all(np.isfinite(vec)):
        raise ValueError(f"Vec3 components must be finite, got {vec}")
    return vec


@dataclass(frozen=True)
class Plane:
    """Plane {p : normal·p = d} in canonical Hessian form (d >= 0)."""
    normal: Vec3
    d: float

    def __post_init__(self):
        norm = float(np.linalg.norm(self.normal))
        if abs(norm - 1.0) > NORMAL_TOLERANCE:
            raise ValueError(f"Plane normal must be unit length, got norm {norm}")

    @classmethod
    def from_normal(cls, normal: Sequence[float], d: float) -> "Plane":
        """Normalize and sign-canonicalize an arbitrary (normal, d) pair."""
        n = np.asarray(normal, dtype=float).reshape(3)
        norm = np.linalg.norm(n)
        if norm == 0.0:
            raise ValueError("Plane normal must be nonzero")
        n = n / norm
        d = float(d) / norm
        if d < -NORMAL_TOLERANCE or (abs(d) <= NORMAL_TOLERANCE and _leading_sign(n) < 0):
            n, d = -n, -d
        return cls(normal=n, d=abs(d) if abs(d) <= NORMAL_TOLERANCE else d)

    def signed_distance(self, point: Sequence[float]) -> float:
        return float(np.dot(self.normal, point) - self.d)

    def to_dict(self) -> Dict[str, Any]:
        return {"normal": [float(x) for x in self.normal], "d": float(self.d)}


def _leading_sign(n: np.ndarray) -> float:
    for value in n:
        if abs(value) > NORMAL_TOLERANCE:
            return float(np.sign(value))
    return 1.0


@dataclass(frozen=True)
class Microphone:
    """Direct-path microphone position r_{i,1}."""
    id: int
    position: Vec3


@dataclass(frozen=True)
class SourcePath:
    """Sampled source trajectory; times strictly increasing."""
    times: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if len(times) != len(positions):
            raise ValueError("SourcePath times and positions differ in length")
        if np.any(np.diff(times) <= 0):
            raise ValueError("SourcePath times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "positions", positions)

    def __len__(self) -> int:
        return len(self.times)

    def position_at(self, t: np.ndarray) -> np.ndarray:
        """Linearly interpolated positions, clamped to the path ends."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if len(self.times) == 1:
            return np.repeat(self.positions, len(t), axis=0)
        return np.column_stack([
            np.interp(t, self.times, self.positions[:, axis]) for axis in range(3)
        ])


@dataclass(frozen=True)
class MirroredMicrophone:
    """Serialized form of an estimated mirror image r_{i,k}."""
    mic_id: int
    path_index: int
    position: Vec3
    inlier_count: int = 0


@dataclass(frozen=True)
class Scene:
    """
    The central geometric record: microphones, source trajectory, planes,
    speed of sound and per-sample offsets o_j.

    Physical scenes satisfy o_j <= 0 (o_j = -||s_j - r_1|| for ground truth).
    Abstract scenes carry Gaussian offsets and skip that check.
    """
    microphones: List[Microphone]
    source_path: SourcePath
    planes: List[Plane] = field(default_factory=list)
    speed_of_sound: float = 343.0
    offsets: Optional[np.ndarray] = None
    mirrored_microphones: List[MirroredMicrophone] = field(default_factory=list)
    abstract: bool = False

    def __post_init__(self):
        if self.speed_of_sound <= 0:
            raise ValueError(f"speed_of_sound must be positive, got {self.speed_of_sound}")
        ids = [mic.id for mic in self.microphones]
        if ids != list(range(1, len(ids) + 1)):
            raise ValueError(f"Microphone ids must be contiguous from 1, got {ids}")
        if self.offsets is not None:
            offsets = np.asarray(self.offsets, dtype=float).reshape(-1)
            if len(offsets) != len(self.source_path):
                raise ValueError("offsets must have one entry per source sample")
            if not np.all(np.isfinite(offsets)):
                raise ValueError("offsets must be finite")
            if not self.abstract and np.any(offsets > 1e-9):
                raise ValueError("physical scenes require o_j <= 0")
            object.__setattr__(self, "offsets", offsets)

    @property
    def mic_positions(self) -> np.ndarray:
        return np.array([mic.position for mic in self.microphones], dtype=float).reshape(-1, 3)

    @property
    def source_positions(self) -> np.ndarray:
        return self.source_path.positions

    @classmethod
    def from_arrays(
        cls,
        mics: np.ndarray,
        sources: np.ndarray,
        times: Optional[np.ndarray] = None,
        planes: Optional[List[Plane]] = None,
        speed_of_sound: float = 343.0,
        offsets: Optional[np.ndarray] = None,
        abstract: bool = False,
    ) -> "Scene":
        mics = np.asarray(mics, dtype=float).reshape(-1, 3)
        sources = np.asarray(sources, dtype=float).reshape(-1, 3)
        if times is None:
            times = np.arange(len(sources), dtype=float)
        if offsets is None and len(mics) > 0:
            offsets = true_offsets(mics, sources)
        return cls(
            microphones=[Microphone(id=i + 1, position=mics[i].copy()) for i in range(len(mics))],
            source_path=SourcePath(times=times, positions=sources),
            planes=list(planes or []),
            speed_of_sound=speed_of_sound,
            offsets=offsets,
            abstract=abstract,
        )

    def ground_truth_error(self) -> float:
        """Max |o_j + ||s_j - r_1|||; zero for consistent ground-truth scenes."""
        if self.offsets is None:
            return float("inf")
        return float(np.max(np.abs(self.offsets - true_offsets(self.mic_positions, self.source_positions))))

    def to_dict(self) -> Dict[str, Any]:
        doc: Dict[str, Any] = {
            "microphones": [[float(x) for x in p] for p in self.mic_positions],
            "source_path": [
                {"t": float(t), "pos": [float(x) for x in p]}
                for t, p in zip(self.source_path.times, self.source_path.positions)
            ],
            "planes": [plane.to_dict() for plane in self.planes],
            "speed_of_sound": float(self.speed_of_sound),
            "offsets": [float(x) for x in self.offsets] if self.offsets is not None else None,
        }
        if self.mirrored_microphones:
            doc["mirrored_microphones"] = [
                {
                    "mic_id": mirror.mic_id,
                    "path_index": mirror.path_index,
                    "position": [float(x) for x in mirror.position],
                    "inlier_count": mirror.inlier_count,
                }
                for mirror in self.mirrored_microphones
            ]
        if self.abstract:
            doc["abstract"] = True
        return doc

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "Scene":
        source_path = doc.get("source_path") or []
        times = np.array([sample["t"] for sample in source_path], dtype=float)
        sources = np.array([sample["pos"] for sample in source_path], dtype=float).reshape(-1, 3)
        offsets = doc.get("offsets")
        return cls(
            microphones=[
                Microphone(id=i + 1, position=as_vec3(p)) for i, p in enumerate(doc["microphones"])
            ],
            source_path=SourcePath(times=times, positions=sources),
            planes=[Plane.from_normal(p["normal"], p["d"]) for p in doc.get("planes") or []],
            speed_of_sound=float(doc.get("speed_of_sound", 343.0)),
            offsets=np.asarray(offsets, dtype=float) if offsets is not None else None,
            mirrored_microphones=[
                MirroredMicrophone(
                    mic_id=int(m["mic_id"]),
                    path_index=int(m["path_index"]),
                    position=as_vec3(m["position"]),
                    inlier_count=int(m.get("inlier_count", 0)),
                )
                for m in doc.get("mirrored_microphones") or []
            ],
            abstract=bool(doc.get("abstract", False)),
        )


@dataclass(frozen=True)
class TdoaMatrix:
    """
    m x n range-difference matrix (meters); column j is the matching vector u_j.

    Row 0 is the reference channel and is zero wherever observed. Unobserved
    entries are NaN in U and False in mask.
    """
    U: np.ndarray
    mask: np.ndarray
    event_times: np.ndarray

    def __post_init__(self):
        U = np.array(self.U, dtype=float, ndmin=2)
        mask = np.array(self.mask, dtype=bool, ndmin=2)
        times = np.asarray(self.event_times, dtype=float).reshape(-1)
        if U.shape != mask.shape:
            raise ValueError(f"U {U.shape} and mask {mask.shape} differ in shape")
        if U.shape[1] != len(times):
            raise ValueError("event_times must have one entry per column")
        mask = mask & np.isfinite(U)
        U[~mask] = np.nan
        if np.any(np.abs(U[0, mask[0]]) > 1e-12):
            raise ValueError("Reference row of a TdoaMatrix must be zero where observed")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "event_times", times)

    @property
    def m(self) -> int:
        return self.U.shape[0]

    @property
    def n(self) -> int:
        return self.U.shape[1]

    def observed_count(self) -> np.ndarray:
        """Observed entries per column."""
        return self.mask.sum(axis=0)

    def select_columns(self, columns: Sequence[int]) -> "TdoaMatrix":
        columns = np.asarray(columns, dtype=int)
        return TdoaMatrix(U=self.U[:, columns], mask=self.mask[:, columns],
                          event_times=self.event_times[columns])


@dataclass(frozen=True)
class Alignment:
    """Rigid (optionally reflecting) transform x -> rotation @ x + translation."""
    rotation: np.ndarray
    translation: Vec3
    reflect: bool
    rmse: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def apply_plane(self, plane: Plane) -> Plane:
        normal = self.rotation @ plane.normal
        return Plane.from_normal(normal, plane.d + float(normal @ self.translation))


def true_offsets(mics: np.ndarray, sources: np.ndarray) -> np.ndarray:
    """o_j = -||s_j - r_1||."""
    mics = np.asarray(mics, dtype=float).reshape(-1, 3)
    sources = np.asarray(sources, dtype=float).reshape(-1, 3)
    return -np.linalg.norm(sources - mics[0], axis=1)


def mirror_point(p: Sequence[float], plane: Plane) -> Vec3:
    """Reflect p across the plane."""
    p = np.asarray(p, dtype=float)
    return p - 2.0 * (np.dot(plane.normal, p) - plane.d) * plane.normal


def plane_from_mirror_pair(r_direct: Sequence[float], r_mirror: Sequence[float],
                           tolerance: float = 1e-6) -> Plane:
    """Perpendicular bisector of a point and its mirror image."""
    a = np.asarray(r_direct, dtype=float)
    b = np.asarray(r_mirror, dtype=float)
    gap = np.linalg.norm(b - a)
    if gap <= tolerance:
        raise DegenerateMirrorPair(f"Mirror pair points coincide (distance {gap:.3e} m)")
    normal = (b - a) / gap
    return Plane.from_normal(normal, float(normal @ (a + b)) / 2.0)


def align_points(estimated: np.ndarray, reference: np.ndarray) -> Alignment:
    """
    Least-squares rigid alignment of estimated onto reference points.

    Both orientation classes are solved (orthogonal Procrustes) and the one
    with lower rmse is kept; a proper rotation wins ties.

    Raises:
        DegenerateConfiguration: fewer than 3 points or collinear points
    """
    X = np.asarray(estimated, dtype=float).reshape(-1, 3)
    Y = np.asarray(reference, dtype=float).reshape(-1, 3)
    if X.shape != Y.shape:
        raise ValueError(f"Point sets differ in shape: {X.shape} vs {Y.shape}")
    if len(X) < 3:
        raise DegenerateConfiguration("Alignment needs at least 3 points")

    x_mean, y_mean = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - x_mean, Y - y_mean
    for centered in (Xc, Yc):
        sv = np.linalg.svd(centered, compute_uv=False)
        if sv[0] == 0.0 or sv[1] / sv[0] < COLLINEAR_TOLERANCE:
            raise DegenerateConfiguration("Points are collinear, alignment is undetermined")

    U, _, Vt = np.linalg.svd(Xc.T @ Yc)
    det_sign = 1.0 if np.linalg.det(Vt.T @ U.T) >= 0 else -1.0
    candidates: List[Tuple[float, bool, np.ndarray, np.ndarray]] = []
    for reflect in (False, True):
        sign = -det_sign if reflect else det_sign
        correction = np.diag([1.0, 1.0, sign])
        rotation = Vt.T @ correction @ U.T
        translation = y_mean - rotation @ x_mean
        residual = X @ rotation.T + translation - Y
        rmse = float(np.sqrt(np.mean(np.sum(residual ** 2, axis=1))))
        candidates.append((rmse, reflect, rotation, translation))

    proper, mirrored = candidates
    best = mirrored if mirrored[0] < proper[0] - 1e-12 else proper
    rmse, reflect, rotation, translation = best
    return Alignment(rotation=rotation, translation=translation, reflect=reflect, rmse=rmse)


def align_scenes(estimated: Scene, reference: Scene) -> Alignment:
    """Align the estimated scene's microphones onto the reference scene's."""
    if len(estimated.microphones) != len(reference.microphones):
        raise CountMismatch(
            f"Scenes differ in microphone count: {len(estimated.microphones)} vs {len(reference.microphones)}"
        )
    alignment = align_points(estimated.mic_positions, reference.mic_positions)
    logger.debug(f"Aligned scenes: rmse={alignment.rmse:.3e} m, reflect={alignment.reflect}")
    return alignment
