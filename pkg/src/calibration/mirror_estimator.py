"""
Reflections from cross-channel consistent GCC peaks.

A peak of pair (i1, i) that belongs to a reflection r_{i,k} of microphone i
satisfies w + ||s - r_{i1}|| = ||s - r_{i,k}|| for every reference channel
i1, so after that correction the values agree across channels. Consistent
values are range measurements from the known source positions to the mirror
image, which RANSAC trilaterates; bisector planes of mic/image pairs give the
reflecting surfaces.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.calibration.geometry_solver import refine_point, sphere_intersection
from src.core.exceptions import (
    DegenerateGeometry,
    DegenerateMirrorPair,
    InsufficientCandidates,
    NoIntersection,
)
from src.core.model import MirroredMicrophone, Plane, SourcePath, mirror_point, plane_from_mirror_pair
from src.core.seeding import SeedLike, as_generator, spawn_rng
from src.signal_processing.gcc_phat import FrameSpec, Pair, Peak, pair_peaks

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConsistentDetection:
    """Corrected distance c from the source at `time` to a mirror image of mic `mic_index`."""
    mic_index: int
    frame_index: int
    time: float
    distance: float
    support: int
    source: np.ndarray


@dataclass
class MirrorEstimate:
    """Mirror image r_{i,k} (k >= 2) with the detections it explains."""
    mic_id: int
    path_index: int
    position: np.ndarray
    inliers: List[ConsistentDetection]
    residual: float = 0.0
    plane: Optional[Plane] = None
    first_order: bool = False

    def to_mirrored_microphone(self) -> MirroredMicrophone:
        return MirroredMicrophone(mic_id=self.mic_id, path_index=self.path_index,
                                  position=np.asarray(self.position, dtype=float),
                                  inlier_count=len(self.inliers))


def consistency_correct(
    peaks_by_pair: Mapping[Pair, List[Peak]],
    source_path: SourcePath,
    mics: np.ndarray,
    target: int,
    spec: FrameSpec,
    quorum: Optional[int] = None,
    cluster_tol: float = 0.03,
    exclude_direct: bool = True,
) -> List[ConsistentDetection]:
    """
    Cross-channel consistent corrected distances for microphone `target` (0-based).

    Every peak of a pair (i1, target) becomes c = w + ||s - r_i1|| with s taken
    from the source path at the frame time. Per frame the values are clustered
    greedily within cluster_tol and a cluster is kept when it holds values from
    at least `quorum` distinct reference channels (default m - 2). Values within
    cluster_tol of the direct distance ||s - r_target|| are dropped first unless
    exclude_direct is False.
    """
    mics = np.asarray(mics, dtype=float)
    m = len(mics)
    if quorum is None:
        quorum = max(m - 2, 1)

    per_frame: Dict[int, List[Tuple[float, int]]] = {}
    for i1 in range(m):
        if i1 == target:
            continue
        for peak in pair_peaks(peaks_by_pair, i1, target):
            per_frame.setdefault(peak.frame_index, []).append((peak.range_diff, i1))

    detections: List[ConsistentDetection] = []
    for frame in sorted(per_frame):
        time = float(spec.frame_time(frame))
        source = source_path.position_at(time)[0]
        reach = np.linalg.norm(mics - source, axis=1)
        values = sorted((w + reach[i1], i1) for w, i1 in per_frame[frame])
        if exclude_direct:
            values = [(c, i1) for c, i1 in values if abs(c - reach[target]) >= cluster_tol]

        start = 0
        while start < len(values):
            stop = start
            while stop + 1 < len(values) and values[stop + 1][0] - values[start][0] <= cluster_tol:
                stop += 1
            cluster = values[start:stop + 1]
            channels = {i1 for _, i1 in cluster}
            if len(channels) >= quorum:
                detections.append(ConsistentDetection(
                    mic_index=target,
                    frame_index=frame,
                    time=time,
                    distance=float(np.mean([c for c, _ in cluster])),
                    support=len(channels),
                    source=source,
                ))
            start = stop + 1

    logger.debug(f"Mic {target + 1}: {len(detections)} consistent detections over {len(per_frame)} frames")
    return detections


def _score(sources: np.ndarray, distances: np.ndarray, point: np.ndarray, tol: float):
    error = np.abs(np.linalg.norm(sources - point, axis=1) - distances)
    inliers = error < tol
    return inliers, (int(inliers.sum()), -float(np.sum(error[inliers])))


def ransac_mirror(
    candidates: Sequence[ConsistentDetection],
    iterations: int = 500,
    inlier_tol: float = 0.03,
    seed: SeedLike = None,
    path_index: int = 2,
) -> MirrorEstimate:
    """
    Mirror position from corrected distances by three-point RANSAC.

    Each sampled triple yields two sphere intersections, mirrored across the
    plane of its sources; both are scored. The winner is polished by least
    squares on its inliers.

    Raises:
        InsufficientCandidates: fewer than 3 candidates
        DegenerateGeometry: collinear sources, or both mirror branches explain
            the data equally well
    """
    if len(candidates) < 3:
        raise InsufficientCandidates(f"Mirror RANSAC needs 3 candidates, got {len(candidates)}")
    sources = np.array([c.source for c in candidates], dtype=float)
    distances = np.array([c.distance for c in candidates], dtype=float)
    centred = sources - sources.mean(axis=0)
    sigma = np.linalg.svd(centred, compute_uv=False)
    if sigma[0] == 0 or sigma[1] < 1e-9 * sigma[0]:
        raise DegenerateGeometry("Candidate source positions are collinear")

    rng = as_generator(seed)
    total = len(candidates) * (len(candidates) - 1) * (len(candidates) - 2) // 6
    if total <= iterations:
        triples = itertools.combinations(range(len(candidates)), 3)
    else:
        triples = (tuple(rng.choice(len(candidates), 3, replace=False)) for _ in range(iterations))

    best, best_key = None, None
    for triple in triples:
        idx = list(triple)
        try:
            branches = sphere_intersection(sources[idx], distances[idx], inlier_tol)
        except (NoIntersection, DegenerateGeometry):
            continue
        for point in branches:
            _, key = _score(sources, distances, point, inlier_tol)
            if best_key is None or key > best_key:
                best, best_key = point, key
    if best is None:
        raise DegenerateGeometry("No candidate triple produced a mirror position")

    inliers, _ = _score(sources, distances, best, inlier_tol)
    position = refine_point(sources[inliers], distances[inliers], best)
    inliers, key = _score(sources, distances, position, inlier_tol)

    # branch check: reflect across the plane of the supporting sources
    support = sources[inliers] if inliers.sum() >= 3 else sources
    support_centre = support.mean(axis=0)
    normal = np.linalg.svd(support - support_centre)[2][-1]
    twin = position - 2.0 * ((position - support_centre) @ normal) * normal
    _, twin_key = _score(sources, distances, twin, inlier_tol)
    if np.linalg.norm(twin - position) > inlier_tol and twin_key[0] >= key[0]:
        raise DegenerateGeometry("Both mirror branches explain the candidates equally well")

    error = np.abs(np.linalg.norm(sources[inliers] - position, axis=1) - distances[inliers])
    return MirrorEstimate(
        mic_id=candidates[0].mic_index + 1,
        path_index=path_index,
        position=position,
        inliers=[c for c, keep in zip(candidates, inliers) if keep],
        residual=float(np.sqrt(np.mean(error ** 2))) if len(error) else 0.0,
    )


def extract_all_mirrors(
    candidates_by_mic: Mapping[int, Sequence[ConsistentDetection]],
    mics: np.ndarray,
    iterations: int = 500,
    inlier_tol: float = 0.03,
    min_inliers: int = 50,
    max_mirrors: int = 6,
    seed: Optional[int] = None,
    min_mic_distance: float = 0.05,
) -> List[MirrorEstimate]:
    """
    Greedy sequential RANSAC per microphone: extract a mirror, drop its
    inliers, repeat until the consensus falls below min_inliers or
    max_mirrors are found. Output is ordered by microphone, then extraction.
    """
    mics = np.asarray(mics, dtype=float)
    estimates: List[MirrorEstimate] = []
    for mic_index in sorted(candidates_by_mic):
        remaining = sorted(candidates_by_mic[mic_index], key=lambda c: (c.frame_index, c.distance))
        found = 0
        attempt = 0
        while found < max_mirrors and len(remaining) >= 3 and attempt < 2 * max_mirrors:
            rng = spawn_rng(seed, "mirrors", mic_index, attempt)
            attempt += 1
            try:
                estimate = ransac_mirror(remaining, iterations, inlier_tol, rng, path_index=2 + found)
            except (InsufficientCandidates, DegenerateGeometry) as exc:
                logger.debug(f"Mic {mic_index + 1}: stopping mirror extraction ({exc})")
                break
            if len(estimate.inliers) < min_inliers:
                break
            claimed = {(c.frame_index, c.distance) for c in estimate.inliers}
            remaining = [c for c in remaining if (c.frame_index, c.distance) not in claimed]
            if np.linalg.norm(estimate.position - mics[mic_index]) < min_mic_distance:
                logger.debug(f"Mic {mic_index + 1}: dropped an estimate at the microphone itself")
                continue
            estimates.append(estimate)
            found += 1
        logger.info(f"Mic {mic_index + 1}: {found} mirror images")
    return estimates


def _aligned(plane: Plane, reference: Plane) -> Tuple[np.ndarray, float]:
    if plane.normal @ reference.normal < 0:
        return -plane.normal, -plane.d
    return plane.normal, plane.d


def _average_plane(members: Sequence[Tuple[Plane, float]]) -> Plane:
    """Weighted mean of sign-aligned planes; equal weights when all weights are zero."""
    reference = members[0][0]
    weights = np.array([weight for _, weight in members], dtype=float)
    if not weights.sum() > 0:
        weights = np.ones(len(members))
    normal, d = np.zeros(3), 0.0
    for (plane, _), weight in zip(members, weights):
        n, dd = _aligned(plane, reference)
        normal += weight * n
        d += weight * dd
    scale = np.linalg.norm(normal)
    return Plane.from_normal(normal / scale, d / scale)


def fit_planes(
    estimates: Sequence[MirrorEstimate],
    mics: np.ndarray,
    angle_tol_deg: float = 5.0,
    offset_tol: float = 0.1,
    position_tol: float = 0.03,
) -> List[Plane]:
    """
    Reflective planes from per-microphone bisector planes.

    Bisectors are clustered greedily (normal angle and offset after sign
    alignment) and averaged with inlier-count weights. Members whose image does
    not round-trip through the cluster plane within 2 * position_tol are
    treated as higher-order reflections and excluded. When several microphones
    have estimates, a plane needs bisectors from at least two of them.
    Accepted estimates get `plane` and `first_order` set.
    """
    mics = np.asarray(mics, dtype=float)
    cos_tol = np.cos(np.radians(angle_tol_deg))
    bisectors: List[Tuple[MirrorEstimate, Plane]] = []
    for est in sorted(estimates, key=lambda e: (-len(e.inliers), e.mic_id, e.path_index)):
        est.plane, est.first_order = None, False
        try:
            bisectors.append((est, plane_from_mirror_pair(mics[est.mic_id - 1], est.position)))
        except DegenerateMirrorPair:
            continue

    clusters: List[List[Tuple[MirrorEstimate, Plane]]] = []
    for est, plane in bisectors:
        for cluster in clusters:
            head = cluster[0][1]
            n, d = _aligned(plane, head)
            if n @ head.normal >= cos_tol and abs(d - head.d) < offset_tol:
                cluster.append((est, plane))
                break
        else:
            clusters.append([(est, plane)])

    mics_with_estimates = {e.mic_id for e in estimates}
    planes: List[Tuple[int, Plane]] = []
    for cluster in clusters:
        plane = _average_plane([(p, float(len(e.inliers))) for e, p in cluster])
        first = [(e, p) for e, p in cluster
                 if np.linalg.norm(mirror_point(mics[e.mic_id - 1], plane) - e.position) < 2 * position_tol]
        if not first:
            continue
        plane = _average_plane([(p, float(len(e.inliers))) for e, p in first])
        if len(mics_with_estimates) >= 2 and len({e.mic_id for e, _ in first}) < 2:
            continue
        for est, _ in first:
            est.plane, est.first_order = plane, True
        planes.append((sum(len(e.inliers) for e, _ in first), plane))

    planes.sort(key=lambda item: -item[0])
    logger.info(f"Fitted {len(planes)} reflective planes from {len(estimates)} mirror estimates")
    return [plane for _, plane in planes]
