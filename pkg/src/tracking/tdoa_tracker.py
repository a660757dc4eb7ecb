"""
Peak tracking: per-pair GCC peak clouds to a direct-path matching matrix.

Stages per channel pair (1, i):
    1. fit_tracklets      - RANSAC line fits inside short frame windows
    2. merge_tracklets    - connect compatible tracklets into tracks
    3. select_direct_path - the longest track is the direct path
    4. smooth_track       - robust local quadratic smoothing
Then assemble_matching_matrix collects the pairs into one TdoaMatrix.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.core.exceptions import NoEvents, NoTracks
from src.core.model import TdoaMatrix
from src.core.seeding import SeedLike, as_generator
from src.signal_processing.gcc_phat import FrameSpec, Pair, Peak

logger = logging.getLogger(__name__)

MAD_SCALE = 1.4826
ROBUST_FLOOR = 1e-12

__all__ = [
    "Tracklet", "Track", "TdoaMatrix", "PairTracking",
    "fit_tracklets", "merge_tracklets", "select_direct_path", "smooth_track",
    "assemble_matching_matrix", "track_pair", "stage_table",
]


@dataclass(frozen=True)
class Tracklet:
    """Line w = slope * frame + intercept fitted inside frames [start, end]."""
    id: int
    pair: Pair
    start: int
    end: int
    slope: float
    intercept: float
    inliers: Tuple[Peak, ...]

    @property
    def first_frame(self) -> int:
        return min(p.frame_index for p in self.inliers)

    @property
    def last_frame(self) -> int:
        return max(p.frame_index for p in self.inliers)

    def predict(self, frame) -> np.ndarray:
        return self.slope * np.asarray(frame, dtype=float) + self.intercept


@dataclass
class Track:
    """Ordered (frame, w) samples of one pair with their peak scores."""
    pair: Pair
    frames: np.ndarray
    w: np.ndarray
    scores: np.ndarray
    tracklet_ids: Tuple[int, ...] = ()

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=int)
        self.w = np.asarray(self.w, dtype=float)
        self.scores = np.asarray(self.scores, dtype=float)
        if len(self.frames) > 1 and np.any(np.diff(self.frames) <= 0):
            raise ValueError("Track frames must be strictly increasing")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def mean_score(self) -> float:
        return float(self.scores.mean()) if len(self.scores) else 0.0

    def value_at(self, frames: np.ndarray) -> np.ndarray:
        """Linear interpolation between samples; NaN outside the track span."""
        frames = np.asarray(frames, dtype=float)
        values = np.interp(frames, self.frames, self.w)
        outside = (frames < self.frames[0]) | (frames > self.frames[-1])
        values[outside] = np.nan
        return values

    def as_peaks(self) -> List[Peak]:
        return [
            Peak(pair=self.pair, frame_index=int(f), range_diff=float(w), score=float(s))
            for f, w, s in zip(self.frames, self.w, self.scores)
        ]


# ============================================
# Tracklets
# ============================================

def _frame_segments(frames: np.ndarray) -> np.ndarray:
    return np.flatnonzero(np.r_[True, frames[1:] != frames[:-1]])


def _line_inliers(frames: np.ndarray, w: np.ndarray, starts: np.ndarray,
                  slope: float, intercept: float, tol: float) -> np.ndarray:
    """Closest peak per frame, kept when within tol of the line."""
    residual = np.abs(w - (slope * frames + intercept))
    ends = np.r_[starts[1:], len(frames)]
    chosen = []
    for a, b in zip(starts, ends):
        k = a + int(np.argmin(residual[a:b]))
        if residual[k] < tol:
            chosen.append(k)
    return np.array(chosen, dtype=int)


def fit_tracklets(
    peaks: Sequence[Peak],
    window: int = 21,
    inlier_tol: float = 0.04,
    iterations: int = 300,
    min_inliers: int = 8,
    seed: SeedLike = None,
    start_id: int = 0,
) -> List[Tracklet]:
    """
    RANSAC line fits in windows of `window` frames overlapping by one frame.

    Hypotheses are peak pairs from different frames, drawn without replacement
    (all of them when there are at most `iterations`). A line counts the
    closest peak of every frame within inlier_tol. Accepted lines are refitted
    by least squares; a line sharing more than one inlier with a stronger line
    of the same window is dropped.
    """
    if window < 2:
        raise ValueError("window must be >= 2")
    if not peaks:
        return []
    rng = as_generator(seed)
    ordered = sorted(peaks, key=lambda p: (p.frame_index, -p.score, p.range_diff))
    all_frames = np.array([p.frame_index for p in ordered], dtype=int)
    all_w = np.array([p.range_diff for p in ordered], dtype=float)
    pair = ordered[0].pair
    stride = window - 1

    tracklets: List[Tracklet] = []
    start = (int(all_frames[0]) // stride) * stride
    while start <= all_frames[-1]:
        end = start + window - 1
        lo, hi = np.searchsorted(all_frames, [start, end + 1])
        if hi - lo >= min_inliers:
            frames = all_frames[lo:hi].astype(float)
            w = all_w[lo:hi]
            for slope, intercept, idx in _window_lines(frames, w, inlier_tol, iterations,
                                                       min_inliers, rng):
                tracklets.append(Tracklet(
                    id=start_id + len(tracklets),
                    pair=pair,
                    start=start,
                    end=end,
                    slope=slope,
                    intercept=intercept,
                    inliers=tuple(ordered[lo + k] for k in idx),
                ))
        start += stride

    logger.debug(f"Pair {pair}: {len(tracklets)} tracklets from {len(peaks)} peaks")
    return tracklets


def _window_lines(frames: np.ndarray, w: np.ndarray, tol: float, iterations: int,
                  min_inliers: int, rng: np.random.Generator):
    starts = _frame_segments(frames)
    if len(starts) < min_inliers:
        return []

    a, b = np.triu_indices(len(frames), k=1)
    distinct = frames[a] != frames[b]
    a, b = a[distinct], b[distinct]
    if len(a) > iterations:
        pick = np.sort(rng.choice(len(a), size=iterations, replace=False))
        a, b = a[pick], b[pick]

    slopes = (w[b] - w[a]) / (frames[b] - frames[a])
    intercepts = w[a] - slopes * frames[a]
    residual = np.abs(w[None, :] - (slopes[:, None] * frames[None, :] + intercepts[:, None]))
    residual = np.where(residual < tol, residual, np.inf)
    per_frame = np.minimum.reduceat(residual, starts, axis=1)
    counts = np.isfinite(per_frame).sum(axis=1)
    spread = np.where(np.isfinite(per_frame), per_frame, 0.0).sum(axis=1)

    accepted: List[Tuple[float, float, np.ndarray]] = []
    for h in np.lexsort((spread, -counts)):
        if counts[h] < min_inliers:
            break
        idx = _line_inliers(frames, w, starts, slopes[h], intercepts[h], tol)
        if len(idx) < 2:
            continue
        slope, intercept = np.polyfit(frames[idx], w[idx], 1)
        idx = _line_inliers(frames, w, starts, slope, intercept, tol)
        if len(idx) < min_inliers:
            continue
        if any(len(np.intersect1d(idx, other)) > 1 for _, _, other in accepted):
            continue
        accepted.append((float(slope), float(intercept), idx))
    return accepted


# ============================================
# Merging and selection
# ============================================

class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def _compatible(first: Tracklet, second: Tracklet, line_tol: float, time_gap_max: int) -> bool:
    if first.start == second.start:
        return False
    if first.start > second.start:
        first, second = second, first
    gap = second.first_frame - first.last_frame - 1
    if gap >= time_gap_max:
        return False
    at_second = abs(first.predict(second.first_frame) - second.predict(second.first_frame))
    at_first = abs(second.predict(first.last_frame) - first.predict(first.last_frame))
    return bool(at_second < line_tol and at_first < line_tol)


def merge_tracklets(
    tracklets: Sequence[Tracklet],
    line_tol: float = 0.04,
    time_gap_max: int = 5,
    max_gap: int = 5,
) -> List[Track]:
    """
    Connect tracklets whose lines agree at each other's endpoints.

    Components of the compatibility relation become tracks; a frame claimed by
    several tracklets keeps its highest-scoring peak, and a track is split
    wherever more than max_gap frames are missing.
    """
    if not tracklets:
        return []
    n = len(tracklets)
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if _compatible(tracklets[i], tracklets[j], line_tol, time_gap_max):
                weight = len(tracklets[i].inliers) + len(tracklets[j].inliers)
                edges.append((-weight, i, j))
    uf = _UnionFind(n)
    for _, i, j in sorted(edges):
        uf.union(i, j)

    components: Dict[int, List[int]] = {}
    for i in range(n):
        components.setdefault(uf.find(i), []).append(i)

    tracks: List[Track] = []
    for members in components.values():
        best: Dict[int, Peak] = {}
        for i in members:
            for peak in tracklets[i].inliers:
                held = best.get(peak.frame_index)
                if held is None or (peak.score, -abs(peak.range_diff)) > (held.score, -abs(held.range_diff)):
                    best[peak.frame_index] = peak
        frames = np.array(sorted(best), dtype=int)
        ids = tuple(sorted(tracklets[i].id for i in members))
        cuts = np.flatnonzero(np.diff(frames) - 1 > max_gap) + 1
        for part in np.split(frames, cuts):
            tracks.append(Track(
                pair=tracklets[members[0]].pair,
                frames=part,
                w=[best[f].range_diff for f in part],
                scores=[best[f].score for f in part],
                tracklet_ids=ids,
            ))
    tracks.sort(key=lambda t: (int(t.frames[0]), float(t.w[0])))
    return tracks


def select_direct_path(tracks: Sequence[Track]) -> Track:
    """Track with the most samples; ties go to the higher mean score."""
    if not tracks:
        raise NoTracks("No tracks to select the direct path from")
    return min(tracks, key=lambda t: (-len(t), -t.mean_score, int(t.frames[0]), float(t.w.mean())))


# ============================================
# Smoothing
# ============================================

def _local_quadratic(frames: np.ndarray, w: np.ndarray, keep: np.ndarray, half: int) -> np.ndarray:
    """Value at each sample of a quadratic fitted to kept samples within +-half frames."""
    origin = frames[0]
    length = frames[-1] - origin + 1
    grid_w = np.zeros(length)
    grid_keep = np.zeros(length)
    grid_w[frames - origin] = w
    grid_keep[frames - origin] = keep.astype(float)

    offsets = np.arange(-half, half + 1, dtype=float)
    moments = [np.correlate(np.pad(grid_keep, half), offsets ** k, mode="valid") for k in range(5)]
    targets = [np.correlate(np.pad(grid_keep * grid_w, half), offsets ** k, mode="valid") for k in range(3)]
    idx = frames - origin

    normal = np.empty((len(idx), 3, 3))
    for r in range(3):
        for c in range(3):
            normal[:, r, c] = moments[r + c][idx]
    rhs = np.stack([t[idx] for t in targets], axis=1)
    support = moments[0][idx]

    fitted = w.copy()
    solvable = support >= 3
    if np.any(solvable):
        coef = np.linalg.solve(normal[solvable], rhs[solvable][:, :, None])[:, :, 0]
        fitted[solvable] = coef[:, 0]
    return fitted


def smooth_track(track: Track, span: int = 9) -> Track:
    """
    Robust local quadratic smoothing over +-span//2 frames.

    The worst sample beyond 3 robust standard deviations (1.4826 MAD of the
    residuals) is excluded and the fit repeated until none is left; the output
    is the local fit at every original frame.
    """
    if span < 3 or span % 2 == 0:
        raise ValueError(f"span must be odd and >= 3, got {span}")
    if len(track) < 3:
        return Track(track.pair, track.frames.copy(), track.w.copy(), track.scores.copy(),
                     track.tracklet_ids)
    half = span // 2
    keep = np.ones(len(track), dtype=bool)
    for _ in range(len(track) // 2):
        fitted = _local_quadratic(track.frames, track.w, keep, half)
        residual = np.abs(track.w - fitted)
        residual[~keep] = 0.0
        sigma = max(MAD_SCALE * float(np.median(residual[keep])), ROBUST_FLOOR)
        worst = int(np.argmax(residual))
        if residual[worst] <= 3.0 * sigma:
            break
        keep[worst] = False
    fitted = _local_quadratic(track.frames, track.w, keep, half)
    if not keep.all():
        logger.debug(f"Pair {track.pair}: smoothing replaced {int((~keep).sum())} samples")
    return Track(track.pair, track.frames.copy(), fitted, track.scores.copy(), track.tracklet_ids)


# ============================================
# Assembly
# ============================================

def assemble_matching_matrix(
    tracks: Mapping[int, Track],
    m: int,
    spec: FrameSpec,
    min_rows: int = 5,
    n_max: int = 400,
) -> TdoaMatrix:
    """
    Collect direct-path tracks of pairs (1, i) into U.

    `tracks` maps the 0-based row i >= 1 to the track of pair (0, i). Frames
    with at least min(min_rows, m - 1) observed pairs become columns, thinned
    uniformly in time to at most n_max.

    Raises:
        NoEvents: no frame has enough observed pairs
    """
    for row, track in tracks.items():
        if track.pair[0] != 0 or not 1 <= row < m:
            raise ValueError(f"Track for row {row} must belong to a pair (0, i), got {track.pair}")
    if not tracks:
        raise NoEvents("No tracks to assemble")

    first = min(int(t.frames[0]) for t in tracks.values())
    last = max(int(t.frames[-1]) for t in tracks.values())
    grid = np.arange(first, last + 1)
    values = np.full((m, len(grid)), np.nan)
    values[0] = 0.0
    for row, track in tracks.items():
        values[row] = track.value_at(grid)

    observed = np.isfinite(values[1:]).sum(axis=0)
    needed = min(min_rows, m - 1)
    columns = np.flatnonzero(observed >= needed)
    if len(columns) == 0:
        raise NoEvents(f"No frame has {needed} observed pairs")
    if len(columns) > n_max:
        columns = columns[np.unique(np.round(np.linspace(0, len(columns) - 1, n_max)).astype(int))]

    U = values[:, columns]
    mask = np.isfinite(U)
    logger.info(f"Assembled matching matrix {m}x{len(columns)} with {int((~mask).sum())} missing entries")
    return TdoaMatrix(U=U, mask=mask, event_times=spec.frame_time(grid[columns]))


# ============================================
# Per-pair driver and stage bookkeeping
# ============================================

@dataclass
class PairTracking:
    """Every intermediate of one pair, kept for the stage table."""
    pair: Pair
    peaks: List[Peak]
    tracklets: List[Tracklet] = field(default_factory=list)
    tracks: List[Track] = field(default_factory=list)
    direct: Optional[Track] = None
    smoothed: Optional[Track] = None

    def stage_peaks(self) -> Dict[str, List[Peak]]:
        stages = {
            "peaks": list(self.peaks),
            "tracklets": [p for t in self.tracklets for p in t.inliers],
            "merged": [p for t in self.tracks for p in t.as_peaks()],
        }
        stages["direct"] = self.direct.as_peaks() if self.direct is not None else []
        stages["smoothed"] = self.smoothed.as_peaks() if self.smoothed is not None else []
        return stages


def track_pair(
    peaks: Sequence[Peak],
    window: int = 21,
    inlier_tol: float = 0.04,
    iterations: int = 300,
    min_inliers: int = 8,
    line_tol: float = 0.04,
    time_gap_max: int = 5,
    max_gap: int = 5,
    smooth_span: int = 9,
    seed: SeedLike = None,
) -> PairTracking:
    """Run all tracking stages on one pair; `direct` stays None when nothing is tracked."""
    pair = peaks[0].pair if peaks else (0, 0)
    result = PairTracking(pair=pair, peaks=list(peaks))
    result.tracklets = fit_tracklets(peaks, window, inlier_tol, iterations, min_inliers, seed)
    result.tracks = merge_tracklets(result.tracklets, line_tol, time_gap_max, max_gap)
    try:
        result.direct = select_direct_path(result.tracks)
    except NoTracks:
        logger.warning(f"Pair {pair}: no direct-path track found")
        return result
    result.smoothed = smooth_track(result.direct, smooth_span)
    return result


def stage_table(
    results: Sequence[Tuple[Pair, Mapping[str, Sequence[Peak]]]],
    truth: Callable[[Pair, np.ndarray], np.ndarray],
    tolerance: float,
) -> List[Dict[str, object]]:
    """
    Inlier/outlier counts per stage summed over pairs.

    `results` holds (pair, peaks per stage), e.g. from PairTracking.stage_peaks().
    `truth(pair, frames)` gives the direct-path range difference; a peak farther
    than `tolerance` from it is an outlier.
    """
    totals: Dict[str, List[int]] = {}
    for pair, by_stage in results:
        for stage, stage_peaks in by_stage.items():
            counts = totals.setdefault(stage, [0, 0])
            if not stage_peaks:
                continue
            frames = np.array([p.frame_index for p in stage_peaks])
            w = np.array([p.range_diff for p in stage_peaks])
            outlier = np.abs(w - truth(pair, frames)) > tolerance
            counts[0] += int((~outlier).sum())
            counts[1] += int(outlier.sum())
    return [{"stage": stage, "inliers": c[0], "outliers": c[1]} for stage, c in totals.items()]
