"""
Test peak tracking: tracklets, merging, direct-path selection, smoothing, assembly
"""

import numpy as np
import pytest

from src.core.exceptions import NoEvents, NoTracks
from src.signal_processing.gcc_phat import FrameSpec, Peak
from src.simulation.scene_simulator import direct_range_difference, generate_room_scene, simulate_pair_peaks
from src.tracking.tdoa_tracker import (
    Track,
    assemble_matching_matrix,
    fit_tracklets,
    merge_tracklets,
    select_direct_path,
    smooth_track,
    stage_table,
    track_pair,
)

PAIR = (0, 1)


def line_peaks(n_frames=60, slope=0.005, intercept=0.3, clutter=2, seed=0):
    """A straight direct-path track plus uniform clutter in every frame."""
    rng = np.random.default_rng(seed)
    peaks = []
    for f in range(n_frames):
        peaks.append(Peak(pair=PAIR, frame_index=f, range_diff=slope * f + intercept, score=0.9))
        for w in rng.uniform(-3.0, 3.0, clutter):
            peaks.append(Peak(pair=PAIR, frame_index=f, range_diff=float(w), score=0.2))
    return peaks


class TestTracklets:
    def test_windows_recover_the_line(self):
        tracklets = fit_tracklets(line_peaks(), window=21, seed=1)
        assert len(tracklets) >= 3
        for tracklet in tracklets:
            assert tracklet.slope == pytest.approx(0.005, abs=1e-9)
            assert tracklet.intercept == pytest.approx(0.3, abs=1e-7)

    def test_empty_input(self):
        assert fit_tracklets([]) == []

    def test_window_too_small(self):
        with pytest.raises(ValueError):
            fit_tracklets(line_peaks(), window=1)


class TestMerging:
    def test_consecutive_windows_merge_into_one_track(self):
        tracks = merge_tracklets(fit_tracklets(line_peaks(), window=21, seed=1))
        longest = select_direct_path(tracks)
        assert len(longest) == 60
        assert np.allclose(longest.w, 0.005 * np.arange(60) + 0.3)

    def test_gap_splits_track(self):
        peaks = [p for p in line_peaks(clutter=0) if not 25 <= p.frame_index < 35]
        tracks = merge_tracklets(fit_tracklets(peaks, window=21, min_inliers=5, seed=1), max_gap=5)
        assert all(not (t.frames[0] < 25 and t.frames[-1] >= 35) for t in tracks)

    def test_no_tracks(self):
        with pytest.raises(NoTracks):
            select_direct_path([])


def test_direct_path_prefers_longest_then_score():
    short = Track(pair=PAIR, frames=[0, 1, 2], w=[0.0, 0.0, 0.0], scores=[1.0, 1.0, 1.0])
    long_weak = Track(pair=PAIR, frames=[0, 1, 2, 3], w=[1.0] * 4, scores=[0.2] * 4)
    long_strong = Track(pair=PAIR, frames=[0, 1, 2, 3], w=[2.0] * 4, scores=[0.8] * 4)
    assert select_direct_path([short, long_weak, long_strong]) is long_strong


class TestSmoothing:
    def test_quadratic_passes_through_and_spike_is_replaced(self):
        frames = np.arange(31)
        truth = 1e-4 * frames ** 2 + 0.01 * frames
        w = truth.copy()
        w[15] += 0.5
        smoothed = smooth_track(Track(pair=PAIR, frames=frames, w=w, scores=np.ones(31)), span=9)
        assert np.allclose(smoothed.w, truth, atol=1e-6)

    def test_span_must_be_odd(self):
        track = Track(pair=PAIR, frames=np.arange(10), w=np.zeros(10), scores=np.ones(10))
        with pytest.raises(ValueError):
            smooth_track(track, span=8)


def test_track_pair_runs_every_stage():
    result = track_pair(line_peaks(), seed=2)
    assert result.smoothed is not None
    assert len(result.smoothed) == 60
    stages = result.stage_peaks()
    assert list(stages) == ["peaks", "tracklets", "merged", "direct", "smoothed"]
    assert len(stages["peaks"]) == 180


class TestAssembly:
    @staticmethod
    def track(row, frames, value):
        frames = np.asarray(frames)
        return Track(pair=(0, row), frames=frames, w=np.full(len(frames), value), scores=np.ones(len(frames)))

    def test_columns_need_enough_rows(self):
        spec = FrameSpec(sample_rate=16000)
        tracks = {1: self.track(1, range(0, 10), 0.1),
                  2: self.track(2, range(0, 10), 0.2),
                  3: self.track(3, range(5, 15), 0.3)}
        tdoa = assemble_matching_matrix(tracks, 4, spec, min_rows=3)
        assert tdoa.n == 5
        assert np.all(tdoa.U[0] == 0.0)
        assert np.allclose(tdoa.U[3], 0.3)
        assert np.allclose(tdoa.event_times, spec.frame_time(np.arange(5, 10)))

    def test_thinning_to_n_max(self):
        spec = FrameSpec(sample_rate=16000)
        tracks = {1: self.track(1, range(100), 0.1), 2: self.track(2, range(100), 0.2)}
        tdoa = assemble_matching_matrix(tracks, 3, spec, min_rows=2, n_max=10)
        assert tdoa.n == 10

    def test_no_overlap(self):
        spec = FrameSpec(sample_rate=16000)
        tracks = {1: self.track(1, range(0, 5), 0.1), 2: self.track(2, range(10, 15), 0.2)}
        with pytest.raises(NoEvents):
            assemble_matching_matrix(tracks, 3, spec, min_rows=2)

    def test_rejects_foreign_pair(self):
        spec = FrameSpec(sample_rate=16000)
        bad = Track(pair=(1, 2), frames=[0, 1], w=[0.0, 0.0], scores=[1.0, 1.0])
        with pytest.raises(ValueError):
            assemble_matching_matrix({2: bad}, 3, spec)


def test_stage_table_counts_outliers():
    peaks = [Peak(pair=PAIR, frame_index=0, range_diff=0.0, score=1.0),
             Peak(pair=PAIR, frame_index=1, range_diff=1.0, score=1.0)]
    rows = stage_table([(PAIR, {"peaks": peaks, "smoothed": peaks[:1]})],
                       lambda pair, frames: np.zeros(len(frames)), tolerance=0.05)
    assert rows == [{"stage": "peaks", "inliers": 1, "outliers": 1},
                    {"stage": "smoothed", "inliers": 1, "outliers": 0}]


@pytest.mark.slow
def test_tracking_removes_dense_clutter():
    scene = generate_room_scene(n_mics=4, duration=8.0, plane_names=(), seed=8)
    spec = FrameSpec(sample_rate=48000)
    results = []
    for i in range(1, 4):
        pair = (0, i)
        peaks = simulate_pair_peaks(scene, pair, spec, n_frames=300, outliers_per_frame=4.0, seed=i)
        results.append((pair, track_pair(peaks, seed=i).stage_peaks()))

    def truth(pair, frames):
        return direct_range_difference(scene, pair, spec.frame_time(frames))

    rows = {row["stage"]: row for row in stage_table(results, truth, tolerance=0.04)}
    assert rows["peaks"]["outliers"] >= 3 * rows["peaks"]["inliers"]
    assert rows["smoothed"]["outliers"] == 0
    assert rows["smoothed"]["inliers"] >= 0.85 * rows["peaks"]["inliers"]
