"""
Test reflection estimation: consistency correction, mirror RANSAC and plane fitting
"""

import itertools

import numpy as np
import pytest

from src.calibration.mirror_estimator import (
    ConsistentDetection,
    MirrorEstimate,
    consistency_correct,
    extract_all_mirrors,
    fit_planes,
    ransac_mirror,
)
from src.core.exceptions import InsufficientCandidates
from src.core.model import Plane, SourcePath, mirror_point
from src.signal_processing.gcc_phat import FrameSpec, Peak
from src.simulation.scene_simulator import generate_room_scene, simulate_pair_peaks

FLOOR = Plane.from_normal((0, 0, 1), 0.0)
WALL = Plane.from_normal((1, 0, 0), 0.0)


@pytest.fixture
def mics():
    return np.array([
        [1.0, 1.0, 1.0], [2.5, 1.2, 1.4], [1.8, 3.0, 0.8],
        [3.2, 2.6, 1.9], [2.2, 4.1, 1.1],
    ])


def detections_for(image, mic_index, n=40, seed=0):
    """Exact corrected distances from scattered 3D source positions to `image`."""
    rng = np.random.default_rng(seed)
    sources = rng.uniform([0.5, 0.5, 0.5], [4.5, 5.5, 2.5], (n, 3))
    return [
        ConsistentDetection(mic_index=mic_index, frame_index=k, time=float(k), support=4,
                            distance=float(np.linalg.norm(s - image)), source=s)
        for k, s in enumerate(sources)
    ]


def away_from(candidates, image, margin=0.1):
    """Drop candidates that happen to also fit `image`."""
    return [c for c in candidates if abs(np.linalg.norm(c.source - image) - c.distance) > margin]


def test_consistency_correct_finds_reflection(mics):
    spec = FrameSpec(sample_rate=16000, frame_len=2048, hop=1000)
    times = spec.frame_time(np.arange(5))
    positions = np.column_stack([np.linspace(2, 3, 5), np.linspace(2, 2.5, 5), np.full(5, 1.5)])
    path = SourcePath(times=times, positions=positions)
    target = 2
    image = mirror_point(mics[target], FLOOR)

    peaks = {}
    for i1 in range(len(mics)):
        if i1 == target:
            continue
        pair = (min(i1, target), max(i1, target))
        sign = 1.0 if pair == (i1, target) else -1.0
        for f, s in enumerate(positions):
            reach = np.linalg.norm(s - mics[i1])
            direct = np.linalg.norm(s - mics[target]) - reach
            reflected = np.linalg.norm(s - image) - reach
            peaks.setdefault(pair, []).extend([
                Peak(pair=pair, frame_index=f, range_diff=sign * direct, score=0.9),
                Peak(pair=pair, frame_index=f, range_diff=sign * reflected, score=0.5),
            ])

    detections = consistency_correct(peaks, path, mics, target, spec)
    assert len(detections) == 5
    for d in detections:
        assert d.support == 4
        assert d.distance == pytest.approx(np.linalg.norm(positions[d.frame_index] - image), abs=1e-9)


class TestRansacMirror:
    def test_recovers_image(self, mics):
        image = mirror_point(mics[0], FLOOR)
        estimate = ransac_mirror(detections_for(image, 0), iterations=200, seed=1)
        assert np.linalg.norm(estimate.position - image) < 1e-6
        assert len(estimate.inliers) == 40
        assert estimate.mic_id == 1

    def test_ignores_clutter(self, mics):
        image = mirror_point(mics[0], WALL)
        candidates = detections_for(image, 0, n=30)
        rng = np.random.default_rng(5)
        clutter = [
            ConsistentDetection(mic_index=0, frame_index=100 + k, time=0.0, support=4,
                                distance=float(rng.uniform(1, 6)), source=rng.uniform(0, 4, 3))
            for k in range(10)
        ]
        estimate = ransac_mirror(candidates + away_from(clutter, image), iterations=300, seed=2)
        assert np.linalg.norm(estimate.position - image) < 1e-6
        assert len(estimate.inliers) >= 30

    def test_needs_three_candidates(self, mics):
        with pytest.raises(InsufficientCandidates):
            ransac_mirror(detections_for(mics[0], 0, n=2))


def test_extract_all_mirrors_sequentially(mics):
    floor_image = mirror_point(mics[1], FLOOR)
    wall_image = mirror_point(mics[1], WALL)
    floor = away_from(detections_for(floor_image, 1, n=40, seed=1), wall_image)
    wall = away_from(detections_for(wall_image, 1, n=30, seed=2), floor_image)
    assert len(floor) > len(wall) >= 20
    candidates = floor + wall
    estimates = extract_all_mirrors({1: candidates}, mics, iterations=300, min_inliers=20, seed=0)
    assert len(estimates) == 2
    assert np.linalg.norm(estimates[0].position - floor_image) < 1e-6
    assert np.linalg.norm(estimates[1].position - wall_image) < 1e-6
    assert [e.path_index for e in estimates] == [2, 3]


def test_fit_planes_from_several_microphones(mics):
    estimates = [
        MirrorEstimate(mic_id=i + 1, path_index=2, position=mirror_point(mics[i], FLOOR),
                       inliers=detections_for(mics[i], i, n=10))
        for i in range(3)
    ]
    planes = fit_planes(estimates, mics)
    assert len(planes) == 1
    assert abs(planes[0].normal @ FLOOR.normal) == pytest.approx(1.0)
    assert planes[0].d == pytest.approx(0.0, abs=1e-9)
    assert all(e.first_order and e.plane is not None for e in estimates)
    assert estimates[0].to_mirrored_microphone().inlier_count == 10


def test_fit_planes_needs_two_microphones_per_plane(mics):
    estimates = [
        MirrorEstimate(mic_id=1, path_index=2, position=mirror_point(mics[0], FLOOR),
                       inliers=detections_for(mics[0], 0, n=10)),
        MirrorEstimate(mic_id=2, path_index=2, position=mirror_point(mics[1], WALL),
                       inliers=detections_for(mics[1], 1, n=10)),
    ]
    assert fit_planes(estimates, mics) == []


def test_fit_planes_without_inlier_weights(mics):
    estimates = [
        MirrorEstimate(mic_id=i + 1, path_index=2, position=mirror_point(mics[i], WALL), inliers=[])
        for i in range(3)
    ]
    planes = fit_planes(estimates, mics)
    assert len(planes) == 1
    assert np.all(np.isfinite(planes[0].normal))
    assert abs(planes[0].normal @ WALL.normal) == pytest.approx(1.0)
    assert planes[0].d == pytest.approx(0.0, abs=1e-9)


@pytest.mark.slow
def test_recovers_floor_and_wall_from_peak_clouds():
    scene = generate_room_scene(n_mics=6, duration=20.0, seed=21)
    truth_mics = scene.mic_positions
    spec = FrameSpec(sample_rate=16000)
    peaks = {
        pair: simulate_pair_peaks(scene, pair, spec, n_frames=300, peak_sigma=1e-3, outliers_per_frame=1.0,
                                  plane_visibility=(0.95, 0.75), seed=10 * pair[0] + pair[1])
        for pair in itertools.combinations(range(6), 2)
    }
    candidates = {
        target: consistency_correct(peaks, scene.source_path, truth_mics, target, spec)
        for target in range(6)
    }
    estimates = extract_all_mirrors(candidates, truth_mics, iterations=500, min_inliers=50, seed=3)
    planes = fit_planes(estimates, truth_mics)

    for mic_id in range(1, 7):
        counts = [len(e.inliers) for e in estimates if e.mic_id == mic_id]
        assert len(counts) == 2
        assert counts[0] > counts[1]
    for estimate in estimates:
        error = min(np.linalg.norm(estimate.position - mirror_point(truth_mics[estimate.mic_id - 1], plane))
                    for plane in scene.planes)
        assert error < 0.01

    assert len(planes) == 2
    for truth in scene.planes:
        match = max(planes, key=lambda p: abs(p.normal @ truth.normal))
        cosine = match.normal @ truth.normal
        assert np.degrees(np.arccos(min(abs(cosine), 1.0))) < 1.0
        assert abs(np.sign(cosine) * match.d - truth.d) < 0.01
