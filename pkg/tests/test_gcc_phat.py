"""
Test framing, GCC-PHAT correlation and peak picking
"""

import numpy as np
import pytest

from src.core.exceptions import SignalTooShort, ZeroEnergyFrame
from src.signal_processing.gcc_phat import (
    FrameSpec,
    Peak,
    detect_pair_peaks,
    frame_signal,
    gcc_phat,
    null_peak_threshold,
    pair_peaks,
    score_matrix,
    top_peaks,
)
from src.simulation.scene_simulator import fractional_delay


@pytest.fixture
def noise():
    return np.random.default_rng(7).standard_normal(20000)


def delayed_pair(x: np.ndarray, delay: int, length: int, start: int = 1000):
    """Second channel hears x `delay` samples later than the first."""
    return x[start:start + length], x[start - delay:start - delay + length]


class TestFrameSpec:
    def test_derived_quantities(self):
        spec = FrameSpec(sample_rate=48000, frame_len=2048, hop=1000)
        assert spec.meters_per_sample == pytest.approx(343.0 / 48000)
        assert spec.frame_time(0) == pytest.approx(1024 / 48000)
        assert spec.max_lag_for(20.0) == 1024

    def test_hop_must_fit_frame(self):
        with pytest.raises(ValueError):
            FrameSpec(sample_rate=48000, frame_len=512, hop=1024)


def test_frame_signal_drops_partial_frame():
    spec = FrameSpec(sample_rate=16000, frame_len=2048, hop=1000)
    frames = frame_signal(np.arange(5000.0), spec)
    assert frames.shape == (3, 2048)
    assert frames[1, 0] == 1000.0


def test_frame_signal_too_short():
    with pytest.raises(SignalTooShort):
        frame_signal(np.zeros(100), FrameSpec(sample_rate=16000))


class TestGccPhat:
    def test_identical_frames_peak_at_one(self, noise):
        corr = gcc_phat(noise[:1024], noise[:1024], max_lag=10)
        assert len(corr) == 21
        assert corr[10] == pytest.approx(1.0, abs=1e-9)

    def test_positive_lag_when_second_channel_is_later(self, noise):
        first, second = delayed_pair(noise, delay=7, length=2048)
        corr = gcc_phat(first, second, max_lag=50)
        assert int(np.argmax(corr)) - 50 == 7

    def test_interpolated_length(self, noise):
        first, second = delayed_pair(noise, delay=3, length=1024)
        corr = gcc_phat(first, second, max_lag=20, interp=4)
        assert len(corr) == 2 * 20 * 4 + 1
        assert (int(np.argmax(corr)) - 80) / 4 == pytest.approx(3.0)

    def test_zero_frame(self, noise):
        with pytest.raises(ZeroEnergyFrame):
            gcc_phat(np.zeros(256), noise[:256], max_lag=10)


class TestTopPeaks:
    def test_strongest_first_with_parabolic_refinement(self):
        corr = np.array([0.0, 0.2, 0.5, 0.2, 0.0, 0.3, 0.9, 0.3, 0.0])
        peaks = top_peaks(corr, k=2, threshold=0.1, meters_per_sample=0.5)
        assert [p.lag for p in peaks] == [pytest.approx(2.0), pytest.approx(-2.0)]
        assert peaks[0].score == pytest.approx(0.9)
        assert peaks[0].range_diff == pytest.approx(1.0)

    def test_threshold_and_k(self):
        corr = np.array([0.0, 0.2, 0.5, 0.2, 0.0, 0.3, 0.9, 0.3, 0.0])
        assert len(top_peaks(corr, k=1, threshold=0.1)) == 1
        assert len(top_peaks(corr, k=4, threshold=0.6)) == 1
        assert top_peaks(corr, k=4, threshold=0.95) == []


def test_score_matrix_tracks_constant_delay(noise):
    spec = FrameSpec(sample_rate=16000, frame_len=1024, hop=512, interp=1)
    first = noise[100:10100]
    second = noise[95:10095]
    scores, peaks = score_matrix(first, second, spec, k=1, max_lag=32)
    assert scores.values.shape[0] == 65
    assert all(abs(p.lag - 5.0) < 0.25 for p in peaks)
    assert len({p.frame_index for p in peaks}) == scores.values.shape[1]


def test_detect_pair_peaks_all_pairs(noise):
    spec = FrameSpec(sample_rate=16000, frame_len=1024, hop=1024)
    channels = np.column_stack([noise[100:6100], noise[98:6098], noise[96:6096]])
    result = detect_pair_peaks(channels, spec, k=1, max_lag=16)
    assert sorted(result) == [(0, 1), (0, 2), (1, 2)]
    assert all(abs(p.lag - 4.0) < 0.25 for p in result[(0, 2)])


def test_pair_peaks_flips_direction():
    stored = {(1, 0): [Peak(pair=(1, 0), frame_index=3, range_diff=0.25, score=0.8, lag=2.0)]}
    flipped = pair_peaks(stored, 0, 1)
    assert flipped[0].pair == (0, 1)
    assert flipped[0].range_diff == -0.25
    assert pair_peaks(stored, 1, 0) is stored[(1, 0)]


def test_null_threshold_is_small_and_positive():
    threshold = null_peak_threshold(frame_len=256, max_lag=32, trials=20, seed=1)
    assert 0.0 < threshold < 1.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fractional_delay_recovered_at_20_db(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(8000)
    y = fractional_delay(x, np.arange(len(x)) - 10.3)
    first = x[2000:4048] + 0.1 * rng.standard_normal(2048)
    second = y[2000:4048] + 0.1 * rng.standard_normal(2048)
    corr = gcc_phat(first, second, max_lag=32, interp=4)
    peak = top_peaks(corr, k=1, threshold=0.1, interp=4)[0]
    assert peak.lag == pytest.approx(10.3, abs=0.1)
