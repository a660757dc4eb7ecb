"""
Framing, GCC-PHAT correlation and peak extraction.

Sign convention: a positive lag (and a positive range difference w) means the
second channel of the pair hears the sound later than the first.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.core.exceptions import SignalTooShort, ZeroEnergyFrame
from src.core.seeding import SeedLike, as_generator

logger = logging.getLogger(__name__)

SPECTRAL_FLOOR = 1e-12
Pair = Tuple[int, int]


@dataclass(frozen=True)
class FrameSpec:
    """Analysis framing; T_s = 1 / sample_rate."""
    sample_rate: float
    frame_len: int = 2048
    hop: int = 1000
    speed_of_sound: float = 343.0
    interp: int = 4

    def __post_init__(self):
        if not 0 < self.hop <= self.frame_len:
            raise ValueError(f"hop must be in (0, frame_len], got hop={self.hop}")
        if self.sample_rate <= 0 or self.speed_of_sound <= 0:
            raise ValueError("sample_rate and speed_of_sound must be positive")
        if self.interp < 1:
            raise ValueError("interp must be >= 1")

    @property
    def meters_per_sample(self) -> float:
        return self.speed_of_sound / self.sample_rate

    def frame_time(self, frame_index) -> np.ndarray:
        """Centre time (s) of frame(s)."""
        return (np.asarray(frame_index, dtype=float) * self.hop + self.frame_len / 2.0) / self.sample_rate

    def max_lag_for(self, room_diameter: float) -> int:
        """ceil(D_max * fs / v), capped at half a frame."""
        lag = int(math.ceil(room_diameter * self.sample_rate / self.speed_of_sound))
        return min(lag, self.frame_len // 2)


@dataclass(frozen=True)
class Peak:
    """One GCC-PHAT peak: range difference w (meters) for a channel pair at a frame."""
    pair: Pair
    frame_index: int
    range_diff: float
    score: float
    lag: float = 0.0


@dataclass(frozen=True)
class ScoreMatrix:
    """GCC scores, lags x frames; lag axis in meters, symmetric about zero."""
    pair: Pair
    values: np.ndarray
    lag_axis: np.ndarray


def frame_signal(channel: np.ndarray, spec: FrameSpec) -> np.ndarray:
    """
    Split a channel into frames of frame_len every hop samples.

    Frame t (0-based) starts at sample t * hop; the trailing partial frame is dropped.
    """
    channel = np.asarray(channel, dtype=float).reshape(-1)
    if len(channel) < spec.frame_len:
        raise SignalTooShort(
            f"Signal has {len(channel)} samples, need at least {spec.frame_len}"
        )
    return sliding_window_view(channel, spec.frame_len)[::spec.hop]


def gcc_phat(frame1: np.ndarray, frame2: np.ndarray, max_lag: int, interp: int = 1) -> np.ndarray:
    """
    Phase-transform weighted cross-correlation restricted to [-max_lag, max_lag].

    The frames are zero padded to twice their length. Bins whose cross-power is
    below 1e-12 of the strongest bin are zeroed before normalization. With
    interp > 1 the correlation is evaluated on a grid of 1/interp samples, so the
    returned vector has 2 * max_lag * interp + 1 entries.

    Raises:
        ZeroEnergyFrame: either frame is identically zero
    """
    frame1 = np.asarray(frame1, dtype=float)
    frame2 = np.asarray(frame2, dtype=float)
    if frame1.shape != frame2.shape:
        raise ValueError("GCC-PHAT frames must have equal length")
    if not np.any(frame1) or not np.any(frame2):
        raise ZeroEnergyFrame("GCC-PHAT received an all-zero frame")

    n_fft = 2 * len(frame1)
    spectrum1 = np.fft.rfft(frame1, n=n_fft)
    spectrum2 = np.fft.rfft(frame2, n=n_fft)
    cross = np.conj(spectrum1) * spectrum2
    magnitude = np.abs(cross)
    keep = magnitude > SPECTRAL_FLOOR * magnitude.max()
    weighted = np.zeros_like(cross)
    weighted[keep] = cross[keep] / magnitude[keep]
    if interp > 1:
        # old Nyquist bin becomes an interior bin of the longer transform
        weighted[-1] *= 0.5

    # irfft normalizes by its own length, rescale so identical frames peak at 1
    cc = np.fft.irfft(weighted, n=interp * n_fft) * interp
    max_shift = min(int(max_lag) * interp, interp * n_fft // 2)
    return np.concatenate((cc[-max_shift:], cc[:max_shift + 1])) if max_shift else cc[:1]


def top_peaks(
    corr: np.ndarray,
    k: int = 4,
    threshold: float = 0.1,
    interp: int = 1,
    pair: Pair = (0, 1),
    frame_index: int = 0,
    meters_per_sample: float = 1.0,
) -> List[Peak]:
    """
    Up to k strict local maxima above threshold, strongest first.

    Positions are refined by a parabola through the three samples around each
    maximum. Equal scores are ordered by smaller |lag|.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    corr = np.asarray(corr, dtype=float)
    if len(corr) < 3:
        return []
    centre = (len(corr) - 1) // 2
    inner = corr[1:-1]
    is_max = (inner > corr[:-2]) & (inner > corr[2:]) & (inner > threshold)
    indices = np.nonzero(is_max)[0] + 1
    if len(indices) == 0:
        return []

    left, mid, right = corr[indices - 1], corr[indices], corr[indices + 1]
    curvature = left - 2.0 * mid + right
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = np.where(curvature < 0, 0.5 * (left - right) / curvature, 0.0)
    delta = np.clip(delta, -0.5, 0.5)
    lags = (indices - centre + delta) / interp

    order = sorted(range(len(indices)), key=lambda i: (-mid[i], abs(indices[i] - centre)))
    peaks = []
    for i in order[:k]:
        peaks.append(Peak(
            pair=pair,
            frame_index=frame_index,
            range_diff=float(lags[i] * meters_per_sample),
            score=float(min(mid[i], 1.0)),
            lag=float(lags[i]),
        ))
    return peaks


def score_matrix(
    channel1: np.ndarray,
    channel2: np.ndarray,
    spec: FrameSpec,
    k: int = 4,
    threshold: float = 0.1,
    max_lag: Optional[int] = None,
    pair: Pair = (0, 1),
) -> Tuple[ScoreMatrix, List[Peak]]:
    """GCC-PHAT score per frame arranged as columns, plus the per-frame top peaks."""
    frames1 = frame_signal(channel1, spec)
    frames2 = frame_signal(channel2, spec)
    n_frames = min(len(frames1), len(frames2))
    if max_lag is None:
        max_lag = spec.frame_len // 2
    n_lags = 2 * max_lag * spec.interp + 1
    values = np.zeros((n_lags, n_frames))
    peaks: List[Peak] = []

    for t in range(n_frames):
        try:
            corr = gcc_phat(frames1[t], frames2[t], max_lag, spec.interp)
        except ZeroEnergyFrame:
            logger.debug(f"Pair {pair}: frame {t} is silent, no peaks")
            continue
        values[:, t] = corr
        peaks.extend(top_peaks(
            corr, k=k, threshold=threshold, interp=spec.interp, pair=pair,
            frame_index=t, meters_per_sample=spec.meters_per_sample,
        ))

    lag_axis = np.arange(-max_lag * spec.interp, max_lag * spec.interp + 1) / spec.interp
    return ScoreMatrix(pair=pair, values=values, lag_axis=lag_axis * spec.meters_per_sample), peaks


def detect_pair_peaks(
    channels: np.ndarray,
    spec: FrameSpec,
    k: int = 4,
    threshold: float = 0.1,
    max_lag: Optional[int] = None,
    pairs: Optional[Sequence[Pair]] = None,
    on_scores: Optional[Callable[[ScoreMatrix], None]] = None,
) -> Dict[Pair, List[Peak]]:
    """Run score_matrix over channel pairs (all i1 < i2 by default); `on_scores` sees each grid."""
    channels = np.asarray(channels, dtype=float)
    m = channels.shape[1]
    if pairs is None:
        pairs = [(i1, i2) for i1 in range(m) for i2 in range(i1 + 1, m)]
    result: Dict[Pair, List[Peak]] = {}
    for pair in pairs:
        scores, peaks = score_matrix(channels[:, pair[0]], channels[:, pair[1]], spec,
                                     k=k, threshold=threshold, max_lag=max_lag, pair=tuple(pair))
        if on_scores is not None:
            on_scores(scores)
        result[tuple(pair)] = peaks
        logger.debug(f"Pair {pair}: {len(peaks)} peaks")
    logger.info(f"Detected peaks on {len(result)} channel pairs")
    return result


def pair_peaks(peaks_by_pair: Dict[Pair, List[Peak]], i1: int, i2: int) -> List[Peak]:
    """Peaks for (i1, i2), negating the stored (i2, i1) direction when needed."""
    if (i1, i2) in peaks_by_pair:
        return peaks_by_pair[(i1, i2)]
    flipped = peaks_by_pair.get((i2, i1), [])
    return [
        Peak(pair=(i1, i2), frame_index=p.frame_index, range_diff=-p.range_diff,
             score=p.score, lag=-p.lag)
        for p in flipped
    ]


def null_peak_threshold(frame_len: int = 2048, max_lag: int = 512, trials: int = 1000,
                        interp: int = 1, seed: SeedLike = None) -> float:
    """3x the 99th percentile of GCC-PHAT scores between independent white-noise frames."""
    rng = as_generator(seed)
    scores = []
    for _ in range(trials):
        corr = gcc_phat(rng.standard_normal(frame_len), rng.standard_normal(frame_len),
                        max_lag, interp)
        scores.append(np.abs(corr))
    return float(3.0 * np.percentile(np.concatenate(scores), 99))
