"""
Clap onset detection and cross-channel matching.

Each channel runs a flank detector: short-term RMS over a 10 ms window ending
at the current sample, compared against the RMS of the preceding 100 ms. While
an onset is active the baseline is frozen at its pre-onset value, so a second
clap shortly after the first is still seen as a new flank.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy.signal import fftconvolve

from src.core.model import TdoaMatrix
from src.signal_processing.gcc_phat import FrameSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClapEvent:
    """One clap heard on every channel; u = v * (t_i - t_1)."""
    time: float
    onsets: np.ndarray
    u: np.ndarray


@dataclass
class ClapDetection:
    """Per-channel onset times (s) and the matched events."""
    onsets: List[np.ndarray]
    events: List[ClapEvent] = field(default_factory=list)
    rejected_ambiguous: int = 0
    rejected_incomplete: int = 0

    def to_tdoa_matrix(self) -> TdoaMatrix:
        if not self.events:
            m = len(self.onsets)
            return TdoaMatrix(U=np.zeros((m, 0)), mask=np.zeros((m, 0), dtype=bool),
                              event_times=np.zeros(0))
        U = np.column_stack([event.u for event in self.events])
        return TdoaMatrix(U=U, mask=np.ones_like(U, dtype=bool),
                          event_times=np.array([event.time for event in self.events]))


class FlankDetector:
    """Energy-ratio onset detector for one channel."""

    def __init__(self, sample_rate: float, window_ms: float = 10.0,
                 baseline_ms: float = 100.0, ratio: float = 6.0):
        self.sample_rate = sample_rate
        self.window = max(1, int(round(window_ms * 1e-3 * sample_rate)))
        self.baseline = max(1, int(round(baseline_ms * 1e-3 * sample_rate)))
        self.ratio = ratio

    def short_term_rms(self, x: np.ndarray, length: int) -> np.ndarray:
        """RMS over the `length` samples ending at each sample."""
        energy = fftconvolve(x ** 2, np.ones(length) / length, mode="full")[:len(x)]
        return np.sqrt(np.clip(energy, 0.0, None))

    def detect(self, x: np.ndarray) -> np.ndarray:
        """Onset sample indices."""
        x = np.asarray(x, dtype=float)
        if len(x) == 0 or not np.any(x):
            return np.zeros(0, dtype=int)
        short = self.short_term_rms(x, self.window)
        trailing = self.short_term_rms(x, self.baseline)
        baseline = np.zeros_like(trailing)
        baseline[self.window:] = trailing[:-self.window] if self.window < len(x) else 0.0
        floor = 1e-4 * short.max()

        hold = self.window + self.baseline
        onsets: List[int] = []
        n = 0
        while n < len(x):
            above = short[n:] > self.ratio * np.maximum(baseline[n:], floor)
            hits = np.nonzero(above)[0]
            if len(hits) == 0:
                break
            onset = n + int(hits[0])
            onsets.append(onset)

            # frozen baseline: re-trigger on every new rising edge inside the hold window
            frozen = self.ratio * max(baseline[onset], floor)
            end = min(onset + hold, len(x))
            active = short[onset:end] > frozen
            rising = np.nonzero(active[1:] & ~active[:-1])[0] + 1
            onsets.extend(int(onset + r) for r in rising)
            n = end
            # skip the tail of an event still above threshold at the end of the hold
            while n < len(x) and short[n] > frozen:
                n += 1
        return np.array(sorted(set(onsets)), dtype=int)


def detect_claps(
    channels: np.ndarray,
    spec: FrameSpec,
    room_diameter: float = 20.0,
    window_ms: float = 10.0,
    baseline_ms: float = 100.0,
    ratio: float = 6.0,
) -> ClapDetection:
    """
    Detect onsets on every channel and match them into clap events.

    A reference-channel onset forms an event when every channel has exactly one
    onset within the physical delay window. Claps closer together than that
    window are rejected as ambiguous.
    """
    channels = np.asarray(channels, dtype=float)
    if channels.ndim != 2 or channels.shape[1] < 2:
        raise ValueError("detect_claps needs a (samples, channels) array with >= 2 channels")
    detector = FlankDetector(spec.sample_rate, window_ms, baseline_ms, ratio)
    onset_samples = [detector.detect(channels[:, i]) for i in range(channels.shape[1])]
    window = int(math.ceil(room_diameter * spec.sample_rate / spec.speed_of_sound))

    result = ClapDetection(onsets=[o / spec.sample_rate for o in onset_samples])
    reference = onset_samples[0]
    for t1 in reference:
        neighbours = np.abs(reference - t1) <= window
        if neighbours.sum() > 1:
            result.rejected_ambiguous += 1
            continue
        matched = []
        ambiguous = False
        for onsets in onset_samples:
            near = onsets[np.abs(onsets - t1) <= window]
            if len(near) > 1:
                ambiguous = True
                break
            matched.append(near[0] if len(near) == 1 else -1)
        if ambiguous:
            result.rejected_ambiguous += 1
            continue
        matched = np.array(matched)
        if np.any(matched < 0):
            result.rejected_incomplete += 1
            continue
        times = matched / spec.sample_rate
        result.events.append(ClapEvent(
            time=float(times[0]),
            onsets=times,
            u=spec.speed_of_sound * (times - times[0]),
        ))

    logger.info(
        f"Clap detection: {len(result.events)} events, "
        f"{result.rejected_ambiguous} ambiguous, {result.rejected_incomplete} incomplete"
    )
    return result
