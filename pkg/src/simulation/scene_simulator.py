"""
Synthetic scenes, TDOA matrices, GCC peak clouds and multichannel audio.

Every generator takes an explicit seed and is bitwise reproducible. The TDOA
convention is U_ij = ||s_j - r_i|| + o_j with o_j = -||s_j - r_1|| <= 0, so the
reference row is exactly zero before noise.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import i0

from src.core.exceptions import InvalidSignal
from src.core.model import Plane, Scene, TdoaMatrix, mirror_point, true_offsets
from src.core.seeding import SeedLike, as_generator
from src.signal_processing.gcc_phat import FrameSpec, Pair, Peak

logger = logging.getLogger(__name__)

FRACTIONAL_DELAY_TAPS = 32
KAISER_BETA = 8.0
BLOCK_SIZE = 65536

ROOM_PLANES = ("floor", "ceiling", "wall_x0", "wall_x1", "wall_y0", "wall_y1")

ANECHOIC_EVENTS = 129
ANECHOIC_PATH_RATE = 2.0


@dataclass(frozen=True)
class ImagePath:
    """Mirror image r_{i,k} of microphone i; k = 1 is the direct path."""
    mic_id: int
    path_index: int
    position: np.ndarray
    gain: float
    order: int = 0
    planes: Tuple[int, ...] = ()


@dataclass(frozen=True)
class NoiseSpec:
    """Perturbations applied by synth_tdoa."""
    tdoa_sigma: float = 0.0
    outlier_rate: float = 0.0
    missing_rate: float = 0.0
    outlier_magnitude: float = 5.0
    seed: Optional[int] = None
    outlier_columns: float = 0.0

    def __post_init__(self):
        for name in ("outlier_rate", "missing_rate", "outlier_columns"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.tdoa_sigma < 0:
            raise ValueError("tdoa_sigma must be >= 0")


# ============================================
# Scenes
# ============================================

def generate_random_scene(m: int, n: int, offset_sigma: float = 10.0, seed: SeedLike = None,
                          abstract: bool = False, speed_of_sound: float = 343.0) -> Scene:
    """
    Microphones and sources i.i.d. standard normal (meters).

    Physical scenes get o_j = -||s_j - r_1||. With abstract=True the offsets are
    drawn N(0, offset_sigma^2) instead, as for offset-free solver benchmarks.
    """
    if m < 1 or n < 1:
        raise ValueError("generate_random_scene needs m >= 1 and n >= 1")
    rng = as_generator(seed)
    mics = rng.standard_normal((m, 3))
    sources = rng.standard_normal((n, 3))
    offsets = rng.normal(0.0, offset_sigma, n) if abstract else true_offsets(mics, sources)
    return Scene.from_arrays(mics, sources, planes=[], speed_of_sound=speed_of_sound,
                             offsets=offsets, abstract=abstract)


def room_plane(name: str, room_dims: Sequence[float]) -> Plane:
    """Boundary plane of a shoebox room [0, Lx] x [0, Ly] x [0, Lz]."""
    lx, ly, lz = room_dims
    table = {
        "floor": ((0, 0, 1), 0.0),
        "ceiling": ((0, 0, 1), lz),
        "wall_x0": ((1, 0, 0), 0.0),
        "wall_x1": ((1, 0, 0), lx),
        "wall_y0": ((0, 1, 0), 0.0),
        "wall_y1": ((0, 1, 0), ly),
    }
    if name not in table:
        raise ValueError(f"Unknown room plane '{name}', expected one of {ROOM_PLANES}")
    normal, d = table[name]
    return Plane.from_normal(normal, d)


def generate_room_scene(
    room_dims: Sequence[float] = (5.0, 6.0, 3.0),
    n_mics: int = 8,
    duration: float = 10.0,
    path_rate: float = 50.0,
    plane_names: Sequence[str] = ("floor", "wall_x0"),
    margin: float = 0.5,
    speed_of_sound: float = 343.0,
    seed: SeedLike = None,
) -> Scene:
    """
    Microphones scattered inside a shoebox room and a smooth 3D source trajectory.

    The trajectory is a sum of slow sinusoids per axis so it is not planar, which
    keeps the mirror branches of every later trilateration distinguishable.
    """
    rng = as_generator(seed)
    dims = np.asarray(room_dims, dtype=float)
    lo, hi = np.full(3, margin), dims - margin
    mics = lo + (hi - lo) * rng.random((n_mics, 3))

    times = np.arange(0.0, duration, 1.0 / path_rate)
    centre = dims / 2.0
    amplitude = (dims / 2.0 - margin) * 0.8
    freqs = rng.uniform(0.03, 0.09, 3) * (1.0 + np.arange(3) * 0.35)
    phases = rng.uniform(0.0, 2.0 * np.pi, 3)
    sources = centre + amplitude * np.sin(2.0 * np.pi * np.outer(times, freqs) + phases)

    planes = [room_plane(name, dims) for name in plane_names]
    return Scene.from_arrays(mics, sources, times=times, planes=planes,
                             speed_of_sound=speed_of_sound)


def generate_anechoic_scene(
    n_mics: int = 8,
    n_events: int = ANECHOIC_EVENTS,
    room_dims: Sequence[float] = (4.0, 4.0, 3.0),
    speed_of_sound: float = 343.0,
    seed: SeedLike = None,
) -> Scene:
    """Room-sized layout without reflecting planes, one matching vector per path sample."""
    return generate_room_scene(
        room_dims=room_dims,
        n_mics=n_mics,
        duration=n_events / ANECHOIC_PATH_RATE,
        path_rate=ANECHOIC_PATH_RATE,
        plane_names=(),
        speed_of_sound=speed_of_sound,
        seed=seed,
    )


def anechoic_noise(seed: Optional[int] = None) -> NoiseSpec:
    """
    Perturbations of the anechoic profile: about 8% missing entries (83 of
    8 x 129) and enough scattered outlier entries that roughly 60% of the
    columns are clean on every observed row.
    """
    return NoiseSpec(tdoa_sigma=0.001, outlier_rate=0.075, missing_rate=0.092, seed=seed)


def image_sources(scene: Scene, max_order: int, reflection_coefficient: float = 0.7) -> List[ImagePath]:
    """
    Direct path plus mirror compositions of the scene's planes up to max_order.

    Compositions never reflect twice in a row across the same plane. Gains are
    reflection_coefficient ** order.
    """
    if max_order not in (0, 1, 2):
        raise ValueError(f"max_order must be 0, 1 or 2, got {max_order}")
    sequences: List[Tuple[int, ...]] = [()]
    for order in range(1, max_order + 1):
        for seq in itertools.product(range(len(scene.planes)), repeat=order):
            if all(a != b for a, b in zip(seq, seq[1:])):
                sequences.append(seq)

    paths: List[ImagePath] = []
    for mic in scene.microphones:
        for k, seq in enumerate(sequences, start=1):
            position = np.array(mic.position, dtype=float)
            for plane_index in seq:
                position = mirror_point(position, scene.planes[plane_index])
            paths.append(ImagePath(
                mic_id=mic.id,
                path_index=k,
                position=position,
                gain=float(reflection_coefficient ** len(seq)),
                order=len(seq),
                planes=seq,
            ))
    return paths


# ============================================
# TDOA matrices
# ============================================

def synth_tdoa(scene: Scene, noise: NoiseSpec) -> Tuple[TdoaMatrix, np.ndarray]:
    """
    Matching matrix U_ij = ||s_j - r_i|| + o_j with noise, outliers and gaps.

    Returns the TdoaMatrix and the ground-truth inlier mask (observed and not an
    outlier). A column is fully masked, reference row included, only when all its
    other entries are missing.
    """
    if scene.abstract:
        raise ValueError("synth_tdoa needs a physical scene (o_j = -||s_j - r_1||)")
    rng = as_generator(noise.seed)
    mics, sources = scene.mic_positions, scene.source_positions
    m, n = len(mics), len(sources)
    offsets = scene.offsets if scene.offsets is not None else true_offsets(mics, sources)

    distances = np.linalg.norm(sources[None, :, :] - mics[:, None, :], axis=2)
    U = distances + offsets[None, :]
    U[0, :] = 0.0

    gaussian = rng.standard_normal((m - 1, n))
    entry_draw = rng.random((m - 1, n))
    column_draw = rng.random(n)
    missing_draw = rng.random((m - 1, n))
    outlier_values = rng.uniform(-noise.outlier_magnitude, noise.outlier_magnitude, (m - 1, n))

    U[1:] += noise.tdoa_sigma * gaussian
    outliers = (entry_draw < noise.outlier_rate) | (column_draw < noise.outlier_columns)[None, :]
    U[1:][outliers] = outlier_values[outliers]

    mask = np.ones((m, n), dtype=bool)
    mask[1:] = missing_draw >= noise.missing_rate
    if m > 1:
        mask[0] = mask[1:].any(axis=0)

    inliers = mask.copy()
    inliers[1:] &= ~outliers
    inliers[:, outliers.any(axis=0) & (column_draw < noise.outlier_columns)] = False

    times = scene.source_path.times
    logger.debug(
        f"synth_tdoa: {m}x{n}, {int(outliers.sum())} outlier entries, "
        f"{int((~mask).sum())} missing entries"
    )
    return TdoaMatrix(U=U, mask=mask, event_times=times), inliers


def abstract_tdoa(m: int, n: int, offset_sigma: float = 10.0,
                  seed: SeedLike = None) -> Tuple[np.ndarray, Scene]:
    """Dense U = D + o for an abstract scene with Gaussian offsets (no reference row)."""
    scene = generate_random_scene(m, n, offset_sigma=offset_sigma, seed=seed, abstract=True)
    distances = np.linalg.norm(
        scene.source_positions[None, :, :] - scene.mic_positions[:, None, :], axis=2
    )
    return distances + scene.offsets[None, :], scene


# ============================================
# Peak clouds
# ============================================

def direct_range_difference(scene: Scene, pair: Pair, times: np.ndarray) -> np.ndarray:
    """True w for the direct paths of a pair at the given times."""
    sources = scene.source_path.position_at(times)
    mics = scene.mic_positions
    i1, i2 = pair
    return (np.linalg.norm(sources - mics[i2], axis=1)
            - np.linalg.norm(sources - mics[i1], axis=1))


def simulate_pair_peaks(
    scene: Scene,
    pair: Pair,
    spec: FrameSpec,
    n_frames: int,
    max_order: int = 1,
    peak_sigma: float = 0.002,
    outliers_per_frame: float = 3.0,
    max_range: Optional[float] = None,
    plane_visibility: Optional[Sequence[float]] = None,
    seed: SeedLike = None,
) -> List[Peak]:
    """
    Labelled GCC peak cloud for one pair without synthesizing audio.

    Each frame gets the direct-path peak, one peak per mirror image of either
    channel, and a Poisson number of uniform clutter peaks. With
    plane_visibility (one probability per scene plane) a reflected peak is kept
    with the product of the probabilities of the planes it bounced off.
    """
    rng = as_generator(seed)
    i1, i2 = pair
    times = spec.frame_time(np.arange(n_frames))
    sources = scene.source_path.position_at(times)
    paths = image_sources(scene, max_order) if scene.planes else image_sources(scene, 0)
    by_mic: Dict[int, List[ImagePath]] = {}
    for path in paths:
        by_mic.setdefault(path.mic_id - 1, []).append(path)
    if max_range is None:
        max_range = float(np.linalg.norm(scene.mic_positions[i1] - scene.mic_positions[i2])) + 1.0

    def visible(path: ImagePath) -> float:
        if plane_visibility is None:
            return 1.0
        return float(np.prod([plane_visibility[p] for p in path.planes]))

    peaks: List[Peak] = []
    for frame in range(n_frames):
        s = sources[frame]
        d1 = {p.path_index: np.linalg.norm(s - p.position) for p in by_mic[i1]}
        d2 = {p.path_index: np.linalg.norm(s - p.position) for p in by_mic[i2]}
        candidates = [(d2[1] - d1[1], 0.9, 1.0)]
        candidates += [(d2[k] - d1[1], 0.5 * by_mic[i2][k - 1].gain, visible(by_mic[i2][k - 1])) for k in d2 if k > 1]
        candidates += [(d2[1] - d1[k], 0.5 * by_mic[i1][k - 1].gain, visible(by_mic[i1][k - 1])) for k in d1 if k > 1]
        for w, score, keep in candidates:
            if keep < 1.0 and rng.random() >= keep:
                continue
            w_noisy = w + peak_sigma * rng.standard_normal()
            peaks.append(Peak(pair=pair, frame_index=frame, range_diff=float(w_noisy),
                              score=float(score), lag=float(w_noisy / spec.meters_per_sample)))
        for _ in range(rng.poisson(outliers_per_frame)):
            w = rng.uniform(-max_range, max_range)
            peaks.append(Peak(pair=pair, frame_index=frame, range_diff=float(w),
                              score=float(rng.uniform(0.1, 0.4)),
                              lag=float(w / spec.meters_per_sample)))
    return peaks


# ============================================
# Audio
# ============================================

def white_noise_waveform(duration: float, sample_rate: float, seed: SeedLike = None) -> np.ndarray:
    """Unit-variance white noise standing in for an unknown ambient source."""
    rng = as_generator(seed)
    return rng.standard_normal(int(round(duration * sample_rate)))


def fractional_delay(x: np.ndarray, positions: np.ndarray,
                     taps: int = FRACTIONAL_DELAY_TAPS, beta: float = KAISER_BETA) -> np.ndarray:
    """
    Evaluate x at fractional sample positions with a Kaiser-windowed sinc.

    Samples outside x count as zero.
    """
    x = np.asarray(x, dtype=float)
    half = taps / 2.0
    offsets = np.arange(-taps // 2 + 1, taps // 2 + 1)
    out = np.empty(len(positions))
    for start in range(0, len(positions), BLOCK_SIZE):
        q = positions[start:start + BLOCK_SIZE]
        base = np.floor(q).astype(int)
        frac = q - base
        arg = frac[:, None] - offsets[None, :]
        window = np.where(
            np.abs(arg) < half,
            i0(beta * np.sqrt(np.clip(1.0 - (arg / half) ** 2, 0.0, None))) / i0(beta),
            0.0,
        )
        idx = base[:, None] + offsets[None, :]
        valid = (idx >= 0) & (idx < len(x))
        samples = np.where(valid, x[np.clip(idx, 0, len(x) - 1)], 0.0)
        out[start:start + BLOCK_SIZE] = np.sum(samples * np.sinc(arg) * window, axis=1)
    return out


def synth_audio(
    scene: Scene,
    source_waveform: np.ndarray,
    sample_rate: float,
    snr_db: Optional[float] = None,
    max_order: int = 0,
    reflection_coefficient: float = 0.7,
    seed: SeedLike = None,
) -> np.ndarray:
    """
    Multichannel recording (samples x mics) of the source moving along its path.

    Output sample n at time t = n / sample_rate sums, over image paths, the
    gain-scaled waveform delayed by ||s(t) - r_{i,k}|| / v, plus white noise at
    snr_db per channel (None or inf disables noise).

    Raises:
        InvalidSignal: waveform too short for the path, or sample_rate < 8000
    """
    x = np.asarray(source_waveform, dtype=float).reshape(-1)
    if sample_rate < 8000:
        raise InvalidSignal(f"sample_rate must be >= 8000 Hz, got {sample_rate}")
    if len(x) < FRACTIONAL_DELAY_TAPS or len(x) / sample_rate < scene.source_path.times[-1]:
        raise InvalidSignal(
            f"Waveform of {len(x) / sample_rate:.3f}s does not cover the source path "
            f"ending at {scene.source_path.times[-1]:.3f}s"
        )

    rng = as_generator(seed)
    n_samples = len(x)
    t = np.arange(n_samples) / sample_rate
    sources = scene.source_path.position_at(t)
    out = np.zeros((n_samples, len(scene.microphones)))

    for path in image_sources(scene, max_order, reflection_coefficient):
        delay = np.linalg.norm(sources - path.position, axis=1) / scene.speed_of_sound
        out[:, path.mic_id - 1] += path.gain * fractional_delay(x, np.arange(n_samples) - delay * sample_rate)

    if snr_db is not None and np.isfinite(snr_db):
        rms = np.sqrt(np.mean(out ** 2, axis=0))
        noise_std = rms / (10.0 ** (snr_db / 20.0))
        out += rng.standard_normal(out.shape) * noise_std[None, :]
    logger.info(f"Synthesized {n_samples} samples on {out.shape[1]} channels (order {max_order})")
    return out
