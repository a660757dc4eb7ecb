"""
Calibration pipeline: file-to-file stages.

    simulate   -> scene.json, audio.wav, sim_tdoa.csv (+ sidecar, inlier labels)
    detect     -> peaks.csv                       (mode "peaks")
                  scores/scores_I_J.f32 (+ .json)  (peaks.dump_scores)
               -> tdoa.csv                        (mode "claps")
    track      -> tracks.csv, tracking_stages.csv, tdoa.csv
    calibrate  -> calibrated_scene.json, offsets.json, calibration_report.json
    mirrors    -> mirrors_scene.json, mirror_detections.csv, mirrors_report.json
    evaluate   -> report.json

Each stage only reads files and writes files in `out_dir`, so `run_all` is the
composition of the single stages. Every report echoes the effective config.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.calibration.geometry_solver import (
    bundle_adjust,
    expand_inliers,
    factorize,
    solve_upgrade,
    upgrade_positions,
)
from src.calibration.mirror_estimator import consistency_correct, extract_all_mirrors, fit_planes
from src.calibration.offset_solver import OffsetSolution, ransac_offsets, select_case
from src.calibration.rank_refinement import RankRefinement, rank_optimize
from src.core import file_io
from src.core.exceptions import CountMismatch, NumericalFailure, SchemaError
from src.core.model import Plane, Scene, TdoaMatrix, align_scenes, mirror_point
from src.core.pipeline_config import PipelineConfig
from src.core.resilience import log_execution_time, retry_with_escalation
from src.core.run_monitor import CalibrationMonitor
from src.core.seeding import SeedLike, spawn_rng
from src.signal_processing.clap_detector import detect_claps
from src.signal_processing.gcc_phat import FrameSpec, Pair, Peak, detect_pair_peaks, null_peak_threshold
from src.simulation.scene_simulator import (
    NoiseSpec,
    anechoic_noise,
    direct_range_difference,
    generate_anechoic_scene,
    generate_random_scene,
    generate_room_scene,
    synth_audio,
    synth_tdoa,
    white_noise_waveform,
)
from src.tracking.tdoa_tracker import Track, assemble_matching_matrix, stage_table, track_pair

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SCENE_FILE = "scene.json"
AUDIO_FILE = "audio.wav"
SIM_TDOA_FILE = "sim_tdoa.csv"
PEAKS_FILE = "peaks.csv"
TRACKS_FILE = "tracks.csv"
STAGES_FILE = "tracking_stages.csv"
TDOA_FILE = "tdoa.csv"
CALIBRATED_SCENE_FILE = "calibrated_scene.json"
OFFSETS_FILE = "offsets.json"
MIRRORS_SCENE_FILE = "mirrors_scene.json"
DETECTIONS_FILE = "mirror_detections.csv"
REPORT_FILE = "report.json"
SCORES_DIR = "scores"

HISTOGRAM_BINS = 20
NULL_TRIALS = 200


@dataclass
class CalibrationResult:
    """Everything the calibrate stage produces in memory."""
    scene: Scene
    solution: OffsetSolution
    columns: np.ndarray
    residuals: np.ndarray
    refinement: Optional[RankRefinement] = None
    admitted: List[int] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)


# ============================================
# Calibration chain
# ============================================

def robust_offsets(tdoa: TdoaMatrix, config: PipelineConfig, seed: SeedLike = None) -> OffsetSolution:
    """ransac_offsets with escalating retries on NoConsensus."""
    opts = config.offsets
    case = select_case(tdoa.m, opts.rank, opts.case)

    @retry_with_escalation(max_attempts=opts.retries + 1)
    def attempt(iterations: int = opts.iterations, seed: SeedLike = seed) -> OffsetSolution:
        return ransac_offsets(
            tdoa, case,
            epsilon=opts.epsilon,
            iterations=iterations,
            seed=seed,
            confidence=opts.confidence,
            min_observations=config.geometry.min_count,
        )

    return attempt()


def geometry_from_refinement(tdoa: TdoaMatrix, refinement: RankRefinement,
                             config: PipelineConfig, seed: SeedLike = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Metric microphones and sources from the completed rank-3 approximant.

    The approximant is compacted against the reference column, so the border
    distances are ||s_j - r_1|| = -o_j and ||r_i - s_ref|| = u_i,ref - o_ref.
    """
    ref = refinement.reference
    order = np.r_[ref, refinement.other_columns]
    o = refinement.offsets
    fact = factorize(refinement.approximant)
    d_row = -o[order]
    d_col = np.where(tdoa.mask[:, ref], tdoa.U[:, ref] - o[ref], np.nan)
    up = solve_upgrade(fact, d_row, d_col, use_source_equations=True,
                       starts=config.geometry.multistart, seed=seed)
    mics, ordered_sources = upgrade_positions(fact, up)
    sources = np.empty_like(ordered_sources)
    sources[order] = ordered_sources
    return mics, sources


def calibrate_tdoa(tdoa: TdoaMatrix, config: PipelineConfig) -> CalibrationResult:
    """
    RANSAC offsets, rank refinement, factorization and upgrade, bundle
    adjustment on the consensus, then inlier expansion.
    """
    seed = config.seed
    notes: List[str] = []
    solution = robust_offsets(tdoa, config, seed=spawn_rng(seed, "calibrate", 0))
    inliers = solution.inlier_columns
    sub = tdoa.select_columns(inliers)

    refinement: Optional[RankRefinement] = None
    mics = sources = None
    offsets = solution.offsets[inliers]
    if config.offsets.refine and config.offsets.rank == 3:
        try:
            refinement = rank_optimize(sub.U, sub.mask, offsets, K=3,
                                       max_iter=config.offsets.refine_max_iter)
            mics, sources = geometry_from_refinement(sub, refinement, config,
                                                     seed=spawn_rng(seed, "calibrate", 1))
            offsets = refinement.offsets
        except NumericalFailure as exc:
            if solution.mics is None or not np.all(np.isfinite(solution.mics)):
                raise
            logger.warning(f"Refinement failed ({exc}); using the RANSAC geometry")
            notes.append(f"refinement skipped: {exc}")
            mics = sources = None
            offsets = solution.offsets[inliers]
    if mics is None:
        if solution.mics is None or not np.all(np.isfinite(solution.mics)):
            raise NumericalFailure("RANSAC consensus did not place every microphone")
        mics, sources = solution.mics, solution.sources[inliers]

    bundle = bundle_adjust(sub.U, sub.mask, mics, sources, offsets,
                           max_iter=config.geometry.ba_max_iter)
    full_sources = np.full((tdoa.n, 3), np.nan)
    full_offsets = np.full(tdoa.n, np.nan)
    full_sources[inliers] = bundle.sources
    full_offsets[inliers] = bundle.offsets
    expansion = expand_inliers(tdoa, bundle.mics, full_sources, full_offsets, inliers,
                               res_tol=config.geometry.res_tol, min_count=config.geometry.min_count,
                               max_iter=config.geometry.ba_max_iter)

    columns = expansion.inlier_columns
    final = expansion.bundle
    o = final.offsets
    if np.any(o > 0):
        notes.append(f"{int(np.sum(o > 0))} offsets clipped to 0")
        o = np.minimum(o, 0.0)
    scene = Scene.from_arrays(final.mics, final.sources, times=tdoa.event_times[columns],
                              speed_of_sound=config.speed_of_sound, offsets=o)
    return CalibrationResult(scene=scene, solution=solution, columns=columns,
                             residuals=final.residuals, refinement=refinement,
                             admitted=list(expansion.admitted), notes=notes)


# ============================================
# Report helpers
# ============================================

def residual_histogram(residuals: np.ndarray, bins: int = HISTOGRAM_BINS) -> Dict[str, Any]:
    values = np.abs(np.asarray(residuals, dtype=float))
    values = values[np.isfinite(values)]
    if len(values) == 0:
        return {"edges_m": [], "counts": [], "rms_m": 0.0, "count": 0}
    top = float(values.max()) if values.max() > 0 else 1e-12
    counts, edges = np.histogram(values, bins=bins, range=(0.0, top))
    return {
        "edges_m": [float(e) for e in edges],
        "counts": [int(c) for c in counts],
        "rms_m": float(np.sqrt(np.mean(values ** 2))),
        "count": int(len(values)),
    }


def scene_residuals(scene: Scene, tdoa: TdoaMatrix) -> np.ndarray:
    """||r_i - s_j|| + o_j - u_ij for tdoa columns matching the scene's sample times."""
    times = scene.source_path.times
    columns = np.array([int(np.argmin(np.abs(tdoa.event_times - t))) for t in times], dtype=int)
    if len(columns) == 0 or scene.offsets is None:
        return np.zeros((tdoa.m, 0))
    matched = np.isclose(tdoa.event_times[columns], times, atol=1e-9)
    U = tdoa.U[:, columns[matched]]
    mask = tdoa.mask[:, columns[matched]]
    distances = np.linalg.norm(scene.source_positions[matched][None, :, :] - scene.mic_positions[:, None, :], axis=2)
    residuals = distances + scene.offsets[matched][None, :] - U
    return np.where(mask, residuals, np.nan)


def plane_errors(estimated: Sequence[Plane], truth: Sequence[Plane]) -> List[Dict[str, Any]]:
    """Each estimated plane against the closest true plane (by normal angle)."""
    rows = []
    for index, plane in enumerate(estimated):
        if not truth:
            rows.append({"plane": index, "matched": None})
            continue
        cosines = [abs(float(plane.normal @ t.normal)) for t in truth]
        best = int(np.argmax(cosines))
        target = truth[best]
        sign = 1.0 if plane.normal @ target.normal >= 0 else -1.0
        rows.append({
            "plane": index,
            "matched": best,
            "normal_error_deg": float(np.degrees(np.arccos(min(cosines[best], 1.0)))),
            "offset_error_m": float(abs(sign * plane.d - target.d)),
        })
    return rows


def _peaks_from_stages(frame: pd.DataFrame) -> List[Tuple[Pair, Dict[str, List[Peak]]]]:
    results = []
    stages = list(dict.fromkeys(frame["stage"]))
    for (i1, i2), group in frame.groupby(["pair_i1", "pair_i2"], sort=True):
        pair = (int(i1), int(i2))
        by_stage = {stage: [] for stage in stages}
        for stage, f, w in zip(group["stage"], group["frame"], group["w_m"]):
            by_stage[stage].append(Peak(pair=pair, frame_index=int(f), range_diff=float(w), score=0.0))
        results.append((pair, by_stage))
    return results


# ============================================
# Stages
# ============================================

class CalibrationPipeline:
    """
    File-based calibration stages sharing one config and one seed.

    Example:
        pipeline = CalibrationPipeline(load_pipeline_config("config/config.json"))
        pipeline.run_all("runs/demo")
    """

    def __init__(self, config: PipelineConfig, monitor: Optional[CalibrationMonitor] = None):
        self.config = config
        self.monitor = monitor
        self.spec = FrameSpec(
            sample_rate=config.audio.sample_rate,
            frame_len=config.frames.frame_len,
            hop=config.frames.hop,
            speed_of_sound=config.speed_of_sound,
            interp=config.frames.interp,
        )

    # -- bookkeeping ----------------------------------------------------------

    def _start(self, stage: str):
        logger.info(f"Stage '{stage}' started")
        if self.monitor:
            self.monitor.start_stage(stage)

    def _end(self, stage: str, counts: Dict[str, Any]):
        logger.info(f"Stage '{stage}' finished: {counts}")
        if self.monitor:
            self.monitor.end_stage(stage, counts)

    def _report(self, path: Path, stage: str, body: Dict[str, Any]):
        doc = {"stage": stage, "config": self.config.model_dump(mode="json"), **body}
        file_io.write_json(path, doc)

    # -- simulate -------------------------------------------------------------

    @log_execution_time
    def simulate(self, out_dir: PathLike) -> Scene:
        """Ground-truth scene, its matching matrix with labels and optionally audio."""
        out = Path(out_dir)
        sim = self.config.simulation
        self._start("simulate")
        if sim.kind == "room":
            scene = generate_room_scene(
                room_dims=sim.room_dims, n_mics=sim.n_mics, duration=sim.duration,
                path_rate=sim.path_rate, plane_names=sim.planes,
                speed_of_sound=self.config.speed_of_sound,
                seed=spawn_rng(self.config.seed, "simulate", 0),
            )
        elif sim.kind == "anechoic":
            scene = generate_anechoic_scene(speed_of_sound=self.config.speed_of_sound,
                                            seed=spawn_rng(self.config.seed, "simulate", 0))
        else:
            scene = generate_random_scene(sim.n_mics, sim.n_sources,
                                          seed=spawn_rng(self.config.seed, "simulate", 0),
                                          speed_of_sound=self.config.speed_of_sound)
        file_io.write_scene(out / SCENE_FILE, scene)

        noise_seed = int(spawn_rng(self.config.seed, "simulate", 1).integers(2 ** 31))
        if sim.kind == "anechoic":
            noise = anechoic_noise(noise_seed)
        else:
            noise = NoiseSpec(
                tdoa_sigma=sim.tdoa_sigma,
                outlier_rate=sim.outlier_rate,
                missing_rate=sim.missing_rate,
                outlier_magnitude=sim.outlier_magnitude,
                seed=noise_seed,
            )
        tdoa, inliers = synth_tdoa(scene, noise)
        file_io.write_tdoa(out / SIM_TDOA_FILE, tdoa, inliers=inliers)

        counts: Dict[str, Any] = {"microphones": tdoa.m, "events": tdoa.n, "planes": len(scene.planes)}
        if sim.audio and sim.kind == "room":
            fs = self.config.audio.sample_rate
            duration = float(scene.source_path.times[-1]) + 1.0 / sim.path_rate
            waveform = white_noise_waveform(duration, fs, seed=spawn_rng(self.config.seed, "simulate", 2))
            audio = synth_audio(scene, waveform, fs, snr_db=self.config.audio.snr_db,
                                max_order=self.config.audio.max_order if scene.planes else 0,
                                reflection_coefficient=self.config.audio.reflection_coefficient,
                                seed=spawn_rng(self.config.seed, "simulate", 3))
            file_io.write_wav(out / AUDIO_FILE, audio, fs, self.config.audio.bit_depth)
            counts["samples"] = int(audio.shape[0])
        self._end("simulate", counts)
        return scene

    # -- detect ---------------------------------------------------------------

    def _load_audio(self, inputs: Sequence[PathLike]) -> np.ndarray:
        channels, rate = file_io.read_wav(inputs)
        if abs(rate - self.config.audio.sample_rate) > 1e-6:
            raise SchemaError(
                f"Recording is sampled at {rate:g} Hz but audio.sample_rate is {self.config.audio.sample_rate:g}",
                path=str(inputs[0]),
            )
        return channels

    def peak_threshold(self, max_lag: int) -> float:
        """Configured peak floor, or the white-noise null level for this framing."""
        if self.config.peaks.threshold is not None:
            return self.config.peaks.threshold
        threshold = null_peak_threshold(self.spec.frame_len, max_lag, trials=NULL_TRIALS,
                                        interp=self.spec.interp,
                                        seed=spawn_rng(self.config.seed, "detect", 0))
        logger.info(f"Peak threshold from white-noise frames: {threshold:.3f}")
        return threshold

    @log_execution_time
    def detect(self, inputs: Sequence[PathLike], out_dir: PathLike, mode: str = "peaks") -> Dict[str, Any]:
        """GCC-PHAT peaks for every channel pair, or clap events straight to a matching matrix."""
        out = Path(out_dir)
        self._start("detect")
        channels = self._load_audio(inputs)
        if mode == "claps":
            claps = self.config.claps
            detection = detect_claps(channels, self.spec, room_diameter=self.config.peaks.room_diameter,
                                     window_ms=claps.window_ms, baseline_ms=claps.baseline_ms,
                                     ratio=claps.ratio)
            tdoa = detection.to_tdoa_matrix()
            file_io.write_tdoa(out / TDOA_FILE, tdoa, self.spec)
            counts = {"events": tdoa.n, "ambiguous": detection.rejected_ambiguous,
                      "incomplete": detection.rejected_incomplete}
        elif mode == "peaks":
            peaks = self.config.peaks

            def dump(scores):
                i1, i2 = scores.pair
                file_io.write_score_matrix(out / SCORES_DIR / f"scores_{i1 + 1}_{i2 + 1}.f32", scores, self.spec)

            max_lag = self.spec.max_lag_for(peaks.room_diameter)
            threshold = self.peak_threshold(max_lag)
            peaks_by_pair = detect_pair_peaks(channels, self.spec, k=peaks.k, threshold=threshold,
                                              max_lag=max_lag,
                                              on_scores=dump if peaks.dump_scores else None)
            file_io.write_peaks(out / PEAKS_FILE, peaks_by_pair, self.spec)
            counts = {"pairs": len(peaks_by_pair), "peaks": sum(len(p) for p in peaks_by_pair.values())}
        else:
            raise ValueError(f"Unknown detect mode '{mode}'")
        self._end("detect", counts)
        return counts

    # -- track ----------------------------------------------------------------

    @log_execution_time
    def track(self, peaks_path: PathLike, out_dir: PathLike) -> TdoaMatrix:
        """Direct-path tracks of pairs (1, i) and the assembled matching matrix."""
        out = Path(out_dir)
        opts = self.config.tracking
        self._start("track")
        peaks_by_pair = file_io.read_peaks(peaks_path, self.spec)
        m = 1 + max((max(pair) for pair in peaks_by_pair), default=0)

        direct: Dict[int, Track] = {}
        stages = []
        for i in range(1, m):
            peaks = sorted(peaks_by_pair.get((0, i), []), key=lambda p: (p.frame_index, p.range_diff))
            result = track_pair(
                peaks, window=opts.window, inlier_tol=opts.inlier_tol, iterations=opts.iterations,
                min_inliers=opts.min_inliers, line_tol=opts.line_tol, time_gap_max=opts.time_gap_max,
                max_gap=opts.max_gap, smooth_span=opts.smooth_span,
                seed=spawn_rng(self.config.seed, "track", i),
            )
            stages.append(((0, i), result.stage_peaks()))
            if result.smoothed is not None:
                direct[i] = result.smoothed

        file_io.write_tracks(out / TRACKS_FILE, {(0, i): t for i, t in direct.items()}, self.spec)
        file_io.write_tracking_stages(out / STAGES_FILE, stages)
        tdoa = assemble_matching_matrix(direct, m, self.spec, min_rows=opts.min_rows, n_max=opts.n_max)
        file_io.write_tdoa(out / TDOA_FILE, tdoa, self.spec)
        self._end("track", {"pairs": m - 1, "tracked": len(direct), "events": tdoa.n,
                            "missing": int((~tdoa.mask).sum())})
        return tdoa

    # -- calibrate ------------------------------------------------------------

    @log_execution_time
    def calibrate(self, tdoa_path: PathLike, out_dir: PathLike,
                  truth_path: Optional[PathLike] = None) -> CalibrationResult:
        """Microphones, source samples and offsets from a matching matrix."""
        out = Path(out_dir)
        self._start("calibrate")
        tdoa = file_io.read_tdoa(tdoa_path)
        result = calibrate_tdoa(tdoa, self.config)

        file_io.write_scene(out / CALIBRATED_SCENE_FILE, result.scene)
        file_io.write_offsets(out / OFFSETS_FILE, result.solution.to_dict())
        body: Dict[str, Any] = {
            "matrix": {"microphones": tdoa.m, "events": tdoa.n, "missing": int((~tdoa.mask).sum())},
            "case": result.solution.case.to_dict() if result.solution.case else None,
            "inliers": {
                "ransac": int(len(result.solution.inlier_columns)),
                "expanded": int(len(result.columns)),
                "admitted": [int(j) for j in result.admitted],
            },
            "ransac_iterations": result.solution.iterations,
            "rank_refinement": None if result.refinement is None else {
                "cost": result.refinement.cost,
                "iterations": result.refinement.iterations,
                "converged": result.refinement.converged,
            },
            "residual_histogram": residual_histogram(result.residuals),
            "notes": result.notes,
        }
        if truth_path is not None:
            truth = file_io.read_scene(truth_path)
            body["alignment_rmse_m"] = align_scenes(result.scene, truth).rmse
        self._report(out / "calibration_report.json", "calibrate", body)
        self._end("calibrate", {"inliers": int(len(result.columns)),
                                "rms_m": body["residual_histogram"]["rms_m"]})
        return result

    # -- mirrors --------------------------------------------------------------

    @log_execution_time
    def mirrors(self, peaks_path: PathLike, scene_path: PathLike, out_dir: PathLike) -> Scene:
        """Mirrored microphones and reflective planes from the non-direct GCC peaks."""
        out = Path(out_dir)
        opts = self.config.mirrors
        self._start("mirrors")
        scene = file_io.read_scene(scene_path)
        peaks_by_pair = file_io.read_peaks(peaks_path, self.spec)
        times = scene.source_path.times
        inside = {
            pair: [p for p in peaks if times[0] <= self.spec.frame_time(p.frame_index) <= times[-1]]
            for pair, peaks in peaks_by_pair.items()
        }
        mics = scene.mic_positions
        candidates = {
            target: consistency_correct(inside, scene.source_path, mics, target, self.spec,
                                        quorum=opts.quorum, cluster_tol=opts.cluster_tol)
            for target in range(len(mics))
        }
        estimates = extract_all_mirrors(candidates, mics, iterations=opts.iterations,
                                        inlier_tol=opts.inlier_tol, min_inliers=opts.min_inliers,
                                        max_mirrors=opts.max_mirrors, seed=self.config.seed)
        planes = fit_planes(estimates, mics, angle_tol_deg=opts.angle_tol_deg,
                            offset_tol=opts.offset_tol, position_tol=opts.inlier_tol) if estimates else []

        result = Scene(
            microphones=scene.microphones,
            source_path=scene.source_path,
            planes=planes,
            speed_of_sound=scene.speed_of_sound,
            offsets=scene.offsets,
            mirrored_microphones=[e.to_mirrored_microphone() for e in estimates],
            abstract=scene.abstract,
        )
        file_io.write_scene(out / MIRRORS_SCENE_FILE, result)
        file_io.write_mirror_detections(out / DETECTIONS_FILE, estimates)
        self._report(out / "mirrors_report.json", "mirrors", {
            "candidates": {str(k + 1): len(v) for k, v in candidates.items()},
            "mirrors": [
                {"mic_id": e.mic_id, "path_index": e.path_index, "inliers": len(e.inliers),
                 "residual_m": e.residual, "first_order": e.first_order}
                for e in estimates
            ],
            "planes": [p.to_dict() for p in planes],
        })
        self._end("mirrors", {"mirrors": len(estimates), "planes": len(planes)})
        return result

    # -- evaluate -------------------------------------------------------------

    @log_execution_time
    def evaluate(self, estimated_path: PathLike, truth_path: PathLike, out_dir: PathLike,
                 tdoa_path: Optional[PathLike] = None, stages_path: Optional[PathLike] = None) -> Dict[str, Any]:
        """
        Compare an estimated scene with ground truth.

        Raises:
            CountMismatch: the scenes have different microphone counts
        """
        out = Path(out_dir)
        self._start("evaluate")
        estimated = file_io.read_scene(estimated_path)
        truth = file_io.read_scene(truth_path)
        if len(estimated.microphones) != len(truth.microphones):
            raise CountMismatch(
                f"Estimated scene has {len(estimated.microphones)} microphones, truth has {len(truth.microphones)}"
            )
        alignment = align_scenes(estimated, truth)
        aligned = alignment.apply(estimated.mic_positions)
        errors = aligned - truth.mic_positions
        body: Dict[str, Any] = {
            "alignment": {
                "rmse_m": alignment.rmse,
                "reflect": alignment.reflect,
                "rotation": alignment.rotation.tolist(),
                "translation": alignment.translation.tolist(),
            },
            "microphone_errors_m": [float(e) for e in np.linalg.norm(errors, axis=1)],
            "coordinate_error_std_m": float(np.std(errors)),
            "planes": plane_errors([alignment.apply_plane(p) for p in estimated.planes], truth.planes),
        }
        if estimated.mirrored_microphones and truth.planes:
            body["mirror_errors_m"] = [
                {
                    "mic_id": mirror.mic_id,
                    "path_index": mirror.path_index,
                    "error_m": float(min(
                        np.linalg.norm(alignment.apply(mirror.position) - mirror_point(truth.mic_positions[mirror.mic_id - 1], plane))
                        for plane in truth.planes
                    )),
                }
                for mirror in estimated.mirrored_microphones
            ]
        if tdoa_path is not None:
            body["residual_histogram"] = residual_histogram(scene_residuals(estimated, file_io.read_tdoa(tdoa_path)))
        if stages_path is not None:
            results = _peaks_from_stages(file_io.read_tracking_stages(stages_path))

            def truth_w(pair: Pair, frames: np.ndarray) -> np.ndarray:
                return direct_range_difference(truth, pair, self.spec.frame_time(frames))

            body["tracking_stages"] = stage_table(results, truth_w, self.config.tracking.inlier_tol)
        self._report(out / REPORT_FILE, "evaluate", body)
        self._end("evaluate", {"rmse_m": alignment.rmse})
        return body

    # -- everything -----------------------------------------------------------

    def run_all(self, out_dir: PathLike) -> Dict[str, Any]:
        """simulate -> detect -> track -> calibrate -> mirrors -> evaluate in one directory."""
        out = Path(out_dir)
        self.simulate(out)
        if self.config.simulation.audio and self.config.simulation.kind == "room":
            self.detect([out / AUDIO_FILE], out, mode="peaks")
            self.track(out / PEAKS_FILE, out)
            tdoa_path = out / TDOA_FILE
        else:
            tdoa_path = out / SIM_TDOA_FILE
        self.calibrate(tdoa_path, out, truth_path=out / SCENE_FILE)
        estimated = out / CALIBRATED_SCENE_FILE
        stages = None
        if (out / PEAKS_FILE).exists():
            self.mirrors(out / PEAKS_FILE, estimated, out)
            estimated = out / MIRRORS_SCENE_FILE
            stages = out / STAGES_FILE
        return self.evaluate(estimated, out / SCENE_FILE, out, tdoa_path=tdoa_path, stages_path=stages)
