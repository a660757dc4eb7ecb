"""
Stage artifacts on disk.

Every stage reads and writes plain files so runs can be diffed and resumed:

    scene.json              Scene (microphones, source path, planes, offsets, mirrors)
    audio.wav               multichannel recording
    peaks.csv               pair_i1,pair_i2,frame,time_s,range_diff_m,score
    tracks.csv              pair_i1,pair_i2,frame,time_s,w_m
    tracking_stages.csv     stage,pair_i1,pair_i2,frame,w_m
    tdoa.csv + tdoa.json    matching matrix (NaN = missing) and its sidecar
    offsets.json            OffsetSolution
    mirror_detections.csv   per-mirror inlier detections
    report.json             stage report

Channel and microphone indices are 1-based in files and 0-based in memory.
Writers are deterministic: same input, same bytes.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy.io import wavfile

from src.core.exceptions import SchemaError
from src.core.model import Scene, TdoaMatrix
from src.signal_processing.gcc_phat import FrameSpec, Pair, Peak, ScoreMatrix

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

PEAK_COLUMNS = ["pair_i1", "pair_i2", "frame", "time_s", "range_diff_m", "score"]
TRACK_COLUMNS = ["pair_i1", "pair_i2", "frame", "time_s", "w_m"]
STAGE_COLUMNS = ["stage", "pair_i1", "pair_i2", "frame", "w_m"]
DETECTION_COLUMNS = ["mic_id", "path_index", "frame", "time_s", "distance_m", "support", "sx", "sy", "sz"]


# ============================================
# Schemas
# ============================================

class _SourceSample(BaseModel):
    model_config = ConfigDict(extra="forbid")
    t: float
    pos: Tuple[float, float, float]


class _PlaneDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")
    normal: Tuple[float, float, float]
    d: float


class _MirrorDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")
    mic_id: int = Field(ge=1)
    path_index: int = Field(ge=2)
    position: Tuple[float, float, float]
    inlier_count: int = 0


class SceneDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")
    microphones: List[Tuple[float, float, float]] = Field(min_length=1)
    source_path: List[_SourceSample] = Field(default_factory=list)
    planes: List[_PlaneDoc] = Field(default_factory=list)
    speed_of_sound: float = Field(343.0, gt=0)
    offsets: Optional[List[float]] = None
    mirrored_microphones: List[_MirrorDoc] = Field(default_factory=list)
    abstract: bool = False


class TdoaSidecar(BaseModel):
    event_times: List[float]
    frame_spec: Optional[Dict[str, float]] = None


class OffsetDocument(BaseModel):
    offsets: List[Optional[float]]
    inlier_columns: List[int]
    residual: float
    case: Optional[Dict[str, int]] = None


def _schema_error(exc: ValidationError, path: PathLike) -> SchemaError:
    first = exc.errors()[0]
    location = ".".join(str(part) for part in first["loc"])
    return SchemaError(f"{first['msg']} in {path}", path=f"{path}:{location}" if location else str(path))


def _read_json(path: PathLike) -> Any:
    path = Path(path)
    if not path.exists():
        raise SchemaError("Missing artifact", path=str(path))
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SchemaError(f"Invalid JSON: {e}", path=str(path)) from e


def write_json(path: PathLike, doc: Any):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_csv(path: PathLike, columns: Sequence[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise SchemaError("Missing artifact", path=str(path))
    frame = pd.read_csv(path)
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise SchemaError(f"Missing columns {missing}", path=f"{path}:{missing[0]}")
    return frame


def _write_csv(path: PathLike, frame: pd.DataFrame):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, na_rep="NaN", lineterminator="\n")


# ============================================
# Scene
# ============================================

def write_scene(path: PathLike, scene: Scene):
    write_json(path, scene.to_dict())


def read_scene(path: PathLike) -> Scene:
    """
    Raises:
        SchemaError: missing file, bad JSON, or a field failing validation
    """
    raw = _read_json(path)
    try:
        doc = SceneDocument.model_validate(raw)
    except ValidationError as e:
        raise _schema_error(e, path) from e
    try:
        return Scene.from_dict(doc.model_dump())
    except ValueError as e:
        raise SchemaError(str(e), path=str(path)) from e


# ============================================
# Audio
# ============================================

def write_wav(path: PathLike, channels: np.ndarray, sample_rate: float, bit_depth: int = 32):
    """16-bit PCM (peak-normalized) or 32-bit float WAV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.asarray(channels, dtype=float)
    peak = float(np.max(np.abs(data))) if data.size else 0.0
    if bit_depth == 16:
        scale = 32767.0 / peak if peak > 0 else 1.0
        wavfile.write(path, int(round(sample_rate)), np.round(data * scale).astype(np.int16))
    else:
        wavfile.write(path, int(round(sample_rate)), data.astype(np.float32))


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.uint8:
        return (data.astype(float) - 128.0) / 128.0
    if np.issubdtype(data.dtype, np.integer):
        return data.astype(float) / float(np.iinfo(data.dtype).max)
    return data.astype(float)


def read_wav(paths: Union[PathLike, Sequence[PathLike]]) -> Tuple[np.ndarray, float]:
    """
    (samples x channels) float array and the sample rate.

    Accepts one multichannel file or one mono file per channel; per-channel
    files must agree on length and rate.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    columns, rates = [], []
    for path in paths:
        if not Path(path).exists():
            raise SchemaError("Missing artifact", path=str(path))
        try:
            rate, data = wavfile.read(path)
        except ValueError as e:
            raise SchemaError(f"Unreadable WAV: {e}", path=str(path)) from e
        data = _to_float(data)
        columns.append(data.reshape(len(data), -1))
        rates.append(float(rate))
    if len(set(rates)) > 1:
        raise SchemaError(f"Channel files disagree on sample rate: {rates}", path=str(paths[0]))
    if len({c.shape[0] for c in columns}) > 1:
        raise SchemaError("Channel files disagree on length", path=str(paths[0]))
    return np.hstack(columns), rates[0]


# ============================================
# Peaks, tracks and tracking stages
# ============================================

def write_peaks(path: PathLike, peaks_by_pair: Dict[Pair, List[Peak]], spec: FrameSpec):
    rows = []
    for pair in sorted(peaks_by_pair):
        for p in peaks_by_pair[pair]:
            rows.append((pair[0] + 1, pair[1] + 1, p.frame_index, float(spec.frame_time(p.frame_index)),
                         p.range_diff, p.score))
    _write_csv(path, pd.DataFrame(rows, columns=PEAK_COLUMNS))


def read_peaks(path: PathLike, spec: FrameSpec) -> Dict[Pair, List[Peak]]:
    frame = _read_csv(path, PEAK_COLUMNS)
    result: Dict[Pair, List[Peak]] = {}
    for (i1, i2), group in frame.groupby(["pair_i1", "pair_i2"], sort=True):
        pair = (int(i1) - 1, int(i2) - 1)
        result[pair] = [
            Peak(pair=pair, frame_index=int(f), range_diff=float(w), score=float(s),
                 lag=float(w) / spec.meters_per_sample)
            for f, w, s in zip(group["frame"], group["range_diff_m"], group["score"])
        ]
    return result


def write_tracks(path: PathLike, tracks: Dict[Pair, Any], spec: FrameSpec):
    """`tracks` maps a pair to a Track (frames, w)."""
    rows = []
    for pair in sorted(tracks):
        track = tracks[pair]
        for f, w in zip(track.frames, track.w):
            rows.append((pair[0] + 1, pair[1] + 1, int(f), float(spec.frame_time(f)), float(w)))
    _write_csv(path, pd.DataFrame(rows, columns=TRACK_COLUMNS))


def read_tracks(path: PathLike) -> Dict[Pair, Tuple[np.ndarray, np.ndarray]]:
    frame = _read_csv(path, TRACK_COLUMNS)
    return {
        (int(i1) - 1, int(i2) - 1): (group["frame"].to_numpy(dtype=int), group["w_m"].to_numpy(dtype=float))
        for (i1, i2), group in frame.groupby(["pair_i1", "pair_i2"], sort=True)
    }


def write_tracking_stages(path: PathLike, stages: Sequence[Tuple[Pair, Dict[str, List[Peak]]]]):
    rows = []
    for pair, by_stage in stages:
        for stage, peaks in by_stage.items():
            rows.extend((stage, pair[0] + 1, pair[1] + 1, p.frame_index, p.range_diff) for p in peaks)
    _write_csv(path, pd.DataFrame(rows, columns=STAGE_COLUMNS))


def read_tracking_stages(path: PathLike) -> pd.DataFrame:
    frame = _read_csv(path, STAGE_COLUMNS)
    frame["pair_i1"] -= 1
    frame["pair_i2"] -= 1
    return frame


# ============================================
# Matching matrix
# ============================================

def write_tdoa(path: PathLike, tdoa: TdoaMatrix, spec: Optional[FrameSpec] = None,
               inliers: Optional[np.ndarray] = None):
    """tdoa.csv (mics x events, NaN missing) with a tdoa.json sidecar next to it."""
    path = Path(path)
    U = np.where(tdoa.mask, tdoa.U, np.nan)
    columns = [f"e{j + 1}" for j in range(tdoa.n)]
    _write_csv(path, pd.DataFrame(U, columns=columns))
    sidecar: Dict[str, Any] = {"event_times": [float(t) for t in tdoa.event_times]}
    if spec is not None:
        sidecar["frame_spec"] = {
            "sample_rate": spec.sample_rate,
            "frame_len": spec.frame_len,
            "hop": spec.hop,
            "speed_of_sound": spec.speed_of_sound,
        }
    write_json(path.with_suffix(".json"), sidecar)
    if inliers is not None:
        _write_csv(path.with_name(path.stem + "_inliers.csv"),
                   pd.DataFrame(np.asarray(inliers, dtype=int), columns=columns))


def read_tdoa(path: PathLike) -> TdoaMatrix:
    path = Path(path)
    if not path.exists():
        raise SchemaError("Missing artifact", path=str(path))
    U = pd.read_csv(path).to_numpy(dtype=float)
    sidecar_path = path.with_suffix(".json")
    if sidecar_path.exists():
        try:
            sidecar = TdoaSidecar.model_validate(_read_json(sidecar_path))
        except ValidationError as e:
            raise _schema_error(e, sidecar_path) from e
        times = np.asarray(sidecar.event_times, dtype=float)
    else:
        times = np.arange(U.shape[1], dtype=float)
    if len(times) != U.shape[1]:
        raise SchemaError(f"Sidecar lists {len(times)} events, matrix has {U.shape[1]}",
                          path=f"{sidecar_path}:event_times")
    try:
        return TdoaMatrix(U=U, mask=np.isfinite(U), event_times=times)
    except ValueError as e:
        raise SchemaError(str(e), path=str(path)) from e


def read_tdoa_inliers(path: PathLike) -> Optional[np.ndarray]:
    path = Path(path)
    labels = path.with_name(path.stem + "_inliers.csv")
    if not labels.exists():
        return None
    return pd.read_csv(labels).to_numpy(dtype=int).astype(bool)


# ============================================
# Offsets, detections, score grids
# ============================================

def write_offsets(path: PathLike, solution_doc: Dict[str, Any]):
    write_json(path, solution_doc)


def read_offsets(path: PathLike) -> OffsetDocument:
    try:
        return OffsetDocument.model_validate(_read_json(path))
    except ValidationError as e:
        raise _schema_error(e, path) from e


def write_mirror_detections(path: PathLike, estimates: Sequence[Any]):
    rows = []
    for est in estimates:
        for c in est.inliers:
            rows.append((est.mic_id, est.path_index, c.frame_index, c.time, c.distance, c.support,
                         *(float(x) for x in c.source)))
    _write_csv(path, pd.DataFrame(rows, columns=DETECTION_COLUMNS))


def write_score_matrix(path: PathLike, scores: ScoreMatrix, spec: FrameSpec):
    """Raw float32 grid (lags x frames, C order) plus a JSON sidecar with the axes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scores.values.astype(np.float32).tofile(path)
    write_json(path.with_suffix(".json"), {
        "pair": [scores.pair[0] + 1, scores.pair[1] + 1],
        "shape": list(scores.values.shape),
        "dtype": "float32",
        "lag_axis_m": [float(x) for x in scores.lag_axis],
        "frame_times_s": [float(t) for t in spec.frame_time(np.arange(scores.values.shape[1]))],
    })
