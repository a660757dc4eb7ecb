"""
Typed pipeline configuration.

PipelineConfig is the validated form of config/config.json; RuntimeSettings
holds process-level knobs read from CALIB_* environment variables.
"""

from typing import List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class AudioConfig(_Section):
    sample_rate: float = Field(gt=0, description="Sampling rate in Hz; no default, recordings differ")
    snr_db: Optional[float] = Field(20.0, description="Simulation SNR per channel, null disables noise")
    max_order: int = Field(1, ge=0, le=2, description="Reflection order used when synthesizing audio")
    reflection_coefficient: float = Field(0.7, gt=0, le=1)
    bit_depth: Literal[16, 32] = Field(32, description="WAV sample format: 16-bit PCM or 32-bit float")


class FramesConfig(_Section):
    frame_len: int = Field(2048, gt=0)
    hop: int = Field(1000, gt=0)
    interp: int = Field(4, ge=1, description="GCC-PHAT upsampling before peak picking")

    @model_validator(mode="after")
    def _hop_within_frame(self):
        if self.hop > self.frame_len:
            raise ValueError("hop must not exceed frame_len")
        return self


class PeaksConfig(_Section):
    k: int = Field(4, ge=1, description="Peaks kept per frame")
    threshold: Optional[float] = Field(None, ge=0, description="Peak score floor, null means 3x the white-noise 99th percentile")
    room_diameter: float = Field(20.0, gt=0, description="Largest plausible path difference (m)")
    dump_scores: bool = Field(False, description="Also write each pair's GCC-PHAT grid under scores/")


class ClapsConfig(_Section):
    window_ms: float = Field(10.0, gt=0)
    baseline_ms: float = Field(100.0, gt=0)
    ratio: float = Field(6.0, gt=1)


class TrackingConfig(_Section):
    window: int = Field(21, ge=3)
    inlier_tol: float = Field(0.04, gt=0)
    iterations: int = Field(300, ge=1)
    min_inliers: int = Field(8, ge=2)
    line_tol: float = Field(0.04, gt=0)
    time_gap_max: int = Field(5, ge=1)
    max_gap: int = Field(5, ge=0)
    smooth_span: int = Field(9, ge=3)
    min_rows: int = Field(5, ge=1)
    n_max: int = Field(400, ge=1)

    @field_validator("smooth_span")
    @classmethod
    def _odd_span(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("smooth_span must be odd")
        return value


class OffsetsConfig(_Section):
    case: Union[str, Tuple[int, int, int]] = Field("auto", description="'auto', a label like '7r/6s' or (K, m, n)")
    rank: Literal[2, 3] = 3
    epsilon: float = Field(0.02, gt=0)
    iterations: int = Field(500, ge=1)
    confidence: float = Field(0.99, gt=0, lt=1)
    refine: bool = Field(True, description="Run the rank-constrained refinement after RANSAC")
    refine_max_iter: int = Field(200, ge=1)
    retries: int = Field(2, ge=0, description="Extra RANSAC attempts with a larger budget on NoConsensus")


class GeometryConfig(_Section):
    res_tol: float = Field(0.05, gt=0)
    min_count: int = Field(5, ge=4)
    ba_max_iter: int = Field(100, ge=1)
    multistart: int = Field(20, ge=1)


class MirrorsConfig(_Section):
    quorum: Optional[int] = Field(None, ge=1, description="Agreeing reference channels, null means m - 2")
    cluster_tol: float = Field(0.03, gt=0)
    inlier_tol: float = Field(0.03, gt=0)
    iterations: int = Field(500, ge=1)
    min_inliers: int = Field(50, ge=3)
    max_mirrors: int = Field(6, ge=1)
    angle_tol_deg: float = Field(5.0, gt=0)
    offset_tol: float = Field(0.1, gt=0)


class SimulationConfig(_Section):
    kind: Literal["room", "random", "anechoic"] = Field("room", description="anechoic: fixed 8 x 129 profile without planes")
    room_dims: Tuple[float, float, float] = (5.0, 6.0, 3.0)
    n_mics: int = Field(8, ge=1)
    n_sources: int = Field(40, ge=1, description="Source samples for kind=random")
    duration: float = Field(10.0, gt=0)
    path_rate: float = Field(50.0, gt=0)
    planes: List[str] = Field(default_factory=lambda: ["floor", "wall_x0"])
    tdoa_sigma: float = Field(0.0, ge=0)
    outlier_rate: float = Field(0.0, ge=0, le=1)
    missing_rate: float = Field(0.0, ge=0, le=1)
    outlier_magnitude: float = Field(5.0, ge=0)
    audio: bool = Field(True, description="Also synthesize the multichannel WAV")


class LoggingConfig(_Section):
    level: str = "INFO"
    file: Optional[str] = Field("logs/calibration.log", description="Pipeline log file, null for console only")
    monitor_file: Optional[str] = Field("logs/calibration_runs.jsonl", description="Structured run events")


class PipelineConfig(_Section):
    """Everything a stage needs; echoed into every report."""
    seed: int = Field(0, ge=0)
    speed_of_sound: float = Field(343.0, gt=0)
    audio: AudioConfig
    frames: FramesConfig = Field(default_factory=FramesConfig)
    peaks: PeaksConfig = Field(default_factory=PeaksConfig)
    claps: ClapsConfig = Field(default_factory=ClapsConfig)
    tracking: TrackingConfig = Field(default_factory=TrackingConfig)
    offsets: OffsetsConfig = Field(default_factory=OffsetsConfig)
    geometry: GeometryConfig = Field(default_factory=GeometryConfig)
    mirrors: MirrorsConfig = Field(default_factory=MirrorsConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)


class RuntimeSettings(BaseSettings):
    """Process settings from CALIB_* variables (or .env)."""
    model_config = SettingsConfigDict(env_prefix="CALIB_", env_file=".env", extra="ignore")

    config_path: str = "config/config.json"
    log_level: Optional[str] = None
    monitor_file: Optional[str] = None
