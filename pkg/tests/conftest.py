"""
Shared fixtures for the calibration test suite.
"""

import json
import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.core.model import Scene
from src.core.pipeline_config import PipelineConfig
from src.simulation.scene_simulator import NoiseSpec, generate_random_scene, synth_tdoa


@pytest.fixture
def random_scene() -> Scene:
    """10 microphones, 40 sources, physical offsets."""
    return generate_random_scene(10, 40, seed=11)


@pytest.fixture
def clean_tdoa(random_scene):
    tdoa, _ = synth_tdoa(random_scene, NoiseSpec(seed=3))
    return tdoa


@pytest.fixture
def dense_problem():
    """U = D + o with true offsets for a random 10 x 12 layout."""
    rng = np.random.default_rng(5)
    mics = rng.standard_normal((10, 3))
    sources = rng.standard_normal((12, 3))
    distances = np.linalg.norm(sources[None, :, :] - mics[:, None, :], axis=2)
    offsets = -distances[0]
    return mics, sources, offsets, distances + offsets[None, :]


@pytest.fixture
def config_doc():
    """Minimal valid config document with logging kept off disk."""
    return {
        "seed": 3,
        "audio": {"sample_rate": 16000},
        "simulation": {"kind": "random", "n_mics": 10, "n_sources": 30, "audio": False},
        "logging": {"level": "INFO", "file": None, "monitor_file": None},
    }


@pytest.fixture
def pipeline_config(config_doc) -> PipelineConfig:
    return PipelineConfig.model_validate(config_doc)


@pytest.fixture
def config_file(tmp_path, config_doc) -> Path:
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config_doc), encoding="utf-8")
    return path
