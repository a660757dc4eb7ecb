"""
Test stage artifacts: schemas, 1-based indices in files, sidecars
"""

import json

import numpy as np
import pandas as pd
import pytest

from src.core import file_io
from src.core.exceptions import SchemaError
from src.core.model import MirroredMicrophone, Plane, TdoaMatrix
from src.signal_processing.gcc_phat import FrameSpec, Peak, ScoreMatrix
from src.tracking.tdoa_tracker import Track

FRAMES = FrameSpec(sample_rate=16000, frame_len=1024, hop=512)


class TestScene:
    def test_round_trip_keeps_planes_and_mirrors(self, tmp_path, random_scene):
        random_scene.planes.append(Plane.from_normal((0, 0, 1), 0.0))
        random_scene.mirrored_microphones.append(
            MirroredMicrophone(mic_id=2, path_index=2, position=np.array([1.0, 2.0, -0.5]), inlier_count=17))
        path = tmp_path / "scene.json"
        file_io.write_scene(path, random_scene)
        loaded = file_io.read_scene(path)
        assert np.allclose(loaded.mic_positions, random_scene.mic_positions)
        assert np.allclose(loaded.offsets, random_scene.offsets)
        assert loaded.planes[0].d == pytest.approx(0.0)
        assert loaded.mirrored_microphones[0].inlier_count == 17

    def test_writer_is_deterministic(self, tmp_path, random_scene):
        file_io.write_scene(tmp_path / "a.json", random_scene)
        file_io.write_scene(tmp_path / "b.json", random_scene)
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(SchemaError, match="Missing artifact"):
            file_io.read_scene(tmp_path / "scene.json")

    def test_bad_field_reports_location(self, tmp_path):
        path = tmp_path / "scene.json"
        path.write_text(json.dumps({"microphones": [[0, 0]]}), encoding="utf-8")
        with pytest.raises(SchemaError) as info:
            file_io.read_scene(path)
        assert info.value.path.startswith(f"{path}:microphones")

    def test_positive_offsets_rejected(self, tmp_path):
        path = tmp_path / "scene.json"
        path.write_text(json.dumps({
            "microphones": [[0, 0, 0]],
            "source_path": [{"t": 0.0, "pos": [1, 0, 0]}],
            "offsets": [0.5],
        }), encoding="utf-8")
        with pytest.raises(SchemaError):
            file_io.read_scene(path)


class TestTdoa:
    def test_missing_entries_and_sidecar(self, tmp_path):
        U = np.array([[0.0, 0.0, np.nan], [1.5, np.nan, 2.0], [-0.5, 0.25, 1.0]])
        tdoa = TdoaMatrix(U=U, mask=np.isfinite(U), event_times=[0.1, 0.2, 0.3])
        path = tmp_path / "tdoa.csv"
        file_io.write_tdoa(path, tdoa, FRAMES)

        assert list(pd.read_csv(path).columns) == ["e1", "e2", "e3"]
        assert "NaN" in path.read_text(encoding="utf-8")
        sidecar = json.loads((tmp_path / "tdoa.json").read_text(encoding="utf-8"))
        assert sidecar["frame_spec"]["sample_rate"] == 16000

        loaded = file_io.read_tdoa(path)
        assert np.array_equal(loaded.mask, tdoa.mask)
        assert np.allclose(loaded.U[tdoa.mask], U[tdoa.mask])
        assert np.allclose(loaded.event_times, [0.1, 0.2, 0.3])
        assert file_io.read_tdoa_inliers(path) is None

    def test_inlier_labels(self, tmp_path, clean_tdoa):
        labels = np.ones(clean_tdoa.U.shape, dtype=bool)
        labels[2, 5] = False
        path = tmp_path / "sim_tdoa.csv"
        file_io.write_tdoa(path, clean_tdoa, inliers=labels)
        assert (tmp_path / "sim_tdoa_inliers.csv").exists()
        assert np.array_equal(file_io.read_tdoa_inliers(path), labels)

    def test_without_sidecar_times_are_indices(self, tmp_path):
        path = tmp_path / "tdoa.csv"
        path.write_text("e1,e2\n0,0\n1.0,2.0\n", encoding="utf-8")
        assert np.array_equal(file_io.read_tdoa(path).event_times, [0.0, 1.0])

    def test_sidecar_count_mismatch(self, tmp_path):
        path = tmp_path / "tdoa.csv"
        path.write_text("e1,e2\n0,0\n1.0,2.0\n", encoding="utf-8")
        (tmp_path / "tdoa.json").write_text(json.dumps({"event_times": [0.0]}), encoding="utf-8")
        with pytest.raises(SchemaError, match="event_times"):
            file_io.read_tdoa(path)

    def test_nonzero_reference_row(self, tmp_path):
        path = tmp_path / "tdoa.csv"
        path.write_text("e1\n0.5\n1.0\n", encoding="utf-8")
        with pytest.raises(SchemaError):
            file_io.read_tdoa(path)


class TestPeaksAndTracks:
    def test_peaks_use_one_based_pairs(self, tmp_path):
        peaks = {(0, 2): [Peak(pair=(0, 2), frame_index=3, range_diff=0.75, score=0.6)]}
        path = tmp_path / "peaks.csv"
        file_io.write_peaks(path, peaks, FRAMES)

        frame = pd.read_csv(path)
        assert list(frame.columns) == file_io.PEAK_COLUMNS
        assert (frame.loc[0, "pair_i1"], frame.loc[0, "pair_i2"]) == (1, 3)
        assert frame.loc[0, "time_s"] == pytest.approx(float(FRAMES.frame_time(3)))

        loaded = file_io.read_peaks(path, FRAMES)
        assert list(loaded) == [(0, 2)]
        peak = loaded[(0, 2)][0]
        assert peak.range_diff == pytest.approx(0.75)
        assert peak.lag == pytest.approx(0.75 / FRAMES.meters_per_sample)

    def test_missing_peak_column(self, tmp_path):
        path = tmp_path / "peaks.csv"
        path.write_text("pair_i1,pair_i2,frame,time_s,score\n1,2,0,0.0,0.5\n", encoding="utf-8")
        with pytest.raises(SchemaError, match="range_diff_m"):
            file_io.read_peaks(path, FRAMES)

    def test_tracks(self, tmp_path):
        track = Track(pair=(0, 1), frames=np.array([4, 5, 7]), w=np.array([0.1, 0.12, 0.15]),
                      scores=np.ones(3))
        path = tmp_path / "tracks.csv"
        file_io.write_tracks(path, {(0, 1): track}, FRAMES)
        frames, w = file_io.read_tracks(path)[(0, 1)]
        assert frames.tolist() == [4, 5, 7]
        assert np.allclose(w, [0.1, 0.12, 0.15])

    def test_tracking_stages(self, tmp_path):
        raw = [Peak(pair=(0, 1), frame_index=f, range_diff=0.1 * f, score=0.5) for f in range(3)]
        path = tmp_path / "tracking_stages.csv"
        file_io.write_tracking_stages(path, [((0, 1), {"raw": raw, "smoothed": raw[:2]})])
        frame = file_io.read_tracking_stages(path)
        assert frame["stage"].value_counts().to_dict() == {"raw": 3, "smoothed": 2}
        assert set(frame["pair_i2"]) == {1}


class TestWav:
    @pytest.mark.parametrize("bit_depth, tol", [(32, 1e-6), (16, 1e-3)])
    def test_multichannel(self, tmp_path, bit_depth, tol):
        t = np.arange(1600) / 16000
        channels = np.column_stack([0.5 * np.sin(2 * np.pi * 440 * t), 0.25 * np.cos(2 * np.pi * 220 * t)])
        path = tmp_path / "audio.wav"
        file_io.write_wav(path, channels, 16000, bit_depth=bit_depth)
        data, rate = file_io.read_wav(path)
        assert rate == 16000
        assert data.shape == (1600, 2)
        # 16-bit files are peak-normalized
        expected = channels if bit_depth == 32 else channels / np.max(np.abs(channels))
        assert np.allclose(data, expected, atol=tol)

    def test_one_file_per_channel(self, tmp_path):
        for i in range(3):
            file_io.write_wav(tmp_path / f"ch{i}.wav", np.full(100, 0.1 * (i + 1)), 8000)
        data, rate = file_io.read_wav([tmp_path / f"ch{i}.wav" for i in range(3)])
        assert data.shape == (100, 3)
        assert np.allclose(data[0], [0.1, 0.2, 0.3], atol=1e-6)

    def test_channel_files_must_agree(self, tmp_path):
        file_io.write_wav(tmp_path / "a.wav", np.zeros(100), 8000)
        file_io.write_wav(tmp_path / "b.wav", np.zeros(120), 8000)
        with pytest.raises(SchemaError, match="length"):
            file_io.read_wav([tmp_path / "a.wav", tmp_path / "b.wav"])

    def test_missing_wav(self, tmp_path):
        with pytest.raises(SchemaError):
            file_io.read_wav(tmp_path / "absent.wav")


def test_offsets_document(tmp_path):
    path = tmp_path / "offsets.json"
    file_io.write_offsets(path, {"offsets": [-1.0, None], "inlier_columns": [0], "residual": 0.01})
    doc = file_io.read_offsets(path)
    assert doc.offsets == [-1.0, None]
    assert doc.case is None


def test_score_matrix_grid(tmp_path):
    values = np.arange(12, dtype=float).reshape(3, 4)
    scores = ScoreMatrix(pair=(1, 2), values=values, lag_axis=np.array([-0.1, 0.0, 0.1]))
    path = tmp_path / "scores" / "scores_2_3.f32"
    file_io.write_score_matrix(path, scores, FRAMES)
    grid = np.fromfile(path, dtype=np.float32).reshape(3, 4)
    assert np.array_equal(grid, values)
    sidecar = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    assert sidecar["pair"] == [2, 3]
    assert sidecar["shape"] == [3, 4]
    assert len(sidecar["frame_times_s"]) == 4
