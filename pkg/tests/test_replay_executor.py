"""Tests for the replay pipeline and its output files."""
import json
import logging
import os
import shutil

import numpy as np
import pytest

from config_manager import RunConfigManager
from services.dataset_store import FrameDataset, read_poses, save_json, write_png16, write_poses
from services.replay_executor import ReplayExecutor, ReplayState, open_dataset, run_replay
from services.synthetic_world import SceneDataset, render_frame, scene_from_dict, write_dataset
from utils.errors import DatasetError, FrameError

from tests.conftest import TINY_SCENE

FRAMES = 6


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("replay") / "tiny")
    write_dataset(scene_from_dict(TINY_SCENE), root, frames=FRAMES, density=300.0)
    return root


def make_config(dataset, output_dir, **sections):
    data = {
        "dataset": dataset,
        "output_dir": output_dir,
        "map": {"voxel_size": 0.05, "block_side": 8},
        "schedule": {"regularize_every": 3},
    }
    for name, values in sections.items():
        if name in ("seed", "max_frames"):
            data[name] = values
        else:
            data.setdefault(name, {}).update(values)
    return RunConfigManager().from_dict(data)


class TestRunReplay:

    def test_outputs(self, dataset_dir, tmp_path):
        out = str(tmp_path / "run")
        report = run_replay(make_config(dataset_dir, out))
        for name in ("mesh.ply", "mesh.instances.txt", "metrics.json", "metrics.txt",
                     "timing.csv", "timing.html", "report.json"):
            assert os.path.exists(os.path.join(out, name)), name
        assert report["frames_processed"] == FRAMES
        assert report["frames_skipped"] == []
        assert report["mesh"]["vertices"] > 0
        assert report["blocks"] > 0
        assert report["instances_registered"] == report["instances_allocated"] >= 2
        assert report["metrics"]["all"]["pq"] is not None
        assert 0.0 <= report["semantic_miou"] <= 1.0
        with open(os.path.join(out, "report.json"), encoding="utf-8") as f:
            assert json.load(f)["frames_processed"] == FRAMES

    def test_timing_covers_every_stage(self, dataset_dir, tmp_path):
        out = str(tmp_path / "run")
        report = run_replay(make_config(dataset_dir, out))
        assert set(report["timing_ms"]) >= {"load", "label_fusion", "reference_generation", "tracking",
                                            "integration", "probability_integration",
                                            "regularization", "meshing"}
        with open(os.path.join(out, "timing.csv"), encoding="utf-8") as f:
            assert f.readline().strip() == "stage,calls,total_ms,mean_ms,max_ms"

    def test_regularization_schedule(self, dataset_dir, tmp_path):
        report = run_replay(make_config(dataset_dir, str(tmp_path / "a"), schedule={"regularize_every": 2}))
        # after frames 2, 4 and 6, then the final pass
        assert report["regularization"]["runs"] == 4
        assert report["regularization"]["label_count_convention"] == "per_submap"

    def test_crf_disabled(self, dataset_dir, tmp_path):
        report = run_replay(make_config(dataset_dir, str(tmp_path / "a"), schedule={"enable_crf": False}))
        assert report["regularization"]["runs"] == 0
        assert report["regularization"]["last"] is None

    def test_zero_frames(self, dataset_dir, tmp_path):
        out = str(tmp_path / "empty")
        report = run_replay(make_config(dataset_dir, out, max_frames=0))
        assert report["frames_processed"] == 0
        assert report["blocks"] == 0
        assert report["mesh"] == {"vertices": 0, "triangles": 0}
        assert report["metrics"]["all"]["pq"] is None
        assert report["regularization"]["runs"] == 0
        assert os.path.exists(os.path.join(out, "mesh.ply"))

    def test_corrupt_frame_is_skipped(self, dataset_dir, tmp_path, caplog):
        copy = str(tmp_path / "copy")
        shutil.copytree(dataset_dir, copy)
        with open(os.path.join(copy, "depth", "000002.png"), "wb") as f:
            f.write(b"not a png")
        with caplog.at_level(logging.WARNING, logger="services.replay_executor"):
            report = run_replay(make_config(copy, str(tmp_path / "run")))
        assert report["frames_skipped"] == [2]
        assert report["frames_processed"] == FRAMES - 1
        assert any("frame 2" in record.getMessage() for record in caplog.records)

    def test_non_rigid_pose_aborts(self, dataset_dir, tmp_path):
        copy = str(tmp_path / "copy")
        shutil.copytree(dataset_dir, copy)
        poses = read_poses(os.path.join(copy, "poses.txt"))
        poses[3][:3, :3] *= 1.5
        write_poses(os.path.join(copy, "poses.txt"), poses)
        out = str(tmp_path / "run")
        with pytest.raises(DatasetError, match="pose 3"):
            run_replay(make_config(copy, out))
        assert not os.path.exists(os.path.join(out, "report.json"))

    def test_mismatched_image_sizes_abort(self, dataset_dir, tmp_path):
        copy = str(tmp_path / "copy")
        shutil.copytree(dataset_dir, copy)
        write_png16(os.path.join(copy, "instance", "000002.png"), np.zeros((8, 8), dtype=np.uint16))
        with pytest.raises(DatasetError, match="frame 2"):
            run_replay(make_config(copy, str(tmp_path / "run")))

    def test_without_evaluation(self, dataset_dir, tmp_path):
        out = str(tmp_path / "run")
        report = run_replay(make_config(dataset_dir, out), evaluate=False)
        assert report["metrics"] is None
        assert not os.path.exists(os.path.join(out, "metrics.json"))

    def test_deterministic(self, dataset_dir, tmp_path):
        outputs = []
        for name in ("first", "second"):
            out = str(tmp_path / name)
            report = run_replay(make_config(dataset_dir, out, seed=11))
            with open(os.path.join(out, "metrics.json"), "rb") as f:
                outputs.append((f.read(), report["mesh"]["vertices"]))
        assert outputs[0] == outputs[1]


class TestReplayExecutor:

    def test_frame_by_frame(self, dataset_dir, tmp_path):
        executor = ReplayExecutor(make_config(dataset_dir, str(tmp_path / "run")))
        executor.dataset = FrameDataset(dataset_dir)
        executor.state = ReplayState(executor._new_map())
        assert executor.process_frame(0)
        first_blocks = executor.state.volume.block_count
        assert first_blocks > 0
        assert executor.state.volume.next_instance_id > 1
        assert executor.process_frame(1)
        assert executor.state.frames_processed == 2
        assert executor.state.tracking_totals["matched"] > 0

    def test_regularization_keeps_registry(self, dataset_dir, tmp_path):
        executor = ReplayExecutor(make_config(dataset_dir, str(tmp_path / "run")))
        executor.dataset = FrameDataset(dataset_dir)
        executor.state = ReplayState(executor._new_map())
        for index in range(3):
            executor.process_frame(index)
        before = executor.state.registry.to_dict()
        assert before
        executor.regularize()
        assert executor.state.registry.to_dict() == before
        assert len(executor.state.regularization_runs) == 1


class TestSeed:

    @pytest.fixture
    def scene_file(self, tmp_path):
        data = dict(TINY_SCENE, noise={"depth_sigma_a": 0.003, "label_flip_rate": 0.1})
        path = str(tmp_path / "tiny.json")
        save_json(path, data)
        return path

    def _metrics(self, scene_file, out, seed):
        report = run_replay(make_config(scene_file, out, seed=seed, max_frames=3))
        with open(os.path.join(out, "metrics.json"), "rb") as f:
            return report, f.read()

    def test_seed_drives_scene_noise(self, scene_file, tmp_path):
        report, first = self._metrics(scene_file, str(tmp_path / "a"), 1)
        _, again = self._metrics(scene_file, str(tmp_path / "b"), 1)
        _, other = self._metrics(scene_file, str(tmp_path / "c"), 2)
        assert report["seed"] == 1
        assert report["frames_processed"] == 3
        assert first == again
        assert first != other

    def test_scene_file_matches_rendered_frames(self, scene_file):
        dataset = open_dataset(scene_file, seed=5)
        assert isinstance(dataset, SceneDataset)
        assert dataset.spec.seed == 5
        spec = scene_from_dict(dict(TINY_SCENE, noise={"depth_sigma_a": 0.003, "label_flip_rate": 0.1}, seed=5))
        cam, segmentation = dataset.load_frame(2)
        rendered = render_frame(spec, spec.poses[2], frame_index=2)
        np.testing.assert_array_equal(cam.depth, rendered.camera.depth)
        np.testing.assert_array_equal(segmentation.class_map, rendered.segmentation.class_map)
        with pytest.raises(FrameError):
            dataset.load_frame(dataset.frame_count)

    def test_seed_on_directory_is_reported(self, dataset_dir, caplog):
        with caplog.at_level(logging.WARNING, logger="services.replay_executor"):
            dataset = open_dataset(dataset_dir, seed=3)
        assert isinstance(dataset, FrameDataset)
        assert any("no effect" in record.getMessage() for record in caplog.records)
