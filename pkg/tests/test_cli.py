import json
import math
from pathlib import Path

import numpy as np
import pytest

from chandet import tensorio
from chandet.cli import main
from chandet.config import ConfigError, ExperimentConfig, parse_config_text
from chandet.dataio import (
    DirectoryDataset,
    format_detections,
    format_labels,
    parse_detections,
    parse_labels,
    write_dataset,
)
from chandet.heads import Box, Detection, PEDESTRIAN
from chandet.synthworld import Annotation, SceneConfig

from conftest import tiny_scene_config


class TestTensorFile:
    def test_roundtrip_bit_exact_all_dtypes(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = [
            rng.normal(size=(3, 5, 7)).astype(np.float32),
            rng.normal(size=(2, 2)).astype(np.float64),
            rng.integers(-1000, 1000, size=(4, 1, 2, 3)).astype(np.int32),
        ]
        for i, arr in enumerate(arrays):
            p = tmp_path / f"t{i}.ten"
            tensorio.write_tensor(p, arr)
            back = tensorio.read_tensor(p)
            assert back.dtype == arr.dtype
            assert np.array_equal(back, arr)
            assert back.tobytes() == arr.tobytes()

    def test_magic_enforced(self, tmp_path):
        p = tmp_path / "bad.ten"
        p.write_bytes(b"NOTPT" + b"\x00" * 10)
        with pytest.raises(tensorio.TensorFormatError, match="magic"):
            tensorio.read_tensor(p)

    def test_payload_length_enforced(self, tmp_path):
        arr = np.zeros((2, 2), np.float32)
        blob = tensorio.tensor_to_bytes(arr)
        p = tmp_path / "short.ten"
        p.write_bytes(blob[:-2])
        with pytest.raises(tensorio.TensorFormatError, match="payload"):
            tensorio.read_tensor(p)

    def test_unsupported_dtype_rejected(self):
        with pytest.raises(tensorio.TensorFormatError):
            tensorio.tensor_to_bytes(np.zeros(3, np.int64))


class TestConfigParsing:
    def test_basic_parse(self):
        text = """
        # comment
        mode = hyperlearner
        channel = segmentation
        seed = 7
        scene.pedestrians = 1 4   # inline comment
        train.stage_learning_rates = 0.01 0.01 0.01 0.001
        scene.frame_pair = true
        """
        values = parse_config_text(text)
        assert values["mode"] == "hyperlearner"
        assert values["seed"] == 7
        assert values["scene.pedestrians"] == [1, 4]
        assert values["scene.frame_pair"] is True
        cfg = ExperimentConfig(values)
        assert cfg["mode"] == "hyperlearner"

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            ExperimentConfig({"scene.pedestrains": [1, 2]})

    def test_mode_channel_invariants(self):
        with pytest.raises(ConfigError):
            ExperimentConfig({"mode": "hyperlearner"})
        with pytest.raises(ConfigError):
            ExperimentConfig({"mode": "side_branch"})
        with pytest.raises(ConfigError):
            ExperimentConfig({"mode": "hypernet_control", "channel": "edge"})
        ExperimentConfig({"mode": "hypernet_control"})

    def test_bad_line_rejected(self):
        with pytest.raises(ConfigError, match="key = value"):
            parse_config_text("mode hyperlearner")

    def test_fingerprint_stable_and_sensitive(self):
        a = ExperimentConfig({"seed": 1})
        b = ExperimentConfig({"seed": 1})
        c = ExperimentConfig({"seed": 2})
        assert a.fingerprint() == b.fingerprint()
        assert a.fingerprint() != c.fingerprint()

    def test_seed_override(self):
        cfg = ExperimentConfig({"seed": 1}).with_overrides(seed=9)
        assert cfg["seed"] == 9


class TestLabelFiles:
    def test_roundtrip(self):
        anns = [
            Annotation(Box(1.25, 2.5, 11.75, 42.0), PEDESTRIAN, 0.125, 1, True),
            Annotation(Box(5, 5, 25, 30), 2, 0.0, 0, True),
            Annotation(Box(40, 10, 60, 50), PEDESTRIAN, 0.5, 2, False),
        ]
        text = format_labels(anns)
        lines = text.strip().splitlines()
        assert lines[0].startswith("Pedestrian ")
        assert lines[1].startswith("Cyclist ")
        assert lines[2].startswith("DontCare ")
        back = parse_labels(text)
        assert len(back) == 3
        assert back[0].class_id == PEDESTRIAN and back[0].occlusion == 1
        assert not back[2].annotated

    def test_malformed_rejected(self):
        with pytest.raises(ValueError):
            parse_labels("Pedestrian 0.0 0 1 2 3")

    def test_unknown_class_rejected(self):
        with pytest.raises(ValueError, match="unknown class"):
            parse_labels("Martian 0.0 0 1 2 11 22")


class TestDetectionFiles:
    def test_roundtrip(self):
        dets = [
            Detection(Box(1, 2, 11, 42), 0.875, 1),
            Detection(Box(5, 5, 25, 30), 0.25, 2),
        ]
        back = parse_detections(format_detections(dets))
        assert [d.class_id for d in back] == [1, 2]
        assert back[0].score == pytest.approx(0.875)


class TestDatasetLayout:
    def test_write_and_load(self, tmp_path):
        cfg = tiny_scene_config(seed=42, frame_pair=True)
        manifest = write_dataset(tmp_path / "ds", cfg, count=3,
                                 channels=("segmentation", "edge", "flow"))
        assert manifest["count"] == 3
        ds_dir = tmp_path / "ds"
        assert sorted(p.name for p in (ds_dir / "images").iterdir()) == [
            "000000.png", "000001.png", "000002.png"
        ]
        assert (ds_dir / "images2" / "000001.png").exists()
        assert (ds_dir / "channels" / "flow" / "000002.ten").exists()
        ds = DirectoryDataset(ds_dir, supervisor_kind="segmentation")
        assert len(ds) == 3
        sample = ds[0]
        assert sample.image.shape == (3, 64, 64)
        assert sample.supervisor.kind == "multiclass"
        assert 0.0 <= sample.image.min() and sample.image.max() <= 1.0

    def test_determinism_byte_identical(self, tmp_path):
        cfg = tiny_scene_config(seed=9)
        write_dataset(tmp_path / "a", cfg, count=2, channels=("segmentation",))
        write_dataset(tmp_path / "b", cfg, count=2, channels=("segmentation",))
        for rel in ("images/000001.png", "labels/000001.txt",
                    "channels/segmentation/000000.ten"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_flow_requires_frame_pair(self, tmp_path):
        with pytest.raises(ValueError, match="frame_pair"):
            write_dataset(tmp_path / "ds", tiny_scene_config(), 1, channels=("flow",))

    def test_missing_channel_dir_rejected(self, tmp_path):
        write_dataset(tmp_path / "ds", tiny_scene_config(), 1, channels=("edge",))
        with pytest.raises(FileNotFoundError):
            DirectoryDataset(tmp_path / "ds", supervisor_kind="segmentation")


def write_config(path: Path, text: str) -> str:
    path.write_text(text)
    return str(path)


SMALL_SCENE = """
scene.image_height = 64
scene.image_width = 64
scene.pedestrians = 1 2
scene.cyclists = 0 1
scene.hard_negatives = 0 1
scene.object_heights = 0.45 0.7   # tall enough for every difficulty filter
dataset.count = 3
dataset.channels = segmentation
"""


class TestCliCommands:
    def test_generate_twice_is_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path / "c.conf", SMALL_SCENE + "seed = 5\n")
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
        a = (tmp_path / "a" / "images" / "000002.png").read_bytes()
        b = (tmp_path / "b" / "images" / "000002.png").read_bytes()
        assert a == b

    def test_generate_force_required(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.conf", SMALL_SCENE)
        out = tmp_path / "ds"
        assert main(["generate", "--config", cfg, "--out", str(out)]) == 0
        assert main(["generate", "--config", cfg, "--out", str(out)]) == 2
        assert "force" in capsys.readouterr().err
        assert main(["generate", "--config", cfg, "--out", str(out), "--force"]) == 0

    def test_generate_validation_exit_code(self, tmp_path):
        bad = write_config(tmp_path / "c.conf", "mode = hyperlearner\n")  # channel missing
        assert main(["generate", "--config", bad, "--out", str(tmp_path / "x")]) == 2

    def test_eval_with_oracle_detections(self, tmp_path, capsys):
        # a perfect oracle detector (detections = labels at score 1) must
        # score AP 1.0 on every difficulty and MR 0 at both ranges
        cfg = write_config(tmp_path / "c.conf", SMALL_SCENE + "seed = 11\n")
        ds = tmp_path / "ds"
        assert main(["generate", "--config", cfg, "--out", str(ds)]) == 0
        det_dir = tmp_path / "oracle"
        det_dir.mkdir()
        for label in sorted((ds / "labels").iterdir()):
            dets = [
                Detection(a.box, 1.0, a.class_id)
                for a in parse_labels(label.read_text())
                if a.annotated
            ]
            (det_dir / label.name).write_text(format_detections(dets))
        out = tmp_path / "eval"
        code = main(["eval", "--detections", str(det_dir), str(ds), "--out", str(out)])
        assert code == 0
        metrics = json.loads((out / "metrics.json").read_text())
        for name in ("moderate", "easy", "hard"):
            if metrics["gt_counts"][name]:
                assert metrics["ap"][name] == pytest.approx(1.0)
        assert metrics["mr_minus2"] == 0.0
        assert metrics["mr_minus4"] == 0.0
        report = (out / "report.csv").read_text().splitlines()
        assert report[0] == "Metric,Mod,Easy,Hard"

    def test_eval_empty_detections(self, tmp_path):
        cfg = write_config(tmp_path / "c.conf", SMALL_SCENE + "seed = 12\n")
        ds = tmp_path / "ds"
        main(["generate", "--config", cfg, "--out", str(ds)])
        det_dir = tmp_path / "none"
        det_dir.mkdir()
        out = tmp_path / "eval"
        assert main(["eval", "--detections", str(det_dir), str(ds), "--out", str(out)]) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["ap"]["moderate"] == 0.0
        assert metrics["mr_minus2"] == 1.0

    def test_eval_requires_input(self, tmp_path):
        cfg = write_config(tmp_path / "c.conf", SMALL_SCENE)
        ds = tmp_path / "ds"
        main(["generate", "--config", cfg, "--out", str(ds)])
        assert main(["eval", str(ds), "--out", str(tmp_path / "e")]) == 2

    def test_report_single_and_deltas(self, tmp_path, capsys):
        run_a = tmp_path / "base"
        run_b = tmp_path / "better"
        run_a.mkdir()
        run_b.mkdir()
        (run_a / "metrics.json").write_text(json.dumps(
            {"ap": {"moderate": 0.60, "easy": 0.70, "hard": 0.50}}))
        (run_b / "metrics.json").write_text(json.dumps(
            {"ap": {"moderate": 0.63, "easy": 0.70, "hard": 0.52}}))

        assert main(["report", str(run_a)]) == 0
        out = capsys.readouterr().out
        assert "dMod" not in out  # single run: no delta columns
        assert "60.00" in out

        table = tmp_path / "cmp.csv"
        assert main(["report", str(run_a), str(run_b), "--out", str(table)]) == 0
        out = capsys.readouterr().out
        assert "+3.00" in out and "+0.00" in out and "+2.00" in out
        rows = table.read_text().strip().splitlines()
        assert rows[0].split(",")[:4] == ["Model", "Mod", "Easy", "Hard"]
        base_row = rows[1].split(",")
        assert base_row[4:] == ["+0.00", "+0.00", "+0.00", "+0.00"]

    def test_report_identical_runs_zero_deltas(self, tmp_path, capsys):
        runs = []
        for name in ("r1", "r2"):
            d = tmp_path / name
            d.mkdir()
            (d / "metrics.json").write_text(json.dumps(
                {"ap": {"moderate": 0.5, "easy": 0.5, "hard": 0.5}}))
            runs.append(str(d))
        assert main(["report", *runs]) == 0
        out = capsys.readouterr().out
        assert "+0.00" in out and "+3" not in out

    def test_report_missing_metrics_is_validation_error(self, tmp_path):
        d = tmp_path / "empty"
        d.mkdir()
        assert main(["report", str(d)]) == 2


@pytest.mark.slow
class TestCliTrainEval:
    def test_train_eval_roundtrip_and_resume(self, tmp_path):
        conf_text = SMALL_SCENE + (
            "seed = 3\n"
            "mode = hyperlearner\n"
            "channel = segmentation\n"
            "backbone.stage_channels = 8 8 16 16\n"
            "backbone.branch_channels = 8\n"
            "backbone.aggregation_target_level = 2\n"
            "anchors.scales = 12 20 32\n"
            "anchors.ratios = 0.3 0.5 0.8\n"
            "heads.rpn_mid_channels = 16\n"
            "heads.frcnn_fc_width = 32\n"
            "train.stage_iterations = 4 4 4 4\n"
        )
        cfg = write_config(tmp_path / "c.conf", conf_text)
        ds = tmp_path / "ds"
        assert main(["generate", "--config", cfg, "--out", str(ds)]) == 0
        run = tmp_path / "run"
        assert main(["train", "--config", cfg, "--dataset", str(ds),
                     "--out", str(run)]) == 0
        assert (run / "checkpoint.ckpt").exists()
        log = (run / "loss_log.csv").read_text().splitlines()
        assert log[0].startswith("stage,iteration,total")
        stages = {line.split(",")[0] for line in log[1:]}
        assert stages == {"cfn", "rpn", "frcnn", "joint"}

        out = tmp_path / "eval"
        assert main(["eval", str(run / "checkpoint.ckpt"), str(ds),
                     "--out", str(out)]) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert "ap" in metrics and "cfn_pixel_accuracy" in metrics

        # resume on a finished checkpoint is a no-op but must succeed
        assert main(["train", "--config", cfg, "--dataset", str(ds),
                     "--out", str(run), "--resume"]) == 0

    def test_train_dataset_fingerprint_mismatch(self, tmp_path):
        cfg_a = write_config(tmp_path / "a.conf", SMALL_SCENE + "seed = 3\n")
        ds = tmp_path / "ds"
        assert main(["generate", "--config", cfg_a, "--out", str(ds)]) == 0
        cfg_b = write_config(
            tmp_path / "b.conf",
            SMALL_SCENE.replace("scene.pedestrians = 1 2", "scene.pedestrians = 2 3"),
        )
        assert main(["train", "--config", cfg_b, "--dataset", str(ds),
                     "--out", str(tmp_path / "run")]) == 2
