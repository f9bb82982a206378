import numpy as np
import pytest

from pillarseg import cli, render


def run_cli(*args):
    return cli.main(list(args))


@pytest.fixture
def scene_file(tmp_path):
    path = tmp_path / "scene.txt"
    path.write_text("ground = -3.5 3.5 -3.5 3.5\nground_density = 1.5\n"
                    "boxes = 2\nbox_size = 1.0 1.6 1.2\nposts = 1\n")
    return str(path)


MICRO = [
    "--x_range", "-4", "4", "--y_range", "-4", "4",
    "--pillar_size", "0.5", "0.5", "0.25", "--max_pillars", "256",
    "--pfn_channels", "8", "--unet_widths", "4", "8",
    "--train_frames", "4", "--val_frames", "2", "--epochs", "1",
    "--lstm_hidden", "2", "--graph_hidden", "4", "--feast_heads", "2",
]


def micro_args(scene_file, *extra):
    return MICRO + ["--scene", scene_file] + list(extra)


class TestDispatch:
    def test_no_arguments_usage_exit_1(self, capsys):
        assert run_cli() == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand_exit_1(self, capsys):
        assert run_cli("frobnicate") == 1
        assert "unknown subcommand" in capsys.readouterr().err

    def test_mode_pairing_rejected(self, scene_file, tmp_path, capsys):
        code = run_cli("train", *micro_args(scene_file), "--mode", "dense-train",
                       "--eval_mode", "sparse-eval", "--out", str(tmp_path / "t"))
        assert code == 1
        assert "dense-train" in capsys.readouterr().err

    def test_bad_config_key_exit_1(self, tmp_path, capsys):
        assert run_cli("train", "--bogus_key", "1", "--out", str(tmp_path / "t")) == 1

    def test_missing_scan_file_exit_2(self, tmp_path):
        assert run_cli("occupancy", "--scan", str(tmp_path / "nope.bin"),
                       "--out", str(tmp_path / "o")) == 2


class TestSynthIngest:
    def test_synth_emits_dataset(self, scene_file, tmp_path):
        out = tmp_path / "synth"
        assert run_cli("synth", *micro_args(scene_file), "--frames", "3",
                       "--out", str(out)) == 0
        assert sorted(p.name for p in (out / "velodyne").glob("*.bin")) == \
            ["000000.bin", "000001.bin", "000002.bin"]
        assert len(list((out / "labels").glob("*.label"))) == 3
        assert (out / "poses.txt").exists()
        assert (out / "classmap.map").exists()

    def test_synth_deterministic(self, scene_file, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run_cli("synth", *micro_args(scene_file), "--frames", "2",
                           "--out", str(out)) == 0
        for rel in ("velodyne/000001.bin", "labels/000001.label", "poses.txt", "run.log"):
            assert (a / rel).read_bytes() == (b / rel).read_bytes()

    def test_ingest_round_trip(self, scene_file, tmp_path):
        synth = tmp_path / "synth"
        run_cli("synth", *micro_args(scene_file), "--frames", "2", "--out", str(synth))
        cache = tmp_path / "cache"
        code = run_cli("ingest", *micro_args(scene_file),
                       "--scans", str(synth / "velodyne"),
                       "--labels", str(synth / "labels"),
                       "--poses", str(synth / "poses.txt"),
                       "--classmap", str(synth / "classmap.map"),
                       "--out", str(cache))
        assert code == 0
        from pillarseg.container import read_container

        frame = read_container(cache / "frame_000000.pstc")
        assert {"xyz", "reflectance", "classes", "pose"} <= set(frame)
        assert (cache / "manifest.txt").exists()

    def test_ingest_rejects_mismatched_labels(self, scene_file, tmp_path):
        synth = tmp_path / "synth"
        run_cli("synth", *micro_args(scene_file), "--frames", "1", "--out", str(synth))
        label = next((synth / "labels").glob("*.label"))
        label.write_bytes(label.read_bytes()[:-4])
        assert run_cli("ingest", *micro_args(scene_file),
                       "--scans", str(synth / "velodyne"),
                       "--labels", str(synth / "labels"),
                       "--out", str(tmp_path / "cache")) == 2


class TestRenderCommands:
    @pytest.fixture
    def synth_dir(self, scene_file, tmp_path):
        out = tmp_path / "synth"
        run_cli("synth", *micro_args(scene_file), "--frames", "2", "--out", str(out))
        return out

    def test_occupancy_render(self, scene_file, synth_dir, tmp_path):
        out = tmp_path / "occ"
        code = run_cli("occupancy", *micro_args(scene_file),
                       "--scan", str(synth_dir / "velodyne" / "000000.bin"),
                       "--out", str(out))
        assert code == 0
        data = (out / "observability.pgm").read_bytes()
        assert data.startswith(b"P5\n16 16\n255\n")
        assert len(list(out.glob("visibility_z*.pgm"))) == 16  # 4 m extent / 0.25 m voxels

    def test_labels_sparse(self, scene_file, synth_dir, tmp_path):
        out = tmp_path / "lab"
        code = run_cli("labels", *micro_args(scene_file),
                       "--scans", str(synth_dir / "velodyne"),
                       "--labels", str(synth_dir / "labels"),
                       "--out", str(out))
        assert code == 0
        assert (out / "labels_000000.pgm").read_bytes().startswith(b"P5\n16 16\n65535\n")
        raw = render.read_raw16(out / "labels_000000.raw", (16, 16))
        assert raw.max() <= 3
        legend = (out / "legend.txt").read_text()
        assert "1 ground" in legend

    def test_labels_dense_with_poses(self, scene_file, synth_dir, tmp_path):
        out = tmp_path / "dense"
        code = run_cli("labels", *micro_args(scene_file),
                       "--scans", str(synth_dir / "velodyne"),
                       "--labels", str(synth_dir / "labels"),
                       "--poses", str(synth_dir / "poses.txt"),
                       "--dense", "true", "--out", str(out))
        assert code == 0
        assert (out / "labels_000001.raw").exists()


class TestGradcheckCommand:
    def test_passes_and_writes_table(self, tmp_path, capsys):
        out = tmp_path / "gc"
        assert run_cli("gradcheck", "--out", str(out)) == 0
        table = (out / "gradcheck.txt").read_text()
        assert "segnet_with_loss" in table
        assert "FAIL" not in table


class TestTrainEval:
    def test_train_then_eval(self, scene_file, tmp_path, capsys):
        out = tmp_path / "run"
        assert run_cli("train", *micro_args(scene_file), "--out", str(out)) == 0
        assert (out / "model.ckpt").exists()
        metrics = (out / "metrics.txt").read_text()
        assert "final.miou" in metrics
        log = (out / "run.log").read_text()
        assert "epoch 1" in log and "# effective configuration" in log

        eval_out = tmp_path / "eval"
        code = run_cli("eval", *micro_args(scene_file),
                       "--checkpoint", str(out / "model.ckpt"), "--out", str(eval_out))
        assert code == 0
        assert (eval_out / "metrics.txt").exists()
        preds = sorted(eval_out.glob("pred_*.raw"))
        assert len(preds) == 2
        ppm = next(eval_out.glob("pred_*.ppm")).read_bytes()
        assert ppm.startswith(b"P6\n16 16\n255\n")

    def test_train_deterministic_outputs(self, scene_file, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run_cli("train", *micro_args(scene_file), "--dtype", "f64",
                           "--out", str(out)) == 0
        assert (a / "metrics.txt").read_bytes() == (b / "metrics.txt").read_bytes()
        assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()
        assert (a / "run.log").read_bytes() == (b / "run.log").read_bytes()

    def test_eval_deterministic_outputs(self, scene_file, tmp_path):
        out = tmp_path / "run"
        run_cli("train", *micro_args(scene_file), "--out", str(out))
        evals = []
        for name in ("e1", "e2"):
            eval_out = tmp_path / name
            assert run_cli("eval", *micro_args(scene_file),
                           "--checkpoint", str(out / "model.ckpt"),
                           "--out", str(eval_out)) == 0
            evals.append(eval_out)
        for rel in ("metrics.txt", "pred_000004.raw", "pred_000004.ppm"):
            assert (evals[0] / rel).read_bytes() == (evals[1] / rel).read_bytes()
