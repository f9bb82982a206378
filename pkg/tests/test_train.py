import numpy as np
import pytest

from pillarseg import config, train
from pillarseg.errors import DivergenceError
from pillarseg.model import load_checkpoint, save_checkpoint
from pillarseg.nn import tensor as T


def micro_overrides(**extra):
    values = {
        "x_range": ["-4", "4"],
        "y_range": ["-4", "4"],
        "pillar_size": ["0.5", "0.5", "0.25"],
        "max_pillars": ["256"],
        "pfn_channels": ["8"],
        "unet_widths": ["4", "8"],
        "train_frames": ["6"],
        "val_frames": ["2"],
        "epochs": ["2"],
        "lstm_hidden": ["2"],
        "graph_hidden": ["4"],
        "feast_heads": ["2"],
        "fps_rate": ["0.2"],
    }
    for k, v in extra.items():
        values[k] = v
    return values


@pytest.fixture
def scene_file(tmp_path):
    path = tmp_path / "scene.txt"
    path.write_text("ground = -3.5 3.5 -3.5 3.5\nground_density = 1.5\n"
                    "boxes = 2\nbox_size = 1.0 1.6 1.2\nposts = 2\n")
    return str(path)


def micro_config(scene_file, **extra):
    values = micro_overrides(**extra)
    values["scene"] = [scene_file]
    return config.load_run_config(None, values)


class TestTrainToy:
    def test_loss_decreases(self, scene_file):
        cfg = micro_config(scene_file, epochs=["3"])
        result = train.train_toy(cfg)
        losses = [h["train_loss"] for h in result.history if "train_loss" in h]
        assert losses[-1] < losses[0]
        assert result.final_iou is not None

    def test_deterministic_at_64_bit(self, scene_file):
        cfg_a = micro_config(scene_file, dtype=["f64"])
        cfg_b = micro_config(scene_file, dtype=["f64"])
        a = train.train_toy(cfg_a)
        b = train.train_toy(cfg_b)
        assert a.log_lines == b.log_lines
        assert a.report == b.report

    def test_zero_epochs_reports_initial_metrics(self, scene_file, tmp_path):
        cfg = micro_config(scene_file, epochs=["0"])
        result = train.train_toy(cfg)
        assert "final.miou" in result.report
        path = tmp_path / "init.ckpt"
        save_checkpoint(path, result.model)
        clone_cfg = micro_config(scene_file, epochs=["0"])
        clone = train.PillarSegNet(train.model_config(clone_cfg), seed=99)
        load_checkpoint(path, clone)
        path2 = tmp_path / "again.ckpt"
        save_checkpoint(path2, clone)
        assert path.read_bytes() == path2.read_bytes()

    def test_divergence_reports_step(self, scene_file, monkeypatch):
        cfg = micro_config(scene_file, epochs=["1"])

        def bad_loss(*args, **kwargs):
            return T.constant(np.nan)

        monkeypatch.setattr(train, "seg_loss", bad_loss)
        with pytest.raises(DivergenceError) as exc:
            train.train_toy(cfg)
        assert exc.value.step == 0

    def test_augmented_training_runs(self, scene_file):
        cfg = micro_config(scene_file, epochs=["1"],
                           augment=["flip_x", "flip_y", "rotate", "scale"])
        result = train.train_toy(cfg)
        assert np.isfinite(result.history[-1]["train_loss"])

    def test_noise_injection_path(self, scene_file):
        cfg = micro_config(scene_file, epochs=["1"], noise_snr=["10"])
        result = train.train_toy(cfg)
        assert np.isfinite(result.history[-1]["train_loss"])

    def test_ma_variant_runs(self, scene_file):
        cfg = micro_config(scene_file, epochs=["1"], use_ma=["true"])
        result = train.train_toy(cfg)
        assert np.isfinite(result.history[-1]["val_miou"])

    def test_default_dtype_restored_after_training(self, scene_file):
        cfg = micro_config(scene_file, epochs=["0"])
        train.train_toy(cfg)
        assert T.default_dtype() == np.float64


class TestEvalSeparation:
    def test_predictions_independent_of_labels(self, scene_file):
        cfg = micro_config(scene_file, epochs=["1"])
        result = train.train_toy(cfg)
        net = result.model
        idx = [cfg.train_frames, cfg.train_frames + 1]
        packs = train.prepare_frames(cfg, idx)
        supervised = cfg.class_map.supervised_indices

        def predict(pack, i):
            pset = train.frame_pset(cfg, pack, i)
            logits = net.forward_pillars(pset, cfg.grid, pack.obs_norm, training=False)
            return net.predict(logits, supervised)

        baseline = [predict(p, i) for p, i in zip(packs, idx)]
        for pack in packs:  # corrupt every label
            pack.label_grid[:] = 2
        tampered = [predict(p, i) for p, i in zip(packs, idx)]
        for a, b in zip(baseline, tampered):
            np.testing.assert_array_equal(a, b)
