"""Training recipe: target construction, determinism, divergence handling,
checkpoint round trips, and the held-out mAP gate."""

from __future__ import annotations

import numpy as np
import pytest

from catwise.data import Annotation, DatasetConfig, Sample, generate_synthetic_dataset
from catwise.training import (
    TrainConfig,
    TrainingDivergedError,
    build_targets,
    load_checkpoint,
    save_checkpoint,
    train_toy_detector,
    weights_fingerprint,
)


def tiny_dataset(count=12, seed=30):
    return generate_synthetic_dataset(DatasetConfig(count=count, seed=seed))


def tiny_config(**overrides):
    defaults = dict(backbone="small", epochs=2, batch_size=8, seed=0, deterministic=True)
    defaults.update(overrides)
    return TrainConfig(**defaults)


class TestBuildTargets:
    def test_center_cell_and_regression_values(self):
        ann = Annotation(category=1, cx=34.0, cy=50.0, w=20.0, h=20.0)
        sample = Sample(image_id="x", image=np.zeros((128, 128, 3), np.float32), annotations=[ann])
        heat, size, offset, mask = build_targets(sample, TrainConfig())
        row, col = 12, 8  # floor(50/4), floor(34/4)
        assert heat[1, row, col] == pytest.approx(1.0)
        assert heat[0].max() == 0.0 and heat[2].max() == 0.0
        assert mask[row, col] == 1.0 and mask.sum() == 1.0
        assert size[0, row, col] == pytest.approx(20.0 / 4)
        assert size[1, row, col] == pytest.approx(20.0 / 4)
        assert offset[0, row, col] == pytest.approx(34.0 / 4 - col)
        assert offset[1, row, col] == pytest.approx(50.0 / 4 - row)

    def test_gaussian_decays_from_center(self):
        ann = Annotation(category=0, cx=64.0, cy=64.0, w=40.0, h=40.0)
        sample = Sample(image_id="x", image=np.zeros((128, 128, 3), np.float32), annotations=[ann])
        heat, *_ = build_targets(sample, TrainConfig())
        center = heat[0, 16, 16]
        assert center == pytest.approx(1.0)
        assert heat[0, 16, 18] < center
        assert heat[0, 16, 18] > heat[0, 16, 20] > 0.0


class TestTraining:
    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train_toy_detector([], tiny_config())

    def test_divergence_raises_with_diagnostics(self):
        with pytest.raises(TrainingDivergedError):
            train_toy_detector(tiny_dataset(), tiny_config(lr=1e14, epochs=3))

    def test_deterministic_mode_reproduces_weights(self):
        data = tiny_dataset()
        a, _ = train_toy_detector(data, tiny_config())
        b, _ = train_toy_detector(data, tiny_config())
        assert weights_fingerprint(a) == weights_fingerprint(b)

    def test_different_seed_changes_weights(self):
        data = tiny_dataset()
        a, _ = train_toy_detector(data, tiny_config(seed=0))
        b, _ = train_toy_detector(data, tiny_config(seed=1))
        assert weights_fingerprint(a) != weights_fingerprint(b)

    def test_history_carries_validation_map(self):
        data = tiny_dataset()
        _, history = train_toy_detector(data, tiny_config(), val_samples=tiny_dataset(4, seed=31))
        assert "val_map50" in history and "gate_passed" in history
        assert len(history["epoch_loss"]) == 2


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        oracle, _ = train_toy_detector(tiny_dataset(), tiny_config())
        path = tmp_path / "ck.pt"
        save_checkpoint(oracle, path, tiny_config(), {"val_map50": 0.9})
        loaded, meta = load_checkpoint(path)
        assert weights_fingerprint(loaded) == weights_fingerprint(oracle)
        assert meta["metrics"]["val_map50"] == 0.9
        assert meta["format_version"] == 1
        assert meta["seed"] == 0

    def test_version_check(self, tmp_path):
        import torch

        path = tmp_path / "bad.pt"
        torch.save({"format_version": 99}, path)
        with pytest.raises(ValueError):
            load_checkpoint(path)


class TestQualityGates:
    def test_small_detector_clears_map_gate(self, small_oracle_map):
        assert small_oracle_map >= 0.5

    def test_wide_detector_clears_map_gate(self, wide_oracle_map):
        assert wide_oracle_map >= 0.5

    def test_backbones_differ(self, small_oracle, wide_oracle):
        assert small_oracle.model.width != wide_oracle.model.width
