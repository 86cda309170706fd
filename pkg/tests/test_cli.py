"""Command-line surface: artifact layout, exit codes, determinism of written
artifacts, and the documented subcommand chains."""

from __future__ import annotations

import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from catwise.cli import main
from catwise.data import DatasetConfig, generate_synthetic_dataset, save_dataset


@pytest.fixture(scope="module")
def tiny_data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    cfg = DatasetConfig(count=4, seed=77)
    save_dataset(generate_synthetic_dataset(cfg), root, cfg)
    return root


@pytest.fixture(scope="module")
def attack_run(tmp_path_factory, small_checkpoint_path, tiny_data_dir):
    out = tmp_path_factory.mktemp("run")
    code = main(
        [
            "attack",
            "--checkpoint", str(small_checkpoint_path),
            "--data", str(tiny_data_dir),
            "--out", str(out),
            "--variant", "dca-g",
            "--max-images", "2",
        ]
    )
    assert code == 0
    return out


def _dir_digest(root: Path, exclude: tuple[str, ...] = ()) -> str:
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file() and path.name not in exclude:
            digest.update(path.relative_to(root).as_posix().encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


class TestGenData:
    def test_writes_both_splits_with_manifests(self, tmp_path):
        out = tmp_path / "ds"
        code = main(
            ["gen-data", "--out", str(out), "--train-count", "3", "--test-count", "2", "--seed", "5"]
        )
        assert code == 0
        assert (out / "train" / "manifest.jsonl").exists()
        assert (out / "test" / "manifest.jsonl").exists()
        assert len(list((out / "train" / "images").glob("*.png"))) == 3
        assert json.loads((out / "config.json").read_text())["command"] == "gen-data"

    def test_seed_repeat_identical_manifest(self, tmp_path):
        for sub in ("a", "b"):
            main(["gen-data", "--out", str(tmp_path / sub), "--train-count", "2", "--test-count", "1", "--seed", "9"])
        assert _dir_digest(tmp_path / "a") == _dir_digest(tmp_path / "b")

    def test_zero_object_config(self, tmp_path):
        out = tmp_path / "empty"
        code = main(
            ["gen-data", "--out", str(out), "--train-count", "2", "--test-count", "1",
             "--min-objects", "0", "--max-objects", "0"]
        )
        assert code == 0
        for line in (out / "train" / "manifest.jsonl").read_text().splitlines():
            assert json.loads(line)["annotations"] == []


class TestAttack:
    def test_run_directory_layout(self, attack_run):
        assert (attack_run / "config.json").exists()
        report = json.loads((attack_run / "report" / "summary.json").read_text())
        assert report["method"] == "dca-g"
        pngs = list((attack_run / "images").glob("*_adv.png"))
        perts = list((attack_run / "images").glob("*_perturbation.npy"))
        traces = list((attack_run / "images").glob("*_trace.jsonl"))
        assert len(pngs) == len(perts) == len(traces) == 2
        per_image = (attack_run / "report" / "per_image.jsonl").read_text().splitlines()
        assert len(per_image) == 2

    def test_snapshot_records_resolved_config(self, attack_run):
        snapshot = json.loads((attack_run / "config.json").read_text())
        assert snapshot["command"] == "attack"
        assert snapshot["config"]["variant"] == "dca-g"
        assert snapshot["config"]["epsilon"] == 12.75
        assert snapshot["config"]["max_images"] == 2

    def test_max_images_zero_empty_report(self, tmp_path, small_checkpoint_path, tiny_data_dir):
        out = tmp_path / "empty_run"
        code = main(
            ["attack", "--checkpoint", str(small_checkpoint_path), "--data", str(tiny_data_dir),
             "--out", str(out), "--variant", "dca-g", "--max-images", "0"]
        )
        assert code == 0
        report = json.loads((out / "report" / "summary.json").read_text())
        assert report["asr"] == 0.0
        assert (out / "report" / "per_image.jsonl").read_text() == ""

    def test_unknown_variant_usage_error(self, tmp_path, small_checkpoint_path, tiny_data_dir):
        with pytest.raises(SystemExit) as exc:
            main(["attack", "--checkpoint", str(small_checkpoint_path), "--data", str(tiny_data_dir),
                  "--out", str(tmp_path / "x"), "--variant", "bogus"])
        assert exc.value.code == 2

    def test_missing_checkpoint_config_error(self, tmp_path, tiny_data_dir):
        code = main(
            ["attack", "--checkpoint", str(tmp_path / "nope.pt"), "--data", str(tiny_data_dir),
             "--out", str(tmp_path / "y"), "--variant", "dca-g"]
        )
        assert code == 2

    def test_unwritable_output_io_error(self, small_checkpoint_path, tiny_data_dir):
        code = main(
            ["attack", "--checkpoint", str(small_checkpoint_path), "--data", str(tiny_data_dir),
             "--out", "/dev/null/run", "--variant", "dca-g", "--max-images", "1"]
        )
        assert code == 3

    def test_config_file_precedence(self, tmp_path, small_checkpoint_path, tiny_data_dir):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps({"epsilon": 6.0, "max_images": 1}))
        out = tmp_path / "cfg_run"
        code = main(
            ["attack", "--checkpoint", str(small_checkpoint_path), "--data", str(tiny_data_dir),
             "--out", str(out), "--variant", "dca-g", "--config", str(cfg_file),
             "--epsilon", "9.0"]
        )
        assert code == 0
        resolved = json.loads((out / "config.json").read_text())["config"]
        assert resolved["epsilon"] == 9.0  # flag beats file
        assert resolved["max_images"] == 1  # file beats default


class TestEvalTransferJpeg:
    def test_eval_command(self, tmp_path, attack_run, small_checkpoint_path, tiny_data_dir):
        out = tmp_path / "eval"
        code = main(
            ["eval", "--checkpoint", str(small_checkpoint_path), "--data", str(tiny_data_dir),
             "--run", str(attack_run), "--out", str(out)]
        )
        assert code == 0
        summary = json.loads((out / "summary.json").read_text())
        assert {"map_clean", "map_attack", "asr"} <= set(summary)

    def test_transfer_command(self, tmp_path, attack_run, wide_checkpoint_path, tiny_data_dir):
        out = tmp_path / "transfer.json"
        code = main(
            ["transfer", "--target-checkpoint", str(wide_checkpoint_path), "--data", str(tiny_data_dir),
             "--run", str(attack_run), "--out", str(out)]
        )
        assert code == 0
        report = json.loads(out.read_text())
        assert {"asr_origin", "asr_target", "atr"} <= set(report)

    def test_jpeg_command(self, tmp_path, attack_run, small_checkpoint_path, tiny_data_dir):
        out = tmp_path / "jpeg.json"
        code = main(
            ["jpeg", "--target-checkpoint", str(small_checkpoint_path), "--data", str(tiny_data_dir),
             "--run", str(attack_run), "--quality", "95", "--out", str(out)]
        )
        assert code == 0
        report = json.loads(out.read_text())
        assert report["quality"] == 95
        assert "asr_pre_jpeg" in report and "asr_post_jpeg" in report


class TestSweep:
    def test_single_point_sweep_degenerate(self, tmp_path, small_checkpoint_path, tiny_data_dir):
        out = tmp_path / "sweep1"
        code = main(
            ["sweep", "--checkpoint", str(small_checkpoint_path), "--data", str(tiny_data_dir),
             "--out", str(out), "--param", "epsilon", "--values", "12.75", "--max-images", "1"]
        )
        assert code == 0
        rows = [json.loads(l) for l in (out / "curve.jsonl").read_text().splitlines()]
        assert len(rows) == 1
        assert not (out / "sweep.png").exists()

    def test_two_point_sweep_emits_plot_and_trends(self, tmp_path, small_checkpoint_path, tiny_data_dir):
        out = tmp_path / "sweep2"
        code = main(
            ["sweep", "--checkpoint", str(small_checkpoint_path), "--data", str(tiny_data_dir),
             "--out", str(out), "--param", "r-star", "--values", "3,31",
             "--variant", "dca-l", "--max-images", "2"]
        )
        assert code == 0
        assert (out / "sweep.png").exists()
        trends = json.loads((out / "trends.json").read_text())
        assert set(trends.values()) <= {"pass", "warn"}


class TestInspectMask:
    def test_local_mask_from_targets_fixture(self, tmp_path):
        targets = tmp_path / "targets.jsonl"
        targets.write_text(json.dumps({"category": 0, "row": 5, "col": 5, "score": 0.8}) + "\n")
        out = tmp_path / "masks"
        code = main(
            ["inspect-mask", "--out", str(out), "--targets-jsonl", str(targets),
             "--image-size", "64", "--stride", "4", "--r-star", "3"]
        )
        assert code == 0
        mask = np.load(out / "mask_local.npy")
        expected = np.zeros((64, 64), dtype=np.uint8)
        expected[19:22, 19:22] = 1
        np.testing.assert_array_equal(mask, expected)

    def test_oracle_backed_masks(self, tmp_path, small_checkpoint_path, tiny_data_dir):
        image = next((tiny_data_dir / "images").glob("*.png"))
        out = tmp_path / "orcmask"
        code = main(
            ["inspect-mask", "--out", str(out), "--checkpoint", str(small_checkpoint_path),
             "--image", str(image)]
        )
        assert code == 0
        assert (out / "targets.jsonl").exists()
        if np.load(out / "mask_local.npy").sum() > 0:  # image had targets
            assert (out / "mask_semantic.npy").exists()
            assert (out / "saliency_block1.png").exists()


class TestDeterminism:
    def test_attack_rerun_bitwise_identical(self, tmp_path, small_checkpoint_path, tiny_data_dir):
        digests = []
        for sub in ("r1", "r2"):
            out = tmp_path / sub
            cmd = [
                sys.executable, "-m", "catwise.cli", "attack",
                "--checkpoint", str(small_checkpoint_path), "--data", str(tiny_data_dir),
                "--out", str(out), "--variant", "sca", "--max-images", "2",
                "--seed", "3", "--deterministic",
            ]
            proc = subprocess.run(cmd, capture_output=True, text=True)
            assert proc.returncode == 0, proc.stderr
            digests.append(_dir_digest(out))
        assert digests[0] == digests[1]

    def test_rerun_from_stored_snapshot(self, tmp_path, small_checkpoint_path, tiny_data_dir):
        first = tmp_path / "first"
        cmd = [
            sys.executable, "-m", "catwise.cli", "attack",
            "--checkpoint", str(small_checkpoint_path), "--data", str(tiny_data_dir),
            "--out", str(first), "--variant", "dca-l", "--max-images", "2",
            "--r-star", "15", "--deterministic",
        ]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        second = tmp_path / "second"
        cmd2 = [
            sys.executable, "-m", "catwise.cli", "attack",
            "--checkpoint", str(small_checkpoint_path), "--data", str(tiny_data_dir),
            "--out", str(second), "--variant", "dca-l",
            "--config", str(first / "config.json"), "--deterministic",
        ]
        proc2 = subprocess.run(cmd2, capture_output=True, text=True)
        assert proc2.returncode == 0, proc2.stderr
        assert _dir_digest(first, exclude=("config.json",)) == _dir_digest(second, exclude=("config.json",))

    def test_worker_pool_matches_single_worker(self, tmp_path, small_checkpoint_path, tiny_data_dir):
        outs = []
        for workers, sub in (("1", "w1"), ("2", "w2")):
            out = tmp_path / sub
            code = main(
                ["attack", "--checkpoint", str(small_checkpoint_path), "--data", str(tiny_data_dir),
                 "--out", str(out), "--variant", "dca-g", "--max-images", "3",
                 "--workers", workers, "--seed", "4"]
            )
            assert code == 0
            outs.append(json.loads((out / "report" / "summary.json").read_text()))
        assert outs[0]["asr"] == pytest.approx(outs[1]["asr"], abs=1e-6)
