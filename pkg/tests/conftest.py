"""Shared fixtures: synthetic datasets, trained detectors (disk-cached), and
the attack suites reused by property and acceptance tests.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pytest

from catwise.data import DatasetConfig, Sample, generate_synthetic_dataset
from catwise.dense import DenseAttackConfig, dca
from catwise.evaluation import run_attack_suite
from catwise.sparse import SparseAttackConfig, sca
from catwise.targets import build_target_sets
from catwise.training import TrainConfig, load_checkpoint, save_checkpoint, train_toy_detector

CACHE_DIR = Path(__file__).parent / "_cache"
RECIPE_VERSION = 2

TRAIN_DATA = DatasetConfig(count=200, seed=11)
VAL_DATA = DatasetConfig(count=60, seed=12)
EVAL_DATA = DatasetConfig(count=100, seed=21)


def _train_config(backbone: str, small_path: Path | None = None) -> TrainConfig:
    if backbone == "small":
        return TrainConfig(backbone="small", epochs=80, seed=0, deterministic=False)
    # the wide variant distills from small so the pair shares representation
    # structure, standing in for the shared pretraining of real backbone pairs
    return TrainConfig(
        backbone="wide",
        epochs=80,
        seed=1,
        deterministic=False,
        distill_from=str(small_path) if small_path else None,
    )


def _cache_key(train_cfg: TrainConfig) -> str:
    cfg = asdict(train_cfg)
    cfg["distill_from"] = bool(cfg["distill_from"])  # path varies, role does not
    blob = json.dumps([RECIPE_VERSION, cfg, asdict(TRAIN_DATA), asdict(VAL_DATA)], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _materialize(backbone: str):
    CACHE_DIR.mkdir(exist_ok=True)
    small_path = None
    if backbone == "wide":
        small_path = _materialize("small")[2]
    cfg = _train_config(backbone, small_path)
    path = CACHE_DIR / f"{backbone}_{_cache_key(cfg)}.pt"
    if path.exists():
        oracle, meta = load_checkpoint(path)
        val_map = meta["metrics"]["val_map50"]
    else:
        train_samples = generate_synthetic_dataset(TRAIN_DATA)
        val_samples = generate_synthetic_dataset(VAL_DATA)
        oracle, history = train_toy_detector(train_samples, cfg, val_samples)
        val_map = history["val_map50"]
        save_checkpoint(oracle, path, cfg, {"val_map50": val_map})
    assert val_map >= cfg.map_gate, f"{backbone} toy detector missed the mAP gate: {val_map:.3f}"
    return oracle, val_map, path


@pytest.fixture(scope="session")
def small_oracle():
    return _materialize("small")[0]


@pytest.fixture(scope="session")
def wide_oracle():
    return _materialize("wide")[0]


@pytest.fixture(scope="session")
def small_oracle_map():
    return _materialize("small")[1]


@pytest.fixture(scope="session")
def wide_oracle_map():
    return _materialize("wide")[1]


@pytest.fixture(scope="session")
def small_checkpoint_path():
    return _materialize("small")[2]


@pytest.fixture(scope="session")
def wide_checkpoint_path():
    return _materialize("wide")[2]


@pytest.fixture(scope="session")
def train_samples() -> list[Sample]:
    return generate_synthetic_dataset(TRAIN_DATA)


@pytest.fixture(scope="session")
def val_samples() -> list[Sample]:
    return generate_synthetic_dataset(VAL_DATA)


@pytest.fixture(scope="session")
def eval_suite() -> list[Sample]:
    return generate_synthetic_dataset(EVAL_DATA)


def attack_fn_for(oracle, variant: str, threshold: float = 0.1, **overrides):
    """Per-image attack closure with seeds split from one root seed."""
    root = np.random.SeedSequence(overrides.pop("seed", 0))
    child_seeds = [int(s.generate_state(1)[0]) for s in root.spawn(4096)]

    def attack_one(index: int, image: np.ndarray):
        sets = build_target_sets(oracle, image, threshold)
        if variant == "sca":
            cfg = SparseAttackConfig(threshold=threshold, seed=child_seeds[index], **overrides)
            return sca(oracle, image, sets, cfg)
        cfg = DenseAttackConfig(variant=variant.split("-")[1], threshold=threshold, **overrides)
        return dca(oracle, image, sets, cfg)

    return attack_one


def run_variant_suite(oracle, samples, variant: str, threshold: float = 0.1, **overrides):
    fn = attack_fn_for(oracle, variant, threshold, **overrides)
    return run_attack_suite(oracle, samples, fn, method=variant)


@pytest.fixture(scope="session")
def suite_small(small_oracle, eval_suite):
    """All four attack variants over the 100-image suite on the small model."""
    return {
        variant: run_variant_suite(small_oracle, eval_suite, variant)
        for variant in ("sca", "dca-g", "dca-l", "dca-s")
    }


@pytest.fixture(scope="session")
def suite_wide(wide_oracle, eval_suite):
    """SCA and DCA-G on the wide model (transfer origin), 60-image subset."""
    subset = eval_suite[:60]
    return {
        variant: run_variant_suite(wide_oracle, subset, variant)
        for variant in ("sca", "dca-g")
    }
