"""Command-line surface: dataset generation, toy-detector training, attack
runs, evaluation / transfer / JPEG protocols, hyperparameter sweeps, and mask
inspection.

Exit codes: 0 completed, 1 completed but quality gate failed (train), 2 usage
or configuration error, 3 environment / I-O error. Deterministic mode (flag
or CATWISE_DETERMINISTIC=1) pins torch to one thread, forces a single worker,
and zeroes wall-time fields in written artifacts so re-runs are bitwise
reproducible.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .data import DatasetConfig, generate_synthetic_dataset, load_dataset, save_dataset
from .dense import DenseAttackConfig, dca, generate_local_mask, generate_semantic_mask
from .evaluation import (
    build_eval_report,
    jpeg_transfer_eval,
    run_attack_suite,
    transfer_eval,
)
from .results import save_attack_result
from .sparse import SparseAttackConfig, sca
from .targets import CategoryTargetSets, build_target_sets
from .training import TrainConfig, load_checkpoint, save_checkpoint, train_toy_detector

VARIANT_CHOICES = ("sca", "dca-g", "dca-l", "dca-s")


class ConfigurationError(RuntimeError):
    """Bad or missing inputs discovered after argument parsing."""


def _deterministic_mode(args) -> bool:
    return bool(getattr(args, "deterministic", False)) or os.environ.get("CATWISE_DETERMINISTIC") == "1"


def _load_samples(path: str):
    root = Path(path)
    if not (root / "manifest.jsonl").exists():
        raise ConfigurationError(f"no dataset manifest under {root}")
    return load_dataset(root)


def _load_oracle(path: str):
    ckpt = Path(path)
    if not ckpt.exists():
        raise ConfigurationError(f"checkpoint not found: {ckpt}")
    oracle, meta = load_checkpoint(ckpt)
    return oracle, meta


def _write_snapshot(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {"command": command, "version": __version__, "config": resolved}
    (out_dir / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True))


def _merge_config(args, keys: list[str], defaults: dict) -> dict:
    """defaults < config file < explicit command-line flags."""
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        file_cfg = json.loads(path.read_text())
        if "config" in file_cfg and isinstance(file_cfg["config"], dict):
            file_cfg = file_cfg["config"]  # accept a previously written snapshot
        for key in keys:
            if key in file_cfg:
                resolved[key] = file_cfg[key]
    for key in keys:
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            resolved[key] = value
    return resolved


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    defaults = {
        "train_count": 1000,
        "test_count": 200,
        "image_size": 128,
        "min_objects": 1,
        "max_objects": 3,
        "seed": 0,
    }
    cfg = _merge_config(args, list(defaults), defaults)
    for split, count, seed_offset in (
        ("train", cfg["train_count"], 0),
        ("test", cfg["test_count"], 1),
    ):
        ds_config = DatasetConfig(
            count=count,
            image_size=cfg["image_size"],
            min_objects=cfg["min_objects"],
            max_objects=cfg["max_objects"],
            seed=cfg["seed"] + seed_offset,
        )
        samples = generate_synthetic_dataset(ds_config)
        save_dataset(samples, out / split, ds_config)
        print(f"wrote {len(samples)} images to {out / split}")
    _write_snapshot(out, "gen-data", cfg)
    return 0


# ------------------------------------------------------------------- train


def cmd_train(args) -> int:
    defaults = {
        "backbone": "small",
        "epochs": 60,
        "batch_size": 16,
        "lr": 1e-3,
        "seed": 0,
        "map_gate": 0.5,
    }
    cfg = _merge_config(args, list(defaults), defaults)
    deterministic = _deterministic_mode(args)
    train_samples = _load_samples(args.data)
    val_samples = _load_samples(args.val_data) if args.val_data else None
    config = TrainConfig(
        backbone=cfg["backbone"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        seed=cfg["seed"],
        deterministic=deterministic,
        map_gate=cfg["map_gate"],
    )
    oracle, history = train_toy_detector(train_samples, config, val_samples, log_fn=print)
    out = Path(args.out)
    metrics = {k: history[k] for k in ("val_map50", "gate_passed") if k in history}
    save_checkpoint(oracle, out, config, metrics)
    _write_snapshot(out.parent, "train", {**cfg, "deterministic": deterministic})
    log = {"epoch_loss": history["epoch_loss"], **metrics}
    (out.parent / "training_log.json").write_text(json.dumps(log, indent=2, sort_keys=True))
    if "val_map50" in history:
        print(f"held-out mAP@0.5 = {history['val_map50']:.3f} (gate {cfg['map_gate']})")
        if not history["gate_passed"]:
            return 1
    return 0


# ------------------------------------------------------------------ attack


def _child_seeds(root_seed: int, count: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(root_seed).spawn(count)]


def _build_attack_fn(oracle, variant: str, cfg: dict, seeds: list[int]):
    def attack_one(index: int, image: np.ndarray):
        sets = build_target_sets(oracle, image, cfg["t_attack"])
        if variant == "sca":
            sparse_cfg = SparseAttackConfig(
                threshold=cfg["t_attack"],
                max_iter_outer=cfg["max_iter_outer"],
                max_iter_inner=cfg["max_iter_inner"],
                cwdf_max_steps=cfg["cwdf_max_steps"],
                overshoot=cfg["overshoot"],
                deepfool_margin=bool(cfg["deepfool_margin"]),
                seed=seeds[index],
            )
            return sca(oracle, image, sets, sparse_cfg)
        dense_cfg = DenseAttackConfig(
            variant=variant.split("-")[1],
            epsilon=cfg["epsilon"],
            max_iter=cfg["max_iter"],
            threshold=cfg["t_attack"],
            r_star=cfg["r_star"],
            t_s=cfg["t_s"],
        )
        return dca(oracle, image, sets, dense_cfg)

    return attack_one


_POOL_STATE: dict = {}


def _pool_init(checkpoint: str, variant: str, cfg: dict, seeds: list[int], threads: int):
    import torch

    torch.set_num_threads(threads)
    oracle, _ = load_checkpoint(Path(checkpoint))
    _POOL_STATE["fn"] = _build_attack_fn(oracle, variant, cfg, seeds)


def _pool_attack(task):
    index, image = task
    return index, _POOL_STATE["fn"](index, image)


ATTACK_DEFAULTS = {
    "t_attack": 0.1,
    "epsilon": 12.75,
    "max_iter": 30,
    "max_iter_outer": 50,
    "max_iter_inner": 20,
    "cwdf_max_steps": 50,
    "overshoot": 1.02,
    "deepfool_margin": True,
    "r_star": 60,
    "t_s": 0.5,
    "seed": 0,
    "max_images": None,
    "workers": 1,
}


def _run_attack_batch(oracle, samples, variant: str, cfg: dict, checkpoint: str | None = None):
    seeds = _child_seeds(cfg["seed"], len(samples))
    workers = int(cfg.get("workers") or 1)
    if workers > 1 and checkpoint is not None:
        import torch

        threads = max(1, (os.cpu_count() or 1) // workers)
        with ProcessPoolExecutor(
            max_workers=workers,
            initializer=_pool_init,
            initargs=(checkpoint, variant, cfg, seeds, threads),
        ) as pool:
            done = dict(pool.map(_pool_attack, [(i, s.image) for i, s in enumerate(samples)]))
        results_by_index = [done[i] for i in range(len(samples))]

        def attack_fn(index, image):
            return results_by_index[index]

    else:
        attack_fn = _build_attack_fn(oracle, variant, cfg, seeds)
    return run_attack_suite(oracle, samples, attack_fn, method=variant)


def cmd_attack(args) -> int:
    cfg = _merge_config(args, list(ATTACK_DEFAULTS), ATTACK_DEFAULTS)
    deterministic = _deterministic_mode(args)
    if deterministic:
        import torch

        torch.set_num_threads(1)
        cfg["workers"] = 1
    oracle, _meta = _load_oracle(args.checkpoint)
    samples = _load_samples(args.data)
    if cfg["max_images"] is not None:
        samples = samples[: int(cfg["max_images"])]
    out = Path(args.out)
    resolved = {**cfg, "variant": args.variant, "deterministic": deterministic, "checkpoint": str(args.checkpoint)}
    _write_snapshot(out, "attack", resolved)

    results, report = _run_attack_batch(oracle, samples, args.variant, cfg, checkpoint=args.checkpoint)
    images_dir = out / "images"
    for sample, result in zip(samples, results):
        if result is not None:
            save_attack_result(result, images_dir, sample.image_id, deterministic=deterministic)
    report.save(out / "report", deterministic=deterministic)
    print(
        f"{args.variant}: {len(samples)} images, ASR={report.asr:.3f}, "
        f"P_L0={report.p_l0:.4f}, P_L2={report.p_l2:.5f}"
    )
    return 0


# ----------------------------------------------- eval / transfer / jpeg


def _load_run_adversarials(run_dir: Path, samples) -> list[np.ndarray]:
    """Adversarial pixels reconstructed from the exact stored perturbations."""
    adv = []
    for sample in samples:
        pert_path = run_dir / "images" / f"{sample.image_id}_perturbation.npy"
        if pert_path.exists():
            adv.append((sample.image + np.load(pert_path)).astype(np.float32))
        else:
            adv.append(sample.image.copy())
    return adv


def _run_report(run_dir: Path) -> dict:
    path = run_dir / "report" / "summary.json"
    if not path.exists():
        raise ConfigurationError(f"no attack report under {run_dir}")
    return json.loads(path.read_text())


def _samples_in_run(samples, run_dir: Path):
    return [s for s in samples if (run_dir / "images" / f"{s.image_id}_perturbation.npy").exists()]


def cmd_eval(args) -> int:
    oracle, _ = _load_oracle(args.checkpoint)
    samples = _load_samples(args.data)
    run_dir = Path(args.run)
    summary = _run_report(run_dir)
    if args.limit_to_run:
        samples = _samples_in_run(samples, run_dir)
    adv = _load_run_adversarials(run_dir, samples)
    rows = [
        {"image_id": s.image_id, "success": False, "p_l0": 0.0, "p_l2": 0.0, "iterations": 0, "time_s": 0.0, "error": None}
        for s in samples
    ]
    report = build_eval_report(oracle, samples, adv, rows, summary.get("method", "attack"))
    out = Path(args.out)
    report.save(out, deterministic=_deterministic_mode(args))
    print(f"mAP clean {report.map_clean:.3f} -> attacked {report.map_attack:.3f}, ASR {report.asr:.3f}")
    return 0


def cmd_transfer(args) -> int:
    target_oracle, _ = _load_oracle(args.target_checkpoint)
    samples = _load_samples(args.data)
    run_dir = Path(args.run)
    summary = _run_report(run_dir)
    samples = _samples_in_run(samples, run_dir)
    adv = _load_run_adversarials(run_dir, samples)
    report = transfer_eval(
        samples,
        adv,
        target_oracle,
        asr_origin=summary["asr"],
        origin_model=summary["model_id"],
        method=summary.get("method", "attack"),
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    report.save(Path(args.out))
    print(f"ATR {report.atr:.3f} (origin ASR {report.asr_origin:.3f} -> target ASR {report.asr_target:.3f})")
    return 0


def cmd_jpeg(args) -> int:
    target_oracle, _ = _load_oracle(args.target_checkpoint)
    samples = _load_samples(args.data)
    run_dir = Path(args.run)
    summary = _run_report(run_dir)
    samples = _samples_in_run(samples, run_dir)
    adv = _load_run_adversarials(run_dir, samples)
    report = jpeg_transfer_eval(
        samples, adv, quality=args.quality, target_oracle=target_oracle, method=summary.get("method", "attack")
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    report.save(Path(args.out))
    print(f"ASR pre-JPEG {report.asr_pre_jpeg:.3f}, post-JPEG {report.asr_post_jpeg:.3f} (quality {args.quality})")
    return 0


# ------------------------------------------------------------------- sweep

SWEEP_TRENDS = {
    "epsilon": ("asr", "non-decreasing"),
    "t-attack": ("asr", "non-increasing"),
    "r-star": ("p_l0", "non-decreasing"),
}


def _trend_ok(values: list[float], direction: str, slack: float = 1e-9) -> bool:
    pairs = zip(values, values[1:])
    if direction == "non-decreasing":
        return all(b >= a - slack for a, b in pairs)
    return all(b <= a + slack for a, b in pairs)


def cmd_sweep(args) -> int:
    oracle, _ = _load_oracle(args.checkpoint)
    samples = _load_samples(args.data)[: args.max_images]
    values = [float(v) for v in args.values.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    param_key = args.param.replace("-", "_")

    rows = []
    for value in values:
        cfg = dict(ATTACK_DEFAULTS)
        cfg["seed"] = args.seed
        cfg[param_key] = int(value) if param_key == "r_star" else value
        _results, report = _run_attack_batch(oracle, samples, args.variant, cfg)
        rows.append(
            {
                "param": args.param,
                "value": value,
                "asr": report.asr,
                "p_l0": report.p_l0,
                "p_l2": report.p_l2,
                "mean_attack_time_s": report.mean_attack_time_s,
            }
        )
        print(f"{args.param}={value}: ASR={report.asr:.3f} P_L0={report.p_l0:.4f} P_L2={report.p_l2:.5f}")

    with (out / "curve.jsonl").open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    annotations = {}
    if args.param in SWEEP_TRENDS and len(rows) > 1:
        metric, direction = SWEEP_TRENDS[args.param]
        series = [r[metric] for r in rows]
        annotations[f"{metric}_{direction}"] = "pass" if _trend_ok(series, direction) else "warn"
        if args.param == "r-star":
            series2 = [r["p_l2"] for r in rows]
            annotations[f"p_l2_{direction}"] = "pass" if _trend_ok(series2, direction) else "warn"
    (out / "trends.json").write_text(json.dumps(annotations, indent=2, sort_keys=True))

    if len(rows) > 1:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
        for ax, metric in zip(axes, ("asr", "p_l0", "p_l2")):
            ax.plot([r["value"] for r in rows], [r[metric] for r in rows], marker="o")
            ax.set_xlabel(args.param)
            ax.set_ylabel(metric)
            ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(out / "sweep.png", dpi=120)
        plt.close(fig)

    _write_snapshot(
        out,
        "sweep",
        {
            "param": args.param,
            "values": values,
            "variant": args.variant,
            "max_images": args.max_images,
            "seed": args.seed,
        },
    )
    return 0


# ------------------------------------------------------------ inspect-mask


def cmd_inspect_mask(args) -> int:
    from .data import load_image_png, save_image_png

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.targets_jsonl:
        sets = CategoryTargetSets.from_jsonl(Path(args.targets_jsonl), args.t_attack)
        shape = (args.image_size, args.image_size)
        mask = generate_local_mask(sets, shape, args.stride, args.r_star)
        np.save(out / "mask_local.npy", mask.values.astype(np.uint8))
        save_image_png(mask.values * 255.0, out / "mask_local.png")
        print(f"local mask: {int(mask.values.sum())} pixels on")
        return 0
    if not (args.checkpoint and args.image):
        raise ConfigurationError("inspect-mask needs either --targets-jsonl or --checkpoint with --image")
    oracle, _ = _load_oracle(args.checkpoint)
    image = load_image_png(Path(args.image))
    sets = build_target_sets(oracle, image, args.t_attack)
    sets.to_jsonl(out / "targets.jsonl")
    if sets.is_empty():
        print("no target pixels above the attacking threshold")
        return 0
    local = generate_local_mask(sets, image.shape, oracle.output_stride, args.r_star)
    np.save(out / "mask_local.npy", local.values.astype(np.uint8))
    save_image_png(local.values * 255.0, out / "mask_local.png")
    semantic, saliency = generate_semantic_mask(oracle, image, sets, t_s=args.t_s)
    np.save(out / "mask_semantic.npy", semantic.values.astype(np.uint8))
    save_image_png(semantic.values * 255.0, out / "mask_semantic.png")
    for layer, m in zip(saliency.layer_ids, saliency.maps):
        save_image_png(m * 255.0, out / f"saliency_{layer}.png")
    print(
        f"local mask {int(local.values.sum())} px, semantic mask {int(semantic.values.sum())} px, "
        f"{len(saliency.layer_ids)} saliency layers"
    )
    return 0


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="catwise", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--train-count", type=int)
    p.add_argument("--test-count", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--min-objects", type=int)
    p.add_argument("--max-objects", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the toy detector")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--backbone", choices=("small", "wide"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--map-gate", type=float)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="run an attack over a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", required=True, choices=VARIANT_CHOICES)
    p.add_argument("--config")
    p.add_argument("--t-attack", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--max-iter-outer", type=int)
    p.add_argument("--max-iter-inner", type=int)
    p.add_argument("--cwdf-max-steps", type=int)
    p.add_argument("--overshoot", type=float)
    p.add_argument("--deepfool-margin", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--r-star", type=int)
    p.add_argument("--t-s", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-images", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="re-evaluate a finished attack run")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit-to-run", action="store_true", default=True)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transfer", help="evaluate a run's images on another detector")
    p.add_argument("--target-checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("jpeg", help="JPEG round-trip robustness protocol")
    p.add_argument("--target-checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--quality", type=int, default=95)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_jpeg)

    p = sub.add_parser("sweep", help="hyperparameter sensitivity sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--param", required=True, choices=("epsilon", "t-attack", "r-star", "t-s"))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--variant", default="dca-g", choices=VARIANT_CHOICES)
    p.add_argument("--max-images", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inspect-mask", help="export attack masks and saliency overlays")
    p.add_argument("--out", required=True)
    p.add_argument("--targets-jsonl")
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.add_argument("--t-attack", type=float, default=0.1)
    p.add_argument("--r-star", type=int, default=60)
    p.add_argument("--t-s", type=float, default=0.5)
    p.set_defaults(func=cmd_inspect_mask)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
