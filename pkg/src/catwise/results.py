"""Attack output container and its on-disk serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import save_image_png


@dataclass
class AttackResult:
    """Outcome of one attack on one image.

    ``trace`` holds one dict per iteration (keys depend on the attack);
    ``touched`` is the flat-index set of coordinates the attack changed at
    some point (sparse attacks only); ``mask`` is the binary spatial mask a
    masked dense variant used.
    """

    adversarial: np.ndarray
    perturbation: np.ndarray
    success: bool
    iterations: int
    wall_time_s: float
    method: str
    trace: list[dict] = field(default_factory=list)
    notes: dict = field(default_factory=dict)
    mask: np.ndarray | None = None
    touched: set[int] | None = None

    @property
    def p_l0(self) -> float:
        from .evaluation import perturbation_norms

        return perturbation_norms(self.perturbation)[0]

    @property
    def p_l2(self) -> float:
        from .evaluation import perturbation_norms

        return perturbation_norms(self.perturbation)[1]


def save_attack_result(
    result: AttackResult, directory: Path, image_id: str, deterministic: bool = False
) -> None:
    """Write the adversarial PNG, raw perturbation, and trace for one image.

    In deterministic mode wall-time fields are zeroed in the written records
    so repeat runs produce bitwise-identical artifacts.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_image_png(result.adversarial, directory / f"{image_id}_adv.png")
    np.save(directory / f"{image_id}_perturbation.npy", result.perturbation)
    if result.mask is not None:
        np.save(directory / f"{image_id}_mask.npy", result.mask.astype(np.uint8))
    summary = {
        "image_id": image_id,
        "method": result.method,
        "success": bool(result.success),
        "iterations": int(result.iterations),
        "wall_time_s": 0.0 if deterministic else round(result.wall_time_s, 6),
        "notes": result.notes,
    }
    with (directory / f"{image_id}_trace.jsonl").open("w") as fh:
        fh.write(json.dumps(summary, sort_keys=True) + "\n")
        for row in result.trace:
            out = {k: v for k, v in row.items() if not isinstance(v, np.ndarray)}
            if deterministic and "wall_time_s" in out:
                out["wall_time_s"] = 0.0
            fh.write(json.dumps(out, sort_keys=True) + "\n")
