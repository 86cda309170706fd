"""Category-wise target pixel sets: construction, selection, and pruning.

A target pixel is any heatmap location whose argmax-category score exceeds
the attacking threshold T. T sits below the detector's visual threshold so
near-miss pixels (which would pop up as detections once their neighbors are
suppressed) are attacked too. All set operations here are pure functions of
heatmap stacks; oracle-facing wrappers run the two inference passes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .oracle import DetectorOracle, HeatmapStack, Pixel


@dataclass(frozen=True)
class TargetPixel:
    coord: Pixel
    original_category: int
    original_score: float


@dataclass
class CategoryTargetSets:
    """Mapping category -> target pixels; empty mapping means attack complete."""

    sets: dict[int, list[TargetPixel]]
    attacking_threshold: float

    def is_empty(self) -> bool:
        return all(len(pixels) == 0 for pixels in self.sets.values())

    def total_count(self) -> int:
        return sum(len(pixels) for pixels in self.sets.values())

    def nonempty_categories(self) -> list[int]:
        return sorted(cat for cat, pixels in self.sets.items() if pixels)

    def coords(self, category: int) -> list[Pixel]:
        return [p.coord for p in self.sets.get(category, [])]

    def copy(self) -> "CategoryTargetSets":
        return CategoryTargetSets(
            sets={cat: list(pixels) for cat, pixels in self.sets.items()},
            attacking_threshold=self.attacking_threshold,
        )

    def as_pixel_map(self) -> dict[int, list[Pixel]]:
        return {cat: [p.coord for p in pixels] for cat, pixels in self.sets.items() if pixels}

    def to_jsonl(self, path: Path) -> None:
        """One line per target pixel: category, row, col, score."""
        with Path(path).open("w") as fh:
            for cat in sorted(self.sets):
                for p in self.sets[cat]:
                    fh.write(
                        json.dumps(
                            {
                                "category": cat,
                                "row": p.coord[0],
                                "col": p.coord[1],
                                "score": round(float(p.original_score), 6),
                            }
                        )
                        + "\n"
                    )

    @classmethod
    def from_jsonl(cls, path: Path, attacking_threshold: float) -> "CategoryTargetSets":
        sets: dict[int, list[TargetPixel]] = {}
        with Path(path).open() as fh:
            for line in fh:
                rec = json.loads(line)
                sets.setdefault(rec["category"], []).append(
                    TargetPixel((rec["row"], rec["col"]), rec["category"], rec["score"])
                )
        return cls(sets=sets, attacking_threshold=attacking_threshold)


def build_target_sets_from_stack(heatmaps: HeatmapStack, threshold: float) -> CategoryTargetSets:
    """Select every pixel whose argmax-category score is above the threshold.

    Each pixel lands only in its argmax category's set, so the sets partition
    the selected pixels.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"attacking threshold must be in (0, 1), got {threshold}")
    arg, best = heatmaps.argmax_maps()
    sets: dict[int, list[TargetPixel]] = {}
    rows, cols = np.nonzero(best > threshold)
    for r, c in zip(rows.tolist(), cols.tolist()):
        cat = int(arg[r, c])
        sets.setdefault(cat, []).append(TargetPixel((r, c), cat, float(best[r, c])))
    return CategoryTargetSets(sets=sets, attacking_threshold=threshold)


def build_target_sets(oracle: DetectorOracle, image: np.ndarray, threshold: float) -> CategoryTargetSets:
    return build_target_sets_from_stack(oracle.infer_heatmaps(image), threshold)


def select_highest_set(
    sets: CategoryTargetSets, heatmaps: HeatmapStack
) -> tuple[int, list[TargetPixel]] | None:
    """Category whose set has the highest summed current score; None when all empty.

    Ties break toward the lowest category index.
    """
    best_cat, best_sum = None, -np.inf
    for cat in sorted(sets.sets):
        pixels = sets.sets[cat]
        if not pixels:
            continue
        total = heatmaps.score_sum(cat, [p.coord for p in pixels])
        if total > best_sum:
            best_cat, best_sum = cat, total
    if best_cat is None:
        return None
    return best_cat, list(sets.sets[best_cat])


def surviving_pixels(
    ref_stack: HeatmapStack,
    adv_stack: HeatmapStack,
    pixels: Sequence[TargetPixel],
    threshold: float,
) -> list[TargetPixel]:
    """Pixels still detected as their reference category above the threshold.

    A pixel survives iff its argmax category on the adversarial stack equals
    its argmax category on the reference stack AND that adversarial score is
    above the threshold. Never adds pixels.
    """
    ref_arg, _ = ref_stack.argmax_maps()
    adv_arg, adv_best = adv_stack.argmax_maps()
    kept = []
    for p in pixels:
        r, c = p.coord
        if adv_arg[r, c] == ref_arg[r, c] and adv_best[r, c] > threshold:
            kept.append(p)
    return kept


def remove_pixels(
    oracle: DetectorOracle,
    x_ref: np.ndarray,
    x_adv: np.ndarray,
    pixels: Sequence[TargetPixel],
    threshold: float,
    ref_stack: HeatmapStack | None = None,
    adv_stack: HeatmapStack | None = None,
) -> list[TargetPixel]:
    """Prune pixels no longer detected as their reference-image category.

    Precomputed stacks may be passed to avoid repeated inference; they must
    correspond to ``x_ref`` / ``x_adv``.
    """
    if not pixels:
        return []
    if ref_stack is None:
        ref_stack = oracle.infer_heatmaps(x_ref)
    if adv_stack is None:
        adv_stack = oracle.infer_heatmaps(x_adv)
    return surviving_pixels(ref_stack, adv_stack, pixels, threshold)


def prune_all_sets(
    oracle: DetectorOracle,
    x_ref: np.ndarray,
    x_adv: np.ndarray,
    original: CategoryTargetSets,
    ref_stack: HeatmapStack | None = None,
) -> CategoryTargetSets:
    """Re-derive every set's membership from the original sets against x_adv.

    The reference image fixes each pixel's "correct" category; pixels whose
    category flipped back revive here, which is what keeps the final success
    flag equivalent to a full clean-reference heatmap re-scan.
    """
    if ref_stack is None:
        ref_stack = oracle.infer_heatmaps(x_ref)
    adv_stack = oracle.infer_heatmaps(x_adv)
    pruned = {
        cat: surviving_pixels(ref_stack, adv_stack, pixels, original.attacking_threshold)
        for cat, pixels in original.sets.items()
    }
    return CategoryTargetSets(sets=pruned, attacking_threshold=original.attacking_threshold)
