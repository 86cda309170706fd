"""Dense category-wise attack: sign-step perturbations under an L-infinity
budget, optionally restricted to a local square mask around target pixels or
to a semantic mask intersected from per-layer gradient saliency maps.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .evaluation import perturbation_norms
from .oracle import DetectorOracle
from .results import AttackResult
from .targets import CategoryTargetSets, prune_all_sets

VARIANTS = ("g", "l", "s")


@dataclass(frozen=True)
class DenseAttackConfig:
    variant: str = "g"
    epsilon: float = 12.75  # 5% of the max pixel value
    max_iter: int = 30
    threshold: float = 0.1
    r_star: int = 60
    t_s: float = 0.5
    layers: tuple[str, ...] | None = None  # None: the oracle's declared layers
    recompute_masks: bool = False
    record_images: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.r_star < 1:
            raise ValueError("r_star must be >= 1")
        if not 0.0 <= self.t_s <= 1.0:
            raise ValueError("t_s must lie in [0, 1]")


@dataclass(frozen=True)
class AttackMask:
    """Binary image-resolution mask restricting perturbation support."""

    values: np.ndarray  # (H, W) float32 of {0, 1}
    kind: str


@dataclass
class SaliencyMapSet:
    """Per-layer normalized gradient maps and their thresholded masks."""

    layer_ids: list[str]
    maps: list[np.ndarray]  # image-resolution, values in [0, 1]
    masks: list[np.ndarray]  # binary, image resolution
    degenerate_layers: list[str] = field(default_factory=list)


def category_gradient(
    oracle: DetectorOracle, image: np.ndarray, pixels: Sequence, category: int
) -> tuple[np.ndarray, bool]:
    """Cross-entropy gradient for one category's target set, L-inf normalized.

    Returns (gradient, degenerate); a zero gradient is returned unnormalized
    with the degenerate flag set rather than dividing by zero.
    """
    if not pixels:
        raise ValueError("category_gradient requires a non-empty target set")
    coords = [p.coord if hasattr(p, "coord") else tuple(p) for p in pixels]
    grad = oracle.grad_loss_sum(image, category, coords)
    linf = float(np.abs(grad).max())
    if linf == 0.0:
        return np.zeros_like(grad), True
    return grad / linf, False


def global_perturbation(total_gradient: np.ndarray, epsilon: float, max_iter: int) -> np.ndarray:
    """Per-iteration sign step: (epsilon / max_iter) * sign(G)."""
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    return (np.float32(epsilon / max_iter) * np.sign(total_gradient)).astype(np.float32)


def generate_local_mask(
    sets: CategoryTargetSets,
    image_shape: tuple[int, ...],
    output_stride: int,
    r_star: int,
) -> AttackMask:
    """Union of axis-aligned squares of side r_star centered on every target
    pixel's image-space location (heatmap coordinate times the stride).

    Even side lengths extend one extra row/column toward larger indices.
    Squares are clipped at the borders.
    """
    if r_star < 1:
        raise ValueError("r_star must be >= 1")
    h, w = image_shape[0], image_shape[1]
    mask = np.zeros((h, w), dtype=np.float32)
    half_lo = (r_star - 1) // 2
    half_hi = r_star // 2
    for pixels in sets.sets.values():
        for p in pixels:
            row, col = p.coord[0] * output_stride, p.coord[1] * output_stride
            r0, r1 = max(0, row - half_lo), min(h, row + half_hi + 1)
            c0, c1 = max(0, col - half_lo), min(w, col + half_hi + 1)
            mask[r0:r1, c0:c1] = 1.0
    return AttackMask(values=mask, kind="local")


def _bilinear_upsample(arr: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centers (align_corners=False)."""
    in_h, in_w = arr.shape
    out_h, out_w = out_shape
    if (in_h, in_w) == (out_h, out_w):
        return arr.astype(np.float64)
    ys = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.clip(y0 + 1, 0, in_h - 1)
    x1 = np.clip(x0 + 1, 0, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    a = arr[np.ix_(y0, x0)]
    b = arr[np.ix_(y0, x1)]
    c = arr[np.ix_(y1, x0)]
    d = arr[np.ix_(y1, x1)]
    return (
        a * (1 - wy) * (1 - wx)
        + b * (1 - wy) * wx
        + c * wy * (1 - wx)
        + d * wy * wx
    )


def _rank_normalize(plane: np.ndarray) -> np.ndarray:
    """Map values to [0, 1] by tie-averaged rank (distribution-free scaling).

    Equal values share the average of their positional ranks, so large flat
    backgrounds land well below 0.5 and cannot enter a thresholded mask.
    """
    flat = plane.ravel()
    _vals, inverse, counts = np.unique(flat, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    average_rank = (upper - 1 + upper - counts) / 2.0
    scaled = average_rank[inverse] / max(flat.size - 1, 1)
    return scaled.reshape(plane.shape)


def generate_semantic_mask(
    oracle: DetectorOracle,
    image: np.ndarray,
    sets: CategoryTargetSets,
    layers: Sequence[str] | None = None,
    t_s: float = 0.5,
) -> tuple[AttackMask, SaliencyMapSet]:
    """Semantic mask: intersect per-layer gradient saliency maps.

    For each layer, the gradient of the all-category target score sum with
    respect to that layer's activation is collapsed over channels by absolute
    sum, normalized to [0, 1] by tie-averaged rank, bilinearly upsampled to
    image resolution, and thresholded at t_s. The final mask is the
    elementwise product over layers. Rank normalization (rather than raw
    min-max of the heavy-tailed gradient magnitudes) is what keeps the
    over-threshold region object-sized instead of collapsing to the peak
    cell's neighborhood. A constant-gradient layer contributes an all-zero
    map and is flagged as degenerate.
    """
    layer_ids = list(layers) if layers is not None else list(oracle.feature_layers)
    if not layer_ids:
        raise ValueError("at least one feature layer is required")
    pixel_map = sets.as_pixel_map()
    if not pixel_map:
        raise ValueError("at least one non-empty target set is required")
    h, w = image.shape[0], image.shape[1]
    maps: list[np.ndarray] = []
    masks: list[np.ndarray] = []
    degenerate: list[str] = []
    for layer in layer_ids:
        grad = oracle.grad_total_score_wrt_features(image, pixel_map, layer)
        plane = np.abs(grad).sum(axis=0).astype(np.float64)  # collapse channels
        if float(plane.max()) == float(plane.min()):
            normalized = np.zeros((h, w), dtype=np.float64)
            degenerate.append(layer)
        else:
            normalized = _bilinear_upsample(_rank_normalize(plane), (h, w))
        layer_mask = (normalized > t_s).astype(np.float32)
        maps.append(normalized.astype(np.float32))
        masks.append(layer_mask)
    product = masks[0].copy()
    for m in masks[1:]:
        product *= m
    return (
        AttackMask(values=product, kind="semantic"),
        SaliencyMapSet(layer_ids=layer_ids, maps=maps, masks=masks, degenerate_layers=degenerate),
    )


def _resolve_mask(
    oracle: DetectorOracle,
    image: np.ndarray,
    sets: CategoryTargetSets,
    config: DenseAttackConfig,
) -> tuple[AttackMask | None, SaliencyMapSet | None]:
    if config.variant == "g":
        return None, None
    if config.variant == "l":
        return (
            generate_local_mask(sets, image.shape, oracle.output_stride, config.r_star),
            None,
        )
    mask, saliency = generate_semantic_mask(oracle, image, sets, config.layers, config.t_s)
    return mask, saliency


def dca(
    oracle: DetectorOracle,
    image: np.ndarray,
    sets: CategoryTargetSets,
    config: DenseAttackConfig = DenseAttackConfig(),
) -> AttackResult:
    """Dense category-wise attack driver (variants g, l, s).

    Per iteration: accumulate the L-inf-normalized cross-entropy gradient of
    every non-empty category set, take the sign step scaled to epsilon /
    max_iter, apply the variant's mask, clamp to [0, 255], then re-derive all
    sets from their original membership against the clean image. Masks are
    computed once from the initial sets unless recompute_masks is set.
    """
    start = time.perf_counter()
    x_clean = np.array(image, dtype=np.float32, copy=True)
    original = sets.copy()
    working = sets.copy()
    trace: list[dict] = []
    method = f"dca-{config.variant}"

    if working.is_empty():
        return AttackResult(
            adversarial=x_clean.copy(),
            perturbation=np.zeros_like(x_clean),
            success=True,
            iterations=0,
            wall_time_s=time.perf_counter() - start,
            method=method,
            trace=[],
        )

    clean_stack = oracle.infer_heatmaps(x_clean)
    mask, saliency = _resolve_mask(oracle, x_clean, working, config)
    mask_plane = None if mask is None else mask.values[..., None]

    x_cur = x_clean.copy()
    success = False
    iterations = 0
    degenerate_categories = 0
    for p in range(config.max_iter):
        total = np.zeros_like(x_clean)
        for cat in working.nonempty_categories():
            g, degenerate = category_gradient(oracle, x_cur, working.sets[cat], cat)
            if degenerate:
                degenerate_categories += 1
            total += g
        step = global_perturbation(total, config.epsilon, config.max_iter)
        if mask_plane is not None:
            step = step * mask_plane
        x_cur = np.clip(x_cur + step, 0.0, 255.0).astype(np.float32)
        # accumulated float32 steps can overshoot the budget by ~1e-6; project
        # back onto the epsilon ball (moving toward x_clean stays in range)
        x_cur = np.clip(x_cur, x_clean - config.epsilon, x_clean + config.epsilon).astype(np.float32)
        if config.recompute_masks and config.variant != "g":
            mask, saliency = _resolve_mask(oracle, x_cur, working, config)
            mask_plane = mask.values[..., None]
        working = prune_all_sets(oracle, x_clean, x_cur, original, ref_stack=clean_stack)
        iterations += 1
        row = {
            "iteration": p,
            "remaining_pixels": working.total_count(),
            "p_l0": perturbation_norms(x_cur - x_clean)[0],
            "wall_time_s": time.perf_counter() - start,
        }
        if config.record_images:
            row["image"] = x_cur.copy()
        trace.append(row)
        if working.is_empty():
            success = True
            break

    notes: dict = {}
    if degenerate_categories:
        notes["degenerate_category_gradients"] = degenerate_categories
    if saliency is not None and saliency.degenerate_layers:
        notes["degenerate_saliency_layers"] = list(saliency.degenerate_layers)
    return AttackResult(
        adversarial=x_cur,
        perturbation=x_cur - x_clean,
        success=success,
        iterations=iterations,
        wall_time_s=time.perf_counter() - start,
        method=method,
        trace=trace,
        notes=notes,
        mask=None if mask is None else mask.values.copy(),
    )
