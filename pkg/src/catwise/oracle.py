"""Detector-facing abstractions: heatmap stacks, detections, gradient queries.

Attack code never touches a neural network directly. Everything it needs sits
behind the :class:`DetectorOracle` interface: per-category post-activation
score maps, gradients of weighted score sums with respect to the input image,
and gradients with respect to intermediate feature activations. The bundled
torch-backed implementation lives in ``catwise.detector``; tests add analytic
doubles that satisfy the same contract.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

# (row, col) in heatmap coordinates
Pixel = tuple[int, int]

# (category, row, col, weight) term of a weighted score sum
ScoreTerm = tuple[int, int, int, float]


class InputShapeError(ValueError):
    """Image does not match the oracle's expected resolution."""


class UnknownLayerError(KeyError):
    """Feature-gradient query named a layer the oracle does not declare."""


@dataclass(frozen=True)
class HeatmapStack:
    """Per-category post-activation score maps at detector output resolution.

    ``scores`` has shape (k, H_out, W_out) with values in [0, 1] for any real
    detector. ``output_stride`` maps heatmap coordinates to image coordinates.
    """

    scores: np.ndarray
    output_stride: int

    @property
    def category_count(self) -> int:
        return int(self.scores.shape[0])

    @property
    def height(self) -> int:
        return int(self.scores.shape[1])

    @property
    def width(self) -> int:
        return int(self.scores.shape[2])

    def argmax_maps(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel (argmax category, max score) over categories."""
        arg = np.argmax(self.scores, axis=0)
        best = np.take_along_axis(self.scores, arg[None], axis=0)[0]
        return arg, best

    def score_sum(self, category: int, pixels: Sequence[Pixel]) -> float:
        """Sum of this category's scores over the given heatmap pixels."""
        if len(pixels) == 0:
            return 0.0
        rows = np.fromiter((p[0] for p in pixels), dtype=np.int64)
        cols = np.fromiter((p[1] for p in pixels), dtype=np.int64)
        return float(self.scores[category, rows, cols].sum())


@dataclass(frozen=True)
class FeatureActivation:
    """One declared feature layer's activation, shape (channels, h, w)."""

    layer_id: str
    activation: np.ndarray


@dataclass(frozen=True)
class Detection:
    """Decoded detection in image coordinates, box as (cx, cy, w, h)."""

    category: int
    box: tuple[float, float, float, float]
    score: float


class DetectorOracle(ABC):
    """Differentiable-detector contract consumed by all attacks.

    Implementations must be deterministic in inference (identical input gives
    bitwise-identical heatmaps) and gradient queries must not mutate state.
    """

    category_count: int
    output_stride: int
    visual_threshold: float
    feature_layers: tuple[str, ...]
    model_id: str

    @property
    @abstractmethod
    def image_shape(self) -> tuple[int, int, int]:
        """Expected (height, width, channels) of input images."""

    @abstractmethod
    def infer_heatmaps(self, image: np.ndarray) -> HeatmapStack:
        """Post-activation per-category score maps for one image."""

    @abstractmethod
    def grad_weighted_scores(self, image: np.ndarray, terms: Sequence[ScoreTerm]) -> np.ndarray:
        """Gradient of sum_i weight_i * f_{cat_i}(x, pixel_i) w.r.t. the image.

        An empty term list yields an all-zero gradient. The returned array has
        the image's shape and is on the image's [0, 255] scale.
        """

    @abstractmethod
    def grad_loss_sum(self, image: np.ndarray, category: int, pixels: Sequence[Pixel]) -> np.ndarray:
        """Gradient of the summed per-pixel cross-entropy against this category.

        Each pixel contributes binary cross-entropy of its post-sigmoid score
        for ``category`` against target 1, i.e. -log f_category(x, s).
        """

    @abstractmethod
    def grad_wrt_features(
        self, image: np.ndarray, category: int, pixels: Sequence[Pixel], layer_id: str
    ) -> np.ndarray:
        """Gradient of the category's score sum w.r.t. one feature activation.

        Returns an array shaped like the layer's activation (channels, h, w).
        Raises UnknownLayerError for undeclared layers.
        """

    def grad_score_sum(self, image: np.ndarray, category: int, pixels: Sequence[Pixel]) -> np.ndarray:
        """Gradient of sum_{s in pixels} f_category(x, s) w.r.t. the image."""
        terms = [(category, r, c, 1.0) for r, c in pixels]
        return self.grad_weighted_scores(image, terms)

    def grad_weighted_scores_multi(
        self, image: np.ndarray, groups: Sequence[Sequence[ScoreTerm]]
    ) -> list[np.ndarray]:
        """Gradients for several weighted score sums on the same image.

        Default implementation loops; torch backends override this with a
        single shared forward pass.
        """
        return [self.grad_weighted_scores(image, terms) for terms in groups]

    def heatmaps_and_weighted_grads(
        self, image: np.ndarray, groups: Sequence[Sequence[ScoreTerm]]
    ) -> tuple[HeatmapStack, list[np.ndarray]]:
        """Heatmaps plus several weighted-score gradients for one image.

        Default composes the two queries; torch backends override to share
        one forward pass between scoring and differentiation.
        """
        return self.infer_heatmaps(image), self.grad_weighted_scores_multi(image, groups)

    def grad_total_score_wrt_features(
        self, image: np.ndarray, sets_by_category: Mapping[int, Sequence[Pixel]], layer_id: str
    ) -> np.ndarray:
        """Gradient of sum_j sum_{s in S_j} f_j(x, s) w.r.t. one feature layer.

        Equals the sum of per-category feature gradients by linearity; the
        default implementation computes it that way.
        """
        total: np.ndarray | None = None
        for category, pixels in sets_by_category.items():
            if len(pixels) == 0:
                continue
            g = self.grad_wrt_features(image, category, pixels, layer_id)
            total = g if total is None else total + g
        if total is None:
            raise ValueError("all target sets are empty")
        return total


def _local_peak_candidates(channel: np.ndarray, threshold: float) -> np.ndarray:
    """Boolean map of pixels above threshold that equal their 3x3 neighborhood max."""
    padded = np.pad(channel, 1, mode="constant", constant_values=-np.inf)
    neighborhood_max = np.full_like(channel, -np.inf)
    for dr in (0, 1, 2):
        for dc in (0, 1, 2):
            shifted = padded[dr : dr + channel.shape[0], dc : dc + channel.shape[1]]
            neighborhood_max = np.maximum(neighborhood_max, shifted)
    return (channel > threshold) & (channel >= neighborhood_max)


def decode_detections(
    heatmaps: HeatmapStack,
    size_map: np.ndarray,
    offset_map: np.ndarray,
    threshold: float,
    image_size: tuple[int, int] | None = None,
    max_detections: int = 100,
) -> list[Detection]:
    """CenterNet-style peak decode of a heatmap stack into detections.

    A pixel is a peak when its score exceeds ``threshold`` and equals the max
    of its 3x3 neighborhood; ties on a plateau are greedily suppressed in
    descending-score, then row-major order, so each 3x3-suppressed peak yields
    exactly one detection. ``size_map`` is (2, H_out, W_out) as (w, h) in image
    units; ``offset_map`` is (2, H_out, W_out) as (dx, dy) in heatmap cells.

    Pure function of its inputs; an empty list is a valid result.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"decode threshold must be in (0, 1), got {threshold}")
    stride = heatmaps.output_stride
    if image_size is None:
        image_size = (heatmaps.height * stride, heatmaps.width * stride)
    img_h, img_w = image_size

    detections: list[Detection] = []
    for cat in range(heatmaps.category_count):
        channel = heatmaps.scores[cat]
        cand = np.argwhere(_local_peak_candidates(channel, threshold))
        if cand.size == 0:
            continue
        scores = channel[cand[:, 0], cand[:, 1]]
        order = np.lexsort((cand[:, 1], cand[:, 0], -scores))
        kept: list[tuple[int, int]] = []
        for idx in order:
            r, c = int(cand[idx, 0]), int(cand[idx, 1])
            if any(abs(r - kr) <= 1 and abs(c - kc) <= 1 for kr, kc in kept):
                continue
            kept.append((r, c))
            cx = (c + float(offset_map[0, r, c])) * stride
            cy = (r + float(offset_map[1, r, c])) * stride
            w = float(size_map[0, r, c])
            h = float(size_map[1, r, c])
            # clip the box to image bounds, then back to center form
            x1 = np.clip(cx - w / 2.0, 0.0, img_w)
            x2 = np.clip(cx + w / 2.0, 0.0, img_w)
            y1 = np.clip(cy - h / 2.0, 0.0, img_h)
            y2 = np.clip(cy + h / 2.0, 0.0, img_h)
            detections.append(
                Detection(
                    category=cat,
                    box=((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1),
                    score=float(channel[r, c]),
                )
            )
    detections.sort(key=lambda d: (-d.score, d.category, d.box))
    return detections[:max_detections]
