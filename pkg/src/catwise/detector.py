"""Desk-scale CenterNet-style detector and its torch-backed oracle.

Four conv blocks (the feature layers exposed for semantic-mask extraction)
feed three heads: per-category heatmap logits, box size, and sub-cell center
offset. Two backbone widths ("small", "wide") exist so transfer experiments
have a pair of distinct models. Everything runs on CPU at 128x128 input.
"""

from __future__ import annotations

import hashlib
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .oracle import (
    Detection,
    DetectorOracle,
    HeatmapStack,
    InputShapeError,
    Pixel,
    ScoreTerm,
    UnknownLayerError,
    decode_detections,
)

FEATURE_LAYERS = ("block1", "block2", "block3", "block4")
BACKBONE_WIDTHS = {"small": 16, "wide": 32}


def _conv_block(c_in: int, c_out: int, stride: int = 1, dilation: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=dilation, dilation=dilation),
        nn.GroupNorm(4, c_out),
        nn.ReLU(inplace=True),
    )


def _head(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_in, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_in, c_out, 1),
    )


class ToyCenterNet(nn.Module):
    """Minimal center-point detector: stride-4 backbone, three 1x1-topped heads."""

    def __init__(self, category_count: int = 3, width: int = 16, head_bias: float = -2.19):
        super().__init__()
        self.category_count = category_count
        self.width = width
        w = width
        self.block1 = _conv_block(3, w, stride=2)
        self.block2 = _conv_block(w, 2 * w, stride=2)
        self.block3 = _conv_block(2 * w, 2 * w, dilation=2)
        self.block4 = _conv_block(2 * w, 2 * w, dilation=2)
        self.heat_head = _head(2 * w, category_count)
        self.size_head = _head(2 * w, 2)
        self.offset_head = _head(2 * w, 2)
        final_heat = self.heat_head[-1]
        nn.init.normal_(final_heat.weight, std=0.01)
        nn.init.constant_(final_heat.bias, head_bias)
        nn.init.constant_(self.size_head[-1].bias, 6.0)  # prior near typical size/stride

    def forward(self, x: torch.Tensor) -> dict:
        """x is (1, 3, H, W) already scaled to [0, 1]."""
        f1 = self.block1(x)
        f2 = self.block2(f1)
        f3 = self.block3(f2)
        f4 = self.block4(f3)
        return {
            "heat_logits": self.heat_head(f4),
            "size": self.size_head(f4),
            "offset": self.offset_head(f4),
            "features": {"block1": f1, "block2": f2, "block3": f3, "block4": f4},
        }

    def forward_with_feature_offset(
        self, x: torch.Tensor, layer_id: str, flat_index: int, delta: float
    ) -> dict:
        """Forward pass adding ``delta`` to one activation entry of a layer.

        Used by finite-difference checks of feature-space gradients.
        """
        blocks = {"block1": self.block1, "block2": self.block2, "block3": self.block3, "block4": self.block4}
        if layer_id not in blocks:
            raise UnknownLayerError(layer_id)
        feats: dict[str, torch.Tensor] = {}
        out = x
        for name in FEATURE_LAYERS:
            out = blocks[name](out)
            if name == layer_id:
                bumped = out.flatten().clone()
                bumped[flat_index] = bumped[flat_index] + delta
                out = bumped.view(out.shape)
            feats[name] = out
        return {
            "heat_logits": self.heat_head(out),
            "size": self.size_head(out),
            "offset": self.offset_head(out),
            "features": feats,
        }


class TorchDetectorOracle(DetectorOracle):
    """DetectorOracle backed by a ToyCenterNet in eval mode.

    Inference and gradient queries are pure reads: parameters are frozen and
    the module stays in eval mode, so concurrent use from multiple workers is
    safe as long as each worker passes its own images.
    """

    def __init__(
        self,
        model: ToyCenterNet,
        input_size: tuple[int, int] = (128, 128),
        output_stride: int = 4,
        visual_threshold: float = 0.3,
        model_id: str = "toy",
        dtype: torch.dtype = torch.float32,
    ):
        self.model = model.eval()
        self.dtype = dtype
        if dtype is not torch.float32:
            self.model = self.model.to(dtype)
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.category_count = model.category_count
        self.output_stride = output_stride
        self.visual_threshold = visual_threshold
        self.feature_layers = FEATURE_LAYERS
        self.model_id = model_id
        self._input_size = input_size
        self._np_dtype = np.float64 if dtype is torch.float64 else np.float32

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self._input_size[0], self._input_size[1], 3)

    def _check_shape(self, image: np.ndarray) -> None:
        if tuple(image.shape) != self.image_shape:
            raise InputShapeError(f"expected image shape {self.image_shape}, got {tuple(image.shape)}")

    def _leaf(self, image: np.ndarray) -> torch.Tensor:
        self._check_shape(image)
        return torch.from_numpy(np.ascontiguousarray(image, dtype=self._np_dtype))

    @staticmethod
    def _net_input(leaf: torch.Tensor) -> torch.Tensor:
        return leaf.permute(2, 0, 1).unsqueeze(0) / 255.0

    def _forward(self, leaf: torch.Tensor) -> dict:
        return self.model(self._net_input(leaf))

    def infer_heatmaps(self, image: np.ndarray) -> HeatmapStack:
        with torch.no_grad():
            out = self._forward(self._leaf(image))
            scores = torch.sigmoid(out["heat_logits"][0])
        return HeatmapStack(scores=scores.numpy().astype(self._np_dtype), output_stride=self.output_stride)

    def infer_full(self, image: np.ndarray) -> tuple[HeatmapStack, np.ndarray, np.ndarray]:
        """Heatmaps plus the size and offset heads (decode inputs)."""
        with torch.no_grad():
            out = self._forward(self._leaf(image))
            scores = torch.sigmoid(out["heat_logits"][0]).numpy().astype(np.float32)
            size = (out["size"][0] * self.output_stride).numpy().astype(np.float32)
            offset = out["offset"][0].numpy().astype(np.float32)
        return HeatmapStack(scores=scores, output_stride=self.output_stride), size, offset

    def detect(self, image: np.ndarray, threshold: float | None = None, max_detections: int = 100) -> list[Detection]:
        heat, size, offset = self.infer_full(image)
        thr = self.visual_threshold if threshold is None else threshold
        return decode_detections(heat, size, offset, thr, image_size=self._input_size, max_detections=max_detections)

    @staticmethod
    def _gather_terms(heat: torch.Tensor, terms: Sequence[ScoreTerm]) -> torch.Tensor:
        cats = torch.tensor([t[0] for t in terms], dtype=torch.long)
        rows = torch.tensor([t[1] for t in terms], dtype=torch.long)
        cols = torch.tensor([t[2] for t in terms], dtype=torch.long)
        weights = torch.tensor([t[3] for t in terms], dtype=torch.float32)
        return (heat[cats, rows, cols] * weights).sum()

    def grad_weighted_scores(self, image: np.ndarray, terms: Sequence[ScoreTerm]) -> np.ndarray:
        if len(terms) == 0:
            return np.zeros(self.image_shape, dtype=self._np_dtype)
        leaf = self._leaf(image).requires_grad_(True)
        heat = torch.sigmoid(self._forward(leaf)["heat_logits"][0])
        val = self._gather_terms(heat, terms)
        (grad,) = torch.autograd.grad(val, leaf)
        return grad.numpy().astype(self._np_dtype)

    def grad_weighted_scores_multi(
        self, image: np.ndarray, groups: Sequence[Sequence[ScoreTerm]]
    ) -> list[np.ndarray]:
        nonempty = [i for i, g in enumerate(groups) if len(g) > 0]
        grads: list[np.ndarray] = [np.zeros(self.image_shape, dtype=self._np_dtype) for _ in groups]
        if not nonempty:
            return grads
        leaf = self._leaf(image).requires_grad_(True)
        heat = torch.sigmoid(self._forward(leaf)["heat_logits"][0])
        for pos, i in enumerate(nonempty):
            val = self._gather_terms(heat, groups[i])
            (g,) = torch.autograd.grad(val, leaf, retain_graph=pos < len(nonempty) - 1)
            grads[i] = g.numpy().astype(self._np_dtype)
        return grads

    def heatmaps_and_weighted_grads(
        self, image: np.ndarray, groups: Sequence[Sequence[ScoreTerm]]
    ) -> tuple[HeatmapStack, list[np.ndarray]]:
        nonempty = [i for i, g in enumerate(groups) if len(g) > 0]
        grads: list[np.ndarray] = [np.zeros(self.image_shape, dtype=self._np_dtype) for _ in groups]
        leaf = self._leaf(image).requires_grad_(True)
        heat = torch.sigmoid(self._forward(leaf)["heat_logits"][0])
        stack = HeatmapStack(
            scores=heat.detach().numpy().astype(self._np_dtype), output_stride=self.output_stride
        )
        for pos, i in enumerate(nonempty):
            val = self._gather_terms(heat, groups[i])
            (g,) = torch.autograd.grad(val, leaf, retain_graph=pos < len(nonempty) - 1)
            grads[i] = g.numpy().astype(self._np_dtype)
        return stack, grads

    def grad_loss_sum(self, image: np.ndarray, category: int, pixels: Sequence[Pixel]) -> np.ndarray:
        if len(pixels) == 0:
            return np.zeros(self.image_shape, dtype=self._np_dtype)
        leaf = self._leaf(image).requires_grad_(True)
        logits = self._forward(leaf)["heat_logits"][0]
        rows = torch.tensor([p[0] for p in pixels], dtype=torch.long)
        cols = torch.tensor([p[1] for p in pixels], dtype=torch.long)
        # -log sigmoid(z) == softplus(-z), stable for saturated scores
        loss = torch.nn.functional.softplus(-logits[category, rows, cols]).sum()
        (grad,) = torch.autograd.grad(loss, leaf)
        return grad.numpy().astype(self._np_dtype)

    def loss_sum(self, image: np.ndarray, category: int, pixels: Sequence[Pixel]) -> float:
        """Summed cross-entropy value itself (finite-difference test hook)."""
        if len(pixels) == 0:
            return 0.0
        with torch.no_grad():
            logits = self._forward(self._leaf(image))["heat_logits"][0]
            rows = torch.tensor([p[0] for p in pixels], dtype=torch.long)
            cols = torch.tensor([p[1] for p in pixels], dtype=torch.long)
            return float(torch.nn.functional.softplus(-logits[category, rows, cols]).sum())

    def _check_layer(self, layer_id: str) -> None:
        if layer_id not in self.feature_layers:
            raise UnknownLayerError(f"unknown feature layer {layer_id!r}, declared: {self.feature_layers}")

    def grad_wrt_features(
        self, image: np.ndarray, category: int, pixels: Sequence[Pixel], layer_id: str
    ) -> np.ndarray:
        self._check_layer(layer_id)
        out = self._forward(self._leaf(image).requires_grad_(True))
        feat = out["features"][layer_id]
        if len(pixels) == 0:
            return np.zeros(tuple(feat.shape[1:]), dtype=self._np_dtype)
        heat = torch.sigmoid(out["heat_logits"][0])
        val = self._gather_terms(heat, [(category, r, c, 1.0) for r, c in pixels])
        (grad,) = torch.autograd.grad(val, feat)
        return grad[0].numpy().astype(self._np_dtype)

    def grad_total_score_wrt_features(
        self, image: np.ndarray, sets_by_category: Mapping[int, Sequence[Pixel]], layer_id: str
    ) -> np.ndarray:
        self._check_layer(layer_id)
        terms = [
            (cat, r, c, 1.0)
            for cat, pixels in sets_by_category.items()
            for r, c in pixels
        ]
        if not terms:
            raise ValueError("all target sets are empty")
        out = self._forward(self._leaf(image).requires_grad_(True))
        feat = out["features"][layer_id]
        heat = torch.sigmoid(out["heat_logits"][0])
        val = self._gather_terms(heat, terms)
        (grad,) = torch.autograd.grad(val, feat)
        return grad[0].numpy().astype(self._np_dtype)

    def score_sum_with_feature_offset(
        self,
        image: np.ndarray,
        category: int,
        pixels: Sequence[Pixel],
        layer_id: str,
        flat_index: int,
        delta: float,
    ) -> float:
        """Score sum after nudging one activation entry (finite-difference hook)."""
        self._check_layer(layer_id)
        with torch.no_grad():
            out = self.model.forward_with_feature_offset(
                self._net_input(self._leaf(image)), layer_id, flat_index, delta
            )
            heat = torch.sigmoid(out["heat_logits"][0])
            rows = torch.tensor([p[0] for p in pixels], dtype=torch.long)
            cols = torch.tensor([p[1] for p in pixels], dtype=torch.long)
            return float(heat[category, rows, cols].sum())

    def feature_shape(self, image: np.ndarray, layer_id: str) -> tuple[int, ...]:
        self._check_layer(layer_id)
        with torch.no_grad():
            feat = self._forward(self._leaf(image))["features"][layer_id]
        return tuple(feat.shape[1:])

    def with_dtype(self, dtype: torch.dtype) -> "TorchDetectorOracle":
        """Same weights behind a fresh oracle in another precision."""
        clone = ToyCenterNet(self.model.category_count, self.model.width)
        clone.load_state_dict({k: v.to(torch.float32) for k, v in self.model.state_dict().items()})
        return TorchDetectorOracle(
            clone,
            input_size=self._input_size,
            output_stride=self.output_stride,
            visual_threshold=self.visual_threshold,
            model_id=self.model_id,
            dtype=dtype,
        )

    def state_fingerprint(self) -> str:
        """SHA-256 over all parameter bytes; used to detect state mutation."""
        digest = hashlib.sha256()
        for name, tensor in sorted(self.model.state_dict().items()):
            digest.update(name.encode())
            digest.update(tensor.numpy().tobytes())
        return digest.hexdigest()


def build_oracle(
    category_count: int = 3,
    backbone: str = "small",
    head_bias: float = -2.19,
    input_size: tuple[int, int] = (128, 128),
    seed: int | None = None,
    model_id: str | None = None,
) -> TorchDetectorOracle:
    """Fresh (untrained) oracle with the named backbone width."""
    if backbone not in BACKBONE_WIDTHS:
        raise ValueError(f"unknown backbone {backbone!r}, options: {sorted(BACKBONE_WIDTHS)}")
    if seed is not None:
        torch.manual_seed(seed)
    model = ToyCenterNet(category_count, BACKBONE_WIDTHS[backbone], head_bias=head_bias)
    return TorchDetectorOracle(model, input_size=input_size, model_id=model_id or backbone)
