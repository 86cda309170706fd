"""Detector-oracle contract tests: heatmaps, gradients vs finite differences,
peak decoding vs a brute-force scan, and purity of inference."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from catwise.detector import build_oracle
from catwise.oracle import (
    HeatmapStack,
    InputShapeError,
    UnknownLayerError,
    decode_detections,
)

from bruteforce import central_difference, local_max_scan, suppressed_peaks


@pytest.fixture(scope="module")
def zero_head_oracle():
    oracle = build_oracle(seed=5)
    torch.nn.init.zeros_(oracle.model.heat_head[-1].weight)
    torch.nn.init.zeros_(oracle.model.heat_head[-1].bias)
    return oracle


@pytest.fixture(scope="module")
def random_oracle():
    # untrained but non-degenerate: zero head bias keeps scores near 0.5
    return build_oracle(seed=3, head_bias=0.0)


def random_image(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.0, 255.0, size=(128, 128, 3)).astype(np.float32)


class TestInferHeatmaps:
    def test_zero_image_zero_head_gives_half_everywhere(self, zero_head_oracle):
        image = np.zeros((128, 128, 3), dtype=np.float32)
        stack = zero_head_oracle.infer_heatmaps(image)
        assert stack.scores.shape == (3, 32, 32)
        np.testing.assert_allclose(stack.scores, 0.5, rtol=0, atol=1e-7)

    def test_deterministic_bitwise(self, random_oracle):
        image = random_image(np.random.default_rng(0))
        a = random_oracle.infer_heatmaps(image)
        b = random_oracle.infer_heatmaps(image)
        assert np.array_equal(a.scores, b.scores)

    def test_scores_in_unit_range(self, random_oracle):
        image = random_image(np.random.default_rng(1))
        stack = random_oracle.infer_heatmaps(image)
        assert stack.scores.min() >= 0.0 and stack.scores.max() <= 1.0

    def test_shape_mismatch_rejected(self, random_oracle):
        with pytest.raises(InputShapeError):
            random_oracle.infer_heatmaps(np.zeros((64, 64, 3), dtype=np.float32))

    def test_trained_oracle_peaks_near_object_center(self, small_oracle, eval_suite):
        sample = next(s for s in eval_suite if len(s.annotations) == 1)
        ann = sample.annotations[0]
        stack = small_oracle.infer_heatmaps(sample.image)
        channel = stack.scores[ann.category]
        r, c = np.unravel_index(np.argmax(channel), channel.shape)
        stride = small_oracle.output_stride
        assert abs(r - ann.cy / stride) <= 2 and abs(c - ann.cx / stride) <= 2

    def test_gradient_queries_do_not_mutate_state(self, random_oracle):
        image = random_image(np.random.default_rng(2))
        before = random_oracle.state_fingerprint()
        random_oracle.grad_score_sum(image, 0, [(3, 4), (8, 9)])
        random_oracle.grad_loss_sum(image, 1, [(3, 4)])
        random_oracle.grad_wrt_features(image, 2, [(3, 4)], "block3")
        assert random_oracle.state_fingerprint() == before


class TestScoreGradients:
    def test_empty_pixel_set_gives_zero_gradient(self, random_oracle):
        image = random_image(np.random.default_rng(3))
        grad = random_oracle.grad_score_sum(image, 0, [])
        assert grad.shape == image.shape
        assert np.all(grad == 0)

    def test_matches_central_finite_differences(self, random_oracle):
        oracle = random_oracle.with_dtype(torch.float64)
        rng = np.random.default_rng(4)
        image = random_image(rng).astype(np.float64)
        pixels = [tuple(rng.integers(0, 32, size=2)) for _ in range(3)]
        category = 1
        grad = oracle.grad_score_sum(image, category, pixels)

        def f(x):
            return oracle.infer_heatmaps(x).score_sum(category, pixels)

        coords = _significant_coords(grad, rng, count=20)
        for coord in coords:
            fd = central_difference(f, image, coord, step=0.1)
            assert abs(grad[coord] - fd) <= 1e-2 * max(abs(fd), 1e-12)

    def test_additive_over_disjoint_pixel_sets(self, random_oracle):
        rng = np.random.default_rng(5)
        image = random_image(rng)
        a = [(1, 2), (3, 4)]
        b = [(10, 11), (20, 21), (30, 1)]
        g_union = random_oracle.grad_score_sum(image, 2, a + b)
        g_split = random_oracle.grad_score_sum(image, 2, a) + random_oracle.grad_score_sum(image, 2, b)
        np.testing.assert_allclose(g_union, g_split, atol=1e-6)


def _significant_coords(grad: np.ndarray, rng: np.random.Generator, count: int):
    """Sample coordinates whose analytic gradient is not numerically negligible.

    Coordinates below 1% of the peak magnitude are excluded: there the h^2
    truncation term of the central difference dwarfs the derivative itself.
    """
    magnitude = np.abs(grad)
    floor = 1e-2 * magnitude.max()
    candidates = np.argwhere(magnitude >= floor)
    assert len(candidates) >= count, "gradient support too small for sampling"
    picks = rng.choice(len(candidates), size=count, replace=False)
    return [tuple(candidates[i]) for i in picks]


class TestLossGradients:
    def test_empty_set_zero(self, random_oracle):
        image = random_image(np.random.default_rng(6))
        assert np.all(random_oracle.grad_loss_sum(image, 0, []) == 0)

    def test_matches_finite_differences(self, random_oracle):
        oracle = random_oracle.with_dtype(torch.float64)
        rng = np.random.default_rng(7)
        image = random_image(rng).astype(np.float64)
        pixels = [(5, 5), (17, 23)]
        grad = oracle.grad_loss_sum(image, 0, pixels)

        def f(x):
            return oracle.loss_sum(x, 0, pixels)

        for coord in _significant_coords(grad, rng, count=20):
            fd = central_difference(f, image, coord, step=0.1)
            assert abs(grad[coord] - fd) <= 1e-2 * max(abs(fd), 1e-12)

    def test_gradient_shrinks_as_confidence_saturates(self, small_oracle, eval_suite):
        # a confident detection pixel must carry a smaller loss gradient than
        # a mid-confidence pixel of the same category
        for sample in eval_suite:
            stack = small_oracle.infer_heatmaps(sample.image)
            arg, best = stack.argmax_maps()
            confident = np.argwhere(best > 0.9)
            mid = np.argwhere((best > 0.4) & (best < 0.6))
            pair = None
            for r, c in confident:
                for r2, c2 in mid:
                    if arg[r, c] == arg[r2, c2]:
                        pair = ((int(r), int(c)), (int(r2), int(c2)), int(arg[r, c]))
                        break
                if pair:
                    break
            if pair is None:
                continue
            high, middle, cat = pair
            g_high = np.abs(small_oracle.grad_loss_sum(sample.image, cat, [high])).max()
            g_mid = np.abs(small_oracle.grad_loss_sum(sample.image, cat, [middle])).max()
            assert g_high < g_mid
            return
        pytest.skip("no image offered both a saturated and a mid-confidence pixel")


class TestFeatureGradients:
    def test_empty_set_zero(self, random_oracle):
        image = random_image(np.random.default_rng(8))
        grad = random_oracle.grad_wrt_features(image, 0, [], "block2")
        assert np.all(grad == 0)
        assert grad.shape == random_oracle.feature_shape(image, "block2")

    def test_unknown_layer_rejected(self, random_oracle):
        image = random_image(np.random.default_rng(9))
        with pytest.raises(UnknownLayerError):
            random_oracle.grad_wrt_features(image, 0, [(1, 1)], "block9")

    def test_category_sum_equals_total_gradient(self, random_oracle):
        rng = np.random.default_rng(10)
        image = random_image(rng)
        sets = {0: [(1, 1), (2, 3)], 1: [(8, 8)], 2: [(20, 5), (4, 30)]}
        total = random_oracle.grad_total_score_wrt_features(image, sets, "block3")
        summed = sum(
            random_oracle.grad_wrt_features(image, cat, pixels, "block3")
            for cat, pixels in sets.items()
        )
        np.testing.assert_allclose(total, summed, atol=1e-6)

    def test_matches_activation_nudge_finite_differences(self, random_oracle):
        oracle = random_oracle.with_dtype(torch.float64)
        rng = np.random.default_rng(11)
        image = random_image(rng).astype(np.float64)
        pixels = [(6, 6), (15, 20)]
        layer = "block2"
        grad = oracle.grad_wrt_features(image, 1, pixels, layer)
        flat = grad.ravel()
        floor = 1e-2 * np.abs(flat).max()
        candidates = np.flatnonzero(np.abs(flat) >= floor)
        picks = rng.choice(len(candidates), size=20, replace=False)
        step = 1e-3
        for pick in picks:
            index = int(candidates[pick])
            plus = oracle.score_sum_with_feature_offset(image, 1, pixels, layer, index, +step)
            minus = oracle.score_sum_with_feature_offset(image, 1, pixels, layer, index, -step)
            fd = (plus - minus) / (2 * step)
            assert abs(flat[index] - fd) <= 5e-2 * max(abs(fd), 1e-12)


class TestDecodeDetections:
    def test_all_below_threshold_empty(self):
        heat = HeatmapStack(scores=np.full((2, 16, 16), 0.05, dtype=np.float32), output_stride=4)
        size = np.zeros((2, 16, 16), dtype=np.float32)
        offset = np.zeros((2, 16, 16), dtype=np.float32)
        assert decode_detections(heat, size, offset, threshold=0.3) == []

    def test_single_peak_coordinates(self):
        scores = np.zeros((1, 16, 16), dtype=np.float32)
        scores[0, 8, 8] = 0.9
        heat = HeatmapStack(scores=scores, output_stride=4)
        size = np.zeros((2, 16, 16), dtype=np.float32)
        size[:, 8, 8] = 20.0
        offset = np.zeros((2, 16, 16), dtype=np.float32)
        dets = decode_detections(heat, size, offset, threshold=0.3)
        assert len(dets) == 1
        det = dets[0]
        assert det.category == 0 and det.score == pytest.approx(0.9)
        assert det.box == pytest.approx((32.0, 32.0, 20.0, 20.0))

    def test_threshold_validation(self):
        heat = HeatmapStack(scores=np.zeros((1, 4, 4), dtype=np.float32), output_stride=4)
        with pytest.raises(ValueError):
            decode_detections(heat, np.zeros((2, 4, 4)), np.zeros((2, 4, 4)), threshold=0.0)

    def test_plateau_one_detection_per_suppressed_peak(self):
        scores = np.zeros((1, 16, 16), dtype=np.float32)
        scores[0, 5, 5:9] = 0.8  # 1x4 plateau
        heat = HeatmapStack(scores=scores, output_stride=4)
        dets = decode_detections(heat, np.ones((2, 16, 16)), np.zeros((2, 16, 16)), threshold=0.3)
        expected = suppressed_peaks(scores[0], 0.3)
        assert len(dets) == len(expected) == 2

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_bruteforce_scan_on_random_heatmaps(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.uniform(0.0, 1.0, size=(3, 20, 20)).astype(np.float32)
        heat = HeatmapStack(scores=scores, output_stride=4)
        size = rng.uniform(4, 30, size=(2, 20, 20)).astype(np.float32)
        offset = rng.uniform(0, 1, size=(2, 20, 20)).astype(np.float32)
        dets = decode_detections(heat, size, offset, threshold=0.6, max_detections=10_000)
        got = {(d.category, round(d.score, 6)) for d in dets}
        expected = set()
        for cat in range(3):
            for r, c in suppressed_peaks(scores[cat], 0.6):
                expected.add((cat, round(float(scores[cat, r, c]), 6)))
        assert got == expected

    @pytest.mark.parametrize("seed", range(3))
    def test_candidates_equal_plain_local_max_scan_without_ties(self, seed):
        # continuous random heatmaps have no ties, so greedy suppression is a no-op
        rng = np.random.default_rng(100 + seed)
        channel = rng.uniform(0.0, 1.0, size=(18, 18)).astype(np.float32)
        heat = HeatmapStack(scores=channel[None], output_stride=4)
        dets = decode_detections(
            heat, np.ones((2, 18, 18)), np.zeros((2, 18, 18)), threshold=0.5, max_detections=10_000
        )
        assert len(dets) == len(local_max_scan(channel, 0.5))
