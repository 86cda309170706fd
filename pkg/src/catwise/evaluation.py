"""Attack-quality metrics and evaluation harnesses.

Covers VOC-style mAP@IoU, the mAP degradation ratio (ASR), the attack
transfer ratio (ATR), perturbation perceptibility norms, and the JPEG
round-trip transfer protocol.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .data import Annotation, Sample
from .oracle import Detection


class UndefinedMetricError(ZeroDivisionError):
    """Metric denominator is zero (clean mAP or origin ASR)."""


def _iou_cxcywh(a: tuple[float, float, float, float], b: tuple[float, float, float, float]) -> float:
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def _average_precision(tp_flags: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from score-ordered true/false-positive flags."""
    if n_gt == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    # precision envelope: max precision at any recall >= r
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_recall = 0.0
    for r, p in zip(recall, precision):
        if r > prev_recall:
            ap += (r - prev_recall) * p
            prev_recall = r
    return float(ap)


def map_score(
    detections_per_image: Sequence[Sequence[Detection]],
    ground_truth_per_image: Sequence[Sequence[Annotation]],
    iou_threshold: float = 0.5,
) -> float:
    """Mean over categories of all-point interpolated AP at one IoU threshold.

    Detections are matched greedily in descending score order; each ground
    truth box matches at most once. Categories with no ground truth anywhere
    are skipped from the mean.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    if len(detections_per_image) != len(ground_truth_per_image):
        raise ValueError("detections and ground truth must cover the same images")

    categories = sorted({a.category for gts in ground_truth_per_image for a in gts})
    aps = []
    for cat in categories:
        records = []  # (score, image index, box)
        n_gt = 0
        for img_idx, (dets, gts) in enumerate(zip(detections_per_image, ground_truth_per_image)):
            n_gt += sum(1 for a in gts if a.category == cat)
            records.extend((d.score, img_idx, d.box) for d in dets if d.category == cat)
        records.sort(key=lambda r: (-r[0], r[1]))
        matched: dict[int, set[int]] = {}
        tp_flags = np.zeros(len(records), dtype=bool)
        for i, (_score, img_idx, box) in enumerate(records):
            gts = [(j, a) for j, a in enumerate(ground_truth_per_image[img_idx]) if a.category == cat]
            used = matched.setdefault(img_idx, set())
            best_iou, best_j = 0.0, -1
            for j, ann in gts:
                if j in used:
                    continue
                iou = _iou_cxcywh(box, (ann.cx, ann.cy, ann.w, ann.h))
                if iou > best_iou:
                    best_iou, best_j = iou, j
            if best_iou >= iou_threshold and best_j >= 0:
                tp_flags[i] = True
                used.add(best_j)
        aps.append(_average_precision(tp_flags, n_gt))
    return float(np.mean(aps)) if aps else 0.0


def asr(map_clean: float, map_attack: float) -> float:
    """mAP degradation ratio 1 - mAP_attack / mAP_clean."""
    if map_clean <= 0.0:
        raise UndefinedMetricError("clean mAP is zero; ASR undefined")
    return 1.0 - map_attack / map_clean


def atr(asr_target: float, asr_origin: float) -> float:
    """Attack transfer ratio ASR_target / ASR_origin."""
    if asr_origin <= 0.0:
        raise UndefinedMetricError("origin ASR is zero; ATR undefined")
    return asr_target / asr_origin


def perturbation_norms(r: np.ndarray) -> tuple[float, float]:
    """(p_l0, p_l2) perceptibility of a perturbation.

    p_l0 is the fraction of spatial pixels with any nonzero channel; p_l2 is
    the Euclidean norm scaled by 255 * sqrt(H*W*C) so a uniform perturbation
    of c has p_l2 = c / 255.
    """
    if r.ndim == 2:
        r = r[..., None]
    spatial_nonzero = np.any(r != 0, axis=-1)
    p_l0 = float(spatial_nonzero.mean())
    p_l2 = float(np.linalg.norm(r.astype(np.float64)) / (255.0 * np.sqrt(r.size)))
    return p_l0, p_l2


@dataclass
class EvalReport:
    """Aggregate attack evaluation over one image suite."""

    model_id: str
    method: str
    map_clean: float
    map_attack: float
    asr: float
    asr_negative: bool
    p_l0: float
    p_l2: float
    mean_attack_time_s: float
    success_rate: float
    per_image: list[dict] = field(default_factory=list)

    # stable field order for serialized per-image records
    PER_IMAGE_FIELDS = ("image_id", "success", "p_l0", "p_l2", "iterations", "time_s", "error")

    def summary_dict(self) -> dict:
        d = asdict(self)
        d.pop("per_image")
        return d

    def save(self, directory: Path, deterministic: bool = False) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        summary = self.summary_dict()
        if deterministic:
            summary["mean_attack_time_s"] = 0.0
        (directory / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        with (directory / "per_image.jsonl").open("w") as fh:
            for row in self.per_image:
                out = {k: row.get(k) for k in self.PER_IMAGE_FIELDS}
                if deterministic:
                    out["time_s"] = 0.0
                fh.write(json.dumps(out) + "\n")


@dataclass
class TransferReport:
    origin_model: str
    target_model: str
    method: str
    map_clean_target: float
    map_attack_target: float
    asr_origin: float
    asr_target: float
    atr: float

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))


def detect_images(oracle, images: Sequence[np.ndarray], threshold: float | None = None) -> list[list[Detection]]:
    return [oracle.detect(img, threshold=threshold) for img in images]


def build_eval_report(
    oracle,
    samples: Sequence[Sample],
    adv_images: Sequence[np.ndarray],
    per_image_rows: Sequence[dict],
    method: str,
    decode_threshold: float | None = None,
) -> EvalReport:
    """Assemble an EvalReport from attack outputs against one oracle."""
    rows = list(per_image_rows)
    if not samples:
        return EvalReport(
            model_id=oracle.model_id,
            method=method,
            map_clean=0.0,
            map_attack=0.0,
            asr=0.0,
            asr_negative=False,
            p_l0=0.0,
            p_l2=0.0,
            mean_attack_time_s=0.0,
            success_rate=0.0,
            per_image=[],
        )
    ground_truth = [s.annotations for s in samples]
    map_clean = map_score(detect_images(oracle, [s.image for s in samples], decode_threshold), ground_truth)
    map_attack = map_score(detect_images(oracle, adv_images, decode_threshold), ground_truth)
    asr_value = asr(map_clean, map_attack)
    return EvalReport(
        model_id=oracle.model_id,
        method=method,
        map_clean=map_clean,
        map_attack=map_attack,
        asr=asr_value,
        asr_negative=asr_value < 0,
        p_l0=float(np.mean([r["p_l0"] for r in rows])) if rows else 0.0,
        p_l2=float(np.mean([r["p_l2"] for r in rows])) if rows else 0.0,
        mean_attack_time_s=float(np.mean([r["time_s"] for r in rows])) if rows else 0.0,
        success_rate=float(np.mean([1.0 if r["success"] else 0.0 for r in rows])) if rows else 0.0,
        per_image=rows,
    )


def run_attack_suite(
    oracle,
    samples: Sequence[Sample],
    attack_fn,
    method: str,
    decode_threshold: float | None = None,
    catch_errors: bool = True,
) -> tuple[list, EvalReport]:
    """Attack every sample and assemble the aggregate report.

    ``attack_fn(index, image) -> AttackResult``. With ``catch_errors`` a
    per-image exception is recorded as a failed attack (the clean image
    stands in for the adversarial one) instead of aborting the suite.
    """
    results = []
    adv_images: list[np.ndarray] = []
    rows: list[dict] = []
    for i, sample in enumerate(samples):
        error = None
        try:
            result = attack_fn(i, sample.image)
        except Exception as exc:  # noqa: BLE001 - harness isolation is the point
            if not catch_errors:
                raise
            result, error = None, f"{type(exc).__name__}: {exc}"
        results.append(result)
        if result is None:
            adv_images.append(sample.image.copy())
            rows.append(
                {
                    "image_id": sample.image_id,
                    "success": False,
                    "p_l0": 0.0,
                    "p_l2": 0.0,
                    "iterations": 0,
                    "time_s": 0.0,
                    "error": error,
                }
            )
            continue
        adv_images.append(result.adversarial)
        p_l0, p_l2 = perturbation_norms(result.perturbation)
        rows.append(
            {
                "image_id": sample.image_id,
                "success": bool(result.success),
                "p_l0": p_l0,
                "p_l2": p_l2,
                "iterations": int(result.iterations),
                "time_s": float(result.wall_time_s),
                "error": None,
            }
        )
    report = build_eval_report(oracle, samples, adv_images, rows, method, decode_threshold)
    return results, report


def transfer_eval(
    samples: Sequence[Sample],
    adv_images: Sequence[np.ndarray],
    target_oracle,
    asr_origin: float,
    origin_model: str,
    method: str,
    decode_threshold: float | None = None,
) -> TransferReport:
    """Evaluate adversarial images generated elsewhere against a target oracle."""
    ground_truth = [s.annotations for s in samples]
    map_clean = map_score(detect_images(target_oracle, [s.image for s in samples], decode_threshold), ground_truth)
    map_attack = map_score(detect_images(target_oracle, adv_images, decode_threshold), ground_truth)
    asr_target = asr(map_clean, map_attack)
    return TransferReport(
        origin_model=origin_model,
        target_model=target_oracle.model_id,
        method=method,
        map_clean_target=map_clean,
        map_attack_target=map_attack,
        asr_origin=asr_origin,
        asr_target=asr_target,
        atr=atr(asr_target, asr_origin),
    )


def jpeg_roundtrip(image: np.ndarray, quality: int) -> np.ndarray:
    """Encode to JPEG at the given quality and decode back to float32 [0, 255]."""
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be in [1, 100], got {quality}")
    buffer = io.BytesIO()
    Image.fromarray(np.clip(np.rint(image), 0, 255).astype(np.uint8)).save(buffer, format="JPEG", quality=quality)
    buffer.seek(0)
    return np.asarray(Image.open(buffer).convert("RGB"), dtype=np.float32)


@dataclass
class JpegTransferReport:
    target_model: str
    method: str
    quality: int
    map_clean: float
    map_pre_jpeg: float
    map_post_jpeg: float
    asr_pre_jpeg: float
    asr_post_jpeg: float
    skipped: list[dict] = field(default_factory=list)

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))


def jpeg_transfer_eval(
    samples: Sequence[Sample],
    adv_images: Sequence[np.ndarray],
    quality: int,
    target_oracle,
    method: str = "attack",
    decode_threshold: float | None = None,
) -> JpegTransferReport:
    """JPEG round-trip protocol: re-encode adversarial images, then evaluate.

    Images whose encode/decode fails are skipped with a record; their
    pre-JPEG pixels are used in the pre metric only.
    """
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be in [1, 100], got {quality}")
    compressed: list[np.ndarray] = []
    kept_idx: list[int] = []
    skipped: list[dict] = []
    for i, adv in enumerate(adv_images):
        try:
            compressed.append(jpeg_roundtrip(adv, quality))
            kept_idx.append(i)
        except OSError as exc:  # codec failure: record and move on
            skipped.append({"image_id": samples[i].image_id, "error": str(exc)})
    ground_truth = [s.annotations for s in samples]
    map_clean = map_score(detect_images(target_oracle, [s.image for s in samples], decode_threshold), ground_truth)
    map_pre = map_score(detect_images(target_oracle, adv_images, decode_threshold), ground_truth)
    kept_gt = [ground_truth[i] for i in kept_idx]
    kept_clean = [samples[i].image for i in kept_idx]
    map_clean_kept = map_score(detect_images(target_oracle, kept_clean, decode_threshold), kept_gt)
    map_post = map_score(detect_images(target_oracle, compressed, decode_threshold), kept_gt)
    return JpegTransferReport(
        target_model=target_oracle.model_id,
        method=method,
        quality=quality,
        map_clean=map_clean,
        map_pre_jpeg=map_pre,
        map_post_jpeg=map_post,
        asr_pre_jpeg=asr(map_clean, map_pre),
        asr_post_jpeg=asr(map_clean_kept, map_post),
        skipped=skipped,
    )
