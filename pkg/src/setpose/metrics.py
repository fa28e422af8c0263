"""Object-keypoint-similarity metrics and the keypoint average-precision
evaluator (AP, AP50, AP75, AP_M, AP_L).

The evaluator follows the standard keypoint protocol: per-image greedy
matching at ten similarity thresholds, a global precision-recall curve with a
monotone envelope sampled at 101 recall points, and area-restricted variants
where out-of-range ground truths are ignored rather than removed. Records
with ``iscrowd == 1`` are dropped entirely at load time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from setpose.jsonio import canonical_dumps, read_json


class SchemaError(ValueError):
    """A ground-truth or detection record does not match the expected schema."""


class NoVisibleKeypoints(ValueError):
    """OKS is undefined for a ground truth with no visible keypoints."""


#: Per-keypoint falloff constants of the 17-keypoint person convention.
COCO_SIGMAS = np.array(
    [0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
     0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089]
)

#: Area ranges are half-open [lo, hi) so the medium/large split cannot overlap.
AREA_RANGES = {
    "all": (0.0, float("inf")),
    "medium": (32.0**2, 96.0**2),
    "large": (96.0**2, float("inf")),
}


@dataclass
class GtInstance:
    """One annotated person: keypoints [K, 3] as (x, y, v) with v in {0,1,2}."""

    image_id: int
    keypoints: np.ndarray
    area: float
    iscrowd: int = 0

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)
        if self.area <= 0:
            raise SchemaError(f"area must be positive, got {self.area}")


@dataclass
class DtInstance:
    """One detected person: keypoints [K, 3] as (x, y, keypoint score)."""

    image_id: int
    keypoints: np.ndarray
    score: float

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.score):
            raise SchemaError(f"score must be finite, got {self.score}")


@dataclass(frozen=True)
class EvalParams:
    """Thresholds, area ranges, falloff constants, and the per-image cap."""

    oks_thresholds: tuple = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
    area_ranges: dict = field(default_factory=lambda: dict(AREA_RANGES))
    sigmas: np.ndarray = field(default_factory=lambda: COCO_SIGMAS.copy())
    max_detections: int = 20

    def __post_init__(self):
        t = np.asarray(self.oks_thresholds)
        if not np.all(np.diff(t) > 0):
            raise ValueError("oks_thresholds must be strictly increasing")


@dataclass(frozen=True)
class ApReport:
    """AP columns in [0, 1], or -1 when an area category has no ground truth."""

    ap: float
    ap50: float
    ap75: float
    ap_m: float
    ap_l: float

    def as_dict(self) -> dict:
        return {"ap": self.ap, "ap50": self.ap50, "ap75": self.ap75, "ap_m": self.ap_m, "ap_l": self.ap_l}

    def to_json(self) -> str:
        return canonical_dumps(self.as_dict())

    def table(self) -> str:
        header = "".join(f"{name:>8}" for name in ("AP", "AP50", "AP75", "AP_M", "AP_L"))
        row = "".join(f"{v:8.3f}" for v in (self.ap, self.ap50, self.ap75, self.ap_m, self.ap_l))
        return header + "\n" + row


# -- similarity ----------------------------------------------------------------


def oks_many(dt_xy: np.ndarray, gt: GtInstance, sigmas) -> np.ndarray:
    """OKS of many candidate keypoint sets [N, K, 2] against one ground truth."""
    dt_xy = np.asarray(dt_xy, dtype=np.float64)
    if dt_xy.ndim == 2:
        dt_xy = dt_xy[None]
    vis = gt.keypoints[:, 2] > 0
    if not vis.any():
        raise NoVisibleKeypoints(f"ground truth in image {gt.image_id} has no visible keypoints")
    k = 2.0 * np.asarray(sigmas, dtype=np.float64)
    d2 = ((dt_xy - gt.keypoints[None, :, :2]) ** 2).sum(axis=2)  # [N, K]
    e = d2 / (2.0 * gt.area * k * k)
    return np.exp(-e[:, vis]).mean(axis=1)


def oks(dt: DtInstance, gt: GtInstance, sigmas=None) -> float:
    """Object keypoint similarity between one detection and one ground truth."""
    sigmas = COCO_SIGMAS if sigmas is None else sigmas
    return float(oks_many(dt.keypoints[None, :, :2], gt, sigmas)[0])


# -- matching -------------------------------------------------------------------


def match_image(
    gts: Sequence[GtInstance],
    dts: Sequence[DtInstance],
    threshold: float,
    area_range: tuple[float, float] = AREA_RANGES["all"],
    sigmas=None,
) -> np.ndarray:
    """Greedy per-image matching; returns one flag per input detection.

    Detections are visited in order of descending score (ties keep input
    order) and each takes the unmatched ground truth with the highest
    OKS >= threshold (ties go to the lowest index). Flags: 1 true positive,
    0 false positive, -1 ignored (matched to a ground truth outside the area
    range, which neither counts nor penalizes).
    """
    sigmas = COCO_SIGMAS if sigmas is None else sigmas
    order = np.argsort([-d.score for d in dts], kind="stable")
    ious = _oks_matrix(gts, [dts[i] for i in order], sigmas)
    gt_ignore = np.array([not (area_range[0] <= g.area < area_range[1]) for g in gts], dtype=bool)
    tp, ignored = _greedy_match(ious, gt_ignore, threshold)
    flags = np.zeros(len(dts), dtype=np.int64)
    flags[order] = np.where(ignored, -1, tp.astype(np.int64))
    return flags


def _oks_matrix(gts, dts_sorted, sigmas) -> np.ndarray:
    """[D, G] OKS matrix for already sorted detections."""
    out = np.zeros((len(dts_sorted), len(gts)))
    if not gts or not dts_sorted:
        return out
    dt_xy = np.stack([d.keypoints[:, :2] for d in dts_sorted])
    for j, gt in enumerate(gts):
        out[:, j] = oks_many(dt_xy, gt, sigmas)
    return out


def _greedy_match(ious: np.ndarray, gt_ignore: np.ndarray, threshold: float):
    """Match score-sorted detections; returns (tp, ignored) boolean arrays."""
    d_n, g_n = ious.shape
    gt_used = np.zeros(g_n, dtype=bool)
    tp = np.zeros(d_n, dtype=bool)
    ignored = np.zeros(d_n, dtype=bool)
    for d in range(d_n):
        if g_n == 0:
            break
        vals = np.where(gt_used, -1.0, ious[d])
        j = int(np.argmax(vals))
        if vals[j] >= threshold:
            gt_used[j] = True
            if gt_ignore[j]:
                ignored[d] = True
            else:
                tp[d] = True
    return tp, ignored


# -- precision/recall ---------------------------------------------------------------


def average_precision(tp_flags, scores, gt_count: int) -> float:
    """101-point interpolated AP over the globally score-ranked detections.

    ``tp_flags``/``scores`` describe the non-ignored detections only. Returns
    -1.0 when there is no ground truth to recall.
    """
    if gt_count < 0:
        raise ValueError("gt_count must be non-negative")
    if gt_count == 0:
        return -1.0
    tp_flags = np.asarray(tp_flags, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    if tp_flags.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = tp_flags[order]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    recall = cum_tp / gt_count
    precision = cum_tp / (cum_tp + cum_fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    rec_points = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, rec_points, side="left")
    sampled = np.where(idx < envelope.size, envelope[np.minimum(idx, envelope.size - 1)], 0.0)
    return float(sampled.mean())


# -- evaluation ------------------------------------------------------------------------


def evaluate(gts: Sequence[GtInstance], dts: Sequence[DtInstance], params: EvalParams | None = None) -> ApReport:
    """Full AP report over shared image ids; input order never matters."""
    params = params or EvalParams()
    by_img: dict[int, tuple[list[GtInstance], list[DtInstance]]] = {}
    for g in gts:
        by_img.setdefault(g.image_id, ([], []))[0].append(g)
    for d in dts:
        by_img.setdefault(d.image_id, ([], []))[1].append(d)

    thresholds = list(params.oks_thresholds)
    images = []
    for image_id in sorted(by_img):
        img_gts, img_dts = by_img[image_id]
        order = np.argsort([-d.score for d in img_dts], kind="stable")[: params.max_detections]
        img_dts = [img_dts[i] for i in order]
        ious = _oks_matrix(img_gts, img_dts, params.sigmas)
        scores = np.array([d.score for d in img_dts])
        areas = np.array([g.area for g in img_gts]) if img_gts else np.zeros(0)
        images.append((ious, scores, areas))

    def ap_for(range_name: str, t_index: int) -> float:
        lo, hi = params.area_ranges[range_name]
        all_tp, all_scores = [], []
        gt_total = 0
        for ious, scores, areas in images:
            gt_ignore = ~((areas >= lo) & (areas < hi))
            gt_total += int((~gt_ignore).sum())
            tp, ignored = _greedy_match(ious, gt_ignore, thresholds[t_index])
            keep = ~ignored
            all_tp.append(tp[keep])
            all_scores.append(scores[keep])
        if not all_tp:
            return average_precision(np.zeros(0, dtype=bool), np.zeros(0), gt_total)
        return average_precision(np.concatenate(all_tp), np.concatenate(all_scores), gt_total)

    def mean_ap(range_name: str) -> float:
        vals = [ap_for(range_name, i) for i in range(len(thresholds))]
        if vals[0] < 0:  # no ground truth in this range at any threshold
            return -1.0
        return float(np.mean(vals))

    i50 = int(np.argmin(np.abs(np.array(thresholds) - 0.50)))
    i75 = int(np.argmin(np.abs(np.array(thresholds) - 0.75)))
    return ApReport(
        ap=mean_ap("all"),
        ap50=ap_for("all", i50),
        ap75=ap_for("all", i75),
        ap_m=mean_ap("medium"),
        ap_l=mean_ap("large"),
    )


# -- external schemas ---------------------------------------------------------------------


def load_coco_gt(source) -> list[GtInstance]:
    """Parse a keypoint annotation document; crowd records are dropped."""
    doc = read_json(source) if isinstance(source, str) else source
    if not isinstance(doc, dict) or "annotations" not in doc or "images" not in doc:
        raise SchemaError("ground truth must be an object with 'images' and 'annotations'")
    out: list[GtInstance] = []
    k_count = None
    for ann in doc["annotations"]:
        try:
            image_id = int(ann["image_id"])
            kps = np.asarray(ann["keypoints"], dtype=np.float64)
            area = float(ann["area"])
            iscrowd = int(ann.get("iscrowd", 0))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed annotation: {exc}") from exc
        if kps.size % 3 != 0 or kps.size == 0:
            raise SchemaError(f"keypoints length {kps.size} is not a positive multiple of 3")
        k_count = k_count or kps.size // 3
        if kps.size // 3 != k_count:
            raise SchemaError("inconsistent keypoint counts across annotations")
        if iscrowd == 1:
            continue
        if area <= 0:
            raise SchemaError(f"area must be positive, got {area}")
        out.append(GtInstance(image_id=image_id, keypoints=kps.reshape(-1, 3), area=area, iscrowd=iscrowd))
    return out


def load_coco_dt(source) -> list[DtInstance]:
    """Parse a detection results array."""
    doc = read_json(source) if isinstance(source, str) else source
    if not isinstance(doc, list):
        raise SchemaError("detections must be a JSON array")
    out: list[DtInstance] = []
    k_count = None
    for rec in doc:
        try:
            image_id = int(rec["image_id"])
            kps = np.asarray(rec["keypoints"], dtype=np.float64)
            score = float(rec["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed detection: {exc}") from exc
        if kps.size % 3 != 0 or kps.size == 0:
            raise SchemaError(f"keypoints length {kps.size} is not a positive multiple of 3")
        k_count = k_count or kps.size // 3
        if kps.size // 3 != k_count:
            raise SchemaError("inconsistent keypoint counts across detections")
        if not np.isfinite(score):
            raise SchemaError("detection score must be finite")
        out.append(DtInstance(image_id=image_id, keypoints=kps.reshape(-1, 3), score=score))
    return out
