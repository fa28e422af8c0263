"""Loss terms for set-based pose regression and their composite combination.

The classification term is a focal loss over per-query scores, the auxiliary
heatmap term is the penalty-reduced pixelwise focal variant, and the matched
regression terms are a visibility-masked L1 and an object-keypoint-similarity
loss. The composite total is

    total = l_c + lambda1 * l_hm + lambda2 * l_reg + lambda3 * l_oks

with every term non-negative and differentiable through the tensor core.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from setpose import tensor as T
from setpose.metrics import NoVisibleKeypoints
from setpose.tensor import Tensor

PROB_EPS = 1e-12  # clamp applied before every logarithm

__all__ = [
    "FocalParams",
    "LossBreakdown",
    "LossWeights",
    "NoVisibleKeypoints",
    "composite_loss",
    "focal_loss_class",
    "gaussian_heatmap_render",
    "heatmap_focal_loss",
    "l1_keypoint_loss",
    "oks_loss",
]


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the composite loss: heatmap, L1 regression, similarity."""

    lambda1: float = 1.0
    lambda2: float = 5.0
    lambda3: float = 2.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class FocalParams:
    """Focusing parameters of the classification focal loss."""

    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term loss values; ``total`` already folds in the lambda weights."""

    l_c: float
    l_hm: float
    l_reg: float
    l_oks: float
    total: float


def focal_loss_class(probs, labels, fp: FocalParams = FocalParams()) -> Tensor:
    """Mean focal loss over per-query probabilities against 0/1 labels.

    p_t is the probability assigned to the true label; the alpha factor is a
    uniform scale on the mean.
    """
    probs = T.as_tensor(probs)
    labels = np.asarray(labels, dtype=np.float64)
    p = T.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    p_t = T.add(T.mul(p, labels), T.mul(T.sub(1.0, p), 1.0 - labels))
    loss = T.mul(T.power(T.sub(1.0, p_t), fp.gamma), T.neg(T.log(p_t)))
    return T.mul(loss.mean(), fp.alpha)


def gaussian_heatmap_render(keypoints, h: int, w: int, sigma: float) -> np.ndarray:
    """Render per-keypoint Gaussian peaks, max-composited across instances.

    ``keypoints`` is [K, 3] for one instance or [N, K, 3] for several; each
    row is (x, y, visible) in the heatmap's own pixel grid. Invisible
    keypoints (flag <= 0) contribute nothing. Returns an [h, w, K] array.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    kps = np.asarray(keypoints, dtype=np.float64)
    if kps.ndim == 2:
        kps = kps[None]
    n, k, _ = kps.shape
    ys, xs = np.mgrid[0:h, 0:w]
    out = np.zeros((h, w, k))
    inv = 1.0 / (2.0 * sigma * sigma)
    for inst in range(n):
        for j in range(k):
            x0, y0, vis = kps[inst, j]
            if vis <= 0:
                continue
            blob = np.exp(-((xs - x0) ** 2 + (ys - y0) ** 2) * inv)
            np.maximum(out[:, :, j], blob, out=out[:, :, j])
    return out


def heatmap_focal_loss(pred, gt, beta_neg: float = 4.0, gamma: float = 2.0) -> Tensor:
    """Penalty-reduced pixelwise focal loss against a rendered heatmap.

    Pixels where the target is exactly 1 are positives; everywhere else the
    penalty is reduced by (1 - gt)^beta_neg. Normalized by the positive count
    (at least 1).
    """
    pred = T.as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    pos_mask = (gt == 1.0).astype(np.float64)
    neg_weight = np.where(gt < 1.0, (1.0 - gt) ** beta_neg, 0.0)
    n_pos = max(float(pos_mask.sum()), 1.0)

    p = T.clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    pos_term = T.mul(T.mul(T.power(T.sub(1.0, p), gamma), T.neg(T.log(p))), pos_mask)
    neg_term = T.mul(T.mul(T.power(p, gamma), T.neg(T.log(T.sub(1.0, p)))), neg_weight)
    return T.add(pos_term, neg_term).sum() / n_pos


def l1_keypoint_loss(pred_kps, gt_kps, vis) -> Tensor:
    """Mean |dx| + |dy| over visible keypoints; zero when none are visible.

    Coordinates are expected in the normalized [0, 1] image frame.
    """
    pred_kps = T.as_tensor(pred_kps)
    gt_kps = np.asarray(gt_kps, dtype=np.float64)
    mask = (np.asarray(vis, dtype=np.float64) > 0).astype(np.float64)
    n_vis = mask.sum()
    if n_vis == 0:
        return T.mul(pred_kps.sum(), 0.0)  # keeps the graph connected, value 0
    per_kp = T.absolute(T.sub(pred_kps, gt_kps)).sum(axis=1)
    return T.mul(per_kp, mask).sum() / float(n_vis)


def oks_loss(pred_kps, gt_kps, vis, area: float, sigmas) -> Tensor:
    """1 - OKS with the smooth exponential pathway kept differentiable.

    Follows the evaluation convention: per-keypoint constant k_i = 2 sigma_i,
    squared distances divided by 2 * area * k_i^2, averaged over visible
    ground-truth keypoints.
    """
    if area <= 0:
        raise ValueError("area must be positive")
    pred_kps = T.as_tensor(pred_kps)
    gt_kps = np.asarray(gt_kps, dtype=np.float64)
    mask = (np.asarray(vis, dtype=np.float64) > 0).astype(np.float64)
    n_vis = mask.sum()
    if n_vis == 0:
        raise NoVisibleKeypoints("oks_loss needs at least one visible keypoint")
    k = 2.0 * np.asarray(sigmas, dtype=np.float64)
    denom = 2.0 * float(area) * k * k  # [K]
    d2 = T.power(T.sub(pred_kps, gt_kps), 2.0).sum(axis=1)
    sim = T.mul(T.exp(T.neg(T.div(d2, denom))), mask).sum() / float(n_vis)
    return T.sub(1.0, sim)


def composite_loss(
    preds,
    pred_heatmaps,
    gts,
    assignment,
    weights: LossWeights,
    fp: FocalParams = FocalParams(),
    *,
    image_size: tuple[int, int],
    sigmas,
    heatmap_sigma: float = 1.0,
) -> tuple[LossBreakdown, Tensor]:
    """Combine all terms for one image given a ground-truth assignment.

    ``preds`` carries graph-attached scores [Q] and keypoints [Q, K, 3] in the
    normalized frame; ``assignment.gt_to_pred`` (from the matcher) decides
    which prediction pays the regression and similarity losses for which
    ground truth. Returns the numeric breakdown plus the total as a graph
    scalar for backpropagation.
    """
    h, w = image_size
    scores = preds.scores
    kps = preds.keypoints
    q_n = scores.shape[0]
    k_n = kps.shape[1]
    pairs = list(enumerate(assignment.gt_to_pred))

    labels = np.zeros(q_n)
    for _, q in pairs:
        labels[q] = 1.0
    l_c = focal_loss_class(scores, labels, fp)

    if pairs:
        reg_terms = []
        oks_terms = []
        for g, q in pairs:
            gt = gts[g]
            gt_xy = gt.keypoints[:, :2]
            vis = gt.keypoints[:, 2]
            pred_xy = kps[q, :, 0:2]
            norm_gt = gt_xy / np.array([w, h], dtype=np.float64)
            reg_terms.append(l1_keypoint_loss(pred_xy, norm_gt, vis))
            pred_px = T.mul(pred_xy, np.array([w, h], dtype=np.float64))
            oks_terms.append(oks_loss(pred_px, gt_xy, vis, gt.area, sigmas))
        l_reg = _mean_terms(reg_terms)
        l_oks = _mean_terms(oks_terms)
    else:
        l_reg = T.mul(kps.sum(), 0.0)
        l_oks = T.mul(kps.sum(), 0.0)

    gh, gw = pred_heatmaps.shape[0], pred_heatmaps.shape[1]
    gt_hm = _render_gt_heatmap(gts, gh, gw, (h, w), k_n, heatmap_sigma)
    l_hm = heatmap_focal_loss(pred_heatmaps, gt_hm)

    total = l_c + weights.lambda1 * l_hm + weights.lambda2 * l_reg + weights.lambda3 * l_oks
    breakdown = LossBreakdown(
        l_c=float(l_c.data),
        l_hm=float(l_hm.data),
        l_reg=float(l_reg.data),
        l_oks=float(l_oks.data),
        total=float(total.data),
    )
    return breakdown, total


def _mean_terms(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc / float(len(terms))


def _render_gt_heatmap(gts, gh: int, gw: int, image_size: tuple[int, int], k_n: int, sigma: float) -> np.ndarray:
    """Rescale ground-truth keypoints to the heatmap grid and splat them.

    Centers are rounded to the nearest grid pixel so each visible keypoint
    produces an exact-1 positive for the penalty-reduced focal loss.
    """
    h, w = image_size
    if not gts:
        return np.zeros((gh, gw, k_n))
    kps = np.stack([g.keypoints for g in gts])  # [N, K, 3]
    grid = kps.copy()
    grid[:, :, 0] = np.round(kps[:, :, 0] * (gw / w))
    grid[:, :, 1] = np.round(kps[:, :, 1] * (gh / h))
    # keypoints that land outside the grid after rescaling contribute nothing
    inside = (
        (grid[:, :, 0] >= 0) & (grid[:, :, 0] <= gw - 1) & (grid[:, :, 1] >= 0) & (grid[:, :, 1] <= gh - 1)
    )
    grid[:, :, 2] = np.where(inside, grid[:, :, 2], 0.0)
    return gaussian_heatmap_render(grid, gh, gw, sigma)
