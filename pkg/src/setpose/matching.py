"""Set-based assignment between predictions and ground-truth poses.

``hungarian`` solves the rectangular min-cost assignment (G ground truths into
Q >= G predictions) by shortest augmenting paths with potentials, then
canonicalizes ties so the lexicographically smallest optimal assignment wins
(lowest prediction index per ground truth, in ground-truth order).
``brute_force_assignment`` enumerates every injection and is the test oracle.
The matching cost mirrors the composite loss terms minus the unmatched
heatmap auxiliary: a focal-style classification cost plus weighted L1 and
(1 - OKS) terms.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations
from typing import Sequence

import numpy as np

from setpose.losses import PROB_EPS, FocalParams, LossWeights
from setpose.metrics import GtInstance, oks_many
from setpose.tensor import Tensor

BRUTE_FORCE_LIMIT = 8
_TIE_TOL = 1e-9


class RectangularInfeasible(ValueError):
    """More ground truths than predictions; no injective assignment exists."""


class NonFiniteEntry(ValueError):
    """Cost matrices must be finite everywhere."""


class TooLarge(ValueError):
    """Brute-force enumeration is capped at BRUTE_FORCE_LIMIT ground truths."""


@dataclass(frozen=True)
class Assignment:
    """Injective map from ground-truth index to prediction index."""

    gt_to_pred: tuple[int, ...]
    total_cost: float

    def __post_init__(self):
        if len(set(self.gt_to_pred)) != len(self.gt_to_pred):
            raise ValueError("assignment must be injective")


def _validate(cost) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-d, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise NonFiniteEntry("cost matrix contains non-finite entries")
    g, q = cost.shape
    if g > q:
        raise RectangularInfeasible(f"{g} ground truths cannot inject into {q} predictions")
    return cost


def _solve_min_cost(cost: np.ndarray) -> float:
    """Optimal assignment cost by shortest augmenting paths (1-based arrays)."""
    g_n, q_n = cost.shape
    if g_n == 0:
        return 0.0
    u = np.zeros(g_n + 1)
    v = np.zeros(q_n + 1)
    owner = np.zeros(q_n + 1, dtype=np.intp)  # row matched to column j; 0 = free
    way = np.zeros(q_n + 1, dtype=np.intp)
    for i in range(1, g_n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(q_n + 1, np.inf)
        used = np.zeros(q_n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    total = 0.0
    for j in range(1, q_n + 1):
        if owner[j] != 0:
            total += cost[owner[j] - 1, j - 1]
    return float(total)


def hungarian(cost) -> Assignment:
    """Minimum-cost assignment with the lowest-prediction-index tie-break.

    Among equal-cost optima (within 1e-9) the assignment chosen is the
    lexicographically smallest sequence of prediction indices in ground-truth
    order, which keeps results identical across platforms.
    """
    cost = _validate(cost)
    g_n, q_n = cost.shape
    if g_n == 0:
        return Assignment((), 0.0)
    best = _solve_min_cost(cost)
    chosen: list[int] = []
    used = np.zeros(q_n, dtype=bool)
    prefix = 0.0
    for g in range(g_n):
        rows_left = g_n - g - 1
        for q in range(q_n):
            if used[q]:
                continue
            if rows_left:
                cols = ~used
                cols[q] = False
                rest = _solve_min_cost(cost[g + 1 :, cols])
            else:
                rest = 0.0
            if prefix + cost[g, q] + rest <= best + _TIE_TOL:
                chosen.append(q)
                used[q] = True
                prefix += cost[g, q]
                break
        else:  # the optimal completion always admits some q; guard regardless
            raise AssertionError("no extension within tie tolerance; cost matrix ill-conditioned")
    total = float(cost[np.arange(g_n), chosen].sum())
    return Assignment(tuple(chosen), total)


def brute_force_assignment(cost) -> Assignment:
    """Exhaustive minimum over all injections; the oracle for ``hungarian``.

    Permutations are generated in lexicographic order and strict improvement
    is required to replace the incumbent, so ties resolve to the same
    lowest-prediction-index choice.
    """
    cost = _validate(cost)
    g_n, q_n = cost.shape
    if g_n > BRUTE_FORCE_LIMIT:
        raise TooLarge(f"brute force capped at {BRUTE_FORCE_LIMIT} ground truths, got {g_n}")
    if g_n == 0:
        return Assignment((), 0.0)
    perms = np.array(list(permutations(range(q_n), g_n)), dtype=np.intp)
    totals = cost[np.arange(g_n), perms].sum(axis=1)
    best = int(np.argmin(totals))  # first minimum = lexicographically smallest
    return Assignment(tuple(int(q) for q in perms[best]), float(totals[best]))


def classification_cost(scores: np.ndarray, fp: FocalParams = FocalParams()) -> np.ndarray:
    """Focal-style positive-minus-negative matching cost per prediction."""
    p = np.clip(np.asarray(scores, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    pos = fp.alpha * (1.0 - p) ** fp.gamma * (-np.log(p))
    neg = (1.0 - fp.alpha) * p**fp.gamma * (-np.log(1.0 - p))
    return pos - neg


def build_cost_matrix(
    preds,
    gts: Sequence[GtInstance],
    weights: LossWeights,
    *,
    sigmas,
    image_size: tuple[int, int],
    fp: FocalParams = FocalParams(),
) -> np.ndarray:
    """[G, Q] matching cost: class cost + lambda2 * L1 + lambda3 * (1 - OKS).

    ``preds`` holds normalized coordinates (a model PoseOutput); ``image_size``
    puts predictions and ground truths into one frame: the L1 term is averaged
    over visible keypoints in the normalized frame, the OKS term uses pixel
    coordinates and the ground-truth area. Matching is a discrete decision, so
    everything here is plain numpy, outside any differentiation graph.
    """
    h, w = image_size
    scores = preds.scores.data if isinstance(preds.scores, Tensor) else np.asarray(preds.scores)
    kps = preds.keypoints.data if isinstance(preds.keypoints, Tensor) else np.asarray(preds.keypoints)
    q_n = scores.shape[0]
    if len(gts) == 0:
        return np.zeros((0, q_n))
    cls = classification_cost(scores, fp)  # [Q]
    pred_xy = kps[:, :, :2]
    pred_px = pred_xy * np.array([w, h], dtype=np.float64)
    rows = []
    for gt in gts:
        vis = gt.keypoints[:, 2] > 0
        if vis.any():
            norm_gt = gt.keypoints[:, :2] / np.array([w, h], dtype=np.float64)
            diff = np.abs(pred_xy - norm_gt[None]).sum(axis=2)  # [Q, K]
            l1 = diff[:, vis].mean(axis=1)
            sim = oks_many(pred_px, gt, sigmas)
        else:
            l1 = np.zeros(q_n)
            sim = np.ones(q_n)
        rows.append(cls + weights.lambda2 * l1 + weights.lambda3 * (1.0 - sim))
    return np.stack(rows)
