"""Build a matching cost matrix between noisy predictions and ground truths,
then solve it with the Hungarian solver and cross-check against brute force."""

from types import SimpleNamespace

import numpy as np

from setpose import LossWeights, brute_force_assignment, build_cost_matrix, hungarian
from setpose.metrics import GtInstance

np.set_printoptions(precision=3, suppress=True)

SIGMAS = np.full(4, 0.2)
SIZE = (32, 32)

# two ground-truth stick figures (4 keypoints each, pixel coordinates)
gt_a = np.array([[8.0, 20.0, 2], [8.0, 12.0, 2], [4.0, 16.0, 2], [12.0, 16.0, 2]])
gt_b = np.array([[22.0, 22.0, 2], [22.0, 14.0, 2], [18.0, 18.0, 2], [26.0, 18.0, 2]])
gts = [
    GtInstance(image_id=0, keypoints=gt_a, area=64.0),
    GtInstance(image_id=0, keypoints=gt_b, area=64.0),
]

# three predictions in the normalized frame: a good match for each ground
# truth plus one low-confidence stray
def to_pred(kps, conf):
    norm = kps[:, :2] / 32.0
    return np.concatenate([norm, np.full((4, 1), conf)], axis=1)

pred_kps = np.stack([
    to_pred(gt_a + np.array([0.6, -0.4, 0.0]), 0.9),
    to_pred(np.full((4, 3), 5.0), 0.8),
    to_pred(gt_b + np.array([-0.5, 0.7, 0.0]), 0.9),
])
preds = SimpleNamespace(scores=np.array([0.95, 0.40, 0.92]), keypoints=pred_kps)

cost = build_cost_matrix(preds, gts, LossWeights(), sigmas=SIGMAS, image_size=SIZE)
print("cost matrix (rows = ground truths, cols = predictions):")
print(cost)
print("entry = focal-style class cost + 5 * L1 + 2 * (1 - OKS)\n")

assignment = hungarian(cost)
print(f"hungarian assignment: {assignment.gt_to_pred}, total cost {assignment.total_cost:.4f}")
oracle = brute_force_assignment(cost)
print(f"brute force agrees:   {oracle.gt_to_pred}, total cost {oracle.total_cost:.4f}")
print("\nground truth 0 takes prediction 0 and ground truth 1 takes prediction 2;")
print("the stray prediction 1 is left unmatched and will be trained toward score 0.")
