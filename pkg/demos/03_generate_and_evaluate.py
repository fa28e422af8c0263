"""Generate deterministic synthetic scenes, export them in COCO format, and
evaluate detections of varying quality with the OKS average-precision
protocol."""

import numpy as np

from setpose import EvalParams, MINI_SKELETON, evaluate, export_coco, load_coco_dt, load_coco_gt, make_dataset

scenes = make_dataset(seed=2024, n_scenes=8, image_size=(48, 48), max_persons=2)
n_people = sum(len(gts) for _, _, gts in scenes)
print(f"generated {len(scenes)} scenes with {n_people} people total")
print("(same seed always reproduces these scenes bit for bit)\n")

gt_doc, perfect_dt = export_coco(scenes)
gts = load_coco_gt(gt_doc)
dts = load_coco_dt(perfect_dt)
params = EvalParams(sigmas=np.array(MINI_SKELETON.sigmas))

print("perfect detections (each ground truth echoed with score 1.0):")
print(evaluate(gts, dts, params).table())
print()

rng = np.random.default_rng(7)
for pixels in (1.0, 2.5, 5.0):
    noisy = []
    for d in dts:
        k = d.keypoints.copy()
        k[:, :2] += rng.uniform(-pixels, pixels, k[:, :2].shape)
        noisy.append(type(d)(image_id=d.image_id, keypoints=k, score=float(rng.uniform(0.5, 1.0))))
    print(f"detections jittered by up to {pixels} px:")
    print(evaluate(gts, noisy, params).table())
    print()

print("AP falls smoothly as the jitter grows; the OKS thresholds 0.50..0.95")
print("translate pixel error into the familiar AP / AP50 / AP75 columns.")
