"""Regenerate the 5-image metrics fixture and its golden report.

The golden values come from the straight-line protocol oracle in
tests/oracles.py, not from the library evaluator, so the stored report is an
independent cross-check. Run from the repository root:

    PYTHONPATH=src:tests python3 tools/make_golden.py
"""

import numpy as np

from setpose.jsonio import canonical_dumps, write_json
from setpose.metrics import COCO_SIGMAS, ApReport
from setpose.synth import COCO_SKELETON, SceneSpec, generate_scene
from setpose.tensor import RngState

from oracles import protocol_oracle


def build_fixture():
    """Three medium-size images plus two with large persons, jittered dts."""
    scenes = []
    image_id = 0
    for spec_args in (
        dict(image_size=(128, 128), scale_range=(2.8, 4.0), n_persons=2),
        dict(image_size=(128, 128), scale_range=(3.0, 4.2), n_persons=1),
        dict(image_size=(128, 128), scale_range=(2.6, 3.8), n_persons=2),
        dict(image_size=(360, 360), scale_range=(9.5, 11.0), n_persons=1),
        dict(image_size=(360, 360), scale_range=(10.0, 11.5), n_persons=2),
    ):
        spec = SceneSpec(seed=4000 + image_id, skeleton=COCO_SKELETON,
                         overlap_allowed=False, image_id=image_id, **spec_args)
        image, gts = generate_scene(spec)
        scenes.append((image, gts))
        image_id += 1
    return scenes


def build_detections(scenes):
    rng = RngState(515151)
    detections = []
    for image_id, (_, gts) in enumerate(scenes):
        for g_idx, gt in enumerate(gts):
            if image_id == 2 and g_idx == 1:
                continue  # one missed detection
            scale = np.sqrt(gt.area)
            for clone in range(3 if (image_id + g_idx) % 2 == 0 else 2):
                noise = rng.uniform(gt.keypoints[:, :2].shape, -1.0, 1.0)
                factor = (0.03 + 0.08 * clone) * scale
                kps = gt.keypoints.copy()
                kps[:, :2] += noise * factor
                kps[:, 2] = np.round(rng.uniform((kps.shape[0],), 0.5, 1.0), 6)
                detections.append(
                    {
                        "image_id": image_id,
                        "category_id": 1,
                        "keypoints": [round(float(v), 6) for v in kps.reshape(-1)],
                        "score": round(float(rng.uniform((), 0.35, 0.99)), 6),
                    }
                )
        # one far-off false positive per even image
        if image_id % 2 == 0:
            h, w = (128, 128) if image_id < 3 else (320, 320)
            junk = np.column_stack(
                [rng.uniform((17,), 0, w), rng.uniform((17,), 0, h), np.ones(17)]
            )
            detections.append(
                {
                    "image_id": image_id,
                    "category_id": 1,
                    "keypoints": [round(float(v), 6) for v in junk.reshape(-1)],
                    "score": round(float(rng.uniform((), 0.2, 0.8)), 6),
                }
            )
    return detections


def main():
    scenes = build_fixture()
    gt_doc_scenes = []
    for image, gts in scenes:
        gt_doc_scenes.append((image, gts))

    from setpose.synth import export_coco

    gt_doc, _ = export_coco(gt_doc_scenes, skeleton=COCO_SKELETON, perfect_detections=False)
    dt_doc = build_detections(scenes)

    write_json(gt_doc, "tests/data/metrics_fixture_gt.json")
    write_json(dt_doc, "tests/data/metrics_fixture_dt.json")

    golden = protocol_oracle(gt_doc, dt_doc, COCO_SIGMAS.tolist())
    with open("tests/data/golden_eval_report.json", "w", encoding="utf-8") as fh:
        fh.write(canonical_dumps(golden) + "\n")
    table = ApReport(**golden).table()
    with open("tests/data/golden_eval_table.txt", "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    print("golden report:", canonical_dumps(golden))
    print(table)


if __name__ == "__main__":
    main()
