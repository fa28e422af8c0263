import math

import numpy as np
import pytest

from setpose.jsonio import canonical_dumps
from setpose.metrics import (
    AREA_RANGES,
    COCO_SIGMAS,
    ApReport,
    DtInstance,
    EvalParams,
    GtInstance,
    NoVisibleKeypoints,
    SchemaError,
    average_precision,
    evaluate,
    load_coco_dt,
    load_coco_gt,
    match_image,
    oks,
)

from oracles import greedy_match_scalar, protocol_oracle

SIG2 = np.array([0.1, 0.1])


def _gt(kps, area, image_id=0):
    return GtInstance(image_id=image_id, keypoints=np.asarray(kps, dtype=float), area=area)


def _dt(kps, score, image_id=0):
    return DtInstance(image_id=image_id, keypoints=np.asarray(kps, dtype=float), score=score)


# -- oks ---------------------------------------------------------------------------


def test_oks_identical_is_one():
    kps = [[3.0, 4.0, 2], [7.0, 2.0, 2]]
    dt = _dt(kps, 1.0)
    assert oks(dt, _gt(kps, area=25.0), SIG2) == pytest.approx(1.0, abs=1e-15)


def test_oks_characteristic_distance():
    area = 40.0
    k = 0.2
    d = math.sqrt(2.0 * area * k * k)
    gt = _gt([[0.0, 0.0, 2]], area=area)
    dt = _dt([[d, 0.0, 1.0]], 1.0)
    assert oks(dt, gt, [0.1]) == pytest.approx(math.exp(-1.0), abs=1e-12)


def test_oks_mean_of_exact_and_far():
    gt = _gt([[0.0, 0.0, 2], [5.0, 5.0, 2]], area=10.0)
    dt = _dt([[0.0, 0.0, 1.0], [1e9, 1e9, 1.0]], 1.0)
    assert oks(dt, gt, SIG2) == pytest.approx(0.5, abs=1e-12)


def test_oks_ignores_invisible_gt_keypoints():
    gt = _gt([[0.0, 0.0, 2], [5.0, 5.0, 0]], area=10.0)
    dt = _dt([[0.0, 0.0, 1.0], [1e9, 1e9, 1.0]], 1.0)
    assert oks(dt, gt, SIG2) == pytest.approx(1.0, abs=1e-12)


def test_oks_requires_visible_keypoints():
    gt = GtInstance(image_id=0, keypoints=np.array([[1.0, 1.0, 0.0]]), area=5.0)
    with pytest.raises(NoVisibleKeypoints):
        oks(_dt([[1.0, 1.0, 1.0]], 1.0), gt, [0.1])


def test_oks_rigid_translation_invariance():
    rng = np.random.default_rng(0)
    kps = np.column_stack([rng.uniform(0, 10, 4), rng.uniform(0, 10, 4), np.full(4, 2.0)])
    dt_kps = kps + np.array([rng.uniform(-1, 1, 4), rng.uniform(-1, 1, 4), np.zeros(4)]).T
    shift = np.array([13.0, -7.0, 0.0])
    base = oks(_dt(dt_kps, 1.0), _gt(kps, 30.0), np.full(4, 0.1))
    moved = oks(_dt(dt_kps + shift, 1.0), _gt(kps + shift, 30.0), np.full(4, 0.1))
    assert moved == pytest.approx(base, abs=1e-12)


def test_oks_scale_invariance():
    rng = np.random.default_rng(1)
    kps = np.column_stack([rng.uniform(0, 10, 4), rng.uniform(0, 10, 4), np.full(4, 2.0)])
    dt_kps = kps + 0.5
    c = 3.7
    scaled_gt = kps.copy()
    scaled_gt[:, :2] *= c
    scaled_dt = dt_kps.copy()
    scaled_dt[:, :2] *= c
    base = oks(_dt(dt_kps, 1.0), _gt(kps, 30.0), np.full(4, 0.1))
    scaled = oks(_dt(scaled_dt, 1.0), _gt(scaled_gt, 30.0 * c * c), np.full(4, 0.1))
    assert scaled == pytest.approx(base, abs=1e-12)


# -- per-image matching --------------------------------------------------------------


def test_match_single_pair():
    gt = _gt([[2.0, 2.0, 2], [4.0, 4.0, 2]], area=9.0)
    dt = _dt([[2.1, 2.0, 1.0], [4.0, 4.1, 1.0]], 0.9)
    flags = match_image([gt], [dt], threshold=0.5, sigmas=SIG2)
    assert flags.tolist() == [1]


def test_two_detections_one_gt():
    gt = _gt([[2.0, 2.0, 2], [4.0, 4.0, 2]], area=9.0)
    close = _dt([[2.0, 2.0, 1.0], [4.0, 4.0, 1.0]], 0.6)
    closer = _dt([[2.0, 2.0, 1.0], [4.0, 4.0, 1.0]], 0.9)
    flags = match_image([gt], [close, closer], threshold=0.5, sigmas=SIG2)
    assert flags.tolist() == [0, 1]  # higher score matched first, input order kept


def test_match_flags_equal_scalar_oracle_hand_case():
    gts = [
        _gt([[2.0, 2.0, 2], [4.0, 2.0, 2]], area=8.0),
        _gt([[10.0, 10.0, 2], [12.0, 10.0, 2]], area=2000.0),
        _gt([[20.0, 20.0, 2], [22.0, 20.0, 2]], area=8.0),
    ]
    dts = [
        _dt([[2.2, 2.0, 1.0], [4.1, 2.0, 1.0]], 0.8),
        _dt([[10.0, 10.2, 1.0], [12.0, 10.1, 1.0]], 0.9),
        _dt([[50.0, 50.0, 1.0], [52.0, 50.0, 1.0]], 0.7),
        _dt([[2.4, 2.1, 1.0], [4.3, 2.2, 1.0]], 0.6),
    ]
    lo, hi = AREA_RANGES["medium"]
    flags = match_image(gts, dts, threshold=0.5, area_range=(lo, hi), sigmas=SIG2)
    ref = greedy_match_scalar(
        [(g.keypoints.tolist(), g.area) for g in gts],
        [(d.keypoints.tolist(), d.score) for d in dts],
        0.5,
        lo,
        hi,
        SIG2.tolist(),
    )
    assert flags.tolist() == ref


def test_match_flags_equal_scalar_oracle_random():
    rng = np.random.default_rng(2)
    for _ in range(30):
        g_n = int(rng.integers(0, 4))
        d_n = int(rng.integers(0, 5))
        gts = [
            _gt(
                np.column_stack([rng.uniform(0, 20, 2), rng.uniform(0, 20, 2), np.full(2, 2.0)]),
                area=float(rng.uniform(4, 2500)),
            )
            for _ in range(g_n)
        ]
        dts = [
            _dt(
                np.column_stack([rng.uniform(0, 20, 2), rng.uniform(0, 20, 2), np.ones(2)]),
                score=float(rng.uniform(0, 1)),
            )
            for _ in range(d_n)
        ]
        t = float(rng.choice([0.5, 0.75, 0.9]))
        lo, hi = AREA_RANGES["medium"]
        flags = match_image(gts, dts, threshold=t, area_range=(lo, hi), sigmas=SIG2)
        ref = greedy_match_scalar(
            [(g.keypoints.tolist(), g.area) for g in gts],
            [(d.keypoints.tolist(), d.score) for d in dts],
            t,
            lo,
            hi,
            SIG2.tolist(),
        )
        assert flags.tolist() == ref


# -- average precision ------------------------------------------------------------------


def test_ap_all_true_positives():
    assert average_precision([True, True, True], [0.9, 0.8, 0.7], gt_count=3) == pytest.approx(1.0)


def test_ap_no_detections():
    assert average_precision([], [], gt_count=2) == 0.0


def test_ap_empty_gt_sentinel():
    assert average_precision([True], [0.9], gt_count=0) == -1.0


def test_ap_one_tp_one_fp_two_gts():
    # PR points: (r=0.5, p=1.0) then (r=0.5, p=0.5); 51 of 101 samples see 1.0
    val = average_precision([True, False], [0.9, 0.8], gt_count=2)
    assert val == pytest.approx(51.0 / 101.0, abs=1e-12)


# -- evaluate -----------------------------------------------------------------------------


def _perfect_dts(gts):
    out = []
    for g in gts:
        kps = g.keypoints.copy()
        kps[:, 2] = 1.0
        out.append(DtInstance(image_id=g.image_id, keypoints=kps, score=1.0))
    return out


def _toy_dataset():
    rng = np.random.default_rng(3)
    gts = []
    for image_id in range(4):
        for _ in range(int(rng.integers(1, 3))):
            center = rng.uniform(20, 80, 2)
            kps = np.column_stack(
                [center[0] + rng.uniform(-8, 8, 4), center[1] + rng.uniform(-8, 8, 4), np.full(4, 2.0)]
            )
            span = kps[:, :2].max(axis=0) - kps[:, :2].min(axis=0)
            gts.append(GtInstance(image_id=image_id, keypoints=kps, area=float(span[0] * span[1] + 1.0)))
    return gts


def test_perfect_detections_score_one():
    gts = _toy_dataset()
    params = EvalParams(sigmas=np.full(4, 0.1))
    report = evaluate(gts, _perfect_dts(gts), params)
    assert report.ap == 1.0 and report.ap50 == 1.0 and report.ap75 == 1.0
    assert report.ap_m in (1.0, -1.0) and report.ap_l in (1.0, -1.0)


def test_empty_detections_score_zero():
    gts = _toy_dataset()
    params = EvalParams(sigmas=np.full(4, 0.1))
    report = evaluate(gts, [], params)
    assert report.ap == 0.0 and report.ap50 == 0.0 and report.ap75 == 0.0


def test_report_fields_in_range():
    rng = np.random.default_rng(4)
    gts = _toy_dataset()
    dts = []
    for g in gts:
        kps = g.keypoints.copy()
        kps[:, :2] += rng.uniform(-3, 3, (4, 2))
        kps[:, 2] = 1.0
        dts.append(DtInstance(image_id=g.image_id, keypoints=kps, score=float(rng.uniform(0.2, 1.0))))
    report = evaluate(gts, dts, EvalParams(sigmas=np.full(4, 0.1)))
    for v in report.as_dict().values():
        assert (0.0 <= v <= 1.0) or v == -1.0


def test_record_order_permutation_invariance():
    rng = np.random.default_rng(5)
    gts = _toy_dataset()
    dts = []
    for i, g in enumerate(gts):
        kps = g.keypoints.copy()
        kps[:, :2] += rng.uniform(-2, 2, (4, 2))
        kps[:, 2] = 1.0
        dts.append(DtInstance(image_id=g.image_id, keypoints=kps, score=0.3 + 0.05 * i))
    params = EvalParams(sigmas=np.full(4, 0.1))
    base = evaluate(gts, dts, params)
    for seed in range(5):
        perm_rng = np.random.default_rng(seed)
        gperm = [gts[i] for i in perm_rng.permutation(len(gts))]
        dperm = [dts[i] for i in perm_rng.permutation(len(dts))]
        assert evaluate(gperm, dperm, params) == base


def test_monotone_improvement_never_hurts():
    rng = np.random.default_rng(6)
    gts = _toy_dataset()
    params = EvalParams(sigmas=np.full(4, 0.1))
    offsets = [rng.uniform(-6, 6, (4, 2)) for _ in gts]
    reports = []
    for shrink in (1.0, 0.5, 0.0):
        dts = []
        for g, off in zip(gts, offsets):
            kps = g.keypoints.copy()
            kps[:, :2] += off * shrink
            kps[:, 2] = 1.0
            dts.append(DtInstance(image_id=g.image_id, keypoints=kps, score=0.9))
        reports.append(evaluate(gts, dts, params))
    for a, b in zip(reports, reports[1:]):
        for key in ("ap", "ap50", "ap75"):
            assert getattr(b, key) >= getattr(a, key) - 1e-12


def test_evaluate_matches_protocol_oracle_random():
    rng = np.random.default_rng(7)
    k = 3
    sig = np.full(k, 0.1)
    gt_doc = {"images": [], "annotations": []}
    dt_doc = []
    ann_id = 1
    for image_id in range(5):
        gt_doc["images"].append({"id": image_id, "width": 200, "height": 200})
        for _ in range(int(rng.integers(0, 4))):
            center = rng.uniform(30, 170, 2)
            scale = rng.uniform(4, 40)
            xy = np.column_stack(
                [center[0] + rng.uniform(-scale, scale, k), center[1] + rng.uniform(-scale, scale, k)]
            )
            kps = np.column_stack([xy, np.full(k, 2.0)]).reshape(-1)
            gt_doc["annotations"].append(
                {
                    "id": ann_id,
                    "image_id": image_id,
                    "category_id": 1,
                    "keypoints": kps.tolist(),
                    "num_keypoints": k,
                    "area": float(scale * scale * 4.0),
                    "iscrowd": 0,
                }
            )
            ann_id += 1
            # a few detections per gt: jittered clones and noise
            for _ in range(int(rng.integers(0, 3))):
                jitter = xy + rng.uniform(-scale / 2, scale / 2, (k, 2))
                dt_doc.append(
                    {
                        "image_id": image_id,
                        "category_id": 1,
                        "keypoints": np.column_stack([jitter, np.ones(k)]).reshape(-1).tolist(),
                        "score": float(rng.uniform(0.05, 1.0)),
                    }
                )
        for _ in range(int(rng.integers(0, 2))):
            noise = rng.uniform(0, 200, (k, 2))
            dt_doc.append(
                {
                    "image_id": image_id,
                    "category_id": 1,
                    "keypoints": np.column_stack([noise, np.ones(k)]).reshape(-1).tolist(),
                    "score": float(rng.uniform(0.05, 1.0)),
                }
            )
    report = evaluate(load_coco_gt(gt_doc), load_coco_dt(dt_doc), EvalParams(sigmas=sig))
    ref = protocol_oracle(gt_doc, dt_doc, sig.tolist())
    for key, val in ref.items():
        assert getattr(report, key) == pytest.approx(val, abs=1e-12), key


# -- schemas --------------------------------------------------------------------------------


def test_load_gt_drops_crowd_records():
    doc = {
        "images": [{"id": 0}],
        "annotations": [
            {"image_id": 0, "keypoints": [1, 1, 2, 2, 2, 2], "area": 10.0, "iscrowd": 1},
            {"image_id": 0, "keypoints": [1, 1, 2, 2, 2, 2], "area": 10.0, "iscrowd": 0},
        ],
    }
    out = load_coco_gt(doc)
    assert len(out) == 1 and out[0].iscrowd == 0


def test_load_gt_rejects_malformed():
    with pytest.raises(SchemaError):
        load_coco_gt({"annotations": []})
    with pytest.raises(SchemaError):
        load_coco_gt({"images": [], "annotations": [{"image_id": 0, "keypoints": [1, 2], "area": 5.0}]})
    with pytest.raises(SchemaError):
        load_coco_gt({"images": [], "annotations": [{"image_id": 0, "keypoints": [1, 2, 2], "area": -5.0}]})


def test_load_dt_rejects_malformed():
    with pytest.raises(SchemaError):
        load_coco_dt({"not": "a list"})
    with pytest.raises(SchemaError):
        load_coco_dt([{"image_id": 0, "keypoints": [1, 2, 3], "score": float("nan")}])


def test_golden_fixture_reproduced_byte_for_byte():
    # the stored golden was produced by the straight-line protocol oracle in
    # oracles.py (see tools/make_golden.py), not by this evaluator
    gts = load_coco_gt("tests/data/metrics_fixture_gt.json")
    dts = load_coco_dt("tests/data/metrics_fixture_dt.json")
    report = evaluate(gts, dts)
    with open("tests/data/golden_eval_report.json", encoding="utf-8") as fh:
        assert report.to_json() + "\n" == fh.read()
    with open("tests/data/golden_eval_table.txt", encoding="utf-8") as fh:
        assert report.table() + "\n" == fh.read()


def test_golden_fixture_matches_live_oracle():
    from setpose.jsonio import read_json

    gt_doc = read_json("tests/data/metrics_fixture_gt.json")
    dt_doc = read_json("tests/data/metrics_fixture_dt.json")
    report = evaluate(load_coco_gt(gt_doc), load_coco_dt(dt_doc))
    ref = protocol_oracle(gt_doc, dt_doc, COCO_SIGMAS.tolist())
    for key, val in ref.items():
        assert getattr(report, key) == pytest.approx(val, abs=1e-12), key


def test_report_table_and_json_shapes():
    report = ApReport(ap=1.0, ap50=1.0, ap75=0.5, ap_m=-1.0, ap_l=0.25)
    table = report.table()
    lines = table.splitlines()
    assert lines[0].split() == ["AP", "AP50", "AP75", "AP_M", "AP_L"]
    assert "1.000" in lines[1] and "-1.000" in lines[1]
    js = report.to_json()
    assert js == canonical_dumps(report.as_dict())
    assert '"ap":1.000000' in js
