"""Batch command-line interface.

Subcommands: ``eval`` (AP report from COCO-format JSON), ``gradcheck``
(finite-difference verification suite), ``train-toy`` (overfit the synthetic
fixture), ``infer`` (run a checkpoint on a generated scene), ``bench``
(one-stage vs two-stage latency), and ``match-demo`` (cost matrix plus
Hungarian assignment for one image).

Exit codes: 0 success, 1 I/O failure, 2 schema/config error, 3 gradient
tolerance breach, 4 non-finite training loss, 5 checkpoint mismatch.
All successful commands print to stdout only.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace

import numpy as np

from setpose.gradcheck import run_suite
from setpose.jsonio import canonical_dumps, read_json, write_json
from setpose.losses import FocalParams, LossWeights
from setpose.matching import build_cost_matrix, hungarian
from setpose.metrics import COCO_SIGMAS, EvalParams, SchemaError, evaluate, load_coco_dt, load_coco_gt
from setpose.model import (
    CheckpointMismatch,
    ModelConfig,
    forward,
    forward_two_stage,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from setpose.synth import COCO_SKELETON, MINI_SKELETON, SceneSpec, generate_scene, make_dataset
from setpose.tensor import RngState
from setpose.train import (
    NonFiniteLoss,
    TOY_DATASET_SEED,
    TOY_DATASET_SIZE,
    TrainConfig,
    overfit,
    predict,
    toy_model_config,
    toy_train_config,
)

EXIT_OK = 0
EXIT_IO = 1
EXIT_SCHEMA = 2
EXIT_GRAD = 3
EXIT_NONFINITE = 4
EXIT_CHECKPOINT = 5

_CONFIG_SECTIONS = ("model", "train", "weights", "focal", "scene")
_TRAIN_KEYS = (
    "steps", "learning_rate", "momentum", "seed", "log_every", "grad_clip",
    "heatmap_sigma", "score_threshold", "max_detections",
)
_SCENE_KEYS = ("seed", "n_scenes", "max_persons", "image_size", "skeleton", "overlap_allowed")
_SKELETONS = {"mini": MINI_SKELETON, "coco": COCO_SKELETON}


class ConfigError(ValueError):
    pass


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")


def load_run_config(path: str | None):
    """Parse the optional JSON config; defaults are the toy recipe."""
    doc = read_json(path) if path else {}
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys("config", doc, _CONFIG_SECTIONS)

    model_cfg = toy_model_config()
    if "model" in doc:
        base = model_cfg.to_dict()
        _check_keys("model", doc["model"], base)
        base.update(doc["model"])
        model_cfg = ModelConfig.from_dict(base)

    weights = LossWeights(0.5, 5.0, 2.0)
    if "weights" in doc:
        _check_keys("weights", doc["weights"], ("lambda1", "lambda2", "lambda3"))
        weights = replace(weights, **doc["weights"])

    focal = FocalParams(alpha=1.0, gamma=0.0)
    if "focal" in doc:
        _check_keys("focal", doc["focal"], ("alpha", "gamma"))
        focal = replace(focal, **doc["focal"])

    train_cfg = replace(toy_train_config(), weights=weights, focal=focal)
    if "train" in doc:
        _check_keys("train", doc["train"], _TRAIN_KEYS)
        train_cfg = replace(train_cfg, **doc["train"])

    scene = {"seed": TOY_DATASET_SEED, "n_scenes": TOY_DATASET_SIZE, "max_persons": 1,
             "image_size": list(model_cfg.image_size), "skeleton": "mini", "overlap_allowed": False}
    if "scene" in doc:
        _check_keys("scene", doc["scene"], _SCENE_KEYS)
        scene.update(doc["scene"])
    if scene["skeleton"] not in _SKELETONS:
        raise ConfigError(f"unknown skeleton '{scene['skeleton']}' (choose from {sorted(_SKELETONS)})")
    return model_cfg, train_cfg, scene


def _scenes_from_config(scene: dict):
    return make_dataset(
        int(scene["seed"]),
        int(scene["n_scenes"]),
        skeleton=_SKELETONS[scene["skeleton"]],
        image_size=tuple(scene["image_size"]),
        max_persons=int(scene["max_persons"]),
        overlap_allowed=bool(scene["overlap_allowed"]),
    )


# -- commands -------------------------------------------------------------------


def cmd_eval(args) -> int:
    try:
        gts = load_coco_gt(args.gt)
        dts = load_coco_dt(args.dt)
        sigmas = np.asarray(read_json(args.sigmas), dtype=np.float64) if args.sigmas else None
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (OSError, json.JSONDecodeError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    k = gts[0].keypoints.shape[0] if gts else (dts[0].keypoints.shape[0] if dts else 17)
    if sigmas is None:
        # the 17-keypoint table is the shipped default; other keypoint counts
        # fall back to the toy skeleton constant
        sigmas = COCO_SIGMAS if k == COCO_SIGMAS.shape[0] else np.full(k, 0.2)
    if sigmas.shape[0] != k:
        print(f"schema error: {sigmas.shape[0]} sigmas for {k} keypoints", file=sys.stderr)
        return EXIT_SCHEMA
    params = EvalParams(sigmas=sigmas)
    report = evaluate(gts, dts, params)
    print(report.table())
    if args.json:
        try:
            with open(args.json, "w", encoding="utf-8") as fh:
                fh.write(report.to_json() + "\n")
        except OSError as exc:
            print(f"i/o error: {exc}", file=sys.stderr)
            return EXIT_IO
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed, trials=args.trials, corrupt=args.corrupt)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.name:<{width}}  max_rel_err={r.max_rel_err:.3e}  tol={r.tol:.0e}  {status}")
    if all(r.ok for r in results):
        print(f"all {len(results)} gradient checks passed")
        return EXIT_OK
    return EXIT_GRAD


def cmd_train_toy(args) -> int:
    try:
        model_cfg, train_cfg, scene = load_run_config(args.config)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (OSError, json.JSONDecodeError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    scenes = _scenes_from_config(scene)
    try:
        trace_fh = open(args.trace, "w", encoding="utf-8") if args.trace else None
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        trace, report, params = overfit(scenes, model_cfg, train_cfg, trace_sink=trace_fh)
    except NonFiniteLoss as exc:
        print(f"non-finite loss: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    finally:
        if trace_fh:
            trace_fh.close()
    try:
        if args.out:
            save_checkpoint(args.out, model_cfg, params)
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"trained {train_cfg.steps} steps on {len(scenes)} scenes")
    print(f"params checksum: {trace.params_checksum}")
    print("training-set evaluation:")
    print(report.table())
    return EXIT_OK


def cmd_infer(args) -> int:
    try:
        cfg, params = load_checkpoint(args.checkpoint)
    except CheckpointMismatch as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    skeleton = MINI_SKELETON if cfg.num_keypoints == MINI_SKELETON.num_joints else COCO_SKELETON
    if skeleton.num_joints != cfg.num_keypoints:
        print(f"checkpoint error: no skeleton with {cfg.num_keypoints} joints", file=sys.stderr)
        return EXIT_CHECKPOINT
    spec = SceneSpec(
        seed=args.scene_seed, n_persons=args.persons, image_size=cfg.image_size,
        skeleton=skeleton, overlap_allowed=False, channels=cfg.channels,
    )
    image, gts = generate_scene(spec)
    dts = predict(image, cfg, params, image_id=0, score_threshold=args.threshold)
    print(f"scene seed {args.scene_seed}: {len(gts)} persons, {len(dts)} detections >= {args.threshold}")
    for i, dt in enumerate(dts):
        kps = " ".join(f"({x:.2f},{y:.2f},{c:.2f})" for x, y, c in dt.keypoints)
        print(f"detection {i}: score={dt.score:.4f} keypoints: {kps}")
    if args.dump:
        doc = [
            {
                "image_id": 0,
                "category_id": 1,
                "keypoints": [round(float(v), 6) for v in dt.keypoints.reshape(-1)],
                "score": round(float(dt.score), 6),
            }
            for dt in dts
        ]
        try:
            write_json(doc, args.dump)
        except OSError as exc:
            print(f"i/o error: {exc}", file=sys.stderr)
            return EXIT_IO
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        model_cfg, _, scene = load_run_config(args.config)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (OSError, json.JSONDecodeError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    cfg = replace(model_cfg, refinement_decoder=True)
    params = init_params(cfg, RngState(0))
    image = RngState(1).uniform((*cfg.image_size, cfg.channels), 0.0, 1.0)

    def median_time(fn, repeats):
        for _ in range(3):  # warm-up
            fn(image, cfg, params)
        samples = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn(image, cfg, params)
            samples.append(time.perf_counter() - t0)
        return float(np.median(samples))

    one = median_time(forward, args.repeats)
    two = median_time(forward_two_stage, args.repeats)
    print(f"one-stage median:  {one * 1000:.3f} ms")
    print(f"two-stage median:  {two * 1000:.3f} ms")
    print(f"two-stage / one-stage ratio: {two / one:.3f}")
    return EXIT_OK


def cmd_match_demo(args) -> int:
    try:
        gts = load_coco_gt(args.gt)
        dts = load_coco_dt(args.dt)
        gt_doc = read_json(args.gt)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (OSError, json.JSONDecodeError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    image_ids = sorted({g.image_id for g in gts} | {d.image_id for d in dts})
    if not image_ids:
        print("no images in input; empty assignment")
        return EXIT_OK
    image_id = image_ids[0]
    img_gts = [g for g in gts if g.image_id == image_id]
    img_dts = [d for d in dts if d.image_id == image_id]
    sizes = {img["id"]: (img.get("height", 1), img.get("width", 1)) for img in gt_doc.get("images", [])}
    h, w = sizes.get(image_id, (1, 1))
    k = img_gts[0].keypoints.shape[0] if img_gts else (img_dts[0].keypoints.shape[0] if img_dts else 1)

    from types import SimpleNamespace

    kps = np.stack([d.keypoints for d in img_dts]) if img_dts else np.zeros((0, k, 3))
    norm = kps.copy()
    norm[:, :, 0] /= w
    norm[:, :, 1] /= h
    preds = SimpleNamespace(scores=np.array([d.score for d in img_dts]), keypoints=norm)
    cost = build_cost_matrix(
        preds, img_gts, LossWeights(), sigmas=np.full(k, 0.2), image_size=(h, w)
    )
    print(f"image {image_id}: {len(img_gts)} ground truths x {len(img_dts)} predictions")
    print("cost matrix (rows = ground truths):")
    for row in cost:
        print("  " + " ".join(f"{v:9.4f}" for v in row))
    assignment = hungarian(cost)
    for g, q in enumerate(assignment.gt_to_pred):
        print(f"gt {g} -> prediction {q} (cost {cost[g, q]:.4f})")
    print(f"total cost: {assignment.total_cost:.4f}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="setpose",
        description="Desk-scale end-to-end multi-person pose regression toolkit.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="evaluate detections against ground truth (AP table)",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--gt", required=True, help="ground-truth annotation JSON")
    p.add_argument("--dt", required=True, help="detection results JSON")
    p.add_argument("--sigmas", default=None, help="JSON array of per-keypoint sigmas")
    p.add_argument("--json", default=None, help="also write the report as JSON here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification suite",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--seed", type=int, default=0, help="base seed for random inputs")
    p.add_argument("--trials", type=int, default=20, help="random inputs per operation")
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)  # negative-control hook
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("train-toy", help="overfit the synthetic fixture and save a checkpoint",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--config", default=None, help="JSON config (sections: model, train, weights, focal, scene)")
    p.add_argument("--out", default=None, help="checkpoint output path")
    p.add_argument("--trace", default=None, help="JSONL loss-trace output path")
    p.set_defaults(fn=cmd_train_toy)

    p = sub.add_parser("infer", help="run a checkpoint on a generated scene",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--checkpoint", required=True, help="checkpoint file from train-toy")
    p.add_argument("--scene-seed", type=int, default=0, help="seed of the scene to generate")
    p.add_argument("--persons", type=int, default=1, help="persons in the generated scene")
    p.add_argument("--threshold", type=float, default=0.5, help="score threshold for reporting")
    p.add_argument("--dump", default=None, help="write detections as COCO results JSON")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("bench", help="one-stage vs two-stage forward latency",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--config", default=None, help="JSON config for the model section")
    p.add_argument("--repeats", type=int, default=50, help="timed repeats per variant")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("match-demo", help="print the cost matrix and assignment for one image",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--gt", required=True, help="ground-truth annotation JSON")
    p.add_argument("--dt", required=True, help="detection results JSON")
    p.set_defaults(fn=cmd_match_demo)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
