"""Hyperparameter probe for the overfit harness (development tool)."""

import sys
import time

import numpy as np

from setpose.losses import FocalParams, LossWeights
from setpose.model import ModelConfig
from setpose.synth import make_dataset
from setpose.train import TrainConfig, overfit

MODEL = ModelConfig(
    image_size=(32, 32), patch=4, d_model=32, heads=4, encoder_layers=2,
    decoder_layers=2, num_queries=8, num_keypoints=4, ffn_dim=64,
)


def run(steps, lr, mom, clip, alpha, gamma, lam1, lam2, lam3, n_scenes=50, seed=123, train_seed=0):
    scenes = make_dataset(seed, n_scenes)
    cfg = TrainConfig(
        steps=steps, learning_rate=lr, momentum=mom, grad_clip=clip, seed=train_seed,
        weights=LossWeights(lam1, lam2, lam3), focal=FocalParams(alpha=alpha, gamma=gamma),
    )
    t0 = time.time()
    trace, report, params = overfit(scenes, MODEL, cfg)
    dt = time.time() - t0
    b = trace.steps[-1]
    print(
        f"steps={steps} lr={lr} mom={mom} clip={clip} a={alpha} g={gamma} "
        f"lam=({lam1},{lam2},{lam3}): ap50={report.ap50:.3f} ap={report.ap:.3f} "
        f"l_c={b.l_c:.4f} l_reg={b.l_reg:.4f} l_oks={b.l_oks:.4f} [{dt:.0f}s]"
    )
    return report


if __name__ == "__main__":
    which = sys.argv[1] if len(sys.argv) > 1 else "quick"
    if which == "quick":
        run(1500, 0.2, 0.9, 1.0, 1.0, 2.0, 0.5, 5.0, 2.0)
        run(1500, 0.2, 0.9, 2.0, 1.0, 2.0, 0.5, 5.0, 2.0)
        run(1500, 0.1, 0.9, 1.0, 1.0, 1.0, 0.5, 5.0, 2.0)
    elif which == "long":
        run(4000, 0.2, 0.9, 1.0, 1.0, 2.0, 0.5, 5.0, 2.0)
    else:
        parts = [float(x) for x in which.split(",")]
        run(int(parts[0]), *parts[1:])
