"""Train the toy set-prediction model on a small synthetic dataset and watch
the composite loss terms fall; finish with an AP report on the training set
and a checkpoint round trip.

This is a scaled-down version of the full overfit experiment (the acceptance
run uses 50 scenes and 5000 steps; see README)."""

import sys
import tempfile

import numpy as np

from setpose import load_checkpoint, save_checkpoint
from setpose.train import make_toy_dataset, overfit, toy_model_config, toy_train_config

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1200

scenes = make_toy_dataset(12)
model_cfg = toy_model_config()
train_cfg = toy_train_config(steps=steps)
print(f"training {steps} steps on {len(scenes)} single-person scenes "
      f"(lr={train_cfg.learning_rate}, momentum={train_cfg.momentum})\n")

trace, report, params = overfit(scenes, model_cfg, train_cfg, trace_sink=sys.stdout)

print("\ntraining-set evaluation:")
print(report.table())

with tempfile.NamedTemporaryFile(suffix=".ckpt") as tmp:
    save_checkpoint(tmp.name, model_cfg, params)
    cfg2, params2 = load_checkpoint(tmp.name)
    identical = all(np.array_equal(params[k].data, params2[k].data) for k in params)
    print(f"\ncheckpoint round trip: config match={cfg2 == model_cfg}, tensors identical={identical}")
