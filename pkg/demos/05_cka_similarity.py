"""Linear CKA: invariances and stage-by-stage model comparison."""

import tempfile
from pathlib import Path

import numpy as np

from airl import evaluation, runner
from airl.numerics import Rng
from airl.surgery import linear_cka, stagewise_cka

rng = Rng(0)
x = rng.child("x").normal(size=(64, 12))
q, _ = np.linalg.qr(rng.child("q").normal(size=(12, 12)))

print(f"CKA(x, x)            = {linear_cka(x, x):.6f}")
print(f"CKA(x, 10x)          = {linear_cka(x, 10 * x):.6f}")
print(f"CKA(x, x @ rotation) = {linear_cka(x, x @ q):.6f}")
print(f"CKA(x, noise)        = "
      f"{linear_cka(x, rng.child('n').normal(size=(64, 12))):.6f}")

out = Path(tempfile.mkdtemp(prefix="airl_demo_"))
from airl.config import config_from_overrides


def quick_run(seed):
    cfg = config_from_overrides(
        framework__kind="byol", run__epochs=6, run__batch=48,
        run__seed=seed, data__per_class=48,
    )
    return runner.pretrain(cfg, out / f"run{seed}"), cfg


run_a, cfg = quick_run(0)
run_b, _ = quick_run(7)

dataset = runner.dataset_from_config(cfg)
batch = evaluation.images_to_inputs(dataset.val_images, run_a.state.student)

print("\nstagewise CKA, same run vs itself:")
for stage, value in stagewise_cka(run_a.state.student, run_a.state.student,
                                  batch):
    print(f"  {stage:10s} {value:.4f}")

print("stagewise CKA, two runs from different seeds:")
for stage, value in stagewise_cka(run_a.state.student, run_b.state.student,
                                  batch):
    print(f"  {stage:10s} {value:.4f}")
