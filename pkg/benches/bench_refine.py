"""Benchmark: featlm.refine_pose in a loop vs featlm.refine_batch on the thread pool"""

import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "py_src"))
import featlm
from featlm.types import RefinementConfig, SceneSpec


def make_problems(count: int, spec: SceneSpec, points: int):
    problems, inits = [], []
    for seed in range(count):
        scene = featlm.generate_scene(spec, seed=seed)
        problems.append(scene.problem(num_points=points))
        inits.append(featlm.perturb_pose(scene.gt_pose, 0.05, np.random.default_rng(seed)))
    return problems, inits


def bench_sequential(problems, inits, cfg: RefinementConfig):
    start = time.perf_counter()
    for problem, init in zip(problems, inits):
        featlm.refine_pose(problem, init, cfg)
    elapsed = time.perf_counter() - start
    return elapsed


def bench_batch(problems, inits, cfg: RefinementConfig):
    start = time.perf_counter()
    featlm.refine_batch(problems, inits, cfg)
    elapsed = time.perf_counter() - start
    return elapsed


if __name__ == "__main__":
    count = 32
    spec = SceneSpec(height=128, width=128, channels=16)

    for points in (512, 2048):
        cfg = RefinementConfig(num_points=points)
        print(f"Generating {count} scenes, {points} points each...")
        problems, inits = make_problems(count, spec, points)

        time_seq = bench_sequential(problems, inits, cfg)
        print(f"refine_pose (sequential):   {time_seq:.3f}s ({count / time_seq:.1f} poses/s)")

        time_batch = bench_batch(problems, inits, cfg)
        print(f"refine_batch (parallel):    {time_batch:.3f}s ({count / time_batch:.1f} poses/s)")

        print(f"Speedup: {time_seq / time_batch:.1f}x\n")
