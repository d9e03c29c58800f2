"""Benchmark: vectorized featlm.evaluate_residuals vs a per-point Python loop"""

import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "py_src"))
import featlm
from featlm.types import RobustKernel, SceneSpec


def naive_cost(problem, pose, kernel):
    k = problem.intrinsics
    total = 0.0
    count = 0
    for u, v in problem.sample_pixels:
        depth = float(featlm.bilinear_sample(problem.ref_depth, (u, v)).value[0])
        point = pose.rotation @ featlm.backproject((u, v), depth, k) + pose.translation
        if point[2] <= 1e-4:
            continue
        px = featlm.project(point, k, z_min=1e-4)
        query = featlm.bilinear_sample(problem.query_feature, px)
        if not query.valid:
            continue
        ref = featlm.bilinear_sample(problem.ref_feature, (u, v)).value
        r2 = float(np.sum((query.value - ref) ** 2))
        total += featlm.robust_eval(kernel, r2)[0]
        count += 1
    return total / max(count, 1)


def bench_vectorized(problem, pose, kernel, repeats: int):
    start = time.perf_counter()
    for _ in range(repeats):
        featlm.evaluate_residuals(problem, pose, kernel)
    elapsed = time.perf_counter() - start
    return elapsed / repeats


def bench_naive(problem, pose, kernel, repeats: int):
    start = time.perf_counter()
    for _ in range(repeats):
        naive_cost(problem, pose, kernel)
    elapsed = time.perf_counter() - start
    return elapsed / repeats


if __name__ == "__main__":
    spec = SceneSpec(height=256, width=256, channels=32)
    scene = featlm.generate_scene(spec, seed=0)
    kernel = RobustKernel()
    pose = scene.gt_pose

    for points in (512, 2048, 8192):
        problem = scene.problem(num_points=points)
        print(f"{points} points, {spec.channels} channels:")

        time_vec = bench_vectorized(problem, pose, kernel, repeats=20)
        print(f"  featlm (vectorized):    {time_vec * 1e3:.2f} ms/eval")

        time_naive = bench_naive(problem, pose, kernel, repeats=2)
        print(f"  per-point loop:         {time_naive * 1e3:.2f} ms/eval")

        print(f"  Speedup: {time_naive / time_vec:.1f}x\n")
