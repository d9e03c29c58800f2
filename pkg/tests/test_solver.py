import json
import math
from dataclasses import replace

import numpy as np
import pytest

import featlm
from featlm.errors import (
    ConfigError,
    DegenerateProblemError,
    InvalidArgumentError,
    SingularHessianError,
)
from featlm.lie import rotation_angle_between
from featlm.solver import irls_ratios
from featlm.types import GridMap, RefinementConfig, RobustKernel, SceneSpec, SE3Pose, Twist


def start_pose(scene, seed=0, twist_norm=0.05):
    return featlm.perturb_pose(scene.gt_pose, twist_norm, np.random.default_rng(seed))


def translation_error(pose, gt):
    return float(np.linalg.norm(pose.translation - gt.translation))


@pytest.fixture(scope="module")
def bundle(scene):
    return featlm.evaluate_residuals(scene.problem(), start_pose(scene), RobustKernel())


def test_lm_step_solves_damped_normal_equations(bundle):
    damping = 0.1
    w = bundle.weights
    j = bundle.jacobians
    h = np.einsum("mci,m,mcj->ij", j, w, j)
    g = np.einsum("mci,m,mc->i", j, w, bundle.deltas)
    expected = -np.linalg.solve(h + damping * np.diag(np.diag(h)), g)
    step = featlm.lm_step(bundle, damping)
    np.testing.assert_allclose(step.as_vector(), expected, rtol=1e-9, atol=1e-14)


def test_lm_step_explicit_weights(bundle):
    default = featlm.lm_step(bundle, 1e-3)
    explicit = featlm.lm_step(bundle, 1e-3, weights=bundle.weights)
    np.testing.assert_array_equal(default.as_vector(), explicit.as_vector())
    halved = featlm.lm_step(bundle, 1e-3, weights=bundle.weights * 0.5)
    np.testing.assert_allclose(halved.as_vector(), default.as_vector(), rtol=1e-9)


def test_lm_step_lowers_the_cost(scene, bundle):
    init = start_pose(scene)
    step = featlm.lm_step(bundle, 1e-3)
    moved = featlm.compose(featlm.exp_se3(step), init)
    after = featlm.evaluate_residuals(scene.problem(), moved, RobustKernel())
    assert after.cost < bundle.cost


def test_lm_step_one_dimensional_closed_form(bundle):
    m, c = bundle.deltas.shape
    rng = np.random.default_rng(3)
    j = rng.uniform(0.5, 2.0, m)
    delta = rng.normal(0.0, 1.0, m)
    w = rng.uniform(0.2, 1.0, m)
    jacobians = np.zeros((m, c, 6))
    jacobians[:, 0, 3] = j
    deltas = np.zeros((m, c))
    deltas[:, 0] = delta
    one_d = replace(
        bundle, deltas=deltas, jacobians=jacobians, weights=w, validity=np.ones(m, dtype=bool)
    )
    previous = math.inf
    for damping in (0.0, 0.1, 1.0, 10.0):
        step = featlm.lm_step(one_d, damping).as_vector()
        expected = -np.sum(j * w * delta) / (np.sum(j * j * w) * (1.0 + damping))
        assert step[3] == pytest.approx(expected, rel=1e-12)
        np.testing.assert_array_equal(step[[0, 1, 2, 4, 5]], 0.0)
        assert abs(step[3]) < previous
        previous = abs(step[3])


def test_lm_step_shrinks_as_damping_grows(bundle):
    h = np.einsum("mci,m,mcj->ij", bundle.jacobians, bundle.weights, bundle.jacobians)
    scale = np.sqrt(np.diag(h))
    dampings = np.logspace(-4, 6, 21)
    steps = [featlm.lm_step(bundle, damping).as_vector() for damping in dampings]
    # the step shrinks monotonically in the diag(H)-scaled norm the damping acts on
    scaled = [float(np.linalg.norm(scale * step)) for step in steps]
    assert all(later < earlier for earlier, later in zip(scaled, scaled[1:]))
    plain = [float(np.linalg.norm(step)) for step in steps]
    assert plain[-1] < 1e-3 * plain[0]
    assert plain[-1] < plain[-2] < plain[-3]


def test_lm_step_singular_hessian(bundle):
    with pytest.raises(SingularHessianError):
        featlm.lm_step(bundle, 1e-3, weights=-bundle.weights)


def test_lm_step_needs_six_valid_points(bundle):
    validity = np.zeros_like(bundle.validity)
    validity[:5] = True
    with pytest.raises(DegenerateProblemError):
        featlm.lm_step(replace(bundle, validity=validity), 1e-3)


def test_lm_step_rejects_negative_damping(bundle):
    with pytest.raises(InvalidArgumentError):
        featlm.lm_step(bundle, -1.0)


def test_irls_ratios_with_zero_step_are_one(bundle):
    ratios = irls_ratios(bundle, Twist.zero(), RobustKernel())
    np.testing.assert_array_equal(ratios, 1.0)
    weights = featlm.irls_reweight(bundle.weights, bundle, Twist.zero(), RobustKernel())
    np.testing.assert_array_equal(weights, bundle.weights)


def test_irls_ratios_are_clamped(bundle):
    step = featlm.lm_step(bundle, 1e-3)
    ratios = irls_ratios(bundle, step, RobustKernel(), ratio_min=0.5, ratio_max=2.0)
    assert ratios.min() >= 0.5 and ratios.max() <= 2.0


def test_irls_upweights_points_whose_residual_shrinks(bundle):
    step = featlm.lm_step(bundle, 1e-3)
    predicted = bundle.deltas + np.einsum("mci,i->mc", bundle.jacobians, step.as_vector())
    shrinking = np.einsum("mc,mc->m", predicted, predicted) < bundle.squared_norms
    assert shrinking.any()
    ratios = irls_ratios(bundle, step, RobustKernel())
    assert np.all(ratios[shrinking] > 1.0)
    weights = featlm.irls_reweight(bundle.weights, bundle, step, RobustKernel())
    grown = shrinking & (bundle.weights > 0)
    assert np.all(weights[grown] > bundle.weights[grown])


def test_ground_truth_is_a_fixed_point(identity_scene):
    pose, trace = featlm.refine_pose(identity_scene.problem(), SE3Pose.identity())
    assert pose.allclose(SE3Pose.identity(), atol=1e-6)
    assert trace.initial_cost < 1e-12
    assert all(record.cost < 1e-12 for record in trace.records)


def test_refine_recovers_ground_truth(scene):
    pose, trace = featlm.refine_pose(scene.problem(), start_pose(scene))
    baseline = float(np.linalg.norm(scene.gt_pose.translation))
    assert translation_error(pose, scene.gt_pose) < 0.005 * baseline
    assert math.degrees(rotation_angle_between(pose, scene.gt_pose)) < 0.1
    assert trace.final_cost() < trace.initial_cost
    assert trace.final_pose is pose


@pytest.mark.timeout(300)
def test_convergence_basin():
    cfg = RefinementConfig(iterations=20, num_points=512, kernel=RobustKernel("huber", 1.0))
    converged = 0
    for seed in range(100):
        scene = featlm.generate_scene(SceneSpec(), seed=seed)
        pose, _ = featlm.refine_pose(scene.problem(), start_pose(scene, seed=seed), cfg)
        baseline = float(np.linalg.norm(scene.gt_pose.translation))
        t_ok = translation_error(pose, scene.gt_pose) < 0.005 * baseline
        r_ok = math.degrees(rotation_angle_between(pose, scene.gt_pose)) < 0.1
        converged += t_ok and r_ok
    assert converged >= 95


@pytest.mark.parametrize("irls", [True, False])
def test_accepted_costs_never_increase(scene, irls):
    cfg = RefinementConfig(irls_enabled=irls, iterations=30)
    for seed in range(5):
        _, trace = featlm.refine_pose(scene.problem(), start_pose(scene, seed, 0.1), cfg)
        costs = [trace.initial_cost] + trace.accepted_costs()
        assert all(b <= a for a, b in zip(costs, costs[1:]))
        assert len(trace) <= cfg.iterations


def test_identical_inputs_give_identical_traces(scene):
    _, first = featlm.refine_pose(scene.problem(), start_pose(scene))
    _, second = featlm.refine_pose(scene.problem(), start_pose(scene))
    assert [r.to_json() for r in first.records] == [r.to_json() for r in second.records]
    assert first.final_pose.allclose(second.final_pose, atol=0.0)


def test_sample_order_does_not_matter(scene):
    problem = scene.problem()
    order = np.random.default_rng(5).permutation(problem.num_points)
    shuffled = replace(problem, sample_pixels=problem.sample_pixels[order])
    a, _ = featlm.refine_pose(problem, start_pose(scene))
    b, _ = featlm.refine_pose(shuffled, start_pose(scene))
    assert a.allclose(b, atol=1e-10)


@pytest.mark.parametrize("s", [0.5, 2.0, 10.0])
def test_depth_scale_equivariance(scene, s):
    problem = scene.problem()
    scaled = replace(problem, ref_depth=GridMap(problem.ref_depth.data * s))
    init = start_pose(scene)
    init_scaled = SE3Pose(init.rotation, init.translation * s)
    pose, _ = featlm.refine_pose(problem, init)
    pose_scaled, _ = featlm.refine_pose(scaled, init_scaled)
    np.testing.assert_allclose(pose_scaled.translation, s * pose.translation, rtol=1e-4, atol=0)
    np.testing.assert_allclose(pose_scaled.rotation, pose.rotation, atol=1e-6)


def test_outliers_are_down_weighted():
    cfg = RefinementConfig(kernel=RobustKernel("tukey", 1.0))
    clean_total = dirty_total = 0.0
    for seed in range(5):
        clean = featlm.generate_scene(SceneSpec(), seed=seed)
        dirty = featlm.generate_scene(SceneSpec(outlier_fraction=0.1), seed=seed)
        assert dirty.gt_pose.allclose(clean.gt_pose, atol=0.0)
        init = start_pose(clean, seed)
        clean_pose, _ = featlm.refine_pose(clean.problem(), init, cfg)
        problem = dirty.problem()
        dirty_pose, trace = featlm.refine_pose(problem, init, cfg)
        clean_total += translation_error(clean_pose, clean.gt_pose)
        dirty_total += translation_error(dirty_pose, dirty.gt_pose)

        px = problem.sample_pixels.astype(int)
        is_outlier = dirty.outlier_mask[px[:, 1], px[:, 0]]
        assert is_outlier.any()
        weights = trace.final_weights
        inlier_median = float(np.median(weights[~is_outlier & (weights > 0)]))
        assert np.all(weights[is_outlier] < 0.2 * inlier_median)
    assert dirty_total <= 3.0 * clean_total + 1e-6


def test_fixed_damping_never_changes(scene):
    cfg = RefinementConfig(damping_adapt="fixed", damping=0.01)
    _, trace = featlm.refine_pose(scene.problem(), start_pose(scene), cfg)
    assert {r.damping for r in trace.records} == {0.01}
    assert all(r.trials == 1 for r in trace.records)


def test_config_validation():
    with pytest.raises(ConfigError):
        RefinementConfig(iterations=0)
    with pytest.raises(ConfigError):
        RefinementConfig(num_points=5)
    with pytest.raises(ConfigError):
        RefinementConfig(damping=0.0)
    with pytest.raises(ConfigError):
        RefinementConfig(damping_up=0.5)
    with pytest.raises(ConfigError):
        RefinementConfig(damping_down=1.5)


def test_config_dict_round_trip():
    cfg = RefinementConfig(iterations=7, kernel=RobustKernel("tukey", 2.0), irls_enabled=False)
    data = cfg.to_dict()
    assert data["kernel"] == "tukey:2.0"
    assert RefinementConfig.from_dict(json.loads(json.dumps(data))) == cfg
    with pytest.raises(ConfigError):
        RefinementConfig.from_dict({"iterations": 3, "lambda": 1.0})


def test_trace_to_jsonl(tmp_path, scene):
    _, trace = featlm.refine_pose(scene.problem(), start_pose(scene))
    path = tmp_path / "trace.jsonl"
    featlm.trace_to_jsonl(trace, path)
    lines = path.read_text().splitlines()
    assert len(lines) == len(trace)
    first = json.loads(lines[0])
    assert {"iter", "cost", "lambda", "step_norm", "accepted"} <= set(first)
    assert first["iter"] == 0
    assert first["cost"] == trace.records[0].cost


def test_refine_batch_keeps_order(scene, identity_scene):
    problems = [scene.problem(), identity_scene.problem(), scene.problem(seed=4)]
    inits = [start_pose(scene), SE3Pose.identity(), start_pose(scene, 2)]
    results = featlm.refine_batch(problems, inits, max_workers=3)
    for (pose, trace), problem, init in zip(results, problems, inits):
        expected, _ = featlm.refine_pose(problem, init)
        assert pose.allclose(expected, atol=1e-12)
        assert trace.initial_pose is init
    with pytest.raises(InvalidArgumentError):
        featlm.refine_batch(problems, inits[:2])


def translation_norm(pose):
    return float(np.linalg.norm(pose.translation))


def test_coupled_depth_gradient_ignores_zero_confidence_points(scene):
    problem = scene.problem(num_points=24)
    center = np.array([31.5, 31.5])
    index = int(np.argmin(np.linalg.norm(problem.sample_pixels - center, axis=1)))
    u, v = problem.sample_pixels[index].astype(int)
    confidence = np.ones((64, 64))
    confidence[v, u] = 0.0
    masked = replace(problem, ref_confidence=GridMap(confidence))
    cfg = RefinementConfig(num_points=24)
    grad = featlm.coupled_depth_gradient(
        masked, start_pose(scene), cfg, translation_norm, max_workers=4
    )
    assert grad.shape == (24,)
    assert np.all(np.isfinite(grad))
    assert grad[index] == 0.0


def test_constant_downstream_loss_has_zero_depth_gradient(scene):
    problem = scene.problem(num_points=12)
    cfg = RefinementConfig(num_points=12, iterations=3)
    grad = featlm.coupled_depth_gradient(
        problem, start_pose(scene), cfg, lambda pose: 1.0, max_workers=2
    )
    assert grad.shape == (12,)
    np.testing.assert_array_equal(grad, 0.0)


def test_depth_derivative_uses_absolute_steps(scene):
    problem = scene.problem(num_points=16)
    cfg = RefinementConfig(num_points=16, iterations=5)
    init = start_pose(scene)
    eps = 0.05
    depths = problem.sample_depths()
    plus, _ = featlm.refine_pose(replace(problem, depth_values=depths + eps), init, cfg)
    minus, _ = featlm.refine_pose(replace(problem, depth_values=depths - eps), init, cfg)
    expected = (translation_norm(plus) - translation_norm(minus)) / (2.0 * eps)
    derivative = featlm.directional_depth_derivative(
        problem, init, cfg, translation_norm, np.ones(16), eps=eps
    )
    assert derivative == pytest.approx(expected, rel=1e-12)


def test_uniform_depth_scaling_scales_the_translation(scene):
    problem = scene.problem(num_points=64)
    # IRLS weights depend on the path taken, so only the plain LM minimum scales exactly
    cfg = RefinementConfig(num_points=64, iterations=100, irls_enabled=False, step_norm_stop=0.0)
    init = start_pose(scene)
    refined, _ = featlm.refine_pose(problem, init, cfg)
    derivative = featlm.directional_depth_derivative(
        problem, init, cfg, translation_norm, problem.sample_depths()
    )
    assert derivative > 0
    assert derivative == pytest.approx(translation_norm(refined), rel=1e-2)
    with pytest.raises(InvalidArgumentError):
        featlm.directional_depth_derivative(problem, init, cfg, translation_norm, [1.0, 2.0])
