"""Levenberg-Marquardt pose refinement with IRLS reweighting.

Each iteration solves the damped normal equations for a left twist, tries the
candidate ``exp(step) * pose`` and keeps it only if the feature cost drops;
rejected candidates raise the damping and retry. With IRLS on, the weights fed
to the next step are the previous ones scaled per point by
``rho(|delta|^2) / rho(|delta + J step|^2)``.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, fields, replace
from functools import partial
from os import PathLike
from pathlib import Path
from typing import Any, Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from featlm._parallel import parallel_map
from featlm.camera import Z_MIN
from featlm.errors import (
    ConfigError,
    DegenerateProblemError,
    InvalidArgumentError,
    SingularHessianError,
)
from featlm.lie import SE3Pose, Twist, compose, exp_se3
from featlm.residual import (
    MIN_POINTS,
    RefinementProblem,
    ResidualBundle,
    RobustKernel,
    evaluate_residuals,
)

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]

DIAG_FLOOR = 1e-12


@dataclass(frozen=True)
class RefinementConfig:
    """Solver settings. ``damping`` is the initial LM ``lambda``."""

    iterations: int = 20
    num_points: int = 512
    damping: float = 1e-3
    damping_adapt: Literal["fixed", "multiplicative"] = "multiplicative"
    damping_up: float = 10.0
    damping_down: float = 0.5
    kernel: RobustKernel = field(default_factory=RobustKernel)
    irls_enabled: bool = True
    step_norm_stop: float = 1e-8
    seed: int = 0
    max_trials: int = 5
    ratio_min: float = 0.01
    ratio_max: float = 100.0
    divide_by_m_total: bool = False
    z_min: float = Z_MIN

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.num_points < MIN_POINTS:
            raise ConfigError(f"num_points must be >= {MIN_POINTS}, got {self.num_points}")
        if not self.damping > 0:
            raise ConfigError(f"damping must be positive, got {self.damping}")
        if self.damping_adapt not in ("fixed", "multiplicative"):
            raise ConfigError(f"unknown damping_adapt {self.damping_adapt!r}")
        if not self.damping_up > 1.0 > self.damping_down > 0.0:
            raise ConfigError(
                f"need up > 1 > down > 0, got up={self.damping_up}, down={self.damping_down}"
            )
        if self.max_trials < 1:
            raise ConfigError(f"max_trials must be >= 1, got {self.max_trials}")
        if not 0.0 < self.ratio_min <= 1.0 <= self.ratio_max:
            raise ConfigError("IRLS ratio bounds must satisfy 0 < min <= 1 <= max")
        if self.step_norm_stop < 0 or self.seed < 0:
            raise ConfigError("step_norm_stop and seed must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["kernel"] = str(self.kernel)
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RefinementConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown refinement settings: {', '.join(unknown)}")
        values = dict(data)
        if isinstance(values.get("kernel"), str):
            values["kernel"] = RobustKernel.parse(values["kernel"])
        return cls(**values)


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    cost: float
    damping: float
    step: tuple[float, ...]
    step_norm: float
    accepted: bool
    trials: int
    ratio_min: float | None = None
    ratio_median: float | None = None
    ratio_max: float | None = None

    def to_json(self) -> dict[str, Any]:
        return {
            "iter": self.iteration,
            "cost": self.cost,
            "lambda": self.damping,
            "step_norm": self.step_norm,
            "accepted": self.accepted,
            "trials": self.trials,
            "step": list(self.step),
            "ratio_min": self.ratio_min,
            "ratio_median": self.ratio_median,
            "ratio_max": self.ratio_max,
        }


@dataclass
class RefinementTrace:
    initial_pose: SE3Pose
    initial_cost: float
    final_pose: SE3Pose
    records: list[IterationRecord] = field(default_factory=list)
    final_weights: FloatArray | None = None

    def accepted_costs(self) -> list[float]:
        return [r.cost for r in self.records if r.accepted]

    def final_cost(self) -> float:
        accepted = self.accepted_costs()
        return accepted[-1] if accepted else self.initial_cost

    def __len__(self) -> int:
        return len(self.records)


def trace_to_jsonl(trace: RefinementTrace, path: str | PathLike[str]) -> None:
    """One JSON object per iteration, full float precision."""
    lines = [json.dumps(record.to_json()) for record in trace.records]
    Path(path).write_text("".join(line + "\n" for line in lines))


def _normal_equations(
    bundle: ResidualBundle, weights: FloatArray
) -> tuple[FloatArray, FloatArray]:
    weighted = bundle.jacobians * weights[:, None, None]
    hessian = np.einsum("mci,mcj->ij", weighted, bundle.jacobians)
    gradient = np.einsum("mci,mc->i", weighted, bundle.deltas)
    return hessian, gradient


def lm_step(
    bundle: ResidualBundle, damping: float, *, weights: ArrayLike | None = None
) -> Twist:
    """Closed-form step ``-(H + lambda diag(H))^-1 J^T W delta``.

    ``weights`` replaces the bundle's own ``W`` diagonal (IRLS state).
    """
    if not damping >= 0:
        raise InvalidArgumentError(f"damping must be non-negative, got {damping}")
    if bundle.num_valid < MIN_POINTS:
        raise DegenerateProblemError(
            f"{bundle.num_valid} valid points cannot constrain 6 degrees of freedom"
        )
    w = bundle.weights if weights is None else np.asarray(weights, dtype=np.float64)
    hessian, gradient = _normal_equations(bundle, w)
    diagonal = np.maximum(np.diag(hessian), DIAG_FLOOR)
    np.fill_diagonal(hessian, diagonal)
    damped = hessian + damping * np.diag(diagonal)
    try:
        factor = cho_factor(damped)
        step = -cho_solve(factor, gradient)
    except (LinAlgError, ValueError) as exc:
        raise SingularHessianError(f"damped Hessian is not positive definite: {exc}") from exc
    if not np.all(np.isfinite(step)):
        raise SingularHessianError("damped normal equations produced a non-finite step")
    return Twist.from_vector(step)


def irls_ratios(
    bundle: ResidualBundle,
    step: Twist,
    kernel: RobustKernel,
    *,
    ratio_min: float = 0.01,
    ratio_max: float = 100.0,
) -> FloatArray:
    """Per-point ``rho(|delta|^2) / rho(|delta + J step|^2)``, clamped.

    A zero denominator maps to ``ratio_max``, except ``0 / 0`` which is 1.
    """
    predicted = bundle.deltas + np.einsum("mci,i->mc", bundle.jacobians, step.as_vector())
    before, _ = kernel.evaluate(bundle.squared_norms)
    after, _ = kernel.evaluate(np.einsum("mc,mc->m", predicted, predicted))
    ratios = np.ones_like(before)
    positive = after > 0
    ratios[positive] = before[positive] / after[positive]
    ratios[~positive & (before > 0)] = ratio_max
    return np.clip(ratios, ratio_min, ratio_max)


def irls_reweight(
    weights_prev: ArrayLike,
    bundle_prev: ResidualBundle,
    step: Twist,
    kernel: RobustKernel,
    *,
    ratio_min: float = 0.01,
    ratio_max: float = 100.0,
) -> FloatArray:
    ratios = irls_ratios(bundle_prev, step, kernel, ratio_min=ratio_min, ratio_max=ratio_max)
    return np.asarray(weights_prev, dtype=np.float64) * ratios


def _carry_weights(
    weights: FloatArray, before: ResidualBundle, after: ResidualBundle
) -> FloatArray:
    """Mask IRLS weights to the new valid set and rescale them to median 1.

    The LM step is invariant to a uniform weight scale, so the rescale only
    keeps the products of ratios in floating-point range. Points that just
    became valid start from their fresh confidence weight.
    """
    carried = np.where(after.validity, weights, 0.0)
    positive = carried[carried > 0]
    if positive.size:
        carried = carried / float(np.median(positive))
    revived = after.validity & ~before.validity
    return np.where(revived, after.weights, carried)


def refine_pose(
    problem: RefinementProblem, init: SE3Pose, cfg: RefinementConfig | None = None
) -> tuple[SE3Pose, RefinementTrace]:
    """Refine ``init`` for at most ``cfg.iterations`` LM iterations."""
    cfg = cfg or RefinementConfig()
    evaluate = partial(
        evaluate_residuals,
        problem,
        kernel=cfg.kernel,
        divide_by_m_total=cfg.divide_by_m_total,
        z_min=cfg.z_min,
    )
    pose = init
    bundle = evaluate(pose)
    trace = RefinementTrace(initial_pose=init, initial_cost=bundle.cost, final_pose=init)
    damping = cfg.damping
    weights = bundle.weights.copy()

    for iteration in range(cfg.iterations):
        step_weights = weights if cfg.irls_enabled else bundle.weights
        accepted = False
        step = Twist.zero()
        candidate: SE3Pose | None = None
        candidate_bundle: ResidualBundle | None = None
        tried_damping = damping
        trials = 0
        while trials < cfg.max_trials:
            trials += 1
            tried_damping = damping
            step = lm_step(bundle, damping, weights=step_weights)
            if step.norm() < cfg.step_norm_stop:
                break
            candidate = compose(exp_se3(step), pose)
            try:
                candidate_bundle = evaluate(candidate)
            except DegenerateProblemError:
                candidate_bundle = None
            if (
                candidate_bundle is not None
                and candidate_bundle.num_valid >= MIN_POINTS
                and candidate_bundle.cost < bundle.cost
            ):
                accepted = True
                if cfg.damping_adapt == "multiplicative":
                    damping *= cfg.damping_down
                break
            if cfg.damping_adapt == "fixed":
                break
            damping *= cfg.damping_up

        stats: tuple[float | None, float | None, float | None] = (None, None, None)
        if accepted and candidate is not None and candidate_bundle is not None:
            if cfg.irls_enabled:
                ratios = irls_ratios(
                    bundle, step, cfg.kernel, ratio_min=cfg.ratio_min, ratio_max=cfg.ratio_max
                )
                active = ratios[bundle.validity]
                stats = (float(active.min()), float(np.median(active)), float(active.max()))
                weights = _carry_weights(step_weights * ratios, bundle, candidate_bundle)
            pose, bundle = candidate, candidate_bundle

        record = IterationRecord(
            iteration=iteration,
            cost=bundle.cost,
            damping=tried_damping,
            step=tuple(float(x) for x in step.as_vector()),
            step_norm=step.norm(),
            accepted=accepted,
            trials=trials,
            ratio_min=stats[0],
            ratio_median=stats[1],
            ratio_max=stats[2],
        )
        trace.records.append(record)
        logger.debug(
            "iter %d cost=%.6e lambda=%.3e |step|=%.3e accepted=%s trials=%d",
            iteration,
            record.cost,
            record.damping,
            record.step_norm,
            accepted,
            trials,
        )
        if record.step_norm < cfg.step_norm_stop:
            break

    trace.final_pose = pose
    trace.final_weights = weights if cfg.irls_enabled else bundle.weights
    logger.info(
        "refined pose in %d iterations: cost %.6e -> %.6e",
        len(trace.records),
        trace.initial_cost,
        bundle.cost,
    )
    return pose, trace


def refine_batch(
    problems: Sequence[RefinementProblem],
    inits: Sequence[SE3Pose],
    cfg: RefinementConfig | None = None,
    *,
    max_workers: int | None = None,
) -> list[tuple[SE3Pose, RefinementTrace]]:
    """Refine independent problems concurrently; results keep input order."""
    if len(problems) != len(inits):
        raise InvalidArgumentError(f"{len(problems)} problems but {len(inits)} initial poses")
    return parallel_map(
        lambda pair: refine_pose(pair[0], pair[1], cfg),
        list(zip(problems, inits)),
        max_workers=max_workers,
    )


LossAfter = Callable[[SE3Pose], float]


def _refined_loss(
    problem: RefinementProblem,
    init: SE3Pose,
    cfg: RefinementConfig,
    loss_after: LossAfter,
    depths: FloatArray,
) -> float:
    pose, _ = refine_pose(replace(problem, depth_values=depths), init, cfg)
    return float(loss_after(pose))


def _central_differences(
    problem: RefinementProblem,
    init: SE3Pose,
    cfg: RefinementConfig,
    loss_after: LossAfter,
    directions: FloatArray,
    eps: float,
    max_workers: int | None,
) -> FloatArray:
    if not (math.isfinite(eps) and eps > 0):
        raise InvalidArgumentError(f"eps must be positive, got {eps}")
    base = problem.sample_depths()
    jobs: list[FloatArray] = []
    for direction in directions:
        jobs.append(base + eps * direction)
        jobs.append(base - eps * direction)
    values = np.array(
        parallel_map(
            partial(_refined_loss, problem, init, cfg, loss_after), jobs, max_workers=max_workers
        )
    )
    return (values[0::2] - values[1::2]) / (2.0 * eps)


def coupled_depth_gradient(
    problem: RefinementProblem,
    init: SE3Pose,
    cfg: RefinementConfig,
    loss_after: LossAfter,
    eps: float = 1e-3,
    *,
    max_workers: int | None = None,
) -> FloatArray:
    """Gradient of ``loss_after(refine_pose(...))`` w.r.t. each sampled depth.

    This is the via-pose term of the depth gradient, by central differences.
    Costs ``2 * M`` refinements, run on the shared thread pool.
    """
    directions = np.eye(problem.num_points)
    return _central_differences(problem, init, cfg, loss_after, directions, eps, max_workers)


def directional_depth_derivative(
    problem: RefinementProblem,
    init: SE3Pose,
    cfg: RefinementConfig,
    loss_after: LossAfter,
    direction: ArrayLike,
    eps: float = 1e-3,
) -> float:
    """Derivative of the via-pose loss along one depth direction.

    ``direction=problem.sample_depths()`` is a uniform relative depth scaling.
    """
    d = np.asarray(direction, dtype=np.float64).reshape(1, -1)
    if d.shape[1] != problem.num_points:
        raise InvalidArgumentError("direction needs one entry per sample point")
    return float(_central_differences(problem, init, cfg, loss_after, d, eps, 1)[0])


__all__ = [
    "RefinementConfig",
    "RefinementTrace",
    "IterationRecord",
    "lm_step",
    "irls_ratios",
    "irls_reweight",
    "refine_pose",
    "refine_batch",
    "coupled_depth_gradient",
    "directional_depth_derivative",
    "trace_to_jsonl",
]
