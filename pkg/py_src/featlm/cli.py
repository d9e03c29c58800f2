"""Command-line front end: ``featlm <command> [options]``.

Commands: ``refine``, ``synth``, ``eval-depth``, ``eval-odom`` and
``scale-experiment``. Settings resolve as flag, then ``--config`` JSON, then
the built-in default. Exit codes: 0 ok, 2 bad input, 3 degenerate problem.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray

from featlm import __version__
from featlm.camera import load_intrinsics
from featlm.errors import (
    ConfigError,
    DegenerateProblemError,
    FeatLMError,
    PoseFileError,
    SingularHessianError,
)
from featlm.gridmap import load_gridmap
from featlm.lie import SE3Pose
from featlm.metrics import (
    KITTI_SEGMENTS,
    SEGMENT_STEP,
    DepthEvalResult,
    absolute_trajectory_error,
    apply_similarity,
    depth_metrics,
    format_kitti_pose,
    odometry_errors,
    read_kitti_poses,
    scale_std,
    umeyama_align_7dof,
    write_kitti_poses,
)
from featlm.residual import RobustKernel, build_problem
from featlm.solver import RefinementConfig, refine_pose, trace_to_jsonl
from featlm.synth import (
    REGIMES,
    ScaleExperimentConfig,
    SceneSpec,
    export_scene,
    generate_scene,
    perturb_pose,
    scale_alignment_experiment,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DEGENERATE = 3


@dataclass
class RunManifest:
    """Everything needed to repeat a run; ``config`` is valid ``--config`` input."""

    command: str
    config: dict[str, Any]
    seed: int | None = None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    version: str = __version__

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        logger.debug("wrote run manifest %s", path)


REFINE_DEFAULTS: dict[str, Any] = {
    "iterations": 20,
    "points": 512,
    "damping": 1e-3,
    "damping_adapt": "multiplicative",
    "kernel": "huber:1.0",
    "irls": True,
    "seed": 0,
    "use_confidence": True,
    "normalize_features": False,
}
SYNTH_DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "height": 64,
    "width": 64,
    "channels": 8,
    "scale": 1.0,
    "confidence": "uniform",
    "outlier_fraction": 0.0,
    "perturb": 0.05,
}
EVAL_DEPTH_DEFAULTS: dict[str, Any] = {"median_scaling": True, "cap": 80.0}
EVAL_ODOM_DEFAULTS: dict[str, Any] = {
    "segments": list(KITTI_SEGMENTS),
    "step": SEGMENT_STEP,
    "align": True,
}
SCALE_DEFAULTS: dict[str, Any] = {
    "runs": 20,
    "seed": 0,
    "regimes": list(REGIMES),
    "rounds": 2,
    "iterations": 20,
    "points": 512,
    "kernel": "huber:1.0",
}


def _load_config(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return data


def _resolve(args: argparse.Namespace, defaults: dict[str, Any]) -> dict[str, Any]:
    """Flag > config file > default, for every key in ``defaults``."""
    config = _load_config(args.config)
    unknown = sorted(set(config) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
    resolved = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        resolved[key] = flag if flag is not None else config.get(key, default)
    return resolved


def _emit(payload: dict[str, Any], output: str | None, pretty: bool) -> None:
    text = json.dumps(payload, indent=2)
    if output is not None:
        Path(output).write_text(text + "\n")
    if pretty:
        for key, value in payload.items():
            if isinstance(value, float):
                print(f"{key:>24}  {value:.6f}")
            elif not isinstance(value, (list, dict)):
                print(f"{key:>24}  {value}")
    elif output is None:
        print(text)


def _write_report_manifests(
    command: str,
    settings: dict[str, Any],
    args: argparse.Namespace,
    inputs: dict[str, str],
    seed: int | None = None,
) -> None:
    """Write ``<stem>.manifest.json`` next to every ``--output`` and ``--csv`` file."""
    outputs = {
        name: path for name, path in (("report", args.output), ("csv", args.csv)) if path
    }
    manifest = RunManifest(command, settings, seed=seed, inputs=inputs, outputs=outputs)
    for target in sorted({Path(p).with_suffix(".manifest.json") for p in outputs.values()}):
        manifest.write(target)


def _parse_init(text: str) -> SE3Pose:
    if text == "identity":
        return SE3Pose.identity()
    path = Path(text)
    if path.is_file():
        traj = read_kitti_poses(path)
        if len(traj) == 0:
            raise PoseFileError(f"{path}: no pose found", line=1)
        return traj[0]
    tokens = text.replace(",", " ").split()
    if len(tokens) != 12:
        raise ConfigError(f"--init must be 'identity', 12 floats or a pose file, got {text!r}")
    try:
        values = np.array([float(t) for t in tokens]).reshape(3, 4)
    except ValueError as exc:
        raise ConfigError(f"--init: {exc}") from exc
    return SE3Pose.from_matrix(values, repair=True)


def cmd_refine(args: argparse.Namespace) -> int:
    settings = _resolve(args, REFINE_DEFAULTS)
    cfg = RefinementConfig(
        iterations=settings["iterations"],
        num_points=settings["points"],
        damping=settings["damping"],
        damping_adapt=settings["damping_adapt"],
        kernel=RobustKernel.parse(settings["kernel"]),
        irls_enabled=settings["irls"],
        seed=settings["seed"],
    )
    inputs = {
        "ref_feature": args.ref_feature,
        "query_feature": args.query_feature,
        "depth": args.depth,
        "intrinsics": args.intrinsics,
    }
    ref_conf = query_conf = None
    if args.ref_confidence is not None:
        inputs["ref_confidence"] = args.ref_confidence
        ref_conf = load_gridmap(args.ref_confidence)
    if args.query_confidence is not None:
        inputs["query_confidence"] = args.query_confidence
        query_conf = load_gridmap(args.query_confidence)
    problem = build_problem(
        load_gridmap(args.ref_feature),
        load_gridmap(args.query_feature),
        load_gridmap(args.depth),
        load_intrinsics(args.intrinsics),
        ref_confidence=ref_conf,
        query_confidence=query_conf,
        num_points=cfg.num_points,
        seed=cfg.seed,
        use_confidence=settings["use_confidence"],
        normalize_features=settings["normalize_features"],
    )
    init = _parse_init(args.init)
    pose, trace = refine_pose(problem, init, cfg)

    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    pose_path, trace_path = out / "pose.txt", out / "trace.jsonl"
    write_kitti_poses([pose], pose_path)
    trace_to_jsonl(trace, trace_path)
    inputs["init"] = args.init
    RunManifest(
        command="refine",
        config=settings,
        seed=cfg.seed,
        inputs=inputs,
        outputs={"pose": str(pose_path), "trace": str(trace_path)},
    ).write(out / "manifest.json")
    print(format_kitti_pose(pose))
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    settings = _resolve(args, SYNTH_DEFAULTS)
    spec = SceneSpec(
        height=settings["height"],
        width=settings["width"],
        channels=settings["channels"],
        scale=settings["scale"],
        confidence=settings["confidence"],
        outlier_fraction=settings["outlier_fraction"],
    )
    scene = generate_scene(spec, settings["seed"])
    out = Path(args.output_dir)
    scene_manifest = export_scene(scene, out)
    rng = np.random.default_rng([settings["seed"], 1])
    init_path = out / "init_pose.txt"
    write_kitti_poses([perturb_pose(scene.gt_pose, settings["perturb"], rng)], init_path)
    gt_path = out / "gt_pose.txt"
    write_kitti_poses([scene.gt_pose], gt_path)
    RunManifest(
        command="synth",
        config=settings,
        seed=settings["seed"],
        outputs={
            "scene": str(scene_manifest),
            "init_pose": str(init_path),
            "gt_pose": str(gt_path),
        },
    ).write(out / "run_manifest.json")
    return EXIT_OK


def _mask(path: str | None) -> NDArray[np.bool_] | None:
    return None if path is None else load_gridmap(path).plane() > 0.5


def cmd_eval_depth(args: argparse.Namespace) -> int:
    settings = _resolve(args, EVAL_DEPTH_DEFAULTS)
    if len(args.pred) != len(args.gt):
        raise ConfigError(f"{len(args.pred)} predictions but {len(args.gt)} ground-truth maps")
    masks = args.mask or [None] * len(args.pred)
    if len(masks) != len(args.pred):
        raise ConfigError("give one --mask per prediction or none")
    frames: list[DepthEvalResult] = []
    for pred_path, gt_path, mask_path in zip(args.pred, args.gt, masks):
        frames.append(
            depth_metrics(
                load_gridmap(pred_path),
                load_gridmap(gt_path),
                _mask(mask_path),
                use_median_scaling=settings["median_scaling"],
                cap=settings["cap"],
            )
        )
    keys = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")
    payload: dict[str, Any] = {
        key: float(np.mean([getattr(f, key) for f in frames])) for key in keys
    }
    scales = [f.scale_factor for f in frames]
    payload["scale_std"] = scale_std(scales)
    payload["rel_scale_std"] = scale_std(scales, normalize=True, reference="median")
    payload["frames"] = [f.to_json() for f in frames]
    _emit(payload, args.output, args.pretty)
    if args.csv is not None:
        rows = ["frame," + ",".join(keys) + ",scale_factor"]
        rows += [
            f"{i}," + ",".join(repr(getattr(f, k)) for k in keys) + f",{f.scale_factor!r}"
            for i, f in enumerate(frames)
        ]
        Path(args.csv).write_text("\n".join(rows) + "\n")
    inputs = {f"pred_{i}": p for i, p in enumerate(args.pred)}
    inputs |= {f"gt_{i}": p for i, p in enumerate(args.gt)}
    inputs |= {f"mask_{i}": p for i, p in enumerate(args.mask or [])}
    _write_report_manifests("eval-depth", settings, args, inputs)
    return EXIT_OK


def cmd_eval_odom(args: argparse.Namespace) -> int:
    settings = _resolve(args, EVAL_ODOM_DEFAULTS)
    est = read_kitti_poses(args.est)
    gt = read_kitti_poses(args.gt)
    if settings["align"]:
        est = apply_similarity(est, umeyama_align_7dof(est, gt))
    result = odometry_errors(est, gt, settings["segments"], step=settings["step"])
    payload = result.to_json()
    payload["ate_rmse"] = absolute_trajectory_error(est, gt, align=False)
    _emit(payload, args.output, args.pretty)
    if args.csv is not None:
        rows = ["first_frame,last_frame,length,t_err,r_err"]
        rows += [
            f"{s.first_frame},{s.last_frame},{s.length!r},{s.t_err!r},{s.r_err!r}"
            for s in result.segments
        ]
        Path(args.csv).write_text("\n".join(rows) + "\n")
    _write_report_manifests("eval-odom", settings, args, {"est": args.est, "gt": args.gt})
    return EXIT_OK


def cmd_scale_experiment(args: argparse.Namespace) -> int:
    settings = _resolve(args, SCALE_DEFAULTS)
    cfg = ScaleExperimentConfig(
        runs=settings["runs"],
        regimes=tuple(settings["regimes"]),
        rounds=settings["rounds"],
        refinement=RefinementConfig(
            iterations=settings["iterations"],
            num_points=settings["points"],
            kernel=RobustKernel.parse(settings["kernel"]),
        ),
    )
    report = scale_alignment_experiment(cfg, settings["seed"])
    payload = report.to_json()
    if args.pretty:
        print(f"{'regime':>12}  {'std(s_depth)':>12}  {'std(s_pose)':>12}  {'mean(s_pose)':>12}")
        for regime, s in report.stats.items():
            row = (s.std_s_depth, s.std_s_pose, s.mean_s_pose)
            print(f"{regime:>12}  " + "  ".join(f"{v:12.4f}" for v in row))
        if args.output is not None:
            Path(args.output).write_text(json.dumps(payload, indent=2) + "\n")
    else:
        _emit(payload, args.output, False)
    if args.csv is not None:
        Path(args.csv).write_text("\n".join(report.csv_rows()) + "\n")
    _write_report_manifests("scale-experiment", settings, args, {}, seed=settings["seed"])
    return EXIT_OK


def _bool_flag(parser: argparse.ArgumentParser, name: str, help: str) -> None:
    parser.add_argument(f"--{name}", action=argparse.BooleanOptionalAction, default=None, help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="featlm", description="Feature-metric pose refinement and evaluation."
    )
    parser.add_argument("--version", action="version", version=f"featlm {__version__}")
    parser.add_argument(
        "--log-level",
        default="WARNING",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="logging threshold (default WARNING)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, handler: Callable[[argparse.Namespace], int], help: str) -> Any:
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON file with settings for this command")
        p.set_defaults(handler=handler)
        return p

    refine = command("refine", cmd_refine, "refine a relative pose on feature maps")
    refine.add_argument("--ref-feature", required=True)
    refine.add_argument("--query-feature", required=True)
    refine.add_argument("--ref-confidence")
    refine.add_argument("--query-confidence")
    refine.add_argument("--depth", required=True, help="reference depth .gmap")
    refine.add_argument("--intrinsics", required=True, help="file with 'fx fy cx cy w h'")
    refine.add_argument("--init", default="identity", help="'identity', 12 floats or pose file")
    refine.add_argument("--output-dir", required=True)
    refine.add_argument("--iterations", type=int)
    refine.add_argument("--points", type=int)
    refine.add_argument("--damping", type=float)
    refine.add_argument("--damping-adapt", choices=["fixed", "multiplicative"])
    refine.add_argument("--kernel", help="kind:scale, e.g. huber:1.0")
    refine.add_argument("--seed", type=int)
    _bool_flag(refine, "irls", "IRLS reweighting (default on)")
    _bool_flag(refine, "use-confidence", "use the confidence maps (default on)")
    _bool_flag(refine, "normalize-features", "L2-normalize feature vectors (default off)")

    synth = command("synth", cmd_synth, "generate and export a synthetic scene")
    synth.add_argument("--output-dir", required=True)
    synth.add_argument("--seed", type=int)
    synth.add_argument("--height", type=int)
    synth.add_argument("--width", type=int)
    synth.add_argument("--channels", type=int)
    synth.add_argument("--scale", type=float)
    synth.add_argument("--confidence", choices=["uniform", "smooth"])
    synth.add_argument("--outlier-fraction", type=float)
    synth.add_argument("--perturb", type=float, help="twist norm of the exported init pose")

    depth = command("eval-depth", cmd_eval_depth, "depth metrics on .gmap predictions")
    depth.add_argument("--pred", nargs="+", required=True)
    depth.add_argument("--gt", nargs="+", required=True)
    depth.add_argument("--mask", nargs="+")
    _bool_flag(depth, "median-scaling", "median-scale predictions (default on)")
    depth.add_argument("--cap", type=float)
    depth.add_argument("--output")
    depth.add_argument("--csv")
    depth.add_argument("--pretty", action="store_true")

    odom = command("eval-odom", cmd_eval_odom, "KITTI-style odometry errors")
    odom.add_argument("--est", required=True)
    odom.add_argument("--gt", required=True)
    odom.add_argument("--segments", nargs="+", type=float)
    odom.add_argument("--step", type=int)
    _bool_flag(odom, "align", "7DoF-align the estimate first (default on)")
    odom.add_argument("--output")
    odom.add_argument("--csv")
    odom.add_argument("--pretty", action="store_true")

    scale = command("scale-experiment", cmd_scale_experiment, "toy scale-alignment experiment")
    scale.add_argument("--runs", type=int)
    scale.add_argument("--seed", type=int)
    scale.add_argument("--regimes", nargs="+", choices=list(REGIMES))
    scale.add_argument("--rounds", type=int)
    scale.add_argument("--iterations", type=int)
    scale.add_argument("--points", type=int)
    scale.add_argument("--kernel")
    scale.add_argument("--output")
    scale.add_argument("--csv")
    scale.add_argument("--pretty", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        code: int = args.handler(args)
        return code
    except (DegenerateProblemError, SingularHessianError) as exc:
        print(f"featlm: degenerate problem: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (FeatLMError, OSError, ValueError) as exc:
        print(f"featlm: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


__all__ = ["RunManifest", "build_parser", "main"]
