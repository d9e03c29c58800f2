import json
import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

import featlm
from featlm.cli import EXIT_DEGENERATE, EXIT_INPUT, EXIT_OK, main
from featlm.lie import rotation_angle_between
from featlm.types import GridMap, SE3Pose, Trajectory


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--output-dir", str(out), "--seed", "3"]) == EXIT_OK
    return out


def refine_args(scene_dir, out, *extra):
    return [
        "refine",
        "--ref-feature", str(scene_dir / "ref_feature.gmap"),
        "--query-feature", str(scene_dir / "query_feature.gmap"),
        "--depth", str(scene_dir / "ref_depth.gmap"),
        "--intrinsics", str(scene_dir / "intrinsics.txt"),
        "--output-dir", str(out),
        *extra,
    ]  # fmt: skip


def test_synth_writes_the_bundle(synth_dir):
    for name in ("manifest.json", "init_pose.txt", "gt_pose.txt", "run_manifest.json"):
        assert (synth_dir / name).is_file()
    manifest = json.loads((synth_dir / "run_manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 3
    assert manifest["config"]["perturb"] == 0.05


def test_refine_recovers_the_exported_ground_truth(synth_dir, tmp_path, capsys):
    code = main(refine_args(synth_dir, tmp_path, "--init", str(synth_dir / "init_pose.txt")))
    assert code == EXIT_OK
    printed = capsys.readouterr().out.strip()
    assert len(printed.split()) == 12

    pose = featlm.read_kitti_poses(tmp_path / "pose.txt")[0]
    gt = featlm.read_kitti_poses(synth_dir / "gt_pose.txt")[0]
    baseline = float(np.linalg.norm(gt.translation))
    assert float(np.linalg.norm(pose.translation - gt.translation)) < 0.01 * baseline
    assert math.degrees(rotation_angle_between(pose, gt)) < 0.2

    lines = (tmp_path / "trace.jsonl").read_text().splitlines()
    assert 0 < len(lines) <= 20
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "refine"
    assert manifest["config"]["kernel"] == "huber:1.0"
    assert manifest["outputs"]["pose"].endswith("pose.txt")


def test_refine_same_view_stays_at_identity(tmp_path, identity_scene):
    scene_dir = tmp_path / "scene"
    featlm.export_scene(identity_scene, scene_dir)
    code = main(refine_args(scene_dir, tmp_path / "out", "--init", "identity"))
    assert code == EXIT_OK
    pose = featlm.read_kitti_poses(tmp_path / "out" / "pose.txt")[0]
    assert pose.allclose(SE3Pose.identity(), atol=1e-6)


def test_config_file_and_flag_precedence(synth_dir, tmp_path):
    config = tmp_path / "refine.json"
    config.write_text(json.dumps({"iterations": 1, "kernel": "cauchy:0.5"}))
    assert main(refine_args(synth_dir, tmp_path / "a", "--config", str(config))) == EXIT_OK
    a = json.loads((tmp_path / "a" / "manifest.json").read_text())["config"]
    assert a["iterations"] == 1 and a["kernel"] == "cauchy:0.5"
    assert a["points"] == 512

    args = refine_args(synth_dir, tmp_path / "b", "--config", str(config), "--iterations", "2")
    assert main(args) == EXIT_OK
    b = json.loads((tmp_path / "b" / "manifest.json").read_text())["config"]
    assert b["iterations"] == 2 and b["kernel"] == "cauchy:0.5"


def test_unknown_config_key_is_an_input_error(synth_dir, tmp_path, capsys):
    config = tmp_path / "refine.json"
    config.write_text(json.dumps({"lambda": 0.1}))
    code = main(refine_args(synth_dir, tmp_path, "--config", str(config)))
    assert code == EXIT_INPUT
    assert "unknown config keys" in capsys.readouterr().err


def test_missing_depth_file(synth_dir, tmp_path, capsys):
    args = refine_args(synth_dir, tmp_path)
    missing = str(tmp_path / "nope.gmap")
    args[args.index("--depth") + 1] = missing
    assert main(args) == EXIT_INPUT
    err = capsys.readouterr().err
    assert err.startswith("featlm: error:")
    assert "nope.gmap" in err


def test_pose_behind_the_camera_is_degenerate(synth_dir, tmp_path, capsys):
    init = "1 0 0 0 0 1 0 0 0 0 1 -100"
    assert main(refine_args(synth_dir, tmp_path, "--init", init)) == EXIT_DEGENERATE
    assert "degenerate problem" in capsys.readouterr().err


def test_malformed_init(synth_dir, tmp_path):
    assert main(refine_args(synth_dir, tmp_path, "--init", "1 2 3")) == EXIT_INPUT


def test_eval_depth_median_scaling(tmp_path, capsys):
    gt = np.random.default_rng(0).uniform(2.0, 40.0, (16, 20))
    featlm.save_gridmap(GridMap(gt), tmp_path / "gt.gmap")
    featlm.save_gridmap(GridMap(2.0 * gt), tmp_path / "pred.gmap")
    pred, gt_path = str(tmp_path / "pred.gmap"), str(tmp_path / "gt.gmap")
    common = ["eval-depth", "--pred", pred, "--gt", gt_path]

    assert main([*common, "--csv", str(tmp_path / "frames.csv")]) == EXIT_OK
    scaled = json.loads(capsys.readouterr().out)
    assert scaled["abs_rel"] < 1e-6
    assert scaled["frames"][0]["scale_factor"] == pytest.approx(0.5)
    assert scaled["scale_std"] == 0.0
    assert len((tmp_path / "frames.csv").read_text().splitlines()) == 2
    manifest = json.loads((tmp_path / "frames.manifest.json").read_text())
    assert manifest["command"] == "eval-depth"
    assert manifest["config"] == {"median_scaling": True, "cap": 80.0}
    assert manifest["inputs"] == {"pred_0": pred, "gt_0": gt_path}
    assert manifest["outputs"] == {"csv": str(tmp_path / "frames.csv")}

    assert main([*common, "--no-median-scaling"]) == EXIT_OK
    raw = json.loads(capsys.readouterr().out)
    assert raw["abs_rel"] == pytest.approx(1.0, rel=1e-6)
    assert raw["delta3"] == 0.0


def test_eval_depth_counts_must_match(tmp_path):
    featlm.save_gridmap(GridMap(np.ones((4, 4))), tmp_path / "a.gmap")
    path = str(tmp_path / "a.gmap")
    assert main(["eval-depth", "--pred", path, path, "--gt", path]) == EXIT_INPUT


def arc(n=1001):
    """Poses along a 200 m radius arc, roughly 1 m apart, with a slow climb."""
    angles = 0.005 * np.arange(n)
    poses = []
    for i, a in enumerate(angles):
        position = [200.0 * math.cos(a), 200.0 * math.sin(a), 0.01 * i]
        poses.append(SE3Pose(Rotation.from_rotvec([0.0, 0.0, a]).as_matrix(), position))
    return Trajectory(tuple(poses))


def test_eval_odom_identical_trajectories(tmp_path):
    path = tmp_path / "gt.txt"
    featlm.write_kitti_poses(arc(), path)
    out = tmp_path / "odom.json"
    code = main(["eval-odom", "--est", str(path), "--gt", str(path), "--output", str(out)])
    assert code == EXIT_OK
    payload = json.loads(out.read_text())
    assert payload["t_err_pct"] == pytest.approx(0.0, abs=1e-6)
    assert payload["r_err_deg_per_100m"] == pytest.approx(0.0, abs=1e-6)
    assert payload["ate_rmse"] == pytest.approx(0.0, abs=1e-6)
    assert payload["segments"] > 0
    manifest = json.loads((tmp_path / "odom.manifest.json").read_text())
    assert manifest["command"] == "eval-odom"
    assert manifest["config"]["align"] is True
    assert manifest["inputs"] == {"est": str(path), "gt": str(path)}
    assert manifest["outputs"] == {"report": str(out)}


def test_eval_odom_collinear_alignment_fails(tmp_path, capsys):
    line = Trajectory(tuple(SE3Pose(np.eye(3), [float(i), 0.0, 0.0]) for i in range(201)))
    path = tmp_path / "line.txt"
    featlm.write_kitti_poses(line, path)
    common = ["eval-odom", "--est", str(path), "--gt", str(path), "--segments", "100"]
    assert main(common) == EXIT_INPUT
    capsys.readouterr()
    assert main([*common, "--no-align", "--csv", str(tmp_path / "seg.csv")]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["t_err_pct"] == 0.0
    assert (tmp_path / "seg.csv").read_text().startswith("first_frame,")
    assert json.loads((tmp_path / "seg.manifest.json").read_text())["config"]["align"] is False


def test_scale_experiment_is_reproducible(tmp_path):
    common = [
        "scale-experiment", "--runs", "2", "--regimes", "free", "refined",
        "--iterations", "5", "--points", "64", "--seed", "9",
    ]  # fmt: skip
    for name in ("a", "b"):
        out = tmp_path / f"{name}.json"
        assert main([*common, "--output", str(out), "--csv", str(tmp_path / f"{name}.csv")]) == 0
    assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
    manifest = json.loads((tmp_path / "a.manifest.json").read_text())
    assert manifest["command"] == "scale-experiment"
    assert manifest["config"]["regimes"] == ["free", "refined"]
    assert manifest["outputs"] == {
        "report": str(tmp_path / "a.json"),
        "csv": str(tmp_path / "a.csv"),
    }


def test_csv_only_runs_still_get_a_manifest(tmp_path, capsys):
    common = [
        "scale-experiment", "--runs", "1", "--regimes", "free",
        "--iterations", "3", "--points", "32", "--seed", "4",
    ]  # fmt: skip
    assert main([*common, "--csv", str(tmp_path / "runs.csv")]) == EXIT_OK
    capsys.readouterr()
    manifest = json.loads((tmp_path / "runs.manifest.json").read_text())
    assert manifest["seed"] == 4
    assert manifest["outputs"] == {"csv": str(tmp_path / "runs.csv")}
    assert not (tmp_path / "report.manifest.json").exists()


def test_stdout_only_runs_write_no_manifest(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    featlm.save_gridmap(GridMap(np.full((4, 4), 5.0)), tmp_path / "d.gmap")
    path = str(tmp_path / "d.gmap")
    assert main(["eval-depth", "--pred", path, "--gt", path]) == EXIT_OK
    capsys.readouterr()
    assert not list(tmp_path.glob("*.manifest.json"))


def test_version(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["--version"])
    assert excinfo.value.code == 0
    assert featlm.__version__ in capsys.readouterr().out
