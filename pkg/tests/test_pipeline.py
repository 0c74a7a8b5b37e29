import json

import numpy as np
import pytest

from scenediff import cli, synth
from scenediff.exceptions import EmptyScene, InvalidRotation, ParseError, StageError
from scenediff.geom import voxelize
from scenediff.pipeline import (
    ChangeDetector,
    PipelineConfig,
    RunReport,
    load_poses,
    read_report,
    report_json,
    run_scene,
    write_poses,
    write_report,
)
from scenediff.render import CameraPose


def test_pose_round_trip(tmp_path):
    poses = synth.ring_poses((4.0, 4.0, 2.5), 12)
    path = tmp_path / "poses.txt"
    write_poses(path, poses)
    back = load_poses(path)
    assert len(back) == 12
    for a, b in zip(poses, back):
        assert np.abs(a.rotation - b.rotation).max() < 1e-12
        assert np.abs(a.translation - b.translation).max() < 1e-12
        assert (a.fx, a.cy, a.width, a.height) == (b.fx, b.cy, b.width, b.height)


def test_identity_pose(tmp_path):
    path = tmp_path / "p.txt"
    path.write_text("100 100 50 40 100 80\n1 0 0 0\n0 1 0 0\n0 0 1 0\n")
    (pose,) = load_poses(path)
    assert np.array_equal(pose.rotation, np.eye(3))
    assert isinstance(pose, CameraPose)


def test_pose_errors_name_line(tmp_path):
    path = tmp_path / "p.txt"
    path.write_text("100 100 50 40 100 80\n1 0 0 0\n0 1 x 0\n0 0 1 0\n")
    with pytest.raises(ParseError) as err:
        load_poses(path)
    assert err.value.line == 3
    path.write_text("100 100 50 40 100 80\n1 0 0 0\n0 1 0\n0 0 1 0\n")
    with pytest.raises(ParseError, match="line 3"):
        load_poses(path)
    path.write_text("100 100 50 40 100 80\n2 0 0 0\n0 1 0 0\n0 0 1 0\n")
    with pytest.raises(InvalidRotation):
        load_poses(path)


def test_config_file(tmp_path):
    path = tmp_path / "cfg.toml"
    path.write_text("k = 2\n[optimize]\nlam = 1.5\n")
    cfg = PipelineConfig.from_file(path)
    assert (cfg.k, cfg.lam, cfg.tau) == (2, 1.5, 0.05)
    path.write_text("bogus = 1\n")
    with pytest.raises(ParseError):
        PipelineConfig.from_file(path)
    with pytest.raises(ValueError):
        PipelineConfig(mode="nope")
    with pytest.raises(ValueError):
        PipelineConfig(tau=0.0)


def small_report(objects=()):
    return RunReport(config={"tau": 0.05, "lam": 1 / 3}, timings={"total": 1.0},
                     hypotheses=[], objects=list(objects), evaluation=None)


def test_write_report(tmp_path):
    rep = small_report([{"id": 0, "voxel_count": 3}])
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    write_report(rep, a)
    write_report(rep, b)
    assert a.read_bytes() == b.read_bytes()
    back = read_report(a)
    assert back["objects"] == [{"id": 0, "voxel_count": 3}]
    assert back["config"]["lam"] == 0.333333
    assert "timings" not in back


def test_empty_objects_report(tmp_path):
    path = tmp_path / "r.json"
    write_report(small_report(), path)
    assert json.loads(path.read_text())["objects"] == []


def test_static_scene_reports_nothing(scene_run):
    result, _, _, _ = scene_run("static")
    assert result.objects == []
    assert result.hypotheses == []
    assert result.report.evaluation["voxel_recall"] is None


def test_before_optim_is_detect_output(scene_run):
    result, _, _, _ = scene_run("single_move", "before-optim")
    assert np.array_equal(result.changed_points, result.changes.points)
    assert voxelize(result.changed_points, 0.1) == voxelize(result.changes.points, 0.1)
    assert result.hypotheses == []


def test_full_recall_not_below_before_optim(scene_run):
    full = scene_run("single_move")[0].eval_report.voxel_recall
    before = scene_run("single_move", "before-optim")[0].eval_report.voxel_recall
    assert before <= full


def test_timings_cover_total(scene_run):
    timings = scene_run("single_move")[0].report.timings
    stages = sum(v for k, v in timings.items() if k != "total")
    assert all(v >= 0 for v in timings.values())
    assert abs(stages - timings["total"]) <= 0.05 * timings["total"]


def test_taneja_mode_runs(scene_run):
    result, _, _, _ = scene_run("single_move", "taneja-baseline")
    assert result.hypotheses == []
    assert result.eval_report.voxel_recall is not None


def test_stage_errors_name_the_stage(scene_data, monkeypatch):
    from scenediff import pipeline

    _, (ref, res, poses, _) = scene_data("single_move")

    def boom(*a, **k):
        raise RuntimeError("no descriptors")

    monkeypatch.setattr(pipeline.features, "compute_fpfh", boom)
    with pytest.raises(StageError) as err:
        run_scene(ref, res, poses[:2], PipelineConfig())
    assert err.value.stage == "features"
    assert "no descriptors" in str(err.value)


def test_empty_inputs(scene_data):
    _, (ref, res, poses, _) = scene_data("single_move")
    with pytest.raises(EmptyScene):
        run_scene(ref, res, [], PipelineConfig())


def test_cli_synth_and_run(tmp_path, capsys):
    scene = tmp_path / "scene"
    assert cli.main(["synth", "single_move", str(scene), "--viewpoints", "4"]) == 0
    for name in ("reference.ply", "rescan.ply", "poses.txt", "gt/gt_changed.ply"):
        assert (scene / name).exists()
    cfg = tmp_path / "cfg.toml"
    cfg.write_text('mode = "full"\ntau = 0.05\n')
    out = tmp_path / "out"
    code = cli.main(["--reference", str(scene / "reference.ply"), "--rescan", str(scene / "rescan.ply"),
                     "--poses", str(scene / "poses.txt"), "--gt", str(scene / "gt"),
                     "--config", str(cfg), "--mode", "before-optim", "--out-dir", str(out)])
    assert code == 0
    text = capsys.readouterr().out
    assert "before-optim" in text and "Recall%" in text
    report = read_report(out / "report.json")
    assert report["config"]["mode"] == "before-optim"
    assert (out / "changed.ply").exists() and (out / "timings.json").exists()


def test_cli_reports_errors(tmp_path, capsys):
    code = cli.main(["--reference", str(tmp_path / "missing.ply"), "--rescan", "x", "--poses", "y"])
    assert code == 2
    assert "missing.ply" in capsys.readouterr().err


def test_format_table_handles_missing():
    rep = small_report()
    rep.config["mode"] = "full"
    rep.evaluation = {"mean_iou": None, "voxel_recall": 0.5, "accuracy": None, "completeness": None,
                      "transform_recall_10": None, "transform_recall_20": None, "mre_deg": None,
                      "mte_m": None, "discovered_count": 0, "gt_object_count": 0}
    table = cli.format_table(rep)
    assert "n/a" in table and "50.00" in table


def test_change_detector_estimator(scene_data):
    _, (ref, res, poses, gt) = scene_data("single_move")
    est = ChangeDetector(mode="before-optim").fit((ref, res, poses[:4]))
    assert len(est.objects_) >= 1
    labels = est.predict(est.objects_[0].points[:5])
    assert np.all(labels == est.objects_[0].id)
    assert est.predict([[100.0, 100.0, 100.0]]).tolist() == [-1]
    assert est.get_params()["mode"] == "before-optim"
    assert report_json(est.report_) == report_json(est.report_)
