import json
import shutil

import numpy as np
import pytest

from tcidm import fileio
from tcidm.cli import main
from tcidm.errors import ManifestError
from tcidm.heads import Mlp, gripper_spec
from tcidm.oracle import evaluate, generate, load_truth, random_scene, write_bundle
from tcidm.pipeline import StageCache, load_manifest, run_pipeline


def make_bundle(path, seed=0, with_head=True, **kw):
    bundle, truth = generate(random_scene(seed, **kw))
    manifest = write_bundle(bundle, truth, path)
    if with_head:
        Mlp.init(gripper_spec(len(bundle.features[0].values), (8,)), seed=1).save(path / "head.json")
        d = json.loads(manifest.read_text())
        d["gripper_weights"] = "head.json"
        fileio.write_json(manifest, d)
    return manifest, truth


@pytest.fixture
def scene(tmp_path):
    return make_bundle(tmp_path / "scene")


def test_noise_free_round_trip(scene, tmp_path):
    manifest, truth = scene
    res = run_pipeline(load_manifest(manifest), tmp_path / "out")
    assert res.exit_code == 0
    m = evaluate(fileio.read_actions(res.actions_path), truth)
    assert max(m.step_translation_m) < 1e-6 and max(m.step_rotation_deg) < np.degrees(1e-6)
    assert m.final_translation_m < 1e-6
    for name in ("scale_shift.json", "metric_poses.json", "scores.csv", "gripper.csv",
                 "trajectory_report.json", "stage_report.json", "actions.jsonl"):
        assert (tmp_path / "out" / name).is_file()
    stages = [s["name"] for s in res.report.stages]
    assert stages == ["align", "lift", "mask", "filter", "recover", "predict", "merge"]
    assert all(a.gripper is not None for a in res.actions)


def test_missing_tracks_file_fails_before_any_stage(scene, tmp_path):
    manifest, _ = scene
    (manifest.parent / "tracks.csv").unlink()
    with pytest.raises(ManifestError, match="tracks.csv"):
        load_manifest(manifest)
    assert main(["run", str(manifest), "--out", str(tmp_path / "out")]) == 2
    assert not (tmp_path / "out").exists()


def test_manifest_missing_key(scene):
    manifest, _ = scene
    d = json.loads(manifest.read_text())
    del d["anchor_pose"]
    fileio.write_json(manifest, d)
    with pytest.raises(ManifestError, match="anchor_pose"):
        load_manifest(manifest)


def test_manifest_values_override_flags(scene):
    manifest, _ = scene
    d = json.loads(manifest.read_text())
    d["stages"] = {"k": 6, "smoothing_window": 3}
    fileio.write_json(manifest, d)
    m = load_manifest(manifest, {"k": 12, "gap_policy": "fail-fast"})
    assert (m.flags.k, m.flags.smoothing_window, m.flags.gap_policy) == (6, 3, "fail-fast")


def test_invalid_flag_rejected(scene):
    manifest, _ = scene
    with pytest.raises(ManifestError):
        load_manifest(manifest, {"k": 2})


def test_occlusion_gives_one_interpolation_warning(tmp_path):
    manifest, truth = make_bundle(tmp_path / "s", seed=3, occlusion=(10, 12))
    res = run_pipeline(load_manifest(manifest), tmp_path / "out")
    assert res.exit_code == 0
    gaps = [w for w in res.report.warnings if "interpolated" in w]
    assert gaps == ["interpolated motion across frames 9..12"]
    assert res.trajectory.gaps == [(9, 12)]
    assert len(res.actions) == 30


def test_stage_failure_is_named_and_partial_outputs_kept(scene, tmp_path):
    manifest, _ = scene
    m = load_manifest(manifest, {"k": 50})
    res = run_pipeline(m, tmp_path / "out")
    assert res.exit_code == 1
    assert res.report.error.startswith("[filter] TooFewTracks")
    assert (tmp_path / "out" / "scale_shift.json").is_file()
    assert not (tmp_path / "out" / "actions.jsonl").exists()
    assert main(["run", str(manifest), "--out", str(tmp_path / "cli"), "--k", "50"]) == 1


def test_fail_fast_gap_policy(tmp_path):
    manifest, _ = make_bundle(tmp_path / "s", seed=3, occlusion=(10, 12))
    res = run_pipeline(load_manifest(manifest, {"gap_policy": "fail-fast"}))
    assert res.report.error.startswith("[recover] InsufficientVisibility")


def test_safety_warnings_do_not_fail_the_run(scene):
    manifest, _ = scene
    res = run_pipeline(load_manifest(manifest, {"max_step_m": 1e-4}))
    assert res.exit_code == 0
    assert any(w.startswith("safety:") for w in res.report.warnings)


def test_mask_flicker_warning(tmp_path):
    manifest, _ = make_bundle(tmp_path / "s", seed=4, with_head=False)
    empty = manifest.parent / "masks" / "mask_0005.pgm"
    fileio.write_pgm(empty, np.zeros_like(fileio.read_pgm(empty), dtype=bool))
    res = run_pipeline(load_manifest(manifest))
    assert any("mask flicker" in w for w in res.report.warnings)
    assert res.exit_code == 0


def test_gripper_threshold_binarizes(scene):
    manifest, _ = scene
    res = run_pipeline(load_manifest(manifest, {"gripper_threshold": 0.5}))
    assert {a.gripper for a in res.actions} <= {0.0, 1.0}


def test_no_head_means_no_gripper(tmp_path):
    manifest, _ = make_bundle(tmp_path / "s", seed=5, with_head=False)
    res = run_pipeline(load_manifest(manifest))
    assert all(a.gripper is None for a in res.actions)
    assert [s["name"] for s in res.report.stages][-1] == "recover"


def test_pixel_tracks_through_depth(tmp_path):
    # 2D tracks lifted through metric depth reproduce the motion to raster precision
    manifest, truth = make_bundle(tmp_path / "s", seed=6, with_head=False, frames=11,
                                  camera_moves=False)
    d = json.loads(manifest.read_text())
    d["tracks_frame"] = "pixels"
    fileio.write_json(manifest, d)
    res = run_pipeline(load_manifest(manifest))
    assert res.exit_code == 0
    assert evaluate(res.actions, truth).final_translation_m < 0.02


def test_stage_cache_hits(scene, tmp_path):
    manifest, _ = scene
    m = load_manifest(manifest)
    cache = StageCache(tmp_path / "cache")
    a = run_pipeline(m, tmp_path / "a", cache=cache)
    b = run_pipeline(m, tmp_path / "b", cache=cache)
    assert not any(s["cached"] for s in a.report.stages)
    assert {s["name"] for s in b.report.stages if s["cached"]} >= {"align", "filter"}
    assert a.report.digests() == b.report.digests()
    assert (tmp_path / "a/actions.jsonl").read_bytes() == (tmp_path / "b/actions.jsonl").read_bytes()


def test_cache_env(scene, tmp_path, monkeypatch):
    monkeypatch.setenv("TCIDM_CACHE_DIR", str(tmp_path / "c"))
    run_pipeline(load_manifest(scene[0]))
    assert any((tmp_path / "c").glob("align-*.json"))


# --- CLI ---------------------------------------------------------------------------------

def test_cli_simulate_run_evaluate_export(tmp_path, capsys):
    sim = tmp_path / "sim"
    assert main(["simulate", "--out", str(sim), "--seed", "2", "--frames", "11",
                 "--outliers", "1", "--outlier-speed", "0.01", "--background", "3"]) == 0
    assert main(["run", str(sim / "manifest.json"), "--out", str(tmp_path / "out")]) == 0
    assert main(["evaluate", "--actions", str(tmp_path / "out/actions.jsonl"),
                 "--truth", str(sim / "truth.json"), "--out", str(tmp_path / "m.json")]) == 0
    assert json.loads((tmp_path / "m.json").read_text())["pass"] is True
    capsys.readouterr()
    assert main(["export", "--actions", str(tmp_path / "out/actions.jsonl"), "--format", "csv",
                 "--out", str(tmp_path / "a.csv")]) == 0
    assert json.loads(capsys.readouterr().out)["rows"] == 10
    assert len((tmp_path / "a.csv").read_text().splitlines()) == 11
    assert main(["export", "--actions", str(tmp_path / "out/actions.jsonl"), "--format", "xml",
                 "--out", str(tmp_path / "a.xml")]) == 1


def test_cli_evaluate_fail_exit_code(tmp_path):
    sim = tmp_path / "sim"
    main(["simulate", "--out", str(sim), "--seed", "2", "--frames", "6"])
    truth = load_truth(sim / "truth.json")
    from tcidm.poses import TcpAction
    from tcidm.geometry import RigidTransform
    bad = [TcpAction(i + 1, RigidTransform.translation(0.05, 0, 0)) for i in range(5)]
    fileio.write_actions(tmp_path / "bad.jsonl", bad)
    assert len(truth.steps()) == 5
    assert main(["evaluate", "--actions", str(tmp_path / "bad.jsonl"),
                 "--truth", str(sim / "truth.json")]) == 4


def test_cli_stage_by_stage(tmp_path):
    sim = tmp_path / "sim"
    main(["simulate", "--out", str(sim), "--seed", "7", "--frames", "9"])
    rel = sorted(str(p) for p in (sim / "depth").glob("rel_*.pfm"))
    anchor = json.dumps(json.loads((sim / "manifest.json").read_text())["anchor_pose"])
    assert main(["align-depth", "--relative", rel[0], "--metric-ref",
                 str(sim / "depth/metric_ref_0000.pfm"), "--poses", str(sim / "camera_poses.json"),
                 "--anchor", anchor, "--out-poses", str(tmp_path / "poses.json"),
                 "--apply", *rel[:2], "--out-dir", str(tmp_path / "metric")]) == 0
    assert len(list((tmp_path / "metric").glob("*.pfm"))) == 2
    assert main(["lift-tracks", "--tracks", str(sim / "tracks.csv"), "--poses",
                 str(tmp_path / "poses.json"), "--out", str(tmp_path / "world.csv")]) == 0
    masks = sorted(str(p) for p in (sim / "masks").glob("*.pgm"))
    assert main(["filter-rigid", "--tracks", str(tmp_path / "world.csv"), "--masks", *masks,
                 "--k", "10", "--out", str(tmp_path / "sel.csv"),
                 "--scores", str(tmp_path / "scores.csv")]) == 0
    assert len(fileio.read_tracks(tmp_path / "sel.csv")) == 10
    assert main(["recover-poses", "--tracks", str(tmp_path / "sel.csv"), "--out",
                 str(tmp_path / "a.jsonl"), "--report", str(tmp_path / "r.json")]) == 0
    truth = load_truth(sim / "truth.json")
    assert evaluate(fileio.read_actions(tmp_path / "a.jsonl"), truth).final_translation_m < 1e-6
    assert main(["recover-poses", "--tracks", str(tmp_path / "sel.csv"), "--out",
                 str(tmp_path / "b.jsonl"), "--max-step-m", "1e-5", "--strict-safety"]) == 3


def test_cli_train_and_predict(tmp_path):
    sim = tmp_path / "sim"
    main(["simulate", "--out", str(sim), "--seed", "8", "--frames", "20"])
    assert main(["train-head", "--features", str(sim / "features.csv"), "--targets",
                 str(sim / "apertures.csv"), "--hidden", "16", "--epochs", "300",
                 "--out", str(tmp_path / "head.json")]) == 0
    assert main(["predict-state", "--weights", str(tmp_path / "head.json"), "--features",
                 str(sim / "features.csv"), "--out", str(tmp_path / "g.csv")]) == 0
    rows = (tmp_path / "g.csv").read_text().splitlines()
    assert rows[0] == "frame,y0" and len(rows) == 21
    pred = np.array([float(r.split(",")[1]) for r in rows[1:]])
    truth = np.array(load_truth(sim / "truth.json").apertures)
    assert np.max(np.abs(pred - truth)) < 0.1


def test_cli_runs_are_independent_of_cwd(scene, tmp_path, monkeypatch):
    manifest, _ = scene
    monkeypatch.chdir(tmp_path)
    moved = tmp_path / "elsewhere"
    shutil.copytree(manifest.parent, moved)
    assert main(["run", str(moved / "manifest.json"), "--out", "out"]) == 0
    assert (tmp_path / "out/actions.jsonl").is_file()
