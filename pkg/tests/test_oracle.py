import numpy as np
import pytest

from tcidm.depth import fit_scale_shift
from tcidm.errors import HorizonMismatch, SpecInvalid
from tcidm.geometry import RigidTransform, compose, rot_z
from tcidm.oracle import (BACKGROUND, OUTLIER, TOOL, GroundTruth, MotionSegment, SceneSpec,
                          evaluate, generate, load_truth, random_scene, write_bundle)
from tcidm.pipeline import run_in_memory
from tcidm.poses import TcpAction


def true_actions(truth, absolute=True):
    steps = truth.steps()
    return [TcpAction(i + 1, s, truth.tool_poses[i + 1] if absolute else None)
            for i, s in enumerate(steps)]


def test_static_tool_gives_identity_steps():
    bundle, truth = generate(SceneSpec(seed=3, frames=6))
    acts, _, _, _ = run_in_memory(bundle)
    for a in acts:
        np.testing.assert_allclose(a.transform.matrix(), np.eye(4), atol=1e-9)
    assert evaluate(acts, truth).final_translation_m < 1e-9


def test_scale_shift_recovered_noise_free():
    bundle, truth = generate(random_scene(5))
    p = fit_scale_shift(bundle.relative_depths[0], bundle.metric_reference)
    assert abs(p.s - truth.s) < 1e-9 and abs(p.d - truth.d) < 1e-9


def test_relative_poses_are_scaled_copies():
    bundle, truth = generate(random_scene(6))
    base = truth.camera_poses[0].inverse()
    for rel, cam in zip(bundle.relative_poses, truth.camera_poses):
        exact = compose(base, cam)
        np.testing.assert_allclose(rel.R, exact.R, atol=1e-12)
        np.testing.assert_allclose(rel.t * truth.s, exact.t, atol=1e-12)


def test_tracks_project_to_their_pixels():
    bundle, _ = generate(random_scene(7, frames=5))
    K = bundle.intrinsics
    for tr in bundle.tracks:
        v = tr.visible
        np.testing.assert_allclose(K.project(tr.positions[v]), tr.pixels[v], atol=1e-9)


def test_outliers_never_selected():
    bundle, truth = generate(random_scene(8, n_outliers=2, n_background=3, outlier_speed=0.01))
    acts, _, _, scores = run_in_memory(bundle)
    assert sum(v == OUTLIER for v in truth.labels.values()) == 2
    assert sum(v == BACKGROUND for v in truth.labels.values()) == 3
    by_id = {s.track_id: s.mean_residual for s in scores}
    tool_worst = max(r for i, r in by_id.items() if truth.labels[i] == TOOL)
    for i, lab in truth.labels.items():
        if lab == OUTLIER and i in by_id:
            assert by_id[i] > tool_worst
    assert evaluate(acts, truth).final_translation_m < 1e-6


def test_background_tracks_sit_off_the_mask():
    bundle, truth = generate(random_scene(9, n_background=5))
    m0 = bundle.masks[0].tool
    for tr in bundle.tracks:
        if truth.labels[tr.track_id] == BACKGROUND:
            u, v = np.floor(tr.pixels[0] + 0.5).astype(int)
            assert not m0[v, u]


def test_seed_determinism():
    a, ta = generate(random_scene(11, track_sigma=0.001, depth_sigma=0.001, drop_prob=0.1))
    b, tb = generate(random_scene(11, track_sigma=0.001, depth_sigma=0.001, drop_prob=0.1))
    for x, y in zip(a.relative_depths, b.relative_depths):
        np.testing.assert_array_equal(x.values, y.values)
    for x, y in zip(a.tracks, b.tracks):
        np.testing.assert_array_equal(x.positions, y.positions)
        np.testing.assert_array_equal(x.visible, y.visible)
    assert ta.to_json() == tb.to_json()
    _, tc = generate(random_scene(12))
    assert tc.to_json() != ta.to_json()


def test_occlusion_window_hides_tool_tracks():
    bundle, truth = generate(random_scene(13, occlusion=(4, 6)))
    for tr in bundle.tracks:
        if truth.labels[tr.track_id] == TOOL:
            assert not tr.visible[4:6].any()


def test_features_encode_aperture_linearly():
    bundle, truth = generate(random_scene(14, frames=40))
    X = np.array([f.values for f in bundle.features])
    A = np.c_[X, np.ones(len(X))]
    coef, *_ = np.linalg.lstsq(A, truth.apertures, rcond=None)
    assert np.max(np.abs(A @ coef - truth.apertures)) < 0.05
    assert truth.apertures[0] > 0.9 and truth.apertures[-1] < 0.1


def test_spec_validation():
    with pytest.raises(SpecInvalid):
        generate(SceneSpec(frames=1))
    with pytest.raises(SpecInvalid):
        generate(SceneSpec(frames=3, tool_motion=(MotionSegment(5, (0.01, 0, 0)),)))
    with pytest.raises(SpecInvalid):
        generate(SceneSpec(track_sigma=-1))


# --- evaluate ------------------------------------------------------------------------

def test_evaluate_truth_passes_with_zero_error():
    _, truth = generate(random_scene(15))
    m = evaluate(true_actions(truth), truth)
    assert m.passed
    assert m.final_translation_m < 1e-12 and max(m.step_translation_m) < 1e-12


def test_evaluate_translation_offset_fails():
    _, truth = generate(random_scene(16, frames=4))
    acts = true_actions(truth)
    last = acts[-1]
    acts[-1] = TcpAction(last.frame, last.transform,
                         compose(RigidTransform.translation(0.03, 0, 0), last.absolute_pose))
    m = evaluate(acts, truth)
    assert m.final_translation_m == pytest.approx(0.03)
    assert not m.translation_pass and m.rotation_pass and not m.passed


def test_evaluate_rotation_miss_fails_rotation_only():
    _, truth = generate(random_scene(17, frames=4))
    acts = true_actions(truth)
    last = acts[-1]
    g = last.absolute_pose
    acts[-1] = TcpAction(last.frame, last.transform, RigidTransform(g.R @ rot_z(12), g.t))
    m = evaluate(acts, truth)
    assert m.final_rotation_deg == pytest.approx(12.0)
    assert m.translation_pass and not m.rotation_pass


def test_evaluate_chains_steps_without_absolute_poses():
    _, truth = generate(random_scene(18))
    assert evaluate(true_actions(truth, absolute=False), truth).final_translation_m < 1e-12


def test_evaluate_horizon_mismatch():
    _, truth = generate(random_scene(19, frames=5))
    with pytest.raises(HorizonMismatch):
        evaluate(true_actions(truth)[:-1], truth)


def test_truth_round_trip(tmp_path):
    bundle, truth = generate(random_scene(20, frames=4, n_outliers=1))
    write_bundle(bundle, truth, tmp_path)
    back = load_truth(tmp_path / "truth.json")
    assert isinstance(back, GroundTruth)
    assert back.labels == truth.labels
    for a, b in zip(back.tool_poses, truth.tool_poses):
        np.testing.assert_allclose(a.matrix(), b.matrix(), atol=1e-12)


# --- degradation ------------------------------------------------------------------------

@pytest.mark.slow
def test_error_grows_with_track_noise():
    medians = []
    for sigma in (0.0, 0.0005, 0.001, 0.002):
        errs = []
        for seed in range(50):
            bundle, truth = generate(random_scene(seed, frames=16, track_sigma=sigma))
            acts, _, _, _ = run_in_memory(bundle)
            errs.append(evaluate(acts, truth).final_translation_m)
        medians.append(np.median(errs))
    assert medians[0] < 1e-9
    assert all(a < b for a, b in zip(medians, medians[1:])), medians
