import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import random_rotation, rigid_track_set
from tcidm.depth import CameraIntrinsics, DepthFrame, PoseSequence
from tcidm.errors import FrameCountMismatch, IntrinsicsMissing, TooFewTracks, TooFewVisibleFrames
from tcidm.geometry import RigidTransform, compose
from tcidm.tracks import (FilterConfig, PointTrack, ToolMask, lift_tracks, mask_tracks,
                          select_rigid)

K = CameraIntrinsics(100.0, 120.0, 20.0, 15.0, 40, 30)


def one_pixel_track(u, v, n_frames=1):
    return PointTrack(0, np.ones(n_frames, bool), None, np.tile([u, v], (n_frames, 1)))


def flat_depth(z, shape=(30, 40)):
    return DepthFrame(np.full(shape, z))


# --- lift ------------------------------------------------------------------------

def test_lift_principal_ray():
    (tr,) = lift_tracks([one_pixel_track(K.cx, K.cy)], [flat_depth(2.0)], K,
                        PoseSequence([RigidTransform.identity()]))
    np.testing.assert_allclose(tr.positions[0], [0, 0, 2.0])


def test_lift_off_axis_pixel():
    # pinhole: x = (u - cx) z / fx with u = cx + fx, z = 1
    K2 = CameraIntrinsics(10.0, 10.0, 5.0, 5.0)
    (tr,) = lift_tracks([one_pixel_track(15.0, 5.0)], [flat_depth(1.0, (20, 20))], K2,
                        PoseSequence([RigidTransform.identity()]))
    np.testing.assert_allclose(tr.positions[0], [1, 0, 1])
    (tr,) = lift_tracks([one_pixel_track(15.0, 5.0)], [flat_depth(1.0, (20, 20))], K2,
                        PoseSequence([RigidTransform.translation(0, 0, -1)]))
    np.testing.assert_allclose(tr.positions[0], [1, 0, 0])


def test_lift_clears_visibility_on_invalid_depth():
    d = np.full((30, 40), 2.0)
    d[15, 20] = 0.0
    (tr,) = lift_tracks([one_pixel_track(20.2, 14.9)], [DepthFrame(d)], K,
                        PoseSequence([RigidTransform.identity()]))
    assert not tr.visible[0]
    assert np.all(np.isnan(tr.positions[0]))


def test_lift_errors():
    with pytest.raises(IntrinsicsMissing):
        lift_tracks([one_pixel_track(1, 1)], [flat_depth(1)], None,
                    PoseSequence([RigidTransform.identity()]))
    with pytest.raises(FrameCountMismatch):
        lift_tracks([one_pixel_track(1, 1)], [flat_depth(1)] * 2, K,
                    PoseSequence([RigidTransform.identity()]))
    with pytest.raises(FrameCountMismatch):
        lift_tracks([one_pixel_track(1, 1, 2)], [flat_depth(1)], K,
                    PoseSequence([RigidTransform.identity()]))


@given(st.integers(0, 10_000))
def test_lift_project_round_trip(seed):
    rng = np.random.default_rng(seed)
    pose = RigidTransform(random_rotation(rng), rng.normal(size=3))
    Xc = np.c_[rng.uniform(-0.3, 0.3, (6, 2)), rng.uniform(0.5, 2.0, 6)]
    uv = K.project(Xc)
    ok = (uv[:, 0] > 0) & (uv[:, 0] < 39) & (uv[:, 1] > 0) & (uv[:, 1] < 29)
    depth = np.ones((30, 40))
    tracks = []
    for i in np.flatnonzero(ok):
        # depth raster holds each point's exact depth at its nearest cell
        depth[int(np.floor(uv[i, 1] + 0.5)), int(np.floor(uv[i, 0] + 0.5))] = Xc[i, 2]
    for i in np.flatnonzero(ok):
        tracks.append(PointTrack(int(i), [True], None, uv[i][None]))
    # keep only points that own their raster cell
    cells = {}
    for i in np.flatnonzero(ok):
        cells.setdefault((int(np.floor(uv[i, 1] + 0.5)), int(np.floor(uv[i, 0] + 0.5))), []).append(i)
    lifted = lift_tracks(tracks, [DepthFrame(depth)], K, PoseSequence([pose]))
    for tr in lifted:
        i = tr.track_id
        cell = (int(np.floor(uv[i, 1] + 0.5)), int(np.floor(uv[i, 0] + 0.5)))
        if len(cells[cell]) == 1:
            np.testing.assert_allclose(tr.positions[0], pose.apply(Xc[i]), atol=1e-9)


def test_lift_camera_positions_re_expressed():
    pose = RigidTransform(random_rotation(np.random.default_rng(1)), (1, 2, 3))
    tr = PointTrack(4, [True, False], [[0.1, 0.2, 0.3], [np.nan] * 3])
    (out,) = lift_tracks([tr], None, None, PoseSequence([pose, pose]), source="camera")
    np.testing.assert_allclose(out.positions[0], pose.apply([0.1, 0.2, 0.3]))
    assert not out.visible[1]


@given(st.integers(0, 10_000))
def test_lift_world_frame_consistency(seed):
    rng = np.random.default_rng(seed)
    poses = [RigidTransform(random_rotation(rng), rng.normal(size=3)) for _ in range(3)]
    Q = RigidTransform(random_rotation(rng), rng.normal(size=3))
    tracks = [PointTrack(i, np.ones(3, bool), rng.normal(size=(3, 3))) for i in range(4)]
    a = lift_tracks(tracks, None, None, PoseSequence(poses), source="camera")
    b = lift_tracks(tracks, None, None, PoseSequence([compose(Q, p) for p in poses]),
                    source="camera")
    for ta, tb in zip(a, b):
        np.testing.assert_allclose(tb.positions, Q.apply(ta.positions), atol=1e-9)


# --- mask ------------------------------------------------------------------------

def two_tracks():
    on = PointTrack(0, [True, True], None, [[5.0, 5.0], [30.0, 20.0]])
    off = PointTrack(1, [True, True], None, [[35.0, 25.0], [5.0, 5.0]])
    return [on, off]


def test_mask_all_true_keeps_everything():
    masks = [ToolMask(np.ones((30, 40), bool), f) for f in range(2)]
    out = mask_tracks(two_tracks(), masks)
    assert [t.track_id for t in out] == [0, 1]


def test_mask_all_false_drops_everything():
    masks = [ToolMask(np.zeros((30, 40), bool), f) for f in range(2)]
    assert mask_tracks(two_tracks(), masks) == []


def test_mask_keeps_on_mask_track():
    m = np.zeros((30, 40), bool)
    m[:10, :10] = True
    out = mask_tracks(two_tracks(), [ToolMask(m, 0), ToolMask(m, 1)])
    assert [t.track_id for t in out] == [0]
    assert out[0].visible.all()  # frame-0-only membership by default


def test_mask_strict_clears_frames_off_mask():
    m = np.zeros((30, 40), bool)
    m[:10, :10] = True
    (out,) = mask_tracks(two_tracks(), [ToolMask(m, 0), ToolMask(m, 1)], strict=True)
    assert out.visible.tolist() == [True, False]


# --- select_rigid ---------------------------------------------------------------------

def ids(tracks):
    return sorted(t.track_id for t in tracks)


def test_select_all_rigid_ties_break_by_id():
    tracks = rigid_track_set(np.random.default_rng(0), 14, 6)
    sel, scores = select_rigid(tracks[::-1], FilterConfig(k=10))
    assert ids(sel) == list(range(10))
    assert all(s.mean_residual == 0.0 for s in scores)
    assert len(scores) == 14


def test_select_rejects_drifting_outlier():
    tracks = rigid_track_set(np.random.default_rng(1), 13, 8, outlier_speed=0.1)
    sel, scores = select_rigid(tracks, FilterConfig(k=10))
    assert 12 not in ids(sel)
    by_id = {s.track_id: s.mean_residual for s in scores}
    assert by_id[12] > 10 * max(by_id[i] for i in range(12))


def test_select_noise_monte_carlo():
    worst = 0.0
    for seed in range(100):
        tracks = rigid_track_set(np.random.default_rng(seed), 5, 8, sigma=0.001)
        sel, scores = select_rigid(tracks, FilterConfig(k=3))
        chosen = {t.track_id for t in sel}
        worst = max(worst, max(s.mean_residual for s in scores if s.track_id in chosen))
    assert worst < 0.005


@given(st.integers(0, 10_000))
def test_select_output_size_and_subset(seed):
    rng = np.random.default_rng(seed)
    tracks = rigid_track_set(rng, 12, 5, sigma=0.002)
    sel, _ = select_rigid(tracks, FilterConfig(k=4))
    assert len(sel) == 4
    assert set(ids(sel)) <= set(ids(tracks))


@given(st.integers(0, 10_000))
def test_select_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    tracks = rigid_track_set(rng, 12, 5, sigma=0.002)
    perm = rng.permutation(len(tracks))
    a, sa = select_rigid(tracks, FilterConfig(k=5))
    b, sb = select_rigid([tracks[i] for i in perm], FilterConfig(k=5))
    assert ids(a) == ids(b)
    ra = {s.track_id: s.mean_residual for s in sa}
    rb = {s.track_id: s.mean_residual for s in sb}
    for i in ra:
        assert ra[i] == pytest.approx(rb[i], rel=1e-9, abs=1e-12)


def test_select_outlier_robust_over_seeds():
    sigma = 0.001
    for seed in range(100):
        tracks = rigid_track_set(np.random.default_rng(seed), 13, 8, sigma=sigma,
                                 outlier_speed=10 * sigma)
        sel, _ = select_rigid(tracks, FilterConfig(k=10))
        assert 12 not in ids(sel), seed


def test_select_ransac_variant():
    tracks = rigid_track_set(np.random.default_rng(3), 13, 8, sigma=0.0005, outlier_speed=0.02)
    sel, _ = select_rigid(tracks, FilterConfig(k=10, method="ransac", seed=7))
    assert 12 not in ids(sel)
    again, _ = select_rigid(tracks, FilterConfig(k=10, method="ransac", seed=7))
    assert ids(sel) == ids(again)


def test_select_low_visibility_tracks_not_candidates():
    tracks = rigid_track_set(np.random.default_rng(2), 11, 10)
    vis = np.zeros(10, bool)
    vis[:3] = True
    tracks[0] = PointTrack(0, vis, tracks[0].positions)
    sel, scores = select_rigid(tracks, FilterConfig(k=10, min_visibility_fraction=0.8))
    assert 0 not in ids(sel)
    assert 0 not in {s.track_id for s in scores}


def test_select_too_few_tracks():
    with pytest.raises(TooFewTracks):
        select_rigid(rigid_track_set(np.random.default_rng(0), 5, 4), FilterConfig(k=10))


def test_select_no_scorable_pairs():
    tracks = []
    for i in range(4):
        vis = np.zeros(4, bool)
        vis[i] = True
        tracks.append(PointTrack(i, vis, np.zeros((4, 3)) + i))
    with pytest.raises(TooFewVisibleFrames):
        select_rigid(tracks, FilterConfig(k=3, min_visibility_fraction=0.25))


def test_filter_config_requires_k_at_least_3():
    with pytest.raises(ValueError):
        FilterConfig(k=2)
