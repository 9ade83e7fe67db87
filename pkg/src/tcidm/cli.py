"""Command-line entry point: ``tcidm <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .depth import apply_scale_shift, fit_scale_shift, metricize_poses, per_frame_residuals
from .errors import ManifestError, TcIdmError
from .geometry import RigidTransform
from .heads import Mlp, TrainConfig, gripper_spec, predict_sequence, retarget_spec, train
from .oracle import SceneSpec, evaluate, generate, load_truth, random_scene, write_bundle
from .pipeline import StageFlags, load_manifest, run_pipeline
from .poses import recover_trajectory, safety_check, smooth_trajectory
from .tracks import FilterConfig, lift_tracks, mask_tracks, select_rigid

log = logging.getLogger("tcidm")


def _pose_arg(s):
    """Inline JSON {"q", "t"} or a path to such a file."""
    if s is None:
        return None
    if s.lstrip().startswith("{"):
        return RigidTransform.from_json(json.loads(s))
    with open(s) as f:
        return RigidTransform.from_json(json.load(f))


def _print(obj):
    print(json.dumps(obj, indent=1, sort_keys=True))


def cmd_align_depth(a):
    rel = fileio.read_depth(a.relative, a.relative_mask)
    ref = fileio.read_depth(a.metric_ref, a.metric_ref_mask)
    params = fit_scale_shift(rel, ref, stride=a.stride, robust=a.robust)
    result = {"scale_shift": params.to_json()}
    if a.apply:
        out = Path(a.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        frames = [fileio.read_depth(p) for p in a.apply]
        for p, f in zip(a.apply, apply_scale_shift(frames, params)):
            fileio.write_depth(out / Path(p).name, f)
        if a.metric_frames:
            refs = [fileio.read_depth(p) if p != "-" else None for p in a.metric_frames]
            result["per_frame_rms_m"] = per_frame_residuals(frames, refs, params)
    if a.poses:
        seq = metricize_poses(fileio.read_poses(a.poses), params, _pose_arg(a.anchor))
        fileio.write_poses(a.out_poses, seq)
    _print(result)


def cmd_lift_tracks(a):
    tracks = fileio.read_tracks(a.tracks)
    poses = fileio.read_poses(a.poses)
    K = fileio.read_intrinsics(a.intrinsics) if a.intrinsics else None
    depths = [fileio.read_depth(p) for p in a.depth] if a.depth else None
    source = "depth" if depths is not None else "camera"
    fileio.write_tracks(a.out, lift_tracks(tracks, depths, K, poses, source=source))


def cmd_filter_rigid(a):
    tracks = fileio.read_tracks(a.tracks)
    if a.masks:
        masks = [fileio.read_mask(p, i) for i, p in enumerate(a.masks)]
        tracks = mask_tracks(tracks, masks, strict=a.mask_mode == "strict")
    cfg = FilterConfig(k=a.k, min_visibility_fraction=a.min_visibility, method=a.selection,
                       seed=a.seed)
    selected, scores = select_rigid(tracks, cfg)
    fileio.write_tracks(a.out, selected)
    if a.scores:
        with open(a.scores, "w") as f:
            f.write("track_id,mean_residual,frames_used\n")
            for s in scores:
                f.write(f"{s.track_id},{s.mean_residual!r},{s.frames_used}\n")


def cmd_recover_poses(a):
    tracks = fileio.read_tracks(a.tracks)
    actions, report = recover_trajectory(tracks, _pose_arg(a.initial_tcp),
                                         gap_policy=a.gap_policy)
    if a.smooth > 1:
        actions = smooth_trajectory(actions, a.smooth)
    fileio.write_actions(a.out, actions)
    if a.report:
        fileio.write_json(a.report, report.to_json())
    violations = []
    if a.max_step_m is not None or a.max_step_deg is not None:
        violations = safety_check(actions, a.max_step_m or np.inf, a.max_step_deg or np.inf)
        for v in violations:
            log.warning("frame %d: %s step %.6g exceeds %.6g", v.frame, v.kind, v.magnitude,
                        v.limit)
    return 3 if violations and a.strict_safety else 0


def cmd_predict_state(a):
    head = Mlp.load(a.weights)
    feats = sorted(fileio.read_features(a.features), key=lambda f: f.frame)
    preds = predict_sequence(head, feats, context=a.context)
    with open(a.out, "w") as f:
        f.write("frame," + ",".join(f"y{i}" for i in range(head.spec.n_out)) + "\n")
        for fv, y in zip(feats, preds):
            f.write(f"{fv.frame}," + ",".join(repr(float(v)) for v in y) + "\n")
    if head.clamp_events:
        log.warning("%d outputs clamped to joint limits", head.clamp_events)


def _read_targets(path):
    rows = {}
    with open(path) as f:
        next(f)
        for line in f:
            if line.strip():
                parts = line.strip().split(",")
                rows[int(parts[0])] = [float(x) for x in parts[1:]]
    return rows


def cmd_train_head(a):
    feats = {fv.frame: fv.values for fv in fileio.read_features(a.features)}
    targets = _read_targets(a.targets)
    frames = sorted(set(feats) & set(targets))
    data = [(feats[f], targets[f]) for f in frames]
    dim = len(data[0][0]) if data else 0
    n_out = len(data[0][1]) if data else 1
    hidden = tuple(a.hidden)
    spec = gripper_spec(dim, hidden) if a.kind == "gripper" else retarget_spec(dim, n_out, hidden)
    limits = json.loads(a.joint_limits) if a.joint_limits else None
    cfg = TrainConfig(a.lr, a.epochs, a.batch_size, a.seed, a.momentum)
    res = train(Mlp.init(spec, a.seed, limits), data, cfg)
    res.model.save(a.out)
    _print({"frames": len(data), "final_mse": res.final_loss})


def cmd_run(a):
    flags = {"k": a.k, "smoothing_window": a.smoothing_window, "max_step_m": a.max_step_m,
             "max_step_deg": a.max_step_deg, "mask_mode": a.mask_mode, "gap_policy": a.gap_policy,
             "selection": a.selection, "depth_stride": a.depth_stride,
             "robust_depth": a.robust_depth or None, "seed": a.seed,
             "gripper_threshold": a.gripper_threshold}
    try:
        m = load_manifest(a.manifest, flags)
        res = run_pipeline(m, a.out)
    except ManifestError as e:
        log.error("startup validation failed: %s", e)
        return 2
    for w in res.report.warnings:
        log.warning("%s", w)
    if res.report.error:
        return 1
    summary = {"actions": str(res.actions_path), "steps": len(res.actions),
               "scale_shift": res.scale_shift.to_json(),
               "max_rotation_step_deg": res.trajectory.max_rotation_step_deg,
               "max_translation_step_m": res.trajectory.max_translation_step_m,
               "warnings": len(res.report.warnings)}
    _print(summary)
    return 0


def cmd_simulate(a):
    kw = dict(n_outliers=a.outliers, n_background=a.background, track_sigma=a.track_sigma,
              depth_sigma=a.depth_sigma, pixel_sigma=a.pixel_sigma, drop_prob=a.drop_prob,
              outlier_speed=a.outlier_speed, instruction=a.instruction)
    if a.occlusion:
        kw["occlusion"] = tuple(a.occlusion)
    spec = random_scene(a.seed, frames=a.frames, n_points=a.points,
                        camera_moves=not a.static_camera, **kw)
    bundle, truth = generate(spec)
    path = write_bundle(bundle, truth, a.out)
    _print({"manifest": str(path), "frames": spec.frames, "tracks": len(bundle.tracks)})


def cmd_evaluate(a):
    truth = load_truth(a.truth)
    metrics = evaluate(fileio.read_actions(a.actions), truth, a.max_translation_m,
                       a.max_rotation_deg)
    if a.out:
        fileio.write_json(a.out, metrics.to_json())
    _print({k: v for k, v in metrics.to_json().items() if not isinstance(v, list)})
    return 0 if metrics.passed else 4


def cmd_export(a):
    n = fileio.export_actions(a.actions, a.out, a.format)
    _print({"rows": n, "out": a.out})


def build_parser():
    p = argparse.ArgumentParser(prog="tcidm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("align-depth", help="fit metric scale/shift and upgrade poses")
    s.add_argument("--relative", required=True)
    s.add_argument("--relative-mask")
    s.add_argument("--metric-ref", required=True)
    s.add_argument("--metric-ref-mask")
    s.add_argument("--stride", type=int, default=1)
    s.add_argument("--robust", action="store_true")
    s.add_argument("--apply", nargs="*", help="relative depth files to convert")
    s.add_argument("--metric-frames", nargs="*", help="per-frame metric references ('-' if none)")
    s.add_argument("--out-dir", default="metric_depth")
    s.add_argument("--poses")
    s.add_argument("--anchor", help="metric pose of frame 0 (JSON or file)")
    s.add_argument("--out-poses", default="metric_poses.json")
    s.set_defaults(func=cmd_align_depth)

    s = sub.add_parser("lift-tracks", help="express tracks in the world frame")
    s.add_argument("--tracks", required=True)
    s.add_argument("--poses", required=True, help="metric camera poses")
    s.add_argument("--intrinsics")
    s.add_argument("--depth", nargs="*", help="metric depth per frame (omit for 3D tracks)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_lift_tracks)

    s = sub.add_parser("filter-rigid", help="mask and keep the k most rigid tracks")
    s.add_argument("--tracks", required=True)
    s.add_argument("--masks", nargs="*")
    s.add_argument("--mask-mode", choices=["frame0", "strict"], default="frame0")
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--min-visibility", type=float, default=0.8)
    s.add_argument("--selection", choices=["global", "ransac"], default="global")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--scores")
    s.set_defaults(func=cmd_filter_rigid)

    s = sub.add_parser("recover-poses", help="per-step SE(3) actions from filtered tracks")
    s.add_argument("--tracks", required=True)
    s.add_argument("--initial-tcp")
    s.add_argument("--gap-policy", choices=["interpolate", "fail-fast"], default="interpolate")
    s.add_argument("--smooth", type=int, default=1)
    s.add_argument("--max-step-m", type=float)
    s.add_argument("--max-step-deg", type=float)
    s.add_argument("--strict-safety", action="store_true", help="exit 3 on any violation")
    s.add_argument("--report")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_recover_poses)

    s = sub.add_parser("predict-state", help="run a trained head over per-frame features")
    s.add_argument("--weights", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--context", action="store_true", help="concatenate +/-1 frame features")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict_state)

    s = sub.add_parser("train-head", help="fit a gripper or retargeting head")
    s.add_argument("--features", required=True)
    s.add_argument("--targets", required=True, help="CSV frame,y0..")
    s.add_argument("--kind", choices=["gripper", "retarget"], default="gripper")
    s.add_argument("--hidden", type=int, nargs="*", default=[256, 64])
    s.add_argument("--joint-limits", help="JSON list of [lo, hi] per joint")
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--epochs", type=int, default=2000)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--momentum", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_head)

    s = sub.add_parser("run", help="full pipeline from a manifest")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    d = StageFlags()
    s.add_argument("--k", type=int, default=d.k)
    s.add_argument("--smoothing-window", type=int, default=d.smoothing_window)
    s.add_argument("--max-step-m", type=float)
    s.add_argument("--max-step-deg", type=float)
    s.add_argument("--mask-mode", choices=["frame0", "strict"], default=d.mask_mode)
    s.add_argument("--gap-policy", choices=["interpolate", "fail-fast"], default=d.gap_policy)
    s.add_argument("--selection", choices=["global", "ransac"], default=d.selection)
    s.add_argument("--depth-stride", type=int, default=d.depth_stride)
    s.add_argument("--robust-depth", action="store_true")
    s.add_argument("--gripper-threshold", type=float)
    s.add_argument("--seed", type=int, default=d.seed)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("simulate", help="write a synthetic scene bundle")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=31)
    s.add_argument("--points", type=int, default=40)
    s.add_argument("--outliers", type=int, default=0)
    s.add_argument("--outlier-speed", type=float, default=0.1)
    s.add_argument("--background", type=int, default=0)
    s.add_argument("--track-sigma", type=float, default=0.0)
    s.add_argument("--depth-sigma", type=float, default=0.0)
    s.add_argument("--pixel-sigma", type=float, default=0.0)
    s.add_argument("--drop-prob", type=float, default=0.0)
    s.add_argument("--occlusion", type=int, nargs=2, metavar=("START", "STOP"))
    s.add_argument("--static-camera", action="store_true")
    s.add_argument("--instruction", default=SceneSpec.instruction)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("evaluate", help="score actions against oracle truth")
    s.add_argument("--actions", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--max-translation-m", type=float, default=0.02)
    s.add_argument("--max-rotation-deg", type=float, default=10.0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("export", help="convert an action file for a replay executor")
    s.add_argument("--actions", required=True)
    s.add_argument("--format", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except TcIdmError as e:
        log.error("%s: %s", type(e).__name__, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
