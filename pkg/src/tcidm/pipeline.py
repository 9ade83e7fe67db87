"""End-to-end run: align -> lift -> mask -> filter -> recover -> predict -> merge."""
from __future__ import annotations

import glob
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import fileio
from .depth import apply_scale_shift, fit_scale_shift, metricize_poses, ScaleShift, PoseSequence
from .errors import ManifestError, StageError
from .geometry import RigidTransform
from .heads import Mlp, binarize, predict_sequence
from .poses import recover_trajectory, safety_check, smooth_trajectory
from .tracks import FilterConfig, RigidityScore, lift_tracks, mask_tracks, select_rigid

log = logging.getLogger(__name__)

CACHE_ENV = "TCIDM_CACHE_DIR"


@dataclass(frozen=True)
class StageFlags:
    k: int = 10
    min_visibility_fraction: float = 0.8
    selection: str = "global"
    mask_mode: str = "frame0"  # or "strict"
    gap_policy: str = "interpolate"
    smoothing_window: int = 1
    max_step_m: float | None = None
    max_step_deg: float | None = None
    depth_stride: int = 1
    robust_depth: bool = False
    gripper_threshold: float | None = None  # binarize apertures when set
    feature_context: bool = False
    seed: int = 0


@dataclass
class RunManifest:
    base_dir: Path
    instruction: str
    intrinsics: Path
    relative_depth: list
    metric_reference: Path
    camera_poses: Path
    anchor_pose: RigidTransform
    masks: list
    tracks: Path
    tracks_frame: str = "camera"  # "camera" | "world" | "pixels"
    features: Path | None = None
    gripper_weights: Path | None = None
    initial_tcp: RigidTransform | None = None
    depth_provenance: str = ""
    flags: StageFlags = field(default_factory=StageFlags)

    def input_files(self):
        files = [self.intrinsics, *self.relative_depth, self.metric_reference, self.camera_poses,
                 *self.masks, self.tracks]
        return files + [p for p in (self.features, self.gripper_weights) if p is not None]


def _paths(base, spec, what):
    if spec is None:
        raise ManifestError(f"manifest is missing {what}")
    if isinstance(spec, str):
        hits = sorted(glob.glob(str(base / spec)))
        paths = [Path(h) for h in hits] if any(c in spec for c in "*?[") else [base / spec]
    else:
        paths = [base / p for p in spec]
    if not paths:
        raise ManifestError(f"{what}: pattern matched no files")
    return paths


def _pose(v, base):
    if v is None:
        return None
    if isinstance(v, str):
        with open(base / v) as f:
            v = json.load(f)
    return RigidTransform.from_json(v)


def load_manifest(path, flag_defaults: dict | None = None) -> RunManifest:
    """Parse a run manifest. Values under ``stages`` (or top-level flag names) override
    ``flag_defaults``; relative paths resolve against the manifest directory."""
    path = Path(path)
    try:
        with open(path) as f:
            d = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from None
    base = path.parent
    names = {f.name for f in fields(StageFlags)}
    flags = {k: v for k, v in (flag_defaults or {}).items() if v is not None and k in names}
    flags.update({k: v for k, v in d.items() if k in names})
    flags.update(d.get("stages", {}))
    unknown = set(flags) - names
    if unknown:
        raise ManifestError(f"unknown stage flags {sorted(unknown)}")
    try:
        stage_flags = StageFlags(**flags)
        FilterConfig(k=stage_flags.k, min_visibility_fraction=stage_flags.min_visibility_fraction,
                     method=stage_flags.selection)
    except (TypeError, ValueError) as e:
        raise ManifestError(f"invalid stage flags: {e}") from None
    if stage_flags.mask_mode not in ("frame0", "strict"):
        raise ManifestError(f"mask_mode must be frame0 or strict, got {stage_flags.mask_mode!r}")
    if stage_flags.gap_policy not in ("interpolate", "fail-fast"):
        raise ManifestError(f"unknown gap_policy {stage_flags.gap_policy!r}")
    tracks_frame = d.get("tracks_frame", "camera")
    if tracks_frame not in ("camera", "world", "pixels"):
        raise ManifestError(f"tracks_frame must be camera, world or pixels, got {tracks_frame!r}")
    if "anchor_pose" not in d:
        raise ManifestError("manifest is missing anchor_pose")

    def one(key, required=True):
        if d.get(key) is None:
            if required:
                raise ManifestError(f"manifest is missing {key}")
            return None
        return _paths(base, d[key], key)[0]

    m = RunManifest(
        base_dir=base,
        instruction=str(d.get("instruction", "")),
        intrinsics=one("intrinsics"),
        relative_depth=_paths(base, d.get("relative_depth"), "relative_depth"),
        metric_reference=one("metric_reference"),
        camera_poses=one("camera_poses"),
        anchor_pose=_pose(d["anchor_pose"], base),
        masks=_paths(base, d.get("masks"), "masks"),
        tracks=one("tracks"),
        tracks_frame=tracks_frame,
        features=one("features", required=False),
        gripper_weights=one("gripper_weights", required=False),
        initial_tcp=_pose(d.get("initial_tcp"), base),
        depth_provenance=str(d.get("depth_provenance", "")),
        flags=stage_flags,
    )
    missing = [str(p) for p in m.input_files() if not p.is_file()]
    if missing:
        raise ManifestError(f"missing input files: {missing}")
    return m


@dataclass
class Inputs:
    intrinsics: object
    relative_depth: list
    metric_reference: object
    camera_poses: PoseSequence
    masks: list
    tracks: list
    features: list | None
    head: Mlp | None


def load_inputs(m: RunManifest) -> Inputs:
    """Parse every referenced file; any failure is a startup error."""
    try:
        K = fileio.read_intrinsics(m.intrinsics)
        depth = [fileio.read_depth(p) for p in m.relative_depth]
        ref = fileio.read_depth(m.metric_reference)
        poses = fileio.read_poses(m.camera_poses)
        masks = [fileio.read_mask(p, frame=fileio.frame_index(p) if fileio.frame_index(p)
                                  is not None else i) for i, p in enumerate(m.masks)]
        tracks = fileio.read_tracks(m.tracks)
        feats = fileio.read_features(m.features) if m.features else None
        head = Mlp.load(m.gripper_weights) if m.gripper_weights else None
    except (OSError, ValueError, KeyError) as e:
        raise ManifestError(f"failed to parse inputs: {type(e).__name__}: {e}") from None
    if len(depth) != len(poses):
        raise ManifestError(f"{len(depth)} relative depth frames vs {len(poses)} camera poses")
    if m.tracks_frame == "pixels" and any(t.pixels is None for t in tracks):
        raise ManifestError("tracks_frame=pixels but the track file has no u,v columns")
    if m.tracks_frame in ("camera", "world") and any(t.positions is None for t in tracks):
        raise ManifestError(f"tracks_frame={m.tracks_frame} but the track file lacks x,y,z")
    return Inputs(K, depth, ref, poses, masks, tracks, feats, head)


def digest(obj) -> str:
    if isinstance(obj, bytes):
        data = obj
    else:
        data = json.dumps(obj, sort_keys=True, default=_jsonable).encode()
    return hashlib.sha256(data).hexdigest()


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    if hasattr(o, "to_json"):
        return o.to_json()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def file_digest(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


class StageCache:
    """JSON blobs keyed by stage input digest under $TCIDM_CACHE_DIR (disabled if unset)."""

    def __init__(self, root=None):
        root = root if root is not None else os.environ.get(CACHE_ENV)
        self.root = Path(root) if root else None

    def get(self, stage, key):
        if self.root is None:
            return None
        p = self.root / f"{stage}-{key}.json"
        if p.is_file():
            with open(p) as f:
                return json.load(f)
        return None

    def put(self, stage, key, value):
        if self.root is None:
            return
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.root / f".{stage}-{key}.tmp"
        with open(tmp, "w") as f:
            json.dump(value, f)
        os.replace(tmp, self.root / f"{stage}-{key}.json")


@dataclass
class StageReport:
    stages: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    error: str | None = None

    def to_json(self):
        return {"stages": self.stages, "warnings": self.warnings, "error": self.error}

    def digests(self):
        return [(s["name"], s["input_digest"], s["output_digest"]) for s in self.stages]


@dataclass
class RunResult:
    actions: list
    trajectory: object
    report: StageReport
    scale_shift: ScaleShift
    scores: list
    actions_path: Path | None = None

    @property
    def exit_code(self):
        return 0 if self.report.error is None else 1


def _mask_flicker(masks, ratio=0.5):
    """Frames whose mask area changes by more than ``ratio`` relative to the previous one."""
    areas = [int(m.tool.sum()) for m in masks]
    return [i for i in range(1, len(areas))
            if abs(areas[i] - areas[i - 1]) > ratio * max(areas[i - 1], 1)]


def run_pipeline(m: RunManifest, out_dir=None, inputs: Inputs | None = None, cache=None):
    """Execute every stage; stage failures are recorded (with stage name) in the report,
    and whatever completed before them is still written to ``out_dir``."""
    inp = inputs if inputs is not None else load_inputs(m)
    fl = m.flags
    cache = cache if cache is not None else StageCache()
    report = StageReport()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    file_digests = {str(p.relative_to(m.base_dir)) if p.is_relative_to(m.base_dir) else str(p):
                    file_digest(p) for p in m.input_files()}
    state = {}

    def stage(name, inputs_key, fn, encode=None, decode=None):
        key = digest(inputs_key)
        t0 = time.perf_counter()
        hit = cache.get(name, key) if decode is not None else None
        if hit is not None:
            result = decode(hit)
        else:
            try:
                result = fn()
            except Exception as e:
                raise StageError(name, e) from e
            if encode is not None:
                cache.put(name, key, encode(result))
        payload = hit if hit is not None else (encode(result) if encode is not None else result)
        report.stages.append({"name": name, "wall_s": time.perf_counter() - t0,
                              "input_digest": key, "output_digest": digest(payload),
                              "cached": hit is not None})
        state[name] = key
        return result

    def dump(name, obj):
        if out is not None:
            fileio.write_json(out / name, obj)

    ss = metric = poses = None
    scores = []
    actions, traj = [], None
    try:
        # align
        def align():
            p = fit_scale_shift(inp.relative_depth[0], inp.metric_reference,
                                stride=fl.depth_stride, robust=fl.robust_depth)
            return p, metricize_poses(inp.camera_poses, p, m.anchor_pose)

        ss, poses = stage(
            "align",
            {"files": {k: v for k, v in file_digests.items() if "depth" in k or "pose" in k},
             "anchor": m.anchor_pose, "stride": fl.depth_stride, "robust": fl.robust_depth,
             "provenance": m.depth_provenance},
            align,
            # raw R/t keep the cached value bit-exact (a quaternion round trip is not)
            encode=lambda r: {"scale_shift": r[0].to_json(),
                              "poses": [{"R": p.R.tolist(), "t": p.t.tolist()} for p in r[1]],
                              "times": list(r[1].frame_times)},
            decode=lambda d: (ScaleShift(**d["scale_shift"]),
                              PoseSequence([RigidTransform(p["R"], p["t"]) for p in d["poses"]],
                                           d["times"])))
        dump("scale_shift.json", ss.to_json())
        dump("metric_poses.json", fileio.pose_records(poses))

        # lift
        def lift():
            depths = (apply_scale_shift(inp.relative_depth, ss) if m.tracks_frame == "pixels"
                      else None)
            source = {"pixels": "depth"}.get(m.tracks_frame, m.tracks_frame)
            return lift_tracks(inp.tracks, depths, inp.intrinsics, poses, source=source)

        world = stage("lift", {"align": state["align"], "tracks": file_digest(m.tracks),
                               "frame": m.tracks_frame, "K": inp.intrinsics}, lift,
                      encode=_tracks_payload)

        # mask
        flicker = _mask_flicker(inp.masks)
        if flicker:
            report.warnings.append(f"mask flicker at frames {flicker}")
        masked = stage("mask", {"lift": state["lift"], "mode": fl.mask_mode,
                                "masks": [file_digest(p) for p in m.masks]},
                       lambda: mask_tracks(world, inp.masks, strict=fl.mask_mode == "strict"),
                       encode=_tracks_payload)

        # filter
        cfg = FilterConfig(k=fl.k, min_visibility_fraction=fl.min_visibility_fraction,
                           method=fl.selection, seed=fl.seed)
        by_id = {t.track_id: t for t in masked}
        selected, scores = stage(
            "filter", {"mask": state["mask"], "cfg": asdict(cfg)},
            lambda: select_rigid(masked, cfg),
            encode=lambda r: {"selected": [t.track_id for t in r[0]],
                              "scores": [asdict(s) for s in r[1]]},
            decode=lambda d: ([by_id[i] for i in d["selected"]],
                              [RigidityScore(**s) for s in d["scores"]]))
        if out is not None:
            with open(out / "scores.csv", "w") as f:
                f.write("track_id,mean_residual,frames_used,selected\n")
                chosen = {t.track_id for t in selected}
                for s in scores:
                    f.write(f"{s.track_id},{s.mean_residual!r},{s.frames_used},"
                            f"{int(s.track_id in chosen)}\n")

        # recover
        def recover():
            acts, rep = recover_trajectory(selected, m.initial_tcp, gap_policy=fl.gap_policy,
                                           frame_times=poses.frame_times)
            if fl.smoothing_window > 1:
                acts = smooth_trajectory(acts, fl.smoothing_window)
            return acts, rep

        actions, traj = stage("recover", {"filter": state["filter"], "tcp": m.initial_tcp,
                                          "gap": fl.gap_policy, "window": fl.smoothing_window},
                              recover, encode=lambda r: [fileio.action_record(a) for a in r[0]])
        for a, b in traj.gaps:
            report.warnings.append(f"interpolated motion across frames {a}..{b}")
        if fl.max_step_m is not None or fl.max_step_deg is not None:
            for v in safety_check(actions, fl.max_step_m or np.inf, fl.max_step_deg or np.inf):
                report.warnings.append(f"safety: frame {v.frame} {v.kind} step {v.magnitude:.6g} "
                                       f"exceeds {v.limit:.6g}")
        dump("trajectory_report.json", traj.to_json())

        # predict
        if inp.features is not None and inp.head is not None:
            def predict():
                order = sorted(inp.features, key=lambda f: f.frame)
                preds = predict_sequence(inp.head, order, context=fl.feature_context)
                return {f.frame: float(p[0]) for f, p in zip(order, preds)}

            grip = stage("predict", {"features": file_digest(m.features),
                                     "weights": file_digest(m.gripper_weights),
                                     "context": fl.feature_context}, predict,
                         encode=lambda r: sorted(r.items()))
            if inp.head.clamp_events:
                report.warnings.append(f"{inp.head.clamp_events} head outputs clamped")
            if out is not None:
                with open(out / "gripper.csv", "w") as f:
                    f.write("frame,y0\n")
                    for fr, g in sorted(grip.items()):
                        f.write(f"{fr},{g!r}\n")

            # merge: the action tagged frame t+1 carries that frame's aperture
            def merge():
                merged = []
                for a in actions:
                    g = grip.get(a.frame)
                    if g is not None and fl.gripper_threshold is not None:
                        g = binarize(g, fl.gripper_threshold)
                    merged.append(replace(a, gripper=g))
                return merged

            actions = stage("merge", {"recover": state["recover"], "predict": state["predict"],
                                      "threshold": fl.gripper_threshold}, merge,
                            encode=lambda r: [fileio.action_record(a) for a in r])
    except StageError as e:
        report.error = str(e)
        log.error("%s", e)

    actions_path = None
    if out is not None:
        if report.error is None:
            actions_path = out / "actions.jsonl"
            fileio.write_actions(actions_path, actions)
        stage_json = report.to_json()
        stage_json["instruction"] = m.instruction
        stage_json["depth_provenance"] = m.depth_provenance
        stage_json["input_files"] = file_digests
        fileio.write_json(out / "stage_report.json", stage_json)
    return RunResult(actions, traj, report, ss, scores, actions_path)


def _tracks_payload(tracks):
    return [[t.track_id, t.visible.astype(int).tolist(),
             None if t.positions is None else np.nan_to_num(t.positions, nan=0.0).tolist()]
            for t in tracks]


def run_in_memory(bundle, flags: StageFlags = StageFlags(), tracks_frame="camera"):
    """The same stage sequence as run_pipeline on an in-memory oracle Bundle (no files,
    no cache, no head). Returns (actions, TrajectoryReport, ScaleShift, scores)."""
    ss = fit_scale_shift(bundle.relative_depths[0], bundle.metric_reference,
                         stride=flags.depth_stride, robust=flags.robust_depth)
    poses = metricize_poses(bundle.relative_poses, ss, bundle.anchor_pose)
    depths = apply_scale_shift(bundle.relative_depths, ss) if tracks_frame == "pixels" else None
    source = {"pixels": "depth"}.get(tracks_frame, tracks_frame)
    world = lift_tracks(bundle.tracks, depths, bundle.intrinsics, poses, source=source)
    masked = mask_tracks(world, bundle.masks, strict=flags.mask_mode == "strict")
    cfg = FilterConfig(k=flags.k, min_visibility_fraction=flags.min_visibility_fraction,
                       method=flags.selection, seed=flags.seed)
    selected, scores = select_rigid(masked, cfg)
    acts, rep = recover_trajectory(selected, bundle.initial_tcp, gap_policy=flags.gap_policy,
                                   frame_times=poses.frame_times)
    if flags.smoothing_window > 1:
        acts = smooth_trajectory(acts, flags.smoothing_window)
    return acts, rep, ss, scores
