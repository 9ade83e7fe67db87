"""Synthetic scenes with known ground truth standing in for an imagined manipulation video.

A rigid tool (a cloud of surface points) moves along a piecewise constant-twist
path in front of a possibly moving pinhole camera. The generator emits only the
artifacts the pipeline consumes: relative depth rasters, one metric reference
raster, tool masks, 2D+3D point tracks, relative camera poses and per-frame
feature vectors that linearly encode the gripper aperture.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .depth import CameraIntrinsics, DepthFrame, PoseSequence
from .errors import HorizonMismatch, SpecInvalid
from .geometry import RigidTransform, compose, rotation_angle, so3_exp
from .heads import FeatureVector
from .tracks import PointTrack, ToolMask

TOOL, OUTLIER, BACKGROUND = "tool", "outlier", "background"

# random-stream purposes; each (seed, purpose, frame) triple gets its own generator
_SHAPE, _MOTION, _DEPTH, _TRACK, _MASK, _FEAT, _OUTL, _BG, _REF = range(9)


def _rng(seed, purpose, frame=0):
    return np.random.default_rng([seed, purpose, frame])


@dataclass(frozen=True)
class MotionSegment:
    """``frames`` steps of a constant per-step motion: rotation ``rotvec`` (rad, world axes)
    about the body's current centre, then translation ``translation`` (m, world)."""

    frames: int
    translation: tuple = (0.0, 0.0, 0.0)
    rotvec: tuple = (0.0, 0.0, 0.0)

    def step(self, center):
        R = so3_exp(self.rotvec)
        c = np.asarray(center, float)
        return RigidTransform(R, c - R @ c + np.asarray(self.translation, float))


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Camera-to-world pose with +z toward ``target`` and +y roughly along -up."""
    eye, target, up = (np.asarray(a, float) for a in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform(np.column_stack([x, y, z]), eye)


DEFAULT_INTRINSICS = CameraIntrinsics(150.0, 150.0, 80.0, 60.0, 160, 120)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    frames: int = 31
    n_points: int = 40
    tool_extent: tuple = (0.08, 0.05, 0.10)  # full box size of the sampled tool surface (m)
    tool_points: np.ndarray | None = None  # explicit (N, 3) tool-frame points override sampling
    tool_start: RigidTransform | None = None  # tool-to-world at frame 0
    tool_motion: tuple = ()
    camera_start: RigidTransform | None = None  # camera-to-world at frame 0
    camera_motion: tuple = ()
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    fps: float = 10.0
    pixel_sigma: float = 0.0  # px, on 2D tracks
    depth_sigma: float = 0.0  # m, on every depth raster
    track_sigma: float = 0.0  # m, on 3D tracker output
    drop_prob: float = 0.0
    n_outliers: int = 0
    outlier_speed: float = 0.1  # m / frame of independent drift
    n_background: int = 0
    s_true: float = 2.0
    d_true: float = 0.5
    mask_dilation: int = 2
    mask_flicker: float = 0.0  # per-frame probability of a one-pixel erosion
    occlusion: tuple | None = None  # [start, stop) frames where every tool track is hidden
    feature_dim: int = 16
    feature_noise: float = 0.01
    feature_encoder_seed: int = 0  # the linear feature encoder is shared by scenes with equal seed
    wall_depth: float = 1.2  # where the first optical axis meets the background plane (m)
    instruction: str = "synthetic task"

    def validate(self):
        if self.frames < 2:
            raise SpecInvalid("need at least 2 frames (T >= 1)")
        n = self.n_points if self.tool_points is None else len(self.tool_points)
        if n < 3:
            raise SpecInvalid("need at least 3 tool points")
        if min(self.pixel_sigma, self.depth_sigma, self.track_sigma) < 0:
            raise SpecInvalid("noise levels must be non-negative")
        if not 0 <= self.drop_prob < 1:
            raise SpecInvalid("drop_prob must lie in [0, 1)")
        if self.s_true <= 0:
            raise SpecInvalid("true scale must be positive")
        if sum(s.frames for s in self.tool_motion) > self.frames - 1:
            raise SpecInvalid("tool motion is longer than the clip")
        if sum(s.frames for s in self.camera_motion) > self.frames - 1:
            raise SpecInvalid("camera motion is longer than the clip")


def random_scene(seed, frames=31, n_points=40, camera_moves=True, **kw):
    """A SceneSpec with seeded random tool and camera motion that keeps the tool in view."""
    rng = _rng(seed, _MOTION)
    steps = frames - 1
    cuts = np.sort(rng.choice(np.arange(1, steps), size=min(2, steps - 1), replace=False))
    lengths = np.diff(np.concatenate([[0], cuts, [steps]]))
    segs = []
    for n in lengths:
        v = rng.normal(size=3)
        v *= rng.uniform(0.001, 0.004) / np.linalg.norm(v)
        w = rng.normal(size=3)
        w *= np.radians(rng.uniform(0.0, 3.0)) / np.linalg.norm(w)
        segs.append(MotionSegment(int(n), tuple(v), tuple(w)))
    cam = ()
    if camera_moves:
        v = rng.normal(size=3)
        v *= 0.002 / np.linalg.norm(v)
        w = rng.normal(size=3)
        w *= np.radians(0.2) / np.linalg.norm(w)
        cam = (MotionSegment(steps, tuple(v), tuple(w)),)
    return SceneSpec(seed=seed, frames=frames, n_points=n_points, tool_motion=tuple(segs),
                     camera_motion=cam, **kw)


@dataclass
class Bundle:
    """In-memory pipeline inputs produced by the generator."""

    instruction: str
    intrinsics: CameraIntrinsics
    relative_depths: list
    metric_reference: DepthFrame  # frame 0
    masks: list
    tracks: list  # pixels + camera-frame positions
    relative_poses: PoseSequence
    anchor_pose: RigidTransform  # known metric camera pose of frame 0
    features: list
    initial_tcp: RigidTransform


@dataclass
class GroundTruth:
    tool_poses: list
    camera_poses: list
    s: float
    d: float
    labels: dict
    apertures: list
    frame_times: list = field(default_factory=list)

    def steps(self):
        return [compose(b, a.inverse()) for a, b in zip(self.tool_poses, self.tool_poses[1:])]

    def to_json(self):
        return {"tool_poses": [p.to_json() for p in self.tool_poses],
                "camera_poses": [p.to_json() for p in self.camera_poses],
                "s": self.s, "d": self.d,
                "labels": {str(k): v for k, v in sorted(self.labels.items())},
                "apertures": list(self.apertures), "frame_times": list(self.frame_times)}

    @classmethod
    def from_json(cls, d):
        return cls([RigidTransform.from_json(p) for p in d["tool_poses"]],
                   [RigidTransform.from_json(p) for p in d["camera_poses"]],
                   d["s"], d["d"], {int(k): v for k, v in d["labels"].items()},
                   d["apertures"], d.get("frame_times", []))


def _path(start, segments, frames, centre_of):
    poses = [start]
    seq = [s for s in segments for _ in range(s.frames)]
    for t in range(frames - 1):
        p = poses[-1]
        if t < len(seq):
            p = compose(seq[t].step(centre_of(p)), p)
        poses.append(p)
    return poses


def _tool_points(spec):
    if spec.tool_points is not None:
        return np.asarray(spec.tool_points, float)
    rng = _rng(spec.seed, _SHAPE)
    half = np.asarray(spec.tool_extent) / 2
    # points on the surface of a box: pick a face, then a uniform spot on it
    pts = rng.uniform(-half, half, size=(spec.n_points, 3))
    axis = rng.integers(0, 3, spec.n_points)
    side = rng.choice([-1.0, 1.0], spec.n_points)
    pts[np.arange(spec.n_points), axis] = side * half[axis]
    return pts


def _wall_depth(spec, cam: RigidTransform, normal, offset):
    K = spec.intrinsics
    u, v = np.meshgrid(np.arange(K.width, dtype=float), np.arange(K.height, dtype=float))
    rays = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    dirs = rays @ cam.R.T
    denom = dirs @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (offset - normal @ cam.t) / denom
    return np.where(np.isfinite(z) & (z > 0), z, 0.0)


def _splat(depth, uv, z):
    """z-buffer point splats at the nearest pixel."""
    h, w = depth.shape
    cols = np.floor(uv[:, 0] + 0.5).astype(int)
    rows = np.floor(uv[:, 1] + 0.5).astype(int)
    ok = (z > 0) & (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    for r, c, zz in zip(rows[ok], cols[ok], z[ok]):
        if depth[r, c] <= 0 or zz < depth[r, c]:
            depth[r, c] = zz
    return depth


def _in_image(K, uv, z):
    return ((z > 0) & (uv[:, 0] > -0.5) & (uv[:, 0] < K.width - 0.5)
            & (uv[:, 1] > -0.5) & (uv[:, 1] < K.height - 0.5))


def _aperture(spec):
    rng = _rng(spec.seed, _FEAT)
    T = spec.frames
    close_at = rng.uniform(0.3, 0.6) * (T - 1)
    t = np.arange(T)
    return 1.0 / (1.0 + np.exp((t - close_at) / 1.5))


def generate(spec: SceneSpec):
    """Deterministically synthesize (Bundle, GroundTruth) from ``spec``."""
    spec.validate()
    K = spec.intrinsics
    F = spec.frames
    pts = _tool_points(spec)
    n_tool = len(pts)

    cam0 = spec.camera_start or look_at((0.0, -0.6, 0.45), (0.0, 0.0, 0.3))
    tool0 = spec.tool_start or RigidTransform(np.eye(3), cam0.apply([0.0, 0.0, 0.6]))
    tool_poses = _path(tool0, spec.tool_motion, F, lambda p: p.t)
    cam_poses = _path(cam0, spec.camera_motion, F, lambda p: p.t)

    # tilted background plane so frame-0 depth spans a range of values
    tilt = np.array([0.25, 0.35, 1.0])
    normal = cam0.R @ (tilt / np.linalg.norm(tilt))
    offset = normal @ cam0.apply([0.0, 0.0, spec.wall_depth])

    labels = {i: TOOL for i in range(n_tool)}
    world = np.stack([p.apply(pts) for p in tool_poses], axis=1)  # (N, F, 3)

    # outliers: copy a tool point's motion and add a constant independent drift
    orng = _rng(spec.seed, _OUTL)
    outl = []
    for j in range(spec.n_outliers):
        src = int(orng.integers(n_tool))
        dirn = orng.normal(size=3)
        dirn /= np.linalg.norm(dirn)
        outl.append(world[src] + np.arange(F)[:, None] * spec.outlier_speed * dirn)
        labels[n_tool + j] = OUTLIER

    masks, rel_depths, true_depths = [], [], []
    for f in range(F):
        cam_inv = cam_poses[f].inverse()
        Xc = cam_inv.apply(world[:, f])
        uv = K.project(Xc)
        depth = _wall_depth(spec, cam_poses[f], normal, offset)
        depth = _splat(depth, uv, Xc[:, 2])
        true_depths.append(depth)

        tool = np.zeros((K.height, K.width), dtype=bool)
        vis = _in_image(K, uv, Xc[:, 2])
        tool[np.floor(uv[vis, 1] + 0.5).astype(int), np.floor(uv[vis, 0] + 0.5).astype(int)] = True
        if spec.mask_dilation > 0:
            r = spec.mask_dilation
            yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
            tool = ndimage.binary_dilation(tool, structure=(xx**2 + yy**2) <= r * r)
        mrng = _rng(spec.seed, _MASK, f)
        if spec.mask_flicker > 0 and mrng.random() < spec.mask_flicker:
            tool = ndimage.binary_erosion(tool)
        masks.append(ToolMask(tool, f))

        drng = _rng(spec.seed, _DEPTH, f)
        noisy = depth + (drng.normal(0.0, spec.depth_sigma, depth.shape)
                         if spec.depth_sigma > 0 else 0.0)
        valid = (depth > 0) & (noisy > spec.d_true)
        rel_depths.append(DepthFrame((noisy - spec.d_true) / spec.s_true, valid))

    rrng = _rng(spec.seed, _REF)
    ref = true_depths[0] + (rrng.normal(0.0, spec.depth_sigma, true_depths[0].shape)
                            if spec.depth_sigma > 0 else 0.0)
    metric_ref = DepthFrame(ref, true_depths[0] > 0)

    # background: static points on the wall whose first pixel is off the tool mask
    brng = _rng(spec.seed, _BG)
    bg = []
    tries = 0
    while len(bg) < spec.n_background and tries < 1000 * max(spec.n_background, 1):
        tries += 1
        u, v = brng.uniform(0, K.width - 1), brng.uniform(0, K.height - 1)
        r, c = int(np.floor(v + 0.5)), int(np.floor(u + 0.5))
        if masks[0].tool[r, c] or true_depths[0][r, c] <= 0:
            continue
        ray = cam0.R @ np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
        p = cam0.apply(K.backproject(u, v, (offset - normal @ cam0.t) / (normal @ ray)))
        bg.append(np.repeat(p[None], F, axis=0))
        labels[n_tool + spec.n_outliers + len(bg) - 1] = BACKGROUND

    all_world = list(world) + outl + bg
    tracks = []
    for i, W in enumerate(all_world):
        vis = np.ones(F, dtype=bool)
        cam_pts = np.zeros((F, 3))
        uvs = np.zeros((F, 2))
        for f in range(F):
            trng = _rng(spec.seed, _TRACK, f * 100003 + i)
            Xc = cam_poses[f].inverse().apply(W[f])
            uv = K.project(Xc)
            vis[f] = bool(_in_image(K, uv[None], Xc[None, 2])[0])
            if spec.drop_prob > 0 and trng.random() < spec.drop_prob:
                vis[f] = False
            if (spec.occlusion is not None and labels[i] != BACKGROUND
                    and spec.occlusion[0] <= f < spec.occlusion[1]):
                vis[f] = False
            if spec.track_sigma > 0:
                Xc = Xc + trng.normal(0.0, spec.track_sigma, 3)
            if spec.pixel_sigma > 0:
                uv = uv + trng.normal(0.0, spec.pixel_sigma, 2)
            cam_pts[f], uvs[f] = Xc, uv
        tracks.append(PointTrack(i, vis, cam_pts, np.where(vis[:, None], uvs, np.nan)))

    times = [f / spec.fps for f in range(F)]
    base = cam_poses[0].inverse()
    rel = []
    for p in cam_poses:
        q = compose(base, p)
        rel.append(RigidTransform(q.R, q.t / spec.s_true))

    apert = _aperture(spec)
    frng = _rng(spec.feature_encoder_seed, _FEAT, 1)
    direction = frng.normal(size=spec.feature_dim)
    direction /= np.linalg.norm(direction)
    bias = frng.normal(0.0, 0.5, spec.feature_dim)
    features = []
    for f in range(F):
        nrng = _rng(spec.seed, _FEAT, 1000 + f)
        vals = apert[f] * 2.0 * direction + bias + nrng.normal(0.0, spec.feature_noise,
                                                                spec.feature_dim)
        features.append(FeatureVector(f, vals))

    bundle = Bundle(spec.instruction, K, rel_depths, metric_ref, masks, tracks,
                    PoseSequence(rel, times), cam_poses[0], features, tool_poses[0])
    truth = GroundTruth(tool_poses, cam_poses, spec.s_true, spec.d_true, labels,
                        [float(a) for a in apert], times)
    return bundle, truth


@dataclass
class Metrics:
    step_rotation_deg: list
    step_translation_m: list
    cumulative_rotation_deg: list
    cumulative_translation_m: list
    max_translation_m: float
    max_rotation_deg: float
    translation_pass: bool
    rotation_pass: bool

    @property
    def final_translation_m(self):
        return self.cumulative_translation_m[-1]

    @property
    def final_rotation_deg(self):
        return self.cumulative_rotation_deg[-1]

    @property
    def passed(self):
        return self.translation_pass and self.rotation_pass

    def to_json(self):
        return {"step_rotation_deg": self.step_rotation_deg,
                "step_translation_m": self.step_translation_m,
                "cumulative_rotation_deg": self.cumulative_rotation_deg,
                "cumulative_translation_m": self.cumulative_translation_m,
                "final_translation_m": self.final_translation_m,
                "final_rotation_deg": self.final_rotation_deg,
                "max_translation_m": self.max_translation_m,
                "max_rotation_deg": self.max_rotation_deg,
                "translation_pass": self.translation_pass, "rotation_pass": self.rotation_pass,
                "pass": self.passed}


def evaluate(recovered, truth: GroundTruth, max_translation_m=0.02, max_rotation_deg=10.0):
    """Per-step and cumulative TCP errors against the generator's tool path.

    The TCP is the tool-frame origin. Step translation error is measured at the
    true TCP position, so it does not depend on the world origin. Pass/fail
    uses the cumulative error at the final frame.
    """
    steps = truth.steps()
    if len(recovered) != len(steps):
        raise HorizonMismatch(f"{len(recovered)} actions for a {len(steps)}-step horizon")
    srot, strans, crot, ctrans = [], [], [], []
    pose = truth.tool_poses[0]
    for a, true_step, g_prev, g in zip(recovered, steps, truth.tool_poses, truth.tool_poses[1:]):
        c = g_prev.t
        srot.append(float(np.degrees(rotation_angle(a.transform.R.T @ true_step.R))))
        strans.append(float(np.linalg.norm(a.transform.apply(c) - true_step.apply(c))))
        pose = a.absolute_pose if a.absolute_pose is not None else compose(a.transform, pose)
        crot.append(float(np.degrees(rotation_angle(pose.R.T @ g.R))))
        ctrans.append(float(np.linalg.norm(pose.t - g.t)))
    if not steps:
        crot, ctrans = [0.0], [0.0]
    return Metrics(srot, strans, crot, ctrans, max(ctrans), max(crot),
                   ctrans[-1] < max_translation_m, crot[-1] < max_rotation_deg)


def write_bundle(bundle: Bundle, truth: GroundTruth, out_dir):
    """Write the bundle in the pipeline's file formats plus truth.json and a run manifest."""
    from . import fileio

    out = Path(out_dir)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    rel_paths, mask_paths = [], []
    for f, (d, m) in enumerate(zip(bundle.relative_depths, bundle.masks)):
        rp = f"depth/rel_{f:04d}.pfm"
        mp = f"masks/mask_{f:04d}.pgm"
        fileio.write_depth(out / rp, d)
        fileio.write_pgm(out / mp, m.tool)
        rel_paths.append(rp)
        mask_paths.append(mp)
    fileio.write_depth(out / "depth/metric_ref_0000.pfm", bundle.metric_reference)
    fileio.write_tracks(out / "tracks.csv", bundle.tracks)
    fileio.write_features(out / "features.csv", bundle.features)
    fileio.write_poses(out / "camera_poses.json", bundle.relative_poses)
    fileio.write_json(out / "intrinsics.json", bundle.intrinsics.to_json())
    fileio.write_json(out / "truth.json", truth.to_json())
    with open(out / "apertures.csv", "w") as f:
        f.write("frame,y0\n")
        for i, a in enumerate(truth.apertures):
            f.write(f"{i},{a!r}\n")
    manifest = {
        "instruction": bundle.instruction,
        "depth_provenance": "synthetic oracle",
        "intrinsics": "intrinsics.json",
        "relative_depth": rel_paths,
        "metric_reference": "depth/metric_ref_0000.pfm",
        "camera_poses": "camera_poses.json",
        "anchor_pose": bundle.anchor_pose.to_json(),
        "masks": mask_paths,
        "tracks": "tracks.csv",
        "tracks_frame": "camera",
        "features": "features.csv",
        "initial_tcp": bundle.initial_tcp.to_json(),
        "seed": 0,
    }
    fileio.write_json(out / "manifest.json", manifest)
    return out / "manifest.json"


def load_truth(path):
    with open(path) as f:
        return GroundTruth.from_json(json.load(f))
