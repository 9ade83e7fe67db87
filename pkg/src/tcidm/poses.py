"""Per-step rigid motion recovery from filtered tracks and TCP action emission."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateConfiguration, InsufficientVisibility, WindowTooLarge
from .geometry import RigidTransform, canonical_quat, compose, kabsch_align, matrix_from_quat, \
    rotation_angle
from .tracks import stack


@dataclass(frozen=True)
class TcpAction:
    """Motion commanded at ``frame`` (the transform estimated from frame-1 -> frame)."""

    frame: int
    transform: RigidTransform
    absolute_pose: RigidTransform | None = None
    gripper: float | None = None
    time_s: float | None = None

    def __post_init__(self):
        if self.gripper is not None and not 0.0 <= self.gripper <= 1.0:
            raise ValueError(f"gripper command {self.gripper} outside [0, 1]")


@dataclass
class TrajectoryReport:
    residuals: list = field(default_factory=list)  # RMS point misfit per step (m)
    inliers: list = field(default_factory=list)  # points used per step
    rotation_steps_deg: list = field(default_factory=list)
    translation_steps_m: list = field(default_factory=list)  # tracked-centroid displacement
    gaps: list = field(default_factory=list)  # (first_frame, last_frame) bridged by interpolation

    @property
    def max_rotation_step_deg(self):
        return max(self.rotation_steps_deg, default=0.0)

    @property
    def max_translation_step_m(self):
        return max(self.translation_steps_m, default=0.0)

    def to_json(self):
        return {
            "residuals_m": self.residuals,
            "inliers": self.inliers,
            "rotation_steps_deg": self.rotation_steps_deg,
            "translation_steps_m": self.translation_steps_m,
            "max_rotation_step_deg": self.max_rotation_step_deg,
            "max_translation_step_m": self.max_translation_step_m,
            "gaps": [list(g) for g in self.gaps],
        }


def _fit_span(P, V, t0, t1):
    both = V[:, t0] & V[:, t1]
    if both.sum() < 3:
        raise InsufficientVisibility(f"{int(both.sum())} tracks visible at frames {t0} and {t1}",
                                     frame=t0)
    src, dst = P[both, t0], P[both, t1]
    try:
        T = kabsch_align(src, dst)
    except DegenerateConfiguration as e:
        raise DegenerateConfiguration(str(e), frame=t0) from None
    d = T.apply(src) - dst
    return T, float(np.sum(d * d)), src, dst


def recover_step(tracks, t):
    """Rigid transform carrying the tracks visible at t and t+1 from t to t+1, plus its
    summed squared residual (m^2)."""
    P, V = stack(tracks)
    T, res, _, _ = _fit_span(P, V, t, t + 1)
    return T, res


def _step_stats(T, src, dst, res, n_steps=1):
    n = len(src)
    shift = np.linalg.norm(dst.mean(axis=0) - src.mean(axis=0)) / n_steps
    return (float(np.sqrt(res / n)), n, float(np.degrees(rotation_angle(T.R))) / n_steps,
            float(shift))


def recover_trajectory(tracks, initial_tcp: RigidTransform | None = None, gap_policy="interpolate",
                       frame_times=None):
    """One TcpAction per step t -> t+1 (tagged frame t+1).

    Under ``gap_policy="interpolate"`` a step that cannot be estimated is
    bridged: the motion from the last good frame to the next frame that can be
    aligned with it is split into equal constant-twist steps and the span is
    recorded in ``report.gaps``. ``"fail-fast"`` re-raises immediately.
    """
    if gap_policy not in ("interpolate", "fail-fast"):
        raise ValueError(f"unknown gap policy {gap_policy!r}")
    P, V = stack(tracks)
    F = V.shape[1]
    if F < 2:
        raise InsufficientVisibility("need tracks spanning >= 2 frames")
    report = TrajectoryReport()
    steps = []
    t = 0
    while t < F - 1:
        try:
            T, res, src, dst = _fit_span(P, V, t, t + 1)
            steps.append(T)
            stats = _step_stats(T, src, dst, res)
            for lst, x in zip((report.residuals, report.inliers, report.rotation_steps_deg,
                               report.translation_steps_m), stats):
                lst.append(x)
            t += 1
            continue
        except (InsufficientVisibility, DegenerateConfiguration):
            if gap_policy == "fail-fast":
                raise
            err = None
            for t1 in range(t + 2, F):
                try:
                    T, res, src, dst = _fit_span(P, V, t, t1)
                    break
                except (InsufficientVisibility, DegenerateConfiguration) as e:
                    err = e
            else:
                raise err if err is not None else InsufficientVisibility(
                    "cannot bridge gap at end of sequence", frame=t)
        n = t1 - t
        piece = T.power(1.0 / n)
        stats = _step_stats(piece, src, dst, res, n_steps=n)
        for _ in range(n):
            steps.append(piece)
            for lst, x in zip((report.residuals, report.inliers, report.rotation_steps_deg,
                               report.translation_steps_m), stats):
                lst.append(x)
        report.gaps.append((t, t1))
        t = t1

    actions = []
    pose = initial_tcp
    for i, T in enumerate(steps):
        if pose is not None:
            pose = compose(T, pose)
        actions.append(TcpAction(frame=i + 1, transform=T, absolute_pose=pose,
                                 time_s=None if frame_times is None else frame_times[i + 1]))
    return actions, report


def average_quaternions(qs, weights=None):
    """Sign-aligned normalized mean; adequate for the small spreads inside a smoothing window."""
    qs = np.asarray(qs, dtype=float)
    ref = qs[0]
    aligned = np.where((qs @ ref < 0)[:, None], -qs, qs)
    w = np.ones(len(qs)) if weights is None else np.asarray(weights, float)
    return canonical_quat(w @ aligned)


def smooth_trajectory(actions, window=1):
    """Centered moving average of step translations and step rotations.

    Windows shrink symmetrically at the ends. Absolute poses, if present, are
    re-chained from the pose preceding the first action.
    """
    n = len(actions)
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be an odd positive integer")
    if window > n:
        raise WindowTooLarge(f"window {window} exceeds {n} actions")
    if window == 1:
        return list(actions)
    half = window // 2
    ts = np.array([a.transform.t for a in actions])
    qs = np.array([a.transform.quat for a in actions])
    start = None
    if actions[0].absolute_pose is not None:
        start = compose(actions[0].transform.inverse(), actions[0].absolute_pose)
    out = []
    pose = start
    for i, a in enumerate(actions):
        h = min(half, i, n - 1 - i)
        sl = slice(i - h, i + h + 1)
        T = RigidTransform(matrix_from_quat(average_quaternions(qs[sl])), ts[sl].mean(axis=0))
        if pose is not None:
            pose = compose(T, pose)
        out.append(replace(a, transform=T, absolute_pose=pose))
    return out


@dataclass(frozen=True)
class Violation:
    frame: int
    kind: str  # "translation" | "rotation"
    magnitude: float
    limit: float


def safety_check(actions, max_step_m, max_step_deg):
    """Steps whose translation (m) or rotation (deg) exceeds the limits.

    Translation is the TCP displacement when absolute poses are known, else the
    norm of the step translation.
    """
    if not (max_step_m > 0 and max_step_deg > 0):
        raise ValueError("limits must be positive")
    out = []
    prev = None
    if actions and actions[0].absolute_pose is not None:
        prev = compose(actions[0].transform.inverse(), actions[0].absolute_pose)
    for a in actions:
        if a.absolute_pose is not None and prev is not None:
            dist = float(np.linalg.norm(a.absolute_pose.t - prev.t))
        else:
            dist = float(np.linalg.norm(a.transform.t))
        prev = a.absolute_pose
        ang = float(np.degrees(rotation_angle(a.transform.R)))
        if dist > max_step_m:
            out.append(Violation(a.frame, "translation", dist, max_step_m))
        if ang > max_step_deg:
            out.append(Violation(a.frame, "rotation", ang, max_step_deg))
    return out
