"""Metric upgrade of relative depth rasters and camera trajectories."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (DegenerateDepth, EmptySequence, FrameCountMismatch, InsufficientOverlap,
                     NonPositiveScale)
from .geometry import RigidTransform, compose


@dataclass(frozen=True)
class DepthFrame:
    values: np.ndarray  # (H, W) float
    valid: np.ndarray = None  # (H, W) bool

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError(f"depth raster must be 2-D, got shape {v.shape}")
        ok = np.isfinite(v) & (v > 0)
        m = ok if self.valid is None else (np.asarray(self.valid, dtype=bool) & ok)
        if m.shape != v.shape:
            raise ValueError("validity raster shape does not match depth")
        v = np.where(m, v, 0.0)
        v.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "valid", m)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class ScaleShift:
    s: float
    d: float

    def __post_init__(self):
        if not self.s > 0:
            raise NonPositiveScale(f"scale must be positive, got {self.s}")

    def to_json(self):
        return {"s": float(self.s), "d": float(self.d)}


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width is not None and not (0 <= self.cx <= self.width):
            raise ValueError("principal point outside image")
        if self.height is not None and not (0 <= self.cy <= self.height):
            raise ValueError("principal point outside image")

    def backproject(self, u, v, z):
        """Pixel(s) + depth -> camera-frame point(s)."""
        u, v, z = np.asarray(u, float), np.asarray(v, float), np.asarray(z, float)
        return np.stack([(u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z], axis=-1)

    def project(self, X):
        """Camera-frame point(s) (..., 3) -> pixel coordinates (..., 2)."""
        X = np.asarray(X, float)
        z = X[..., 2]
        return np.stack([self.fx * X[..., 0] / z + self.cx, self.fy * X[..., 1] / z + self.cy],
                        axis=-1)

    def to_json(self):
        d = {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}
        if self.width is not None:
            d["width"], d["height"] = self.width, self.height
        return d


@dataclass(frozen=True)
class PoseSequence:
    """Camera-to-world poses, one per frame."""

    poses: tuple
    frame_times: tuple = field(default=None)

    def __post_init__(self):
        poses = tuple(self.poses)
        times = (tuple(float(i) for i in range(len(poses))) if self.frame_times is None
                 else tuple(float(x) for x in self.frame_times))
        if len(times) != len(poses):
            raise FrameCountMismatch(f"{len(poses)} poses vs {len(times)} frame times")
        if any(b <= a for a, b in zip(times, times[1:])) or (times and times[0] < 0):
            raise ValueError("frame times must be non-negative and strictly increasing")
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "frame_times", times)

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]


def _overlap(relative: DepthFrame, metric_ref: DepthFrame, domain=None, stride=1):
    if relative.values.shape != metric_ref.values.shape:
        raise FrameCountMismatch("relative and reference rasters differ in size")
    joint = relative.valid & metric_ref.valid
    if domain is not None:
        joint = joint & np.asarray(domain, dtype=bool)
    if stride > 1:
        grid = np.zeros_like(joint)
        grid[::stride, ::stride] = True
        joint = joint & grid
    return relative.values[joint], metric_ref.values[joint]


def _solve(x, y):
    if x.size < 2:
        raise InsufficientOverlap(f"need >= 2 overlapping pixels, got {x.size}")
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    sxx = dx @ dx
    if sxx == 0.0:
        raise DegenerateDepth("relative depth is constant over the fitting domain")
    s = (dx @ (y - ym)) / sxx
    if not s > 0:
        raise NonPositiveScale(f"least-squares scale is {s:.6g}")
    return ScaleShift(float(s), float(ym - s * xm))


def fit_scale_shift(relative: DepthFrame, metric_ref: DepthFrame, domain=None, stride=1,
                    robust=False, trim=0.1) -> ScaleShift:
    """Closed-form (s, d) minimizing sum (s * rel + d - ref)^2 over the jointly valid pixels.

    ``domain`` further restricts the pixel set; ``stride`` subsamples it on a
    regular grid. With ``robust`` the worst ``trim`` fraction of residuals is
    dropped once and the fit repeated.
    """
    x, y = _overlap(relative, metric_ref, domain, stride)
    params = _solve(x, y)
    if robust:
        r = np.abs(params.s * x + params.d - y)
        keep = r <= np.quantile(r, 1.0 - trim)
        params = _solve(x[keep], y[keep])
    return params


def scale_shift_residual(params: ScaleShift, relative: DepthFrame, metric_ref: DepthFrame,
                         domain=None) -> float:
    x, y = _overlap(relative, metric_ref, domain)
    r = params.s * x + params.d - y
    return float(r @ r)


def apply_scale_shift(frames, params: ScaleShift):
    out = []
    for f in frames:
        v = params.s * f.values + params.d
        out.append(DepthFrame(v, f.valid & (v > 0)))
    return out


def per_frame_residuals(relative_frames, metric_frames, params: ScaleShift):
    """RMS misfit (m) of the global (s, d) against each frame that has a metric counterpart.

    ``metric_frames`` entries may be None. Reports drift only; nothing is refit.
    """
    out = []
    for rel, ref in zip(relative_frames, metric_frames):
        if ref is None:
            out.append(None)
            continue
        x, y = _overlap(rel, ref)
        out.append(float(np.sqrt(np.mean((params.s * x + params.d - y) ** 2))) if x.size else None)
    return out


def metricize_poses(rel: PoseSequence, scale: ScaleShift, anchor_gt: RigidTransform) -> PoseSequence:
    """Scale relative translations by s, then left-multiply the rigid correction that
    brings scaled frame 0 onto the known metric pose of frame 0."""
    if len(rel) == 0:
        raise EmptySequence("no poses to metricize")
    scaled = [RigidTransform(p.R, scale.s * p.t) for p in rel.poses]
    correction = compose(anchor_gt, scaled[0].inverse())
    poses = [compose(correction, p) for p in scaled]
    poses[0] = anchor_gt
    return PoseSequence(poses, rel.frame_times)
