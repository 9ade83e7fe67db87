"""Lifting masked 2D/3D point tracks into the world frame and rigid-consistency filtering."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .depth import CameraIntrinsics, DepthFrame, PoseSequence
from .errors import (DegenerateConfiguration, FrameCountMismatch, IntrinsicsMissing,
                     TooFewTracks, TooFewVisibleFrames)
from .geometry import kabsch_align

# mean residuals below this (m) are reported as exactly zero so exact ties resolve by track_id
RESIDUAL_FLOOR = 1e-9


@dataclass(frozen=True)
class PointTrack:
    track_id: int
    visible: np.ndarray  # (F,) bool
    positions: np.ndarray | None = None  # (F, 3), NaN where not visible
    pixels: np.ndarray | None = None  # (F, 2) sub-pixel (u, v), NaN where unknown

    def __post_init__(self):
        vis = np.array(self.visible, dtype=bool).reshape(-1)
        n = len(vis)
        object.__setattr__(self, "visible", vis)
        for name, width in (("positions", 3), ("pixels", 2)):
            a = getattr(self, name)
            if a is None:
                continue
            a = np.array(a, dtype=float).reshape(n, width)
            if name == "positions":
                a[~vis] = np.nan
                if not np.all(np.isfinite(a[vis])):
                    raise ValueError(f"track {self.track_id}: visible frame without a position")
            object.__setattr__(self, name, a)

    @property
    def n_frames(self):
        return len(self.visible)

    @property
    def visibility_fraction(self):
        return float(self.visible.mean()) if self.n_frames else 0.0


@dataclass(frozen=True)
class ToolMask:
    tool: np.ndarray  # (H, W) bool
    frame: int = 0

    @property
    def height(self):
        return self.tool.shape[0]

    @property
    def width(self):
        return self.tool.shape[1]


@dataclass(frozen=True)
class RigidityScore:
    track_id: int
    mean_residual: float
    frames_used: int


@dataclass(frozen=True)
class FilterConfig:
    k: int = 10
    min_visibility_fraction: float = 0.8
    min_scored_fraction: float = 0.5
    method: str = "global"  # or "ransac"
    ransac_hypotheses: int = 200
    ransac_threshold: float = 0.005
    seed: int = 0

    def __post_init__(self):
        if self.k < 3:
            raise ValueError("k must be >= 3")
        if not 0 < self.min_visibility_fraction <= 1:
            raise ValueError("min_visibility_fraction must lie in (0, 1]")
        if self.method not in ("global", "ransac"):
            raise ValueError(f"unknown selection method {self.method!r}")


def stack(tracks):
    """(N, F, 3) positions and (N, F) visibility."""
    if not tracks:
        return np.zeros((0, 0, 3)), np.zeros((0, 0), dtype=bool)
    lengths = {t.n_frames for t in tracks}
    if len(lengths) != 1:
        raise FrameCountMismatch(f"tracks have differing lengths {sorted(lengths)}")
    P = np.stack([t.positions for t in tracks])
    V = np.stack([t.visible for t in tracks])
    return P, V


def lift_tracks(tracks_2d, depths, intrinsics: CameraIntrinsics, cam_poses: PoseSequence,
                source="depth"):
    """Express tracks as world-frame 3D trajectories.

    ``source="depth"`` back-projects each visible pixel through the metric depth
    at the nearest raster cell; visibility is cleared where that cell is
    invalid. ``source="camera"`` takes the track's own camera-frame positions;
    ``source="world"`` returns the tracks unchanged.
    """
    if source == "world":
        return list(tracks_2d)
    if intrinsics is None and source == "depth":
        raise IntrinsicsMissing("back-projection requires camera intrinsics")
    n_frames = len(cam_poses)
    if source == "depth" and len(depths) != n_frames:
        raise FrameCountMismatch(f"{len(depths)} depth frames vs {n_frames} camera poses")
    out = []
    for tr in tracks_2d:
        if tr.n_frames != n_frames:
            raise FrameCountMismatch(f"track {tr.track_id} has {tr.n_frames} frames, "
                                     f"expected {n_frames}")
        vis = tr.visible.copy()
        pos = np.full((n_frames, 3), np.nan)
        for f in np.flatnonzero(vis):
            if source == "camera":
                X = tr.positions[f]
            else:
                u, v = tr.pixels[f]
                D = depths[f]
                col, row = int(math.floor(u + 0.5)), int(math.floor(v + 0.5))
                if not (0 <= row < D.height and 0 <= col < D.width):
                    raise ValueError(f"track {tr.track_id} frame {f}: pixel ({u}, {v}) "
                                     "outside the image")
                if not D.valid[row, col]:
                    vis[f] = False
                    continue
                X = intrinsics.backproject(u, v, D.values[row, col])
            pos[f] = cam_poses[f].apply(X)
        out.append(replace(tr, visible=vis, positions=pos))
    return out


def _pixel_in(mask: ToolMask, uv):
    col, row = int(math.floor(uv[0] + 0.5)), int(math.floor(uv[1] + 0.5))
    return 0 <= row < mask.height and 0 <= col < mask.width and bool(mask.tool[row, col])


def mask_tracks(tracks, masks, strict=False):
    """Keep tracks whose first visible pixel lies on the tool mask of that frame.

    With ``strict`` the per-frame visibility is also cleared wherever the
    pixel leaves that frame's mask.
    """
    by_frame = {m.frame: m for m in masks}
    out = []
    for tr in tracks:
        seen = np.flatnonzero(tr.visible)
        if seen.size == 0 or tr.pixels is None:
            continue
        f0 = int(seen[0])
        if f0 not in by_frame or not _pixel_in(by_frame[f0], tr.pixels[f0]):
            continue
        if strict:
            vis = tr.visible.copy()
            for f in seen:
                m = by_frame.get(int(f))
                if m is not None and not _pixel_in(m, tr.pixels[f]):
                    vis[f] = False
            pos = None if tr.positions is None else np.where(vis[:, None], tr.positions, np.nan)
            tr = replace(tr, visible=vis, positions=pos)
        out.append(tr)
    return out


def _pair_residuals(P, V, fit_set, cfg, rng):
    """Squared per-track residuals for every consecutive frame pair.

    Returns (N, F-1) array with NaN where a track is not scored.
    """
    n, F = V.shape
    out = np.full((n, max(F - 1, 0)), np.nan)
    for t in range(F - 1):
        both = V[:, t] & V[:, t + 1]
        fit = both & fit_set
        if fit.sum() < 3:
            continue
        try:
            if cfg.method == "ransac":
                T = _ransac_fit(P[fit, t], P[fit, t + 1], cfg, rng)
            else:
                T = kabsch_align(P[fit, t], P[fit, t + 1])
        except DegenerateConfiguration:
            continue
        d = T.apply(P[both, t]) - P[both, t + 1]
        out[both, t] = np.einsum("ij,ij->i", d, d)
    return out


def _ransac_fit(src, dst, cfg, rng):
    n = len(src)
    best, best_count = None, -1
    for _ in range(cfg.ransac_hypotheses):
        idx = rng.choice(n, size=3, replace=False)
        try:
            T = kabsch_align(src[idx], dst[idx])
        except DegenerateConfiguration:
            continue
        d = T.apply(src) - dst
        count = int(np.sum(np.einsum("ij,ij->i", d, d) <= cfg.ransac_threshold**2))
        if count > best_count:
            best, best_count = T, count
    if best is None:
        return kabsch_align(src, dst)
    d = best.apply(src) - dst
    inl = np.einsum("ij,ij->i", d, d) <= cfg.ransac_threshold**2
    return kabsch_align(src[inl], dst[inl]) if inl.sum() >= 3 else best


def _summarize(sq):
    used = np.sum(~np.isnan(sq), axis=1)
    with np.errstate(invalid="ignore"):
        mean = np.sqrt(np.nansum(sq, axis=1) / np.maximum(used, 1))
    mean = np.where(mean < RESIDUAL_FLOOR, 0.0, mean)
    return mean, used


def select_rigid(tracks, cfg: FilterConfig = FilterConfig()):
    """Top-k tracks most consistent with a single rigid motion.

    Scoring: per consecutive frame pair, fit one rigid transform to the
    mutually visible candidates and take each track's squared distance under
    it; a track's score is the RMS over the pairs where it was scored. The
    worst half is then dropped from the fit set and all candidates re-scored
    once. Ties in the final score go to the lower track_id.

    Returns (selected tracks, scores for every candidate).
    """
    cands = [t for t in tracks if t.visibility_fraction >= cfg.min_visibility_fraction]
    if len(cands) < cfg.k:
        raise TooFewTracks(f"{len(cands)} tracks meet the visibility threshold, need {cfg.k}")
    P, V = stack(cands)
    n = len(cands)
    ids = np.array([t.track_id for t in cands])
    rng = np.random.default_rng(cfg.seed)

    sq = _pair_residuals(P, V, np.ones(n, dtype=bool), cfg, rng)
    scored_pairs = np.any(~np.isnan(sq), axis=0)
    if not scored_pairs.any():
        raise TooFewVisibleFrames("no frame pair has >= 3 mutually visible tracks")
    mean, used = _summarize(sq)

    n_keep = max(math.ceil(n / 2), 3)
    keep = np.zeros(n, dtype=bool)
    order = np.lexsort((ids, np.where(used > 0, mean, np.inf)))
    keep[order[:n_keep]] = True
    sq = _pair_residuals(P, V, keep, cfg, rng)
    if not np.any(~np.isnan(sq)):
        raise TooFewVisibleFrames("no frame pair has >= 3 mutually visible retained tracks")
    mean, used = _summarize(sq)

    n_pairs = int(np.sum(np.any(~np.isnan(sq), axis=0)))
    eligible = used >= cfg.min_scored_fraction * n_pairs
    if eligible.sum() < cfg.k:
        raise TooFewTracks(f"only {int(eligible.sum())} tracks scored on enough frame pairs")
    scores = [RigidityScore(int(i), float(m) if u else math.inf, int(u))
              for i, m, u in zip(ids, mean, used)]
    order = np.lexsort((ids, np.where(eligible, mean, np.inf)))
    chosen = sorted(order[:cfg.k], key=lambda j: ids[j])
    return [cands[j] for j in chosen], scores
