"""Readers and writers for every on-disk format the pipeline touches."""
from __future__ import annotations

import csv
import io
import json
import re
from pathlib import Path

import numpy as np

from .depth import CameraIntrinsics, DepthFrame, PoseSequence
from .errors import UnknownFormat
from .geometry import RigidTransform, canonical_quat
from .heads import FeatureVector
from .poses import TcpAction
from .tracks import PointTrack, ToolMask


# --- PFM / PGM ---------------------------------------------------------------

def write_pfm(path, data):
    """Single-channel little-endian PFM. Rows are stored bottom-up."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim != 2:
        raise ValueError("only single-channel rasters are supported")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(np.flipud(data)).tobytes())


def _header_tokens(f, n):
    tokens = []
    while len(tokens) < n:
        line = f.readline()
        if not line:
            raise ValueError("truncated header")
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    return tokens


def read_pfm(path):
    with open(path, "rb") as f:
        magic, w, h, scale = _header_tokens(f, 4)
        if magic not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        channels = 3 if magic == b"PF" else 1
        w, h, scale = int(w), int(h), float(scale)
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(w * h * channels * 4), dtype=dtype)
    if data.size != w * h * channels:
        raise ValueError(f"{path}: truncated raster")
    data = data.reshape(h, w, channels)[..., 0]
    return np.flipud(data).astype(float)


def write_pgm(path, mask):
    mask = np.asarray(mask)
    img = (mask.astype(bool) * 255).astype(np.uint8) if mask.dtype == bool else mask.astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        magic, w, h, maxval = _header_tokens(f, 4)
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM")
        w, h, maxval = int(w), int(h), int(maxval)
        dtype = np.uint8 if maxval < 256 else ">u2"
        data = np.frombuffer(f.read(), dtype=dtype)[: w * h]
    return data.reshape(h, w)


def read_depth(path, mask_path=None):
    """Non-positive or non-finite PFM values are invalid; an optional PGM mask (> 127 valid)
    further restricts validity."""
    values = read_pfm(path)
    valid = None if mask_path is None else read_pgm(mask_path) > 127
    return DepthFrame(values, valid)


def write_depth(path, frame: DepthFrame):
    write_pfm(path, np.where(frame.valid, frame.values, 0.0))


def read_mask(path, frame=0):
    return ToolMask(read_pgm(path) > 127, frame)


# --- small JSON documents ----------------------------------------------------

def read_intrinsics(path):
    with open(path) as f:
        d = json.load(f)
    return CameraIntrinsics(d["fx"], d["fy"], d["cx"], d["cy"], d.get("width"), d.get("height"))


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def pose_records(seq: PoseSequence):
    return [{"frame": i, "time_s": t, **p.to_json()}
            for i, (p, t) in enumerate(zip(seq.poses, seq.frame_times))]


def write_poses(path, seq: PoseSequence):
    write_json(path, pose_records(seq))


def read_poses(path):
    with open(path) as f:
        recs = sorted(json.load(f), key=lambda r: r["frame"])
    return PoseSequence([RigidTransform.from_json(r) for r in recs],
                        [r.get("time_s", r["frame"]) for r in recs])


# --- tracks CSV --------------------------------------------------------------

TRACK_HEADER = ["track_id", "frame", "u", "v", "x", "y", "z", "visible"]


def _num(x):
    return "" if x is None or not np.isfinite(x) else repr(float(x))


def write_tracks(path, tracks):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRACK_HEADER)
        for tr in tracks:
            for fr in range(tr.n_frames):
                uv = tr.pixels[fr] if tr.pixels is not None else (None, None)
                xyz = tr.positions[fr] if tr.positions is not None else (None, None, None)
                w.writerow([tr.track_id, fr, *map(_num, uv), *map(_num, xyz),
                            int(tr.visible[fr])])


def read_tracks(path):
    rows = {}
    n_frames = 0
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            tid, fr = int(r["track_id"]), int(r["frame"])
            rows.setdefault(tid, {})[fr] = r
            n_frames = max(n_frames, fr + 1)
    tracks = []
    for tid in sorted(rows):
        vis = np.zeros(n_frames, dtype=bool)
        uv = np.full((n_frames, 2), np.nan)
        xyz = np.full((n_frames, 3), np.nan)
        for fr, r in rows[tid].items():
            vis[fr] = r["visible"].strip() in ("1", "true", "True")
            if r["u"] != "" and r["v"] != "":
                uv[fr] = float(r["u"]), float(r["v"])
            if r["x"] != "":
                xyz[fr] = float(r["x"]), float(r["y"]), float(r["z"])
        has_xyz = bool(np.all(np.isfinite(xyz[vis]))) and np.isfinite(xyz).any()
        has_uv = np.isfinite(uv).any()
        tracks.append(PointTrack(tid, vis, xyz if has_xyz else None, uv if has_uv else None))
    return tracks


# --- features / hand states ---------------------------------------------------

def write_features(path, features):
    feats = list(features)
    dim = len(feats[0].values) if feats else 0
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["frame"] + [f"v{i}" for i in range(dim)])
        for fv in feats:
            w.writerow([fv.frame] + [repr(float(x)) for x in fv.values])


def write_features_bin(path, features):
    """JSON header line {"dims", "frames"} followed by little-endian float64 rows."""
    feats = list(features)
    dim = len(feats[0].values) if feats else 0
    head = {"dims": dim, "frames": [fv.frame for fv in feats]}
    with open(path, "wb") as f:
        f.write(json.dumps(head).encode() + b"\n")
        f.write(np.asarray([fv.values for fv in feats], dtype="<f8").tobytes())


def read_features(path):
    path = Path(path)
    with open(path, "rb") as f:
        first = f.readline()
        if first.lstrip().startswith(b"{"):
            head = json.loads(first)
            data = np.frombuffer(f.read(), dtype="<f8").reshape(len(head["frames"]), head["dims"])
            return [FeatureVector(int(fr), data[i].copy()) for i, fr in enumerate(head["frames"])]
    with open(path, newline="") as f:
        r = csv.reader(f)
        next(r)
        return [FeatureVector(int(row[0]), np.array([float(x) for x in row[1:]]))
                for row in r if row]


# --- actions ------------------------------------------------------------------

ACTION_CSV_HEADER = ["frame", "time_s", "qw", "qx", "qy", "qz", "tx", "ty", "tz",
                     "abs_qw", "abs_qx", "abs_qy", "abs_qz", "abs_tx", "abs_ty", "abs_tz",
                     "gripper"]


def action_record(a: TcpAction):
    rec = {"frame": a.frame, "q": canonical_quat(a.transform.quat).tolist(),
           "t": a.transform.t.tolist(), "abs_q": None, "abs_t": None,
           "gripper": None if a.gripper is None else float(a.gripper)}
    if a.absolute_pose is not None:
        rec["abs_q"] = canonical_quat(a.absolute_pose.quat).tolist()
        rec["abs_t"] = a.absolute_pose.t.tolist()
    if a.time_s is not None:
        rec["time_s"] = float(a.time_s)
    return rec


def action_from_record(rec):
    absolute = None
    if rec.get("abs_q") is not None:
        absolute = RigidTransform.from_quat(rec["abs_q"], rec["abs_t"])
    return TcpAction(int(rec["frame"]), RigidTransform.from_quat(rec["q"], rec["t"]), absolute,
                     rec.get("gripper"), rec.get("time_s"))


def dumps_actions_jsonl(actions):
    return "".join(json.dumps(action_record(a), sort_keys=True) + "\n" for a in actions)


def write_actions(path, actions):
    with open(path, "w") as f:
        f.write(dumps_actions_jsonl(actions))


def _records_jsonl(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def _canonical_record(rec):
    """Sign-canonical quaternions; values otherwise untouched."""
    rec = dict(rec)
    for k in ("q", "abs_q"):
        if rec.get(k) is not None:
            q = np.asarray(rec[k], float)
            nz = np.flatnonzero(q)
            if nz.size and q[nz[0]] < 0:
                rec[k] = (-q + 0.0).tolist()
    return rec


def read_actions(path):
    return [action_from_record(r) for r in _records_jsonl(path)]


def _csv_row(rec):
    def cells(v, n):
        return [""] * n if v is None else [repr(float(x)) for x in v]
    return ([str(rec["frame"]), "" if rec.get("time_s") is None else repr(float(rec["time_s"]))]
            + cells(rec["q"], 4) + cells(rec["t"], 3) + cells(rec.get("abs_q"), 4)
            + cells(rec.get("abs_t"), 3)
            + ["" if rec.get("gripper") is None else repr(float(rec["gripper"]))])


def _record_from_csv(row):
    def vec(keys):
        vals = [row[k] for k in keys]
        return None if all(v == "" for v in vals) else [float(v) for v in vals]
    rec = {"frame": int(row["frame"]), "q": vec(["qw", "qx", "qy", "qz"]),
           "t": vec(["tx", "ty", "tz"]), "abs_q": vec(["abs_qw", "abs_qx", "abs_qy", "abs_qz"]),
           "abs_t": vec(["abs_tx", "abs_ty", "abs_tz"]),
           "gripper": None if row["gripper"] == "" else float(row["gripper"])}
    if row.get("time_s", "") != "":
        rec["time_s"] = float(row["time_s"])
    return rec


def read_action_records(path):
    """Records from either a JSON-lines or a CSV action file (by extension)."""
    if str(path).endswith(".csv"):
        with open(path, newline="") as f:
            return [_record_from_csv(r) for r in csv.DictReader(f)]
    return _records_jsonl(path)


def export_actions(src, dst, fmt):
    """Re-serialize an action file as ``jsonl`` or ``csv`` with canonical quaternion signs."""
    recs = [_canonical_record(r) for r in read_action_records(src)]
    if fmt == "jsonl":
        text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in recs)
    elif fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ACTION_CSV_HEADER)
        for r in recs:
            w.writerow(_csv_row(r))
        text = buf.getvalue()
    else:
        raise UnknownFormat(f"unknown export format {fmt!r} (expected jsonl or csv)")
    with open(dst, "w") as f:
        f.write(text)
    return len(recs)


def frame_index(path):
    """Trailing integer in a filename stem (depth_0012.pfm -> 12)."""
    m = re.search(r"(\d+)$", Path(path).stem)
    return int(m.group(1)) if m else None
