"""SE(3) types and the weighted Kabsch solver.

Rotations are stored as 3x3 matrices; unit quaternions (w, x, y, z) with
w >= 0 are used only for serialization and averaging.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, LengthMismatch

# singular-value ratio below which the centered source points count as collinear
COLLINEAR_RATIO = 1e-8


def hat(w):
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def rot_x(deg):
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(deg):
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(deg):
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def canonical_quat(q):
    """Unit-normalize and flip sign so that w >= 0 (first non-zero entry positive if w == 0)."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    nz = np.flatnonzero(q)
    if nz.size and q[nz[0]] < 0:
        q = -q
    return q + 0.0  # drop negative zeros


def quat_from_matrix(R):
    """Shepperd's method; returns canonical (w, x, y, z)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    d = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
    i = int(np.argmax(d))
    if i == 0:
        r = np.sqrt(1.0 + tr)
        q = [0.5 * r, (R[2, 1] - R[1, 2]) / (2 * r), (R[0, 2] - R[2, 0]) / (2 * r),
             (R[1, 0] - R[0, 1]) / (2 * r)]
    elif i == 1:
        r = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / (2 * r), 0.5 * r, (R[0, 1] + R[1, 0]) / (2 * r),
             (R[0, 2] + R[2, 0]) / (2 * r)]
    elif i == 2:
        r = np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / (2 * r), (R[0, 1] + R[1, 0]) / (2 * r), 0.5 * r,
             (R[1, 2] + R[2, 1]) / (2 * r)]
    else:
        r = np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2])
        q = [(R[1, 0] - R[0, 1]) / (2 * r), (R[0, 2] + R[2, 0]) / (2 * r),
             (R[1, 2] + R[2, 1]) / (2 * r), 0.5 * r]
    return canonical_quat(q)


def matrix_from_quat(q):
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def so3_exp(rotvec):
    w = np.asarray(rotvec, dtype=float)
    th = np.linalg.norm(w)
    K = hat(w)
    if th < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(th) / th * K + (1 - np.cos(th)) / th**2 * K @ K


def so3_log(R):
    q = quat_from_matrix(R)
    v = q[1:]
    n = np.linalg.norm(v)
    if n < 1e-12:
        return 2.0 * v / q[0]
    return 2.0 * np.arctan2(n, q[0]) * v / n


def rotation_angle(R):
    """Geodesic angle of R in radians, in [0, pi]."""
    q = quat_from_matrix(R)
    return 2.0 * np.arctan2(np.linalg.norm(q[1:]), abs(q[0]))


def _left_jacobian(w):
    th = np.linalg.norm(w)
    K = hat(w)
    if th < 1e-8:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (np.eye(3) + (1 - np.cos(th)) / th**2 * K
            + (th - np.sin(th)) / th**3 * K @ K)


@dataclass(frozen=True)
class RigidTransform:
    """x -> R @ x + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quat(cls, q, t=(0.0, 0.0, 0.0)):
        return cls(matrix_from_quat(q), t)

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def translation(cls, x, y, z):
        return cls(np.eye(3), (x, y, z))

    @property
    def quat(self):
        return quat_from_matrix(self.R)

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def apply(self, x):
        """Transform a (3,) point or an (N, 3) array of points."""
        x = np.asarray(x, dtype=float)
        return x @ self.R.T + self.t

    def inverse(self):
        Rt = self.R.T
        return RigidTransform(Rt, -Rt @ self.t)

    def __matmul__(self, other):
        return compose(self, other)

    def log(self):
        """Twist (rho, omega) with exp(log(T)) == T."""
        w = so3_log(self.R)
        rho = np.linalg.solve(_left_jacobian(w), self.t)
        return np.concatenate([rho, w])

    @classmethod
    def exp(cls, xi):
        xi = np.asarray(xi, dtype=float)
        rho, w = xi[:3], xi[3:]
        return cls(so3_exp(w), _left_jacobian(w) @ rho)

    def power(self, a):
        """Constant-twist fraction: T.power(1/n) composed n times gives T."""
        return RigidTransform.exp(a * self.log())

    def to_json(self):
        return {"q": self.quat.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_json(cls, d):
        return cls.from_quat(d["q"], d["t"])


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """compose(a, b).apply(x) == a.apply(b.apply(x))."""
    return RigidTransform(a.R @ b.R, a.R @ b.t + a.t)


def angle_between(a: RigidTransform, b: RigidTransform) -> float:
    return rotation_angle(a.R.T @ b.R)


def _as_points(x, name):
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {x.shape}")
    return x


def _weights(weights, n):
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise LengthMismatch(f"{w.shape[0] if w.ndim else 0} weights for {n} points")
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative with positive sum")
    return w


def residual(transform: RigidTransform, source, target, weights=None) -> float:
    """Weighted sum of squared distances between transform(source) and target."""
    src = _as_points(source, "source")
    dst = _as_points(target, "target")
    if src.shape != dst.shape:
        raise LengthMismatch(f"{len(src)} source vs {len(dst)} target points")
    w = _weights(weights, len(src))
    d = transform.apply(src) - dst
    return float(np.sum(w * np.einsum("ij,ij->i", d, d)))


def kabsch_align(source, target, weights=None) -> RigidTransform:
    """Least-squares rigid fit: argmin sum_i w_i |R s_i + t - d_i|^2 over SO(3) x R^3.

    Raises DegenerateConfiguration for fewer than 3 points or (near) collinear
    sources, where the rotation about the line is undetermined.
    """
    src = _as_points(source, "source")
    dst = _as_points(target, "target")
    if src.shape != dst.shape:
        raise LengthMismatch(f"{len(src)} source vs {len(dst)} target points")
    n = len(src)
    if n < 3:
        raise DegenerateConfiguration(f"need >= 3 points, got {n}")
    w = _weights(weights, n)
    if np.count_nonzero(w) < 3:
        raise DegenerateConfiguration("fewer than 3 points carry weight")
    w = w / w.sum()

    cs = w @ src
    cd = w @ dst
    S = src - cs
    D = dst - cd

    sv = np.linalg.svd(np.sqrt(w)[:, None] * S, compute_uv=False)
    if sv[0] == 0.0 or sv[1] / sv[0] < COLLINEAR_RATIO:
        raise DegenerateConfiguration("source points are collinear")

    H = (w[:, None] * S).T @ D
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, cd - R @ cs)
