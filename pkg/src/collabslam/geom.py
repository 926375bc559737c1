"""Rigid-body transforms, pinhole projection, frustums and point-set alignment.

Poses are stored as a unit quaternion ``(w, x, y, z)`` plus a translation.
A pose named ``a_from_b`` maps coordinates expressed in frame ``b`` into
frame ``a``; :func:`compose` chains them the usual way.

Tangent vectors of SE(3) are ordered ``(rho, phi)``: translation part first,
rotation part second.  Perturbations are applied on the right,
``X * exp(delta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import (
    DegenerateConfiguration,
    DegenerateInterval,
    OutOfRange,
    TooFewPoints,
)

_SMALL_ANGLE = 1e-8
_SERIES_ANGLE = 1e-2


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z)
# ---------------------------------------------------------------------------


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = math.sqrt(float(q @ q))
    if n == 0.0:
        raise ValueError("zero quaternion")
    if abs(n - 1.0) > 4e-16:  # leave already-unit input bit-identical
        q = q / n
    if q[0] < 0.0:
        q = -q
    return q


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(np.array(q))


def quat_from_rotvec(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta = math.sqrt(float(phi @ phi))
    if theta < _SMALL_ANGLE:
        return quat_normalize(np.array([1.0, 0.5 * phi[0], 0.5 * phi[1], 0.5 * phi[2]]))
    half = 0.5 * theta
    s = math.sin(half) / theta
    return quat_normalize(np.array([math.cos(half), s * phi[0], s * phi[1], s * phi[2]]))


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    q = quat_normalize(q)
    v = q[1:]
    n = math.sqrt(float(v @ v))
    if n < _SMALL_ANGLE:
        return 2.0 * v / q[0]
    theta = 2.0 * math.atan2(n, q[0])
    return theta * v / n


# ---------------------------------------------------------------------------
# SO(3) / SE(3) Lie algebra
# ---------------------------------------------------------------------------


def hat(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(phi: np.ndarray) -> np.ndarray:
    return quat_to_matrix(quat_from_rotvec(phi))


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        return np.eye(3) + (0.5 - t2 / 24.0) * K + (1.0 / 6.0 - t2 / 120.0) * (K @ K)
    return (
        np.eye(3)
        + (1.0 - math.cos(theta)) / theta**2 * K
        + (theta - math.sin(theta)) / theta**3 * (K @ K)
    )


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        return np.eye(3) - 0.5 * K + (1.0 / 12.0 + t2 / 720.0) * (K @ K)
    c = 1.0 / theta**2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) - 0.5 * K + c * (K @ K)


def _se3_q(rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    P, R = hat(phi), hat(rho)
    PR, RP = P @ R, R @ P
    PRP = PR @ P
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        c1 = 1.0 / 6.0 - t2 / 120.0
        c2 = 1.0 / 24.0 - t2 / 720.0
        c3 = 1.0 / 120.0 - t2 / 2520.0
    else:
        s, c = math.sin(theta), math.cos(theta)
        c1 = (theta - s) / theta**3
        c2 = (theta * theta + 2.0 * c - 2.0) / (2.0 * theta**4)
        c3 = -0.5 * (
            (1.0 - 0.5 * theta * theta - c) / theta**4
            - 3.0 * (theta - s - theta**3 / 6.0) / theta**5
        )
    return (
        0.5 * R
        + c1 * (PR + RP + PRP)
        + c2 * (P @ PR + RP @ P - 3.0 * PRP)
        + c3 * (PRP @ P + P @ PRP)
    )


def se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    rho, phi = xi[:3], xi[3:]
    Jinv = so3_left_jacobian_inv(phi)
    Q = _se3_q(rho, phi)
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[:3, 3:] = -Jinv @ Q @ Jinv
    return out


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return se3_left_jacobian_inv(-np.asarray(xi))


# ---------------------------------------------------------------------------
# Pose
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: unit quaternion ``q = (w, x, y, z)`` and translation ``t``."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(self.q))
        t = np.array(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "t", t)
        self.q.flags.writeable = False
        t.flags.writeable = False

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_rt(cls, R: np.ndarray, t) -> "Pose":
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_rotvec(cls, phi, t=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(quat_from_rotvec(np.asarray(phi, dtype=np.float64)), t)

    @classmethod
    def from_yaw(cls, yaw: float, t=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(np.array([math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)]), t)

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T)
        return cls.from_rt(T[:3, :3], T[:3, 3])

    @classmethod
    def from_array(cls, a) -> "Pose":
        """Inverse of :meth:`to_array` (qw, qx, qy, qz, tx, ty, tz)."""
        a = np.asarray(a, dtype=np.float64)
        return cls(a[:4], a[4:7])

    @cached_property
    def R(self) -> np.ndarray:
        R = quat_to_matrix(self.q)
        R.flags.writeable = False
        return R

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.q, self.t])

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def inverse(self) -> "Pose":
        return inverse(self)

    def act(self, points: np.ndarray) -> np.ndarray:
        """Apply to a single 3-vector or an (N, 3) array."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.t

    def rotation_angle(self) -> float:
        v = float(np.linalg.norm(self.q[1:]))
        return 2.0 * math.atan2(v, abs(self.q[0]))

    def yaw(self) -> float:
        R = self.R
        return math.atan2(R[1, 0], R[0, 0])

    def allclose(self, other: "Pose", tol: float = 1e-9) -> bool:
        d = compose(inverse(self), other)
        return d.rotation_angle() <= tol and float(np.linalg.norm(d.t)) <= tol

    def __repr__(self) -> str:
        q = ", ".join(f"{v:.6g}" for v in self.q)
        t = ", ".join(f"{v:.6g}" for v in self.t)
        return f"Pose(q=[{q}], t=[{t}])"


def compose(a: Pose, b: Pose) -> Pose:
    """``a * b``: apply ``b`` first, then ``a``."""
    return Pose(quat_mul(a.q, b.q), a.R @ b.t + a.t)


def inverse(p: Pose) -> Pose:
    qi = np.array([p.q[0], -p.q[1], -p.q[2], -p.q[3]])
    return Pose(qi, -(p.R.T @ p.t))


def relative(a: Pose, b: Pose) -> Pose:
    """``a^-1 * b``."""
    return compose(inverse(a), b)


def pose_distance(a: Pose, b: Pose) -> tuple[float, float]:
    """(translation distance, rotation angle) between two poses."""
    d = relative(a, b)
    return float(np.linalg.norm(d.t)), d.rotation_angle()


def se3_exp(xi) -> Pose:
    xi = np.asarray(xi, dtype=np.float64)
    rho, phi = xi[:3], xi[3:]
    return Pose(quat_from_rotvec(phi), so3_left_jacobian(phi) @ rho)


def se3_log(p: Pose) -> np.ndarray:
    phi = quat_to_rotvec(p.q)
    rho = so3_left_jacobian_inv(phi) @ p.t
    return np.concatenate([rho, phi])


def adjoint(p: Pose) -> np.ndarray:
    R = p.R
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[3:, 3:] = R
    A[:3, 3:] = hat(p.t) @ R
    return A


def interpolate(p0: Pose, t0: float, p1: Pose, t1: float, t: float) -> Pose:
    """Pose at time ``t``: linear in translation, shortest-arc slerp in rotation."""
    if t1 - t0 < 1e-9:
        raise DegenerateInterval(f"interval [{t0}, {t1}] too short")
    if t < t0 or t > t1:
        raise OutOfRange(f"t={t} outside [{t0}, {t1}]")
    alpha = (t - t0) / (t1 - t0)
    q0, q1 = p0.q, p1.q
    dot = float(q0 @ q1)
    if dot < 0.0:
        q1, dot = -q1, -dot
    if dot > 1.0 - 1e-9:
        q = (1.0 - alpha) * q0 + alpha * q1
    else:
        omega = math.acos(min(dot, 1.0))
        s = math.sin(omega)
        q = (math.sin((1.0 - alpha) * omega) / s) * q0 + (math.sin(alpha * omega) / s) * q1
    return Pose(q, (1.0 - alpha) * p0.t + alpha * p1.t)


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_min: float = 0.3
    depth_max: float = 10.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")
        if not (0 < self.depth_min < self.depth_max):
            raise ValueError("need 0 < depth_min < depth_max")

    def as_tuple(self) -> tuple:
        return (self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                self.depth_min, self.depth_max)


@dataclass(frozen=True)
class RigidExtrinsics:
    relative_pose: Pose
    weight: float = 1.0


def pinhole(k: CameraIntrinsics, cam_from_world: Pose, point_w) -> tuple[float, float, float]:
    """Unchecked pinhole projection: (u, v, camera-frame z)."""
    pc = cam_from_world.act(point_w)
    return k.fx * pc[0] / pc[2] + k.cx, k.fy * pc[1] / pc[2] + k.cy, float(pc[2])


def project(k: CameraIntrinsics, cam_from_world: Pose, point_w):
    """(u, v, depth) if the point is inside image and depth range, else ``None``."""
    pc = cam_from_world.act(point_w)
    z = float(pc[2])
    if not (k.depth_min <= z <= k.depth_max):
        return None
    u = k.fx * pc[0] / z + k.cx
    v = k.fy * pc[1] / z + k.cy
    if 0.0 <= u < k.width and 0.0 <= v < k.height:
        return float(u), float(v), z
    return None


def project_many(k: CameraIntrinsics, cam_from_world: Pose, points_w: np.ndarray):
    """Vectorised :func:`project`; returns ``(mask, uv, depth)`` for all points."""
    points_w = np.asarray(points_w, dtype=np.float64).reshape(-1, 3)
    pc = cam_from_world.act(points_w)
    z = pc[:, 2]
    ok = (z >= k.depth_min) & (z <= k.depth_max)
    safe = np.where(ok, z, 1.0)
    u = k.fx * pc[:, 0] / safe + k.cx
    v = k.fy * pc[:, 1] / safe + k.cy
    ok &= (u >= 0.0) & (u < k.width) & (v >= 0.0) & (v < k.height)
    return ok, np.stack([u, v], axis=1), z


def backproject(k: CameraIntrinsics, u, v, depth) -> np.ndarray:
    u, v, depth = np.asarray(u, float), np.asarray(v, float), np.asarray(depth, float)
    return np.stack([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth], axis=-1)


def frustum_vertices(k: CameraIntrinsics, world_from_cam: Pose) -> np.ndarray:
    """(8, 3) world points: four near-plane corners then four far-plane corners."""
    corners = np.array([[0.0, 0.0], [k.width, 0.0], [k.width, k.height], [0.0, k.height]])
    pts = []
    for d in (k.depth_min, k.depth_max):
        pts.append(backproject(k, corners[:, 0], corners[:, 1], np.full(4, d)))
    return world_from_cam.act(np.vstack(pts))


# ---------------------------------------------------------------------------
# point-set alignment
# ---------------------------------------------------------------------------


def align_point_sets(src, dst, with_scale: bool = False) -> tuple[Pose, float, float]:
    """Least-squares similarity/rigid fit ``dst ~ s * R @ src + t`` (Umeyama).

    Returns ``(transform, scale, rms)``; with ``with_scale=False`` the scale is 1.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError("point sets differ in length")
    if len(src) < 3:
        raise TooFewPoints(f"{len(src)} correspondences, need 3")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[1] <= 1e-9 * max(1.0, sv[0]):
        raise DegenerateConfiguration("source points are collinear or coincident")
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_s = float((xs * xs).sum()) / len(src)
        scale = float(np.trace(np.diag(D) @ S)) / var_s
    else:
        scale = 1.0
    t = mu_d - scale * R @ mu_s
    resid = dst - (scale * src @ R.T + t)
    rms = float(np.sqrt((resid * resid).sum(axis=1).mean()))
    return Pose.from_rt(R, t), scale, rms
