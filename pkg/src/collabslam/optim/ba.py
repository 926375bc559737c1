"""Local bundle adjustment and pose-only fitting.

Each observation contributes a pixel residual and, when a depth is measured,
a depth residual.  Residuals are whitened by ``pixel_sigma`` and
``depth_sigma_frac * depth`` and robustified with a Huber kernel applied in
native units (pixels, metres).  The reduced camera system is formed with a
Schur complement over the landmark blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import Underconstrained
from ..geom import CameraIntrinsics, Pose, compose, hat, se3_exp


@dataclass
class RobustParams:
    pixel_sigma: float = 1.0
    depth_sigma_frac: float = 0.01
    depth_sigma_min: float = 0.005
    huber_px: float = 2.0
    huber_depth: float = 0.05


@dataclass
class BAProblem:
    poses: dict  # keyframe id -> world_from_cam
    points: dict  # landmark id -> (3,) position
    observations: list  # (keyframe id, landmark id, u, v, depth)
    intrinsics: CameraIntrinsics
    fixed_keyframes: set = field(default_factory=set)
    fixed_landmarks: set = field(default_factory=set)
    robust: RobustParams = field(default_factory=RobustParams)


@dataclass
class BAResult:
    poses: dict
    points: dict
    rms: float
    initial_cost: float
    final_cost: float
    iterations: int
    accepted_costs: list


# ---------------------------------------------------------------------------
# residuals and Jacobians
# ---------------------------------------------------------------------------


def observation_residual_and_jacobian(k: CameraIntrinsics, pose: Pose, point, u: float, v: float, depth: float):
    """Raw residual (u, v, depth) and Jacobians w.r.t. pose (3x6) and point (3x3).

    The depth row is zero when ``depth <= 0`` (bearing-only).
    """
    r, Jp, Jl = _batch(
        k,
        pose.R[None],
        pose.t[None],
        np.asarray(point, dtype=float)[None],
        np.array([[u, v]]),
        np.array([depth]),
    )
    return r[0], Jp[0], Jl[0]


def _batch(k: CameraIntrinsics, R, t, P, uv, depth):
    pc = np.einsum("nji,nj->ni", R, P - t)
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    zi = 1.0 / z
    has_d = depth > 0
    r = np.stack(
        [k.fx * x * zi + k.cx - uv[:, 0], k.fy * y * zi + k.cy - uv[:, 1], np.where(has_d, z - depth, 0.0)],
        axis=1,
    )
    n = len(pc)
    dpi = np.zeros((n, 3, 3))
    dpi[:, 0, 0] = k.fx * zi
    dpi[:, 0, 2] = -k.fx * x * zi * zi
    dpi[:, 1, 1] = k.fy * zi
    dpi[:, 1, 2] = -k.fy * y * zi * zi
    dpi[:, 2, 2] = np.where(has_d, 1.0, 0.0)
    dpc = np.zeros((n, 3, 6))
    dpc[:, :, :3] = -np.eye(3)
    dpc[:, 0, 4], dpc[:, 0, 5] = -z, y
    dpc[:, 1, 3], dpc[:, 1, 5] = z, -x
    dpc[:, 2, 3], dpc[:, 2, 4] = -y, x
    Jp = dpi @ dpc
    Jl = dpi @ np.transpose(R, (0, 2, 1))
    return r, Jp, Jl


def _weights(r: np.ndarray, depth: np.ndarray, rp: RobustParams):
    """Per-row information weights (IRLS Huber) and robust cost per observation."""
    px = np.sqrt(r[:, 0] ** 2 + r[:, 1] ** 2)
    wpx = np.where(px <= rp.huber_px, 1.0, rp.huber_px / np.maximum(px, 1e-300))
    has_d = depth > 0
    sd = np.maximum(rp.depth_sigma_frac * np.abs(depth), rp.depth_sigma_min)
    ad = np.abs(r[:, 2])
    wd = np.where(ad <= rp.huber_depth, 1.0, rp.huber_depth / np.maximum(ad, 1e-300))
    info_px = 1.0 / rp.pixel_sigma**2
    info_d = np.where(has_d, 1.0 / sd**2, 0.0)
    W = np.stack([wpx * info_px, wpx * info_px, wd * info_d], axis=1)
    rho_px = np.where(px <= rp.huber_px, px * px, 2 * rp.huber_px * px - rp.huber_px**2)
    rho_d = np.where(ad <= rp.huber_depth, ad * ad, 2 * rp.huber_depth * ad - rp.huber_depth**2)
    cost = rho_px * info_px + np.where(has_d, rho_d * info_d, 0.0)
    return W, cost


# ---------------------------------------------------------------------------
# local bundle adjustment
# ---------------------------------------------------------------------------


class _Packed:
    def __init__(self, p: BAProblem):
        self.kf_ids = sorted(p.poses)
        self.lm_ids = sorted(p.points)
        kf_index = {k: i for i, k in enumerate(self.kf_ids)}
        lm_index = {l: i for i, l in enumerate(self.lm_ids)}
        obs = [o for o in p.observations if o[0] in kf_index and o[1] in lm_index]
        self.oi = np.array([kf_index[o[0]] for o in obs], dtype=int)
        self.ol = np.array([lm_index[o[1]] for o in obs], dtype=int)
        self.uv = np.array([[o[2], o[3]] for o in obs], dtype=float).reshape(-1, 2)
        self.depth = np.array([o[4] for o in obs], dtype=float)
        self.var_kf = np.array([k not in p.fixed_keyframes for k in self.kf_ids], dtype=bool)
        self.var_lm = np.array([l not in p.fixed_landmarks for l in self.lm_ids], dtype=bool)
        self.kf_var_index = np.cumsum(self.var_kf) - 1
        self.lm_var_index = np.cumsum(self.var_lm) - 1
        seen_kf = np.zeros(len(self.kf_ids), bool)
        seen_kf[self.oi] = True
        seen_lm = np.zeros(len(self.lm_ids), bool)
        seen_lm[self.ol] = True
        bad = [self.kf_ids[i] for i in np.flatnonzero(self.var_kf & ~seen_kf)]
        bad += [self.lm_ids[i] for i in np.flatnonzero(self.var_lm & ~seen_lm)]
        if bad:
            raise Underconstrained(f"{len(bad)} variables without observations, e.g. {bad[0]}")


def _reproject(k, poses, P, pk: _Packed):
    R = np.array([p.R for p in poses])[pk.oi]
    t = np.array([p.t for p in poses])[pk.oi]
    return _batch(k, R, t, P[pk.ol], pk.uv, pk.depth)


def _cost(k, poses, P, pk, rp):
    r, _, _ = _reproject(k, poses, P, pk)
    _, c = _weights(r, pk.depth, rp)
    return float(c.sum()), r


def local_bundle_adjust(p: BAProblem, max_iters: int = 10, tol: float = 1e-10, lambda0: float = 1e-4) -> BAResult:
    pk = _Packed(p)
    k, rp = p.intrinsics, p.robust
    poses = [p.poses[i] for i in pk.kf_ids]
    P = np.array([p.points[i] for i in pk.lm_ids], dtype=float).reshape(-1, 3)
    nvp, nvl = int(pk.var_kf.sum()), int(pk.var_lm.sum())
    cost, r = _cost(k, poses, P, pk, rp)
    initial = cost
    accepted = [cost]
    lam = lambda0
    it = 0
    if len(pk.oi) and (nvp or nvl):
        while it < max_iters:
            it += 1
            r, Jp, Jl = _reproject(k, poses, P, pk)
            W, _ = _weights(r, pk.depth, rp)
            JpW = Jp * W[:, :, None]
            JlW = Jl * W[:, :, None]
            vp = pk.var_kf[pk.oi]
            vl = pk.var_lm[pk.ol]
            pi = pk.kf_var_index[pk.oi]
            li = pk.lm_var_index[pk.ol]

            JpWt = np.transpose(JpW, (0, 2, 1))
            JlWt = np.transpose(JlW, (0, 2, 1))
            Hpp = np.zeros((nvp, 6, 6))
            gp = np.zeros((nvp, 6))
            np.add.at(Hpp, pi[vp], JpWt[vp] @ Jp[vp])
            np.add.at(gp, pi[vp], (JpWt[vp] @ r[vp][:, :, None])[:, :, 0])
            Hll = np.zeros((nvl, 3, 3))
            gl = np.zeros((nvl, 3))
            np.add.at(Hll, li[vl], JlWt[vl] @ Jl[vl])
            np.add.at(gl, li[vl], (JlWt[vl] @ r[vl][:, :, None])[:, :, 0])
            both = vp & vl
            Hpl = np.zeros((nvp, nvl, 6, 3))
            np.add.at(Hpl, (pi[both], li[both]), JpWt[both] @ Jl[both])
            # (6 nvp) x (3 nvl) coupling block for the reduced camera system
            Hmat = np.transpose(Hpl, (0, 2, 1, 3)).reshape(6 * nvp, 3 * nvl)

            improved = False
            while lam < 1e10:
                Dp = Hpp.copy()
                Dl = Hll.copy()
                idx = np.arange(6)
                Dp[:, idx, idx] += lam * np.maximum(Hpp[:, idx, idx], 1e-9)
                idx3 = np.arange(3)
                Dl[:, idx3, idx3] += lam * np.maximum(Hll[:, idx3, idx3], 1e-9)
                Dl_inv = np.linalg.inv(Dl) if nvl else Dl
                if nvp:
                    Y = np.transpose(Hpl @ Dl_inv[None], (0, 2, 1, 3)).reshape(6 * nvp, 3 * nvl)
                    S = np.zeros((6 * nvp, 6 * nvp))
                    for i in range(nvp):
                        S[6 * i : 6 * i + 6, 6 * i : 6 * i + 6] = Dp[i]
                    S -= Y @ Hmat.T
                    rhs = -gp.reshape(-1) + Y @ gl.reshape(-1)
                    dp = np.linalg.solve(S, rhs).reshape(nvp, 6)
                    back = -gl - (Hmat.T @ dp.reshape(-1)).reshape(nvl, 3)
                    dl = (Dl_inv @ back[:, :, None])[:, :, 0]
                else:
                    dp = np.zeros((0, 6))
                    dl = (Dl_inv @ -gl[:, :, None])[:, :, 0]
                trial = list(poses)
                for i in np.flatnonzero(pk.var_kf):
                    trial[i] = compose(poses[i], se3_exp(dp[pk.kf_var_index[i]]))
                P_trial = P.copy()
                if nvl:
                    P_trial[pk.var_lm] += dl
                new_cost, _ = _cost(k, trial, P_trial, pk, rp)
                if new_cost < cost:
                    lam = max(lam / 10.0, 1e-12)
                    decrease = cost - new_cost
                    poses, P, cost = trial, P_trial, new_cost
                    accepted.append(cost)
                    improved = True
                    break
                lam *= 10.0
            if not improved or decrease < tol * max(1.0, cost) or cost < 1e-24:
                break
    r, _, _ = _reproject(k, poses, P, pk)
    rms = float(np.sqrt(np.mean(r[:, 0] ** 2 + r[:, 1] ** 2))) if len(r) else 0.0
    return BAResult(
        poses=dict(zip(pk.kf_ids, poses)),
        points={l: P[i].copy() for i, l in enumerate(pk.lm_ids)},
        rms=rms,
        initial_cost=initial,
        final_cost=cost,
        iterations=it,
        accepted_costs=accepted,
    )


def observation_errors(k: CameraIntrinsics, pose: Pose, points, uv, depth):
    """Pixel error norm and absolute depth error (nan when no depth) per observation."""
    points = np.asarray(points, float).reshape(-1, 3)
    n = len(points)
    r, _, _ = _batch(k, np.broadcast_to(pose.R, (n, 3, 3)), np.broadcast_to(pose.t, (n, 3)), points,
                     np.asarray(uv, float).reshape(-1, 2), np.asarray(depth, float))
    px = np.sqrt(r[:, 0] ** 2 + r[:, 1] ** 2)
    dz = np.where(np.asarray(depth) > 0, np.abs(r[:, 2]), np.nan)
    return px, dz


# ---------------------------------------------------------------------------
# pose-only fitting (tracking, place recognition)
# ---------------------------------------------------------------------------


@dataclass
class PoseFitResult:
    pose: Pose
    inliers: np.ndarray
    rms: float
    iterations: int


def optimize_pose(
    k: CameraIntrinsics,
    prior: Pose,
    points,
    uv,
    depth,
    robust: RobustParams | None = None,
    max_iters: int = 15,
    inlier_px: float = 3.0,
    inlier_depth_sigmas: float = 4.0,
    rounds: int = 2,
) -> PoseFitResult:
    """Fit ``world_from_cam`` to 2D(+depth) observations of known 3D points.

    Each round runs robust Gauss-Newton on the current inliers, then
    re-classifies every observation.
    """
    rp = robust or RobustParams()
    points = np.asarray(points, float).reshape(-1, 3)
    uv = np.asarray(uv, float).reshape(-1, 2)
    depth = np.asarray(depth, float).reshape(-1)
    n = len(points)
    pose = prior
    inl = np.ones(n, dtype=bool)
    total = 0
    if n == 0:
        return PoseFitResult(pose, inl, float("nan"), 0)
    for _ in range(rounds):
        idx = np.flatnonzero(inl)
        if len(idx) < 3:
            break
        P, UV, D = points[idx], uv[idx], depth[idx]
        m = len(idx)
        for _ in range(max_iters):
            total += 1
            R = np.broadcast_to(pose.R, (m, 3, 3))
            t = np.broadcast_to(pose.t, (m, 3))
            r, Jp, _ = _batch(k, R, t, P, UV, D)
            if np.any(~np.isfinite(r)):
                break
            W, _ = _weights(r, D, rp)
            JW = Jp * W[:, :, None]
            H = np.einsum("nri,nrj->ij", JW, Jp)
            g = np.einsum("nri,nr->i", JW, r)
            try:
                step = np.linalg.solve(H + 1e-9 * np.eye(6), -g)
            except np.linalg.LinAlgError:
                break
            pose = compose(pose, se3_exp(step))
            if np.linalg.norm(step) < 1e-10:
                break
        px, dz = observation_errors(k, pose, points, uv, depth)
        sd = np.maximum(rp.depth_sigma_frac * np.abs(depth), rp.depth_sigma_min)
        depth_ok = np.where(depth > 0, dz <= inlier_depth_sigmas * sd, True)
        with np.errstate(invalid="ignore"):
            inl = (px <= inlier_px) & depth_ok
    px, _ = observation_errors(k, pose, points, uv, depth)
    rms = float(np.sqrt(np.mean(px[inl] ** 2))) if inl.any() else float("inf")
    return PoseFitResult(pose, inl, rms, total)
