"""Three-point absolute pose (classical Grunert formulation) and a
RANSAC wrapper over 2D-3D correspondences with nonlinear refinement."""

from __future__ import annotations

import numpy as np

from .errors import InsufficientMatches
from .geometry import (
    CameraIntrinsics,
    Pose,
    matrix_to_quat,
    project_many,
    quat_mul,
    ransac_num_iters,
    rotvec_to_quat,
)


def _rigid_align(src, dst):
    """Least-squares rotation+translation mapping src -> dst (no scale)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(H)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    t = mu_d - R @ mu_s
    return R, t


def solve_p3p(bearings, points) -> list[Pose]:
    """Camera poses consistent with three bearing/world-point pairs.

    `bearings` are unit direction vectors in the camera frame, `points`
    the corresponding world points. Solves Grunert's quartic in the
    ratio of the second and third point depths to the first, recovers
    the three depths per real root, and fits the rigid transform per
    candidate. Returns up to four world->camera poses.
    """
    f = np.asarray(bearings, dtype=float)
    P = np.asarray(points, dtype=float)
    f = f / np.linalg.norm(f, axis=1, keepdims=True)

    a = np.linalg.norm(P[1] - P[2])
    b = np.linalg.norm(P[0] - P[2])
    c = np.linalg.norm(P[0] - P[1])
    if min(a, b, c) < 1e-12 or b < 1e-12:
        return []
    ca = float(f[1] @ f[2])  # alpha: between rays 2 and 3
    cb = float(f[0] @ f[2])  # beta: rays 1 and 3
    cg = float(f[0] @ f[1])  # gamma: rays 1 and 2

    a2, b2, c2 = a * a, b * b, c * c
    A = (a2 - c2) / b2
    B = (a2 + c2) / b2
    C = (b2 - c2) / b2
    D = (b2 - a2) / b2

    A4 = (A - 1.0) ** 2 - 4.0 * c2 / b2 * ca * ca
    A3 = 4.0 * (A * (1.0 - A) * cb - (1.0 - B) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb)
    A2 = 2.0 * (
        A * A
        - 1.0
        + 2.0 * A * A * cb * cb
        + 2.0 * C * ca * ca
        - 4.0 * B * ca * cb * cg
        + 2.0 * D * cg * cg
    )
    A1 = 4.0 * (-A * (1.0 + A) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - B) * ca * cg)
    A0 = (1.0 + A) ** 2 - 4.0 * a2 / b2 * cg * cg

    coeffs = np.array([A4, A3, A2, A1, A0])
    if np.max(np.abs(coeffs)) < 1e-15:
        return []
    roots = np.roots(coeffs)
    poses = []
    for root in roots:
        if abs(root.imag) > 1e-8 * max(1.0, abs(root.real)):
            continue
        v = float(root.real)
        if v <= 0:
            continue
        denom = 2.0 * (cg - v * ca)
        if abs(denom) < 1e-12:
            continue
        u = ((-1.0 + A) * v * v - 2.0 * A * cb * v + 1.0 + A) / denom
        if u <= 0:
            continue
        s1sq = b2 / (1.0 + v * v - 2.0 * v * cb)
        if s1sq <= 0:
            continue
        s1 = float(np.sqrt(s1sq))
        s2 = u * s1
        s3 = v * s1
        cam_pts = np.array([s1 * f[0], s2 * f[1], s3 * f[2]])
        R, t = _rigid_align(P, cam_pts)
        poses.append(Pose.from_Rt(R, t))
    return poses


def refine_pose(intrinsics: CameraIntrinsics, pose: Pose, points, pixels, iters: int = 10) -> Pose:
    """Gauss-Newton refinement of a pose on reprojection error.

    Rotation updated by a left-multiplied rotation-vector increment.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    q, t = pose.q.copy(), pose.t.copy()
    f = intrinsics.f_px
    for _ in range(iters):
        cur = Pose(q=q, t=t)
        pc = cur.transform(points)
        z = pc[:, 2]
        valid = z > 1e-9
        if valid.sum() < 3:
            break
        pcv = pc[valid]
        zv = pcv[:, 2]
        xn = pcv[:, 0] / zv
        yn = pcv[:, 1] / zv
        r2 = xn * xn + yn * yn
        d = 1.0 + intrinsics.k1 * r2
        pred = np.stack([f * xn * d + intrinsics.cx, f * yn * d + intrinsics.cy], axis=1)
        res = (pred - pixels[valid]).ravel()
        n = valid.sum()
        J = np.zeros((2 * n, 6))
        # d(pixel)/d(camera point), ignoring the distortion Jacobian's
        # cross terms (k1 is tiny; GN tolerates the approximation)
        for i in range(n):
            X, Y, Z = pcv[i]
            dpix_dpc = (f * d[i] / Z) * np.array(
                [[1.0, 0.0, -X / Z], [0.0, 1.0, -Y / Z]]
            )
            # d(camera point)/d(rotvec, t): pc = R X + t; left increment
            dpc = np.hstack(
                [
                    np.array(
                        [
                            [0.0, pcv[i][2], -pcv[i][1]],
                            [-pcv[i][2], 0.0, pcv[i][0]],
                            [pcv[i][1], -pcv[i][0], 0.0],
                        ]
                    ),
                    np.eye(3),
                ]
            )
            J[2 * i : 2 * i + 2] = dpix_dpc @ dpc
        H = J.T @ J + 1e-9 * np.eye(6)
        g = J.T @ res
        try:
            delta = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        q = quat_mul(rotvec_to_quat(delta[:3]), q)
        t = t + delta[3:6]
        if np.linalg.norm(delta) < 1e-12:
            break
    return Pose(q=q, t=t)


def p3p_ransac(
    intrinsics: CameraIntrinsics,
    points,
    pixels,
    threshold_px: float = 2.0,
    confidence: float = 0.99,
    min_inliers: int = 15,
    max_iters: int = 500,
    rng=None,
):
    """Absolute pose from 2D-3D correspondences.

    Samples three correspondences per iteration, enumerates Grunert
    roots, and scores every candidate on the full set so additional
    correspondences disambiguate the up-to-four solutions. Returns
    (refined Pose, inlier mask) or (None, None) when the best support
    falls below `min_inliers`.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    n = len(points)
    if n < 4:
        raise InsufficientMatches(f"{n} correspondences, need 4")
    rng = np.random.default_rng(rng)
    Kinv = np.linalg.inv(intrinsics.K)
    bearings = np.hstack([pixels, np.ones((n, 1))]) @ Kinv.T
    bearings /= np.linalg.norm(bearings, axis=1, keepdims=True)

    best_mask = None
    best_count = 0
    best_pose = None
    iters = max_iters
    it = 0
    while it < iters:
        it += 1
        idx = rng.choice(n, size=3, replace=False)
        for cand in solve_p3p(bearings[idx], points[idx]):
            px, z = project_many(intrinsics, cand, points)
            err = np.linalg.norm(px - pixels, axis=1)
            mask = (err < threshold_px) & (z > 0)
            count = int(mask.sum())
            if count > best_count:
                best_count = count
                best_mask = mask
                best_pose = cand
                iters = min(iters, ransac_num_iters(count / n, 3, confidence, max_iters))
    if best_pose is None or best_count < min_inliers:
        return None, None
    pose = refine_pose(intrinsics, best_pose, points[best_mask], pixels[best_mask])
    px, z = project_many(intrinsics, pose, points)
    err = np.linalg.norm(px - pixels, axis=1)
    mask = (err < threshold_px) & (z > 0)
    if mask.sum() < min_inliers:
        return None, None
    return pose, mask
