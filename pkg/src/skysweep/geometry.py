"""Core projective and Euclidean geometry.

Camera models, projection, DLT triangulation, epipolar residuals,
essential-matrix RANSAC and closed-form similarity alignment. All
rotations are stored as unit quaternions (w, x, y, z) and renormalized
after every composition; units are meters and pixels, angles radians.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    Collinear,
    DegenerateRays,
    InsufficientMatches,
    NoConsensus,
    NonPositiveDepth,
)

_MIN_DEPTH = 1e-12


# ---------------------------------------------------------------------------
# quaternion helpers


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    q = q / n
    if q[0] < 0.0:
        q = -q
    return q


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R):
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    return quat_normalize(q)


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return quat_normalize(
        np.array(
            [
                aw * bw - ax * bx - ay * by - az * bz,
                aw * bx + ax * bw + ay * bz - az * by,
                aw * by - ax * bz + ay * bw + az * bx,
                aw * bz + ax * by - ay * bx + az * bw,
            ]
        )
    )


def rotvec_to_quat(v):
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v)
    if theta < 1e-12:
        return quat_normalize(np.array([1.0, *(0.5 * v)]))
    axis = v / theta
    return quat_normalize(np.array([np.cos(theta / 2), *(np.sin(theta / 2) * axis)]))


def rotation_angle(R):
    """Angle of a rotation matrix in radians."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class CameraIntrinsics:
    f_px: float
    cx: float
    cy: float
    width: int
    height: int
    k1: float = 0.0

    def __post_init__(self):
        if not self.f_px > 0:
            raise ValueError("f_px must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")
        if not np.isfinite(self.k1):
            raise ValueError("k1 must be finite")

    @property
    def K(self):
        return np.array([[self.f_px, 0, self.cx], [0, self.f_px, self.cy], [0, 0, 1.0]])

    def to_dict(self):
        return {
            "f_px": self.f_px,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "k1": self.k1,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform: x_cam = R @ x_world + t."""

    q: np.ndarray  # unit quaternion (w, x, y, z)
    t: np.ndarray  # meters

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @property
    def R(self):
        return quat_to_matrix(self.q)

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def transform(self, pts):
        pts = np.asarray(pts, dtype=float)
        return pts @ self.R.T + self.t

    def inverse(self):
        R = self.R
        return Pose(q=matrix_to_quat(R.T), t=-R.T @ self.t)

    def compose(self, other):
        """self ∘ other: apply `other` first, then `self`."""
        return Pose(q=quat_mul(self.q, other.q), t=self.R @ other.t + self.t)

    @classmethod
    def identity(cls):
        return cls(q=np.array([1.0, 0, 0, 0]), t=np.zeros(3))

    @classmethod
    def from_Rt(cls, R, t):
        return cls(q=matrix_to_quat(R), t=np.asarray(t, dtype=float))

    @classmethod
    def look_at(cls, center, target, up=(0.0, 0.0, 1.0)):
        """Camera at `center` looking toward `target`, +z optical axis."""
        center = np.asarray(center, dtype=float)
        fwd = np.asarray(target, dtype=float) - center
        fwd = fwd / np.linalg.norm(fwd)
        up = np.asarray(up, dtype=float)
        right = np.cross(fwd, up)
        n = np.linalg.norm(right)
        if n < 1e-12:
            right = np.cross(fwd, np.array([1.0, 0, 0]))
            n = np.linalg.norm(right)
        right /= n
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])  # rows: camera axes in world coords
        return cls.from_Rt(R, -R @ center)

    def to_dict(self):
        return {"q": self.q.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(q=np.array(d["q"]), t=np.array(d["t"]))


@dataclass(frozen=True)
class Sim3:
    """Similarity transform y = s * R @ x + t."""

    scale: float
    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "q", quat_normalize(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @property
    def R(self):
        return quat_to_matrix(self.q)

    def apply(self, pts):
        pts = np.asarray(pts, dtype=float)
        return self.scale * (pts @ self.R.T) + self.t

    def apply_pose(self, pose: Pose) -> Pose:
        """Express a world→camera pose in the transformed world frame."""
        R_new = pose.R @ self.R.T
        t_new = pose.t * self.scale - R_new @ self.t
        return Pose.from_Rt(R_new, t_new)

    def compose(self, other: "Sim3") -> "Sim3":
        R = self.R
        return Sim3(
            scale=self.scale * other.scale,
            q=quat_mul(self.q, other.q),
            t=self.scale * (R @ other.t) + self.t,
        )

    @classmethod
    def identity(cls):
        return cls(scale=1.0, q=np.array([1.0, 0, 0, 0]), t=np.zeros(3))

    def to_dict(self):
        return {"scale": self.scale, "q": self.q.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(scale=d["scale"], q=np.array(d["q"]), t=np.array(d["t"]))


@dataclass(frozen=True)
class PixelObservation:
    image_id: int
    u: float
    v: float
    sigma_px: float = 0.5
    point_id: int | None = None

    def __post_init__(self):
        if not self.sigma_px > 0:
            raise ValueError("sigma_px must be positive")

    @property
    def uv(self):
        return np.array([self.u, self.v])


# ---------------------------------------------------------------------------
# projection


def project(intrinsics: CameraIntrinsics, pose: Pose, point) -> np.ndarray:
    """Project a world point into pixel coordinates.

    Pinhole with a single radial term: the normalized point is scaled by
    (1 + k1 r^2) before applying focal length and principal point.
    Raises NonPositiveDepth when the camera-frame depth is <= 1e-12.
    """
    pc = pose.transform(np.asarray(point, dtype=float))
    if pc[2] <= _MIN_DEPTH:
        raise NonPositiveDepth(f"depth {pc[2]:.3e} not positive")
    xn, yn = pc[0] / pc[2], pc[1] / pc[2]
    r2 = xn * xn + yn * yn
    d = 1.0 + intrinsics.k1 * r2
    return np.array([intrinsics.f_px * xn * d + intrinsics.cx, intrinsics.f_px * yn * d + intrinsics.cy])


def project_many(intrinsics: CameraIntrinsics, pose: Pose, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; returns (pixels, depths). No depth check."""
    pc = pose.transform(np.asarray(points, dtype=float).reshape(-1, 3))
    z = pc[:, 2]
    safe = np.where(np.abs(z) < _MIN_DEPTH, _MIN_DEPTH, z)
    xn = pc[:, 0] / safe
    yn = pc[:, 1] / safe
    r2 = xn * xn + yn * yn
    d = 1.0 + intrinsics.k1 * r2
    px = np.stack([intrinsics.f_px * xn * d + intrinsics.cx, intrinsics.f_px * yn * d + intrinsics.cy], axis=1)
    return px, z


def backproject(intrinsics: CameraIntrinsics, pose: Pose, pixel, depth: float) -> np.ndarray:
    """Invert `project` for k1 == 0 at a given camera-frame depth."""
    xn = (pixel[0] - intrinsics.cx) / intrinsics.f_px
    yn = (pixel[1] - intrinsics.cy) / intrinsics.f_px
    pc = np.array([xn * depth, yn * depth, depth])
    return pose.R.T @ (pc - pose.t)


def normalized_ray(intrinsics: CameraIntrinsics, pose: Pose, pixel) -> np.ndarray:
    """Unit viewing direction in world coordinates for a pixel (k1 ignored)."""
    v = np.array(
        [(pixel[0] - intrinsics.cx) / intrinsics.f_px, (pixel[1] - intrinsics.cy) / intrinsics.f_px, 1.0]
    )
    w = pose.R.T @ v
    return w / np.linalg.norm(w)


# ---------------------------------------------------------------------------
# triangulation


def triangulate_linear(observations, cameras) -> tuple[np.ndarray, float]:
    """DLT triangulation from >= 2 views.

    `observations` is a list of PixelObservation, `cameras` maps
    image_id -> (CameraIntrinsics, Pose). Returns (point, max
    reprojection error in px across views). Raises DegenerateRays for
    near-zero baselines or near-parallel rays.
    """
    if len(observations) < 2:
        raise DegenerateRays("need at least two observations")
    rows = []
    centers = []
    dirs = []
    for obs in observations:
        intr, pose = cameras[obs.image_id]
        P = intr.K @ np.hstack([pose.R, pose.t.reshape(3, 1)])
        rows.append(obs.u * P[2] - P[0])
        rows.append(obs.v * P[2] - P[1])
        centers.append(pose.center)
        dirs.append(normalized_ray(intr, pose, (obs.u, obs.v)))
    centers = np.array(centers)
    baseline = np.max(np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=2))
    if baseline < 1e-9:
        raise DegenerateRays("all camera centers coincide")
    dirs = np.array(dirs)
    cosangles = np.clip(np.abs(dirs @ dirs.T), 0.0, 1.0)
    iu = np.triu_indices(len(dirs), 1)
    if np.min(np.arccos(cosangles[iu])) < 1e-9:
        raise DegenerateRays("rays parallel")
    A = np.array(rows)
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[-1]
    if abs(Xh[3]) < 1e-15:
        raise DegenerateRays("point at infinity")
    X = Xh[:3] / Xh[3]
    max_err = 0.0
    for obs in observations:
        intr, pose = cameras[obs.image_id]
        try:
            uv = project(intr, pose, X)
        except NonPositiveDepth:
            max_err = np.inf
            break
        max_err = max(max_err, float(np.linalg.norm(uv - obs.uv)))
    return X, max_err


def triangulation_angle(c1, c2, point) -> float:
    """Angle in radians subtended at `point` by two camera centers."""
    a = np.asarray(c1, dtype=float) - point
    b = np.asarray(c2, dtype=float) - point
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.arccos(np.clip(a @ b / (na * nb), -1.0, 1.0)))


# ---------------------------------------------------------------------------
# epipolar geometry


def skew(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0.0]])


def essential_from_poses(pose1: Pose, pose2: Pose) -> np.ndarray:
    """Essential matrix of the relative transform from view 1 to view 2."""
    rel = pose2.compose(pose1.inverse())
    return skew(rel.t) @ rel.R


def fundamental_from_poses(intr1, pose1, intr2, pose2):
    E = essential_from_poses(pose1, pose2)
    return np.linalg.inv(intr2.K).T @ E @ np.linalg.inv(intr1.K)


def sampson_distance(px1, px2, F) -> float:
    """First-order geometric distance of a correspondence to the epipolar constraint."""
    x1 = np.array([px1[0], px1[1], 1.0])
    x2 = np.array([px2[0], px2[1], 1.0])
    Fx1 = F @ x1
    Ftx2 = F.T @ x2
    num = float(x2 @ Fx1) ** 2
    den = Fx1[0] ** 2 + Fx1[1] ** 2 + Ftx2[0] ** 2 + Ftx2[1] ** 2
    if den < 1e-30:
        return 0.0
    return float(np.sqrt(num / den))


def sampson_distances(pts1, pts2, F) -> np.ndarray:
    """Vectorized Sampson distances for Nx2 pixel arrays."""
    n = len(pts1)
    x1 = np.hstack([pts1, np.ones((n, 1))])
    x2 = np.hstack([pts2, np.ones((n, 1))])
    Fx1 = x1 @ F.T
    Ftx2 = x2 @ F
    num = np.einsum("ij,ij->i", x2, Fx1) ** 2
    den = Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2
    den = np.where(den < 1e-30, 1.0, den)
    return np.sqrt(num / den)


def _eight_point_essential(x1n, x2n):
    """Normalized eight-point estimate on unit-plane coordinates."""
    A = np.column_stack(
        [
            x2n[:, 0] * x1n[:, 0],
            x2n[:, 0] * x1n[:, 1],
            x2n[:, 0],
            x2n[:, 1] * x1n[:, 0],
            x2n[:, 1] * x1n[:, 1],
            x2n[:, 1],
            x1n[:, 0],
            x1n[:, 1],
            np.ones(len(x1n)),
        ]
    )
    _, _, Vt = np.linalg.svd(A)
    E = Vt[-1].reshape(3, 3)
    # enforce essential-matrix singular values (1, 1, 0)
    U, _, Vt = np.linalg.svd(E)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def decompose_essential(E, x1n, x2n):
    """Cheirality-consistent (R, t) from an essential matrix.

    x1n/x2n are unit-plane coordinates of inlier correspondences used
    for the cheirality vote; t has unit norm.
    """
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    candidates = []
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for t in (U[:, 2], -U[:, 2]):
            candidates.append((R, t))
    best = None
    best_votes = -1
    K = CameraIntrinsics(1.0, 0.0, 0.0, 1, 1)
    for R, t in candidates:
        pose1 = Pose.identity()
        pose2 = Pose.from_Rt(R, t)
        votes = 0
        for a, b in zip(x1n, x2n):
            o1 = PixelObservation(image_id=0, u=a[0], v=a[1], sigma_px=1.0)
            o2 = PixelObservation(image_id=1, u=b[0], v=b[1], sigma_px=1.0)
            try:
                X, _ = triangulate_linear([o1, o2], {0: (K, pose1), 1: (K, pose2)})
            except DegenerateRays:
                continue
            z1 = pose1.transform(X)[2]
            z2 = pose2.transform(X)[2]
            if z1 > 0 and z2 > 0:
                votes += 1
        if votes > best_votes:
            best_votes = votes
            best = (R, t)
    R, t = best
    return Pose.from_Rt(R, t)


def ransac_num_iters(inlier_ratio, sample_size, confidence=0.99, max_iters=2000):
    if inlier_ratio <= 0:
        return max_iters
    denom = np.log(max(1e-12, 1.0 - inlier_ratio**sample_size))
    if denom >= 0:
        return max_iters
    return int(min(max_iters, max(1, np.ceil(np.log(1.0 - confidence) / denom))))


def estimate_essential_ransac(
    pts1,
    pts2,
    intr1: CameraIntrinsics,
    intr2: CameraIntrinsics,
    threshold_px: float = 2.0,
    confidence: float = 0.99,
    min_inliers: int = 15,
    max_iters: int = 1000,
    rng=None,
):
    """Relative pose from pixel matches via eight-point RANSAC.

    Returns (Pose of view 2 w.r.t. view 1 with unit-norm translation,
    boolean inlier mask). Raises InsufficientMatches (< 8 matches) or
    NoConsensus (best support below `min_inliers`).
    """
    pts1 = np.asarray(pts1, dtype=float).reshape(-1, 2)
    pts2 = np.asarray(pts2, dtype=float).reshape(-1, 2)
    n = len(pts1)
    if n < 8:
        raise InsufficientMatches(f"{n} matches, need 8")
    rng = np.random.default_rng(rng)
    K1i = np.linalg.inv(intr1.K)
    K2i = np.linalg.inv(intr2.K)
    x1n = (np.hstack([pts1, np.ones((n, 1))]) @ K1i.T)[:, :2]
    x2n = (np.hstack([pts2, np.ones((n, 1))]) @ K2i.T)[:, :2]

    best_mask = None
    best_count = 0
    best_E = None
    iters = max_iters
    it = 0
    while it < iters:
        it += 1
        idx = rng.choice(n, size=8, replace=False)
        try:
            E = _eight_point_essential(x1n[idx], x2n[idx])
        except np.linalg.LinAlgError:
            continue
        F = K2i.T @ E @ K1i
        d = sampson_distances(pts1, pts2, F)
        mask = d < threshold_px
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            best_E = E
            iters = min(iters, ransac_num_iters(count / n, 8, confidence, max_iters))
    if best_mask is None or best_count < min_inliers:
        raise NoConsensus(f"best support {best_count} < {min_inliers}")
    # refit on the inlier set
    E = _eight_point_essential(x1n[best_mask], x2n[best_mask])
    F = K2i.T @ E @ K1i
    d = sampson_distances(pts1, pts2, F)
    mask = d < threshold_px
    if mask.sum() >= 8:
        best_mask = mask
        best_E = _eight_point_essential(x1n[best_mask], x2n[best_mask])
    else:
        best_E = E
    pose = decompose_essential(best_E, x1n[best_mask][:20], x2n[best_mask][:20])
    return pose, best_mask


# ---------------------------------------------------------------------------
# similarity alignment


def estimate_similarity(src, dst) -> tuple[Sim3, float]:
    """Closed-form least-squares similarity (Umeyama) mapping src -> dst.

    Returns (Sim3, RMS residual in meters). Raises Collinear when the
    source covariance is rank-deficient.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if len(src) < 3 or len(src) != len(dst):
        raise Collinear("need >= 3 correspondences")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cs = src - mu_s
    cd = dst - mu_d
    cov = cd.T @ cs / len(src)
    sv = np.linalg.svd(cov, compute_uv=False)
    src_sv = np.linalg.svd(cs.T @ cs / len(src), compute_uv=False)
    if src_sv[1] < 1e-9 * max(src_sv[0], 1e-300):
        raise Collinear("source points are collinear")
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = (cs**2).sum() / len(src)
    scale = float(np.trace(np.diag(D) @ S) / var_s)
    if scale <= 0:
        raise Collinear("degenerate scale")
    t = mu_d - scale * R @ mu_s
    sim = Sim3(scale=scale, q=matrix_to_quat(R), t=t)
    res = sim.apply(src) - dst
    rms = float(np.sqrt((res**2).sum() / len(src)))
    return sim, rms
