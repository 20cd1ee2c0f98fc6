"""Circular binary-code fiducial markers.

Codec (rotation-invariant sector code with a Hamming-margin id table),
raster rendering, raster detection (threshold -> contours -> ellipse
fit -> rectification -> Hough verification -> decode), exhaustive
focal-length calibration from planar marker views, and marker-based
Sim(3) geo-registration of a reconstruction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import (
    DecodeFailed,
    DegenerateGeometry,
    InsufficientGCPs,
    InsufficientViews,
    InvalidConfig,
    NoConsensus,
    TableInfeasible,
    UnknownId,
)
from .geometry import (
    CameraIntrinsics,
    PixelObservation,
    Sim3,
    estimate_similarity,
    triangulate_linear,
)

# ---------------------------------------------------------------------------
# codewords


def _rotate_bits(word: int, k: int, n: int) -> int:
    """Cyclically rotate an n-bit word right by k."""
    k %= n
    mask = (1 << n) - 1
    return ((word >> k) | (word << (n - k))) & mask


def canonical_code(word: int, n: int) -> int:
    """Lexicographically minimal rotation of an n-bit codeword."""
    return min(_rotate_bits(word, k, n) for k in range(n))


def rotational_hamming(a: int, b: int, n: int) -> int:
    """Minimum Hamming distance between a and any rotation of b."""
    return min(bin(a ^ _rotate_bits(b, k, n)).count("1") for k in range(n))


@dataclass(frozen=True)
class MarkerSpec:
    """Geometry and code table of the circular fiducial.

    All radii are fractions of the outer marker radius. The code ring
    is split into ``n_sectors`` angular sectors; a set bit is drawn
    black. The solid center dot and the outer verification circle
    bracket the code ring.
    """

    n_sectors: int = 16
    r_center: float = 0.16
    r_code_in: float = 0.45
    r_code_out: float = 0.72
    r_outer_in: float = 0.85
    r_outer_out: float = 1.0
    id_table: dict[int, int] = field(default_factory=dict)
    min_distance: int = 4

    def __post_init__(self):
        if not 0 < self.r_center < self.r_code_in < self.r_code_out < self.r_outer_in < self.r_outer_out:
            raise InvalidConfig("marker radii must be strictly increasing")
        for mid, word in self.id_table.items():
            if word != canonical_code(word, self.n_sectors):
                raise InvalidConfig(f"codeword for id {mid} is not canonical")
        words = list(self.id_table.values())
        if len(set(words)) != len(words):
            raise InvalidConfig("code table is not uniquely invertible")
        for i, a in enumerate(words):
            for b in words[i + 1 :]:
                if rotational_hamming(a, b, self.n_sectors) < self.min_distance:
                    raise InvalidConfig("code table violates the Hamming margin")

    def codeword(self, marker_id: int) -> int:
        try:
            return self.id_table[marker_id]
        except KeyError:
            raise UnknownId(f"marker id {marker_id} not in table") from None


def build_id_table(n_ids: int, n_sectors: int = 16, seed: int = 0, min_distance: int = 4) -> dict[int, int]:
    """Greedy deterministic id table with pairwise rotational Hamming
    distance >= min_distance between canonical codewords.

    Candidate codewords are the canonical rotation classes with a
    balanced bit count (so the decode histogram stays bimodal), visited
    in a seeded random order.
    """
    if n_ids < 1:
        raise InvalidConfig("n_ids must be positive")
    lo, hi = min_distance, n_sectors - min_distance
    classes = sorted(
        {
            canonical_code(w, n_sectors)
            for w in range(1 << n_sectors)
            if lo <= bin(w).count("1") <= hi
        }
    )
    rng = np.random.default_rng(seed)
    orders = [rng.permutation(len(classes)), np.arange(len(classes))]
    best = 0
    for order in orders:
        table: dict[int, int] = {}
        chosen: list[int] = []
        for idx in order:
            cand = classes[idx]
            if all(rotational_hamming(cand, c, n_sectors) >= min_distance for c in chosen):
                table[len(chosen)] = cand
                chosen.append(cand)
                if len(chosen) == n_ids:
                    return table
        best = max(best, len(chosen))
    raise TableInfeasible(f"only {best} of {n_ids} codewords fit the margin")


def default_spec(n_ids: int = 64, seed: int = 0) -> MarkerSpec:
    return MarkerSpec(id_table=build_id_table(n_ids, seed=seed))


# ---------------------------------------------------------------------------
# rendering


def _ideal_intensity(spec: MarkerSpec, word: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Intensity (0 black / 1 white) of the ideal marker at unit coords."""
    r = np.hypot(x, y)
    theta = np.mod(np.arctan2(y, x), 2.0 * np.pi)
    sector = np.minimum((theta * spec.n_sectors / (2.0 * np.pi)).astype(int), spec.n_sectors - 1)
    bits = (word >> sector) & 1
    img = np.ones_like(r)
    img[r <= spec.r_center] = 0.0
    code = (r > spec.r_code_in) & (r <= spec.r_code_out)
    img[code] = 1.0 - bits[code]
    img[(r > spec.r_outer_in) & (r <= spec.r_outer_out)] = 0.0
    return img


def render_marker(
    spec: MarkerSpec,
    marker_id: int,
    size: int = 256,
    homography: np.ndarray | None = None,
    noise_sigma: float = 0.0,
    blur_sigma: float = 0.0,
    margin: float = 1.25,
    seed: int = 0,
    supersample: int = 3,
) -> np.ndarray:
    """Render a marker to an 8-bit grayscale raster.

    The ideal marker occupies a disc of radius ``size / (2 * margin)``
    centered in the canvas. ``homography`` (3x3, pixel -> pixel) warps
    the output; noise and blur are applied after warping.
    """
    word = spec.codeword(marker_id)
    radius = size / (2.0 * margin)
    center = (size - 1) / 2.0

    ss = max(1, int(supersample))
    coords = (np.arange(size * ss) + 0.5) / ss - 0.5
    px, py = np.meshgrid(coords, coords)
    if homography is not None:
        H = np.asarray(homography, dtype=float)
        if H.shape != (3, 3) or abs(np.linalg.det(H)) < 1e-12:
            raise InvalidConfig("homography must be an invertible 3x3 matrix")
        Hinv = np.linalg.inv(H)
        w = Hinv[2, 0] * px + Hinv[2, 1] * py + Hinv[2, 2]
        sx = (Hinv[0, 0] * px + Hinv[0, 1] * py + Hinv[0, 2]) / w
        sy = (Hinv[1, 0] * px + Hinv[1, 1] * py + Hinv[1, 2]) / w
    else:
        sx, sy = px, py
    ideal = _ideal_intensity(spec, word, (sx - center) / radius, (sy - center) / radius)
    img = ideal.reshape(size, ss, size, ss).mean(axis=(1, 3))

    if blur_sigma > 0:
        img = cv2.GaussianBlur(img, (0, 0), blur_sigma)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        img = img + rng.normal(0.0, noise_sigma, img.shape)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def marker_center(size: int) -> np.ndarray:
    """Ground-truth center (px) of an unwarped render of this size."""
    c = (size - 1) / 2.0
    return np.array([c, c])


# ---------------------------------------------------------------------------
# detection


@dataclass
class DetectedMarker:
    """One decoded (or merely verified) marker detection."""

    center: np.ndarray  # sub-pixel ellipse center (u, v)
    axes: tuple[float, float]  # semi-axes in px, major first
    angle: float  # major-axis angle, radians
    marker_id: int | None
    confidence: float
    p_center: float
    p_code: float
    p_outer: float


_PATCH = 192  # rectified canonical patch edge
_PATCH_R = 72.0  # marker outer radius inside the patch


def _rectify(raster: np.ndarray, center, axes, angle) -> np.ndarray:
    """Affine-rectify the ellipse to a canonical circular patch."""
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    A = rot @ np.diag([axes[0] / _PATCH_R, axes[1] / _PATCH_R])
    mid = (_PATCH - 1) / 2.0
    offset = np.asarray(center, dtype=float) - A @ np.array([mid, mid])
    M = np.hstack([A, offset.reshape(2, 1)])
    return cv2.warpAffine(
        raster,
        M,
        (_PATCH, _PATCH),
        flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=255,
    )


def _ring_samples(patch: np.ndarray, radius: float, n: int, phase: float = 0.0) -> np.ndarray:
    """Bilinear samples along a circle in the canonical patch."""
    mid = (_PATCH - 1) / 2.0
    theta = phase + 2.0 * np.pi * np.arange(n) / n
    xs = mid + radius * np.cos(theta)
    ys = mid + radius * np.sin(theta)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    fx = xs - x0
    fy = ys - y0
    x0 = np.clip(x0, 0, _PATCH - 2)
    y0 = np.clip(y0, 0, _PATCH - 2)
    p = patch.astype(float)
    return (
        p[y0, x0] * (1 - fx) * (1 - fy)
        + p[y0, x0 + 1] * fx * (1 - fy)
        + p[y0 + 1, x0] * (1 - fx) * fy
        + p[y0 + 1, x0 + 1] * fx * fy
    )


def decode_marker(patch: np.ndarray, spec: MarkerSpec) -> tuple[int, float, float, float]:
    """Decode a rectified canonical patch.

    Returns (marker id, p_center, p_code, p_outer). The code ring is
    unrolled at several radii, thresholded against black/white
    references sampled from the center dot and the white gap, binned by
    sector at the phase that maximizes within-sector consistency, and
    looked up with rotational Hamming tolerance 1.
    """
    n = spec.n_sectors
    per = 16  # angular samples per sector
    m = n * per
    code_radii = np.linspace(spec.r_code_in + 0.18 * (spec.r_code_out - spec.r_code_in),
                             spec.r_code_out - 0.18 * (spec.r_code_out - spec.r_code_in), 3)
    rings = np.array([_ring_samples(patch, r * _PATCH_R, m) for r in code_radii])
    code = rings.mean(axis=0)

    black = _ring_samples(patch, 0.4 * spec.r_center * _PATCH_R, 32).mean()
    gap_r = 0.5 * (spec.r_code_out + spec.r_outer_in)
    white = _ring_samples(patch, gap_r * _PATCH_R, 64).mean()
    if white - black < 16:  # no contrast: not a marker patch
        raise DecodeFailed("insufficient contrast between reference rings")
    thr = 0.5 * (black + white)

    dark = code < thr
    best = (-1.0, 0, 0.0)  # consistency, word, phase offset
    for off in range(per):
        rolled = np.roll(dark, -off).reshape(n, per)
        votes = rolled.mean(axis=1)
        bits = votes > 0.5
        consistency = float(np.where(bits, votes, 1.0 - votes).mean())
        if consistency > best[0]:
            word = int(sum(1 << i for i in range(n) if bits[i]))
            best = (consistency, word, off)
    p_code, word, _ = best

    # the white annuli flanking the code ring must actually be bright,
    # which rejects solid blobs that would decode as an all-dark ring
    inner_r = 0.5 * (spec.r_center + spec.r_code_in)
    inner_px = _ring_samples(patch, inner_r * _PATCH_R, 64)
    gap_px = _ring_samples(patch, gap_r * _PATCH_R, 64)
    if (inner_px > thr).mean() < 0.8 or (gap_px > thr).mean() < 0.8:
        raise DecodeFailed("white separator annuli not present")

    center_px = _ring_samples(patch, 0.4 * spec.r_center * _PATCH_R, 32)
    p_center = float((center_px < thr).mean())
    outer_r = 0.5 * (spec.r_outer_in + spec.r_outer_out)
    outer_px = _ring_samples(patch, outer_r * _PATCH_R, 96)
    p_outer = float((outer_px < thr).mean())

    if p_code < 0.75:
        raise DecodeFailed(f"code ring consistency {p_code:.2f} too low")
    matches = [
        mid
        for mid, cw in spec.id_table.items()
        if rotational_hamming(word, cw, n) <= 1
    ]
    if len(matches) != 1:
        raise DecodeFailed("no unique codeword within Hamming tolerance 1")
    return matches[0], p_center, p_code, p_outer


def _hough_verify(patch: np.ndarray) -> bool:
    """Verify the rectified patch contains the outer circle."""
    mid_r = 0.5 * (0.85 + 1.0) * _PATCH_R
    circles = cv2.HoughCircles(
        patch,
        cv2.HOUGH_GRADIENT,
        dp=1,
        minDist=_PATCH,
        param1=100,
        param2=18,
        minRadius=int(0.75 * mid_r),
        maxRadius=int(1.25 * mid_r),
    )
    if circles is None:
        return False
    mid = (_PATCH - 1) / 2.0
    for x, y, _r in circles[0]:
        if np.hypot(x - mid, y - mid) < 0.15 * _PATCH_R:
            return True
    return False


def detect_markers(
    raster: np.ndarray,
    spec: MarkerSpec,
    min_radius_px: float = 8.0,
    confidence_threshold: float = 0.8,
) -> list[DetectedMarker]:
    """Detect and decode markers in an 8-bit grayscale raster.

    Contours of the binarized image are fitted with least-squares
    ellipses; plausible outer-circle candidates are affine-rectified to
    a canonical patch, verified by a Hough circle, and decoded. The
    sub-pixel ellipse center is the image measurement.
    """
    if raster.dtype != np.uint8 or raster.ndim != 2:
        raise InvalidConfig("expected an 8-bit single-channel raster")
    _, binary = cv2.threshold(raster, 0, 255, cv2.THRESH_BINARY_INV + cv2.THRESH_OTSU)
    contours, _ = cv2.findContours(binary, cv2.RETR_TREE, cv2.CHAIN_APPROX_NONE)

    candidates = []
    for cnt in contours:
        if len(cnt) < 16:
            continue
        (cx, cy), (d0, d1), deg = cv2.fitEllipse(cnt)
        a, b = max(d0, d1) / 2.0, min(d0, d1) / 2.0
        if b < min_radius_px or a <= 0:
            continue
        # the fitted ellipse must actually describe the contour
        area = cv2.contourArea(cnt)
        if area <= 0 or abs(1.0 - area / (np.pi * a * b)) > 0.2:
            continue
        candidates.append(((cx, cy), (a, b), np.deg2rad(deg + (0.0 if d0 >= d1 else 90.0))))

    # keep the outermost ellipse of each concentric family
    candidates.sort(key=lambda c: -c[1][0])
    kept = []
    for cand in candidates:
        if all(np.hypot(cand[0][0] - k[0][0], cand[0][1] - k[0][1]) > 0.5 * k[1][1] for k in kept):
            kept.append(cand)

    detections = []
    for (cx, cy), (a, b), ang in kept:
        patch = _rectify(raster, (cx, cy), (a, b), ang)
        if not _hough_verify(patch):
            continue
        try:
            mid, p_center, p_code, p_outer = decode_marker(patch, spec)
        except DecodeFailed:
            continue
        confidence = float(min(p_center, p_code, p_outer))
        if confidence < confidence_threshold:
            continue
        detections.append(
            DetectedMarker(
                center=np.array([cx, cy]),
                axes=(a, b),
                angle=ang,
                marker_id=mid,
                confidence=confidence,
                p_center=p_center,
                p_code=p_code,
                p_outer=p_outer,
            )
        )
    detections.sort(key=lambda d: (d.center[0], d.center[1]))
    return detections


# ---------------------------------------------------------------------------
# PGM i/o


def write_pgm(path, raster: np.ndarray) -> None:
    """Binary PGM (P5) writer."""
    h, w = raster.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(raster.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise InvalidConfig("not a binary PGM (P5) file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise InvalidConfig("only 8-bit PGM supported")
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# focal calibration


def _homography_dlt(plane_xy: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Least-squares plane-to-image homography (normalized DLT)."""
    src = np.asarray(plane_xy, dtype=float)
    dst = np.asarray(pixels, dtype=float)
    if len(src) < 4:
        raise DegenerateGeometry("homography needs >= 4 points")

    def normalizer(pts):
        mu = pts.mean(axis=0)
        scale = np.sqrt(2.0) / max(np.mean(np.linalg.norm(pts - mu, axis=1)), 1e-12)
        T = np.array([[scale, 0, -scale * mu[0]], [0, scale, -scale * mu[1]], [0, 0, 1.0]])
        return T

    Ts, Td = normalizer(src), normalizer(dst)
    sh = (Ts @ np.column_stack([src, np.ones(len(src))]).T).T
    dh = (Td @ np.column_stack([dst, np.ones(len(dst))]).T).T
    rows = []
    for (x, y, _), (u, v, _) in zip(sh, dh):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y, -u])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y, -v])
    _, sv, Vt = np.linalg.svd(np.array(rows))
    if sv[-2] < 1e-12 * sv[0]:
        raise DegenerateGeometry("degenerate point configuration")
    H = Vt[-1].reshape(3, 3)
    return np.linalg.inv(Td) @ H @ Ts


def _pose_from_homography(H: np.ndarray, K: np.ndarray):
    """Plane pose [r1 r2 t] from H = K [r1 r2 t], orthonormalized."""
    M = np.linalg.solve(K, H)
    lam = 2.0 / (np.linalg.norm(M[:, 0]) + np.linalg.norm(M[:, 1]))
    r1, r2, t = lam * M[:, 0], lam * M[:, 1], lam * M[:, 2]
    if t[2] < 0:
        r1, r2, t = -r1, -r2, -t
    A = np.column_stack([r1, r2, np.cross(r1, r2)])
    U, _, Vt = np.linalg.svd(A)
    R = U @ np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))]) @ Vt
    return R, t


def _view_rms(plane_xy, pixels, H, K) -> float:
    R, t = _pose_from_homography(H, K)
    P = K @ np.column_stack([R[:, 0], R[:, 1], t])
    ph = np.column_stack([plane_xy, np.ones(len(plane_xy))])
    proj = (P @ ph.T).T
    if np.any(proj[:, 2] <= 0):
        return np.inf
    uv = proj[:, :2] / proj[:, 2:3]
    return float(np.sqrt(np.mean(np.sum((uv - pixels) ** 2, axis=1))))


def _is_fronto_parallel(H: np.ndarray, diag: float, tol: float = 1e-4) -> bool:
    """A fronto-parallel view maps the plane by a similarity: the
    projective row of its homography vanishes."""
    Hn = H / H[2, 2]
    return abs(Hn[2, 0]) * diag < tol and abs(Hn[2, 1]) * diag < tol


def calibrate_focal(
    views: list[tuple[np.ndarray, np.ndarray]],
    width: int,
    height: int,
    n_steps: int = 400,
    f_range: tuple[float, float] = (0.5, 2.0),
) -> tuple[CameraIntrinsics, dict]:
    """Exhaustive single-parameter focal search from planar views.

    ``views`` holds (plane_xy, pixels) correspondences per view, all of
    one physical plane. For every f on a geometric grid spanning
    ``f_range`` times the image diagonal, the principal point is fixed
    at the image center, per-view plane homographies are decomposed
    into poses, and the mean reprojection RMS is evaluated; the global
    grid minimizer is refined by a local parabolic fit. Returns the
    intrinsics and a report with the full error curve.
    """
    if len(views) < 3:
        raise InsufficientViews("focal calibration needs >= 3 planar views")
    diag = float(np.hypot(width, height))
    cx, cy = width / 2.0, height / 2.0

    views = [(np.asarray(p, dtype=float), np.asarray(q, dtype=float)) for p, q in views]
    Hs = [_homography_dlt(p, q) for p, q in views]
    if all(_is_fronto_parallel(H, diag) for H in Hs):
        raise DegenerateGeometry("all views are fronto-parallel; f is unobservable")

    f_grid = np.geomspace(f_range[0] * diag, f_range[1] * diag, n_steps)
    errors = np.empty(n_steps)
    for i, f in enumerate(f_grid):
        K = np.array([[f, 0, cx], [0, f, cy], [0, 0, 1.0]])
        errors[i] = float(np.mean([_view_rms(p, q, H, K) for (p, q), H in zip(views, Hs)]))
    best = int(np.argmin(errors))

    # parabolic refinement on log f around the grid minimum
    f_opt = float(f_grid[best])
    if 0 < best < n_steps - 1 and np.all(np.isfinite(errors[best - 1 : best + 2])):
        x = np.log(f_grid[best - 1 : best + 2])
        y = errors[best - 1 : best + 2]
        denom = (y[0] - 2 * y[1] + y[2])
        if denom > 1e-18:
            shift = 0.5 * (y[0] - y[2]) / denom
            f_opt = float(np.exp(x[1] + np.clip(shift, -1.0, 1.0) * (x[2] - x[1])))

    K = np.array([[f_opt, 0, cx], [0, f_opt, cy], [0, 0, 1.0]])
    per_view = [_view_rms(p, q, H, K) for (p, q), H in zip(views, Hs)]
    intr = CameraIntrinsics(f_px=f_opt, cx=cx, cy=cy, width=width, height=height)
    report = {
        "f_grid": [float(v) for v in f_grid],
        "errors": [float(v) for v in errors],
        "f": f_opt,
        "grid_argmin": best,
        "per_view_rms": [float(v) for v in per_view],
    }
    return intr, report


# ---------------------------------------------------------------------------
# GCP table + geo-registration


@dataclass(frozen=True)
class GroundControlPoint:
    marker_id: int
    position: np.ndarray  # world meters
    sigma_m: float

    def __post_init__(self):
        if self.sigma_m <= 0:
            raise InvalidConfig("sigma_m must be positive")


def read_gcp_csv(path) -> list[GroundControlPoint]:
    gcps = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header[:5]] != ["id", "x", "y", "z", "sigma_m"]:
            raise InvalidConfig("bad gcp.csv header")
        for row in reader:
            gcps.append(
                GroundControlPoint(int(row[0]), np.array([float(row[1]), float(row[2]), float(row[3])]), float(row[4]))
            )
    ids = [g.marker_id for g in gcps]
    if len(set(ids)) != len(ids):
        raise InvalidConfig("duplicate GCP ids")
    return gcps


def triangulate_markers(rmap, marker_obs: dict[int, list[tuple[int, float, float]]]) -> dict[int, np.ndarray]:
    """Triangulate each marker id seen in >= 2 localized images."""
    by_id: dict[int, list[PixelObservation]] = {}
    cameras = {}
    for img_id, obs in marker_obs.items():
        if img_id not in rmap.cameras:
            continue
        cameras[img_id] = (rmap.intrinsics, rmap.cameras[img_id])
        for mid, u, v in obs:
            by_id.setdefault(int(mid), []).append(PixelObservation(image_id=img_id, u=float(u), v=float(v)))
    points = {}
    for mid, pix in by_id.items():
        if len(pix) < 2:
            continue
        X, _err = triangulate_linear(pix, cameras)
        points[mid] = X
    return points


@dataclass
class GeoRegistration:
    transform: Sim3
    residuals: dict[int, float]  # marker id -> |error| meters, inliers + outliers
    inlier_ids: list[int]
    local_points: dict[int, np.ndarray]


def georegister(
    rmap,
    marker_obs: dict[int, list[tuple[int, float, float]]],
    gcps: list[GroundControlPoint],
    seed: int = 0,
    max_iters: int = 200,
    apply: bool = True,
) -> GeoRegistration:
    """Marker-based Sim(3) geo-registration of a reconstruction.

    Marker centers seen in several images are triangulated in the local
    frame and matched to the GCP table by id; a RANSAC over 3-point
    similarity estimates (inlier threshold 3 sigma_m per GCP) yields
    the robust transform, which is applied to the whole map.
    """
    local = triangulate_markers(rmap, marker_obs)
    table = {g.marker_id: g for g in gcps}
    shared = sorted(set(local) & set(table))
    if len(shared) < 3:
        raise InsufficientGCPs(f"{len(shared)} usable GCPs, need >= 3")

    src = np.array([local[mid] for mid in shared])
    dst = np.array([table[mid].position for mid in shared])
    thresh = np.array([3.0 * table[mid].sigma_m for mid in shared])

    rng = np.random.default_rng(seed)
    best_inliers: np.ndarray | None = None
    for _ in range(max_iters):
        pick = rng.choice(len(shared), size=3, replace=False)
        try:
            sim, _ = estimate_similarity(src[pick], dst[pick])
        except Exception:
            continue
        err = np.linalg.norm(sim.apply(src) - dst, axis=1)
        inliers = err <= thresh
        if best_inliers is None or inliers.sum() > best_inliers.sum():
            best_inliers = inliers
    if best_inliers is None or best_inliers.sum() < 3:
        raise NoConsensus("no similarity sample reached 3 GCP inliers")

    sim, _ = estimate_similarity(src[best_inliers], dst[best_inliers])
    err = np.linalg.norm(sim.apply(src) - dst, axis=1)
    refined = err <= thresh
    if refined.sum() >= 3 and refined.sum() > best_inliers.sum():
        sim, _ = estimate_similarity(src[refined], dst[refined])
        err = np.linalg.norm(sim.apply(src) - dst, axis=1)
        best_inliers = refined

    if apply:
        for pid, pt in rmap.points.items():
            pt.position = sim.apply(pt.position)
        for img_id in list(rmap.cameras):
            rmap.cameras[img_id] = sim.apply_pose(rmap.cameras[img_id])

    residuals = {mid: float(e) for mid, e in zip(shared, err)}
    inlier_ids = [mid for mid, ok in zip(shared, best_inliers) if ok]
    return GeoRegistration(transform=sim, residuals=residuals, inlier_ids=inlier_ids, local_points=local)


def write_gcp_csv(path, gcps: list[GroundControlPoint]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "x", "y", "z", "sigma_m"])
        for g in gcps:
            writer.writerow([g.marker_id, *(f"{v:.9f}" for v in g.position), g.sigma_m])


def save_calibration_report(path, report: dict) -> None:
    import json

    Path(path).write_text(json.dumps(report, indent=2))
