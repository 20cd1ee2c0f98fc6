"""Quality feedback and evaluation.

Per-face ground sampling distance (GSD) and redundancy overlays with
shared numeric color tables, GCP accuracy, one-way Hausdorff
statistics, surface completeness, and per-row evaluation reports.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud, InvalidConfig, MissingGCPs
from .geometry import CameraIntrinsics, Pose, project_many
from .markers import GroundControlPoint, triangulate_markers

SCHEMA_VERSION = 1

REDUNDANCY_SATURATION = 30

# 8-stop perceptually ordered blue -> red lookup tables (RGB, 0-255).
# For GSD, blue marks coarse sampling and red fine sampling; for
# redundancy, red marks faces seen by REDUNDANCY_SATURATION+ cameras.
COLOR_STOPS = [
    (49, 54, 149),
    (69, 117, 180),
    (116, 173, 209),
    (171, 217, 233),
    (254, 224, 144),
    (253, 174, 97),
    (244, 109, 67),
    (215, 48, 39),
]


def gsd_bucket(gsd: float, lo: float, hi: float) -> int:
    """Bucket 0 (coarse, blue) .. 7 (fine, red) on a log scale."""
    if not (lo > 0 and hi > lo):
        raise InvalidConfig("need 0 < lo < hi for the GSD scale")
    t = (np.log(hi) - np.log(max(gsd, 1e-12))) / (np.log(hi) - np.log(lo))
    return int(np.clip(np.floor(t * 8), 0, 7))


def redundancy_bucket(redundancy: int) -> int:
    """Bucket 0..7; saturates at REDUNDANCY_SATURATION observers."""
    return int(min(7, (max(redundancy, 0) * 8) // REDUNDANCY_SATURATION))


def color_tables() -> dict:
    """Numeric color tables shared verbatim with any UI client."""
    return {
        "schema_version": SCHEMA_VERSION,
        "stops": [list(c) for c in COLOR_STOPS],
        "gsd": {"scale": "log", "bucket0": "coarse"},
        "redundancy": {"saturation": REDUNDANCY_SATURATION},
    }


# ---------------------------------------------------------------------------
# face quality


@dataclass
class QualityOverlay:
    """Per-face GSD / redundancy with observation flags."""

    gsd: np.ndarray  # m/px, min over observers; NaN where unobserved
    redundancy: np.ndarray  # int observer count
    observed: np.ndarray  # bool

    @property
    def n_faces(self):
        return len(self.gsd)

    def to_dict(self):
        gsd = np.where(self.observed, self.gsd, -1.0)
        return {
            "schema_version": SCHEMA_VERSION,
            "gsd_m_per_px": [float(v) for v in gsd],
            "redundancy": [int(v) for v in self.redundancy],
            "observed": [bool(v) for v in self.observed],
            "redundancy_saturation": REDUNDANCY_SATURATION,
        }


def _segments_blocked(starts: np.ndarray, end: np.ndarray, tris: np.ndarray, skip: np.ndarray) -> np.ndarray:
    """For each start point, does the open segment start->end cross any
    triangle (Moller-Trumbore), ignoring per-row `skip` indices?"""
    n = len(starts)
    blocked = np.zeros(n, dtype=bool)
    v0, v1, v2 = tris[:, 0], tris[:, 1], tris[:, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    d = end[None, :] - starts  # (n, 3)
    eps = 1e-12
    chunk = max(1, int(2e6 // max(len(tris), 1)))
    for i0 in range(0, n, chunk):
        i1 = min(n, i0 + chunk)
        dd = d[i0:i1, None, :]  # (c, 1, 3)
        p = np.cross(dd, e2[None, :, :])  # (c, m, 3)
        det = np.einsum("cmk,mk->cm", p, e1)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            s = starts[i0:i1, None, :] - v0[None, :, :]
            u = np.einsum("cmk,cmk->cm", s, p) * inv
            q = np.cross(s, e1[None, :, :])
            v = np.einsum("cmk,cmk->cm", q, np.broadcast_to(dd, q.shape)) * inv
            t = np.einsum("cmk,mk->cm", q, e2) * inv
        hit = (
            (np.abs(det) > eps)
            & (u >= -1e-9)
            & (v >= -1e-9)
            & (u + v <= 1.0 + 1e-9)
            & (t > 1e-6)
            & (t < 1.0 - 1e-6)
        )
        hit[np.arange(i1 - i0), skip[i0:i1]] = False
        blocked[i0:i1] = hit.any(axis=1)
    return blocked


def face_quality(
    vertices: np.ndarray,
    faces: np.ndarray,
    cameras: list[tuple[CameraIntrinsics, Pose]],
    occlusion: bool = True,
) -> QualityOverlay:
    """Per-face GSD and redundancy from a camera network.

    A camera observes a face when the face centroid projects inside the
    image with positive depth, the face is oriented toward the camera,
    and (optionally) the centroid-to-camera segment is not blocked by
    another face of the mesh. GSD contribution is d / f_px at centroid
    distance d; a face's GSD is the minimum over its observers.
    """
    faces = np.asarray(faces, dtype=int)
    n = len(faces)
    gsd = np.full(n, np.nan)
    redundancy = np.zeros(n, dtype=int)
    if n == 0:
        return QualityOverlay(gsd=gsd, redundancy=redundancy, observed=np.zeros(0, dtype=bool))

    tris = np.asarray(vertices, dtype=float)[faces]
    centroids = tris.mean(axis=1)
    normals = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])

    for intr, pose in cameras:
        cam_center = pose.center
        to_cam = cam_center[None, :] - centroids
        dist = np.linalg.norm(to_cam, axis=1)
        facing = np.einsum("ij,ij->i", normals, to_cam) > 0
        px, depth = project_many(intr, pose, centroids)
        in_image = (
            (depth > 0)
            & (px[:, 0] >= 0)
            & (px[:, 0] < intr.width)
            & (px[:, 1] >= 0)
            & (px[:, 1] < intr.height)
        )
        visible = facing & in_image
        if occlusion and visible.any():
            idx = np.flatnonzero(visible)
            blocked = _segments_blocked(centroids[idx], cam_center, tris, idx)
            visible[idx[blocked]] = False
        redundancy[visible] += 1
        contrib = dist[visible] / intr.f_px
        gsd[visible] = np.fmin(gsd[visible], contrib)

    observed = redundancy > 0
    return QualityOverlay(gsd=gsd, redundancy=redundancy, observed=observed)


# ---------------------------------------------------------------------------
# accuracy metrics


def gcp_error(rmap, marker_obs, gcps: list[GroundControlPoint]) -> tuple[float, dict[int, float]]:
    """Mean and per-id Euclidean GCP error in millimeters.

    The map must already be geo-registered; marker centers are
    re-triangulated in the registered frame and compared to the table.
    """
    local = triangulate_markers(rmap, marker_obs)
    table = {g.marker_id: g for g in gcps}
    shared = sorted(set(local) & set(table))
    if not shared:
        raise MissingGCPs("no marker id appears in both the map and the GCP table")
    per_id = {
        mid: float(np.linalg.norm(local[mid] - table[mid].position) * 1000.0) for mid in shared
    }
    return float(np.mean(list(per_id.values()))), per_id


def hausdorff_one_way(model_pts: np.ndarray, reference_pts: np.ndarray, tau_m: float = 0.002) -> dict:
    """One-way Hausdorff statistics, model against reference.

    Nearest-reference distance per model sample; reports the 50/90/95/
    100% quantiles (mm) and the fraction of samples within tau.
    """
    model_pts = np.asarray(model_pts, dtype=float).reshape(-1, 3)
    reference_pts = np.asarray(reference_pts, dtype=float).reshape(-1, 3)
    if len(model_pts) == 0 or len(reference_pts) == 0:
        raise EmptyCloud("both clouds must be non-empty")
    d, _ = cKDTree(reference_pts).query(model_pts)
    q50, q90, q95, q100 = np.percentile(d, [50, 90, 95, 100])
    return {
        "q50_mm": float(q50 * 1000.0),
        "q90_mm": float(q90 * 1000.0),
        "q95_mm": float(q95 * 1000.0),
        "q100_mm": float(q100 * 1000.0),
        "fraction_within_tau": float(np.mean(d <= tau_m)),
        "tau_mm": float(tau_m * 1000.0),
        "n_samples": int(len(model_pts)),
    }


def _point_triangle_distances(points: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Exact min distance from each point to any triangle (vectorized)."""
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    ab = b - a
    ac = c - a
    out = np.full(len(points), np.inf)
    chunk = max(1, int(2e6 // max(len(tris), 1)))
    for i0 in range(0, len(points), chunk):
        p = points[i0 : i0 + chunk, None, :]  # (n, 1, 3)
        ap = p - a[None, :, :]
        d1 = np.einsum("mk,nmk->nm", ab, ap)
        d2 = np.einsum("mk,nmk->nm", ac, ap)
        bp = p - b[None, :, :]
        d3 = np.einsum("mk,nmk->nm", ab, bp)
        d4 = np.einsum("mk,nmk->nm", ac, bp)
        cp = p - c[None, :, :]
        d5 = np.einsum("mk,nmk->nm", ab, cp)
        d6 = np.einsum("mk,nmk->nm", ac, cp)

        va = d3 * d6 - d5 * d4
        vb = d5 * d2 - d1 * d6
        vc = d1 * d4 - d3 * d2
        denom_vb = d1 - d3
        denom_vc = d2 - d6

        with np.errstate(divide="ignore", invalid="ignore"):
            # interior projection
            denom = va + vb + vc
            v = np.where(denom != 0, vb / denom, 0.0)
            w = np.where(denom != 0, vc / denom, 0.0)
            closest = a[None] + v[..., None] * ab[None] + w[..., None] * ac[None]
            # vertex regions
            reg_a = (d1 <= 0) & (d2 <= 0)
            reg_b = (d3 >= 0) & (d4 <= d3)
            reg_c = (d6 >= 0) & (d5 <= d6)
            # edge regions
            t_ab = np.where(denom_vb != 0, d1 / denom_vb, 0.0)
            reg_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
            t_ac = np.where(denom_vc != 0, d2 / denom_vc, 0.0)
            reg_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
            t_bc = np.where((d4 - d3) + (d5 - d6) != 0, (d4 - d3) / ((d4 - d3) + (d5 - d6)), 0.0)
            reg_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)

        closest = np.where(reg_bc[..., None], b[None] + t_bc[..., None] * (c - b)[None], closest)
        closest = np.where(reg_ac[..., None], a[None] + t_ac[..., None] * ac[None], closest)
        closest = np.where(reg_ab[..., None], a[None] + t_ab[..., None] * ab[None], closest)
        closest = np.where(reg_c[..., None], np.broadcast_to(c[None], closest.shape), closest)
        closest = np.where(reg_b[..., None], np.broadcast_to(b[None], closest.shape), closest)
        closest = np.where(reg_a[..., None], np.broadcast_to(a[None], closest.shape), closest)
        dist = np.linalg.norm(p - closest, axis=2)
        out[i0 : i0 + chunk] = dist.min(axis=1)
    return out


def completeness(vertices: np.ndarray, faces: np.ndarray, gt_samples: np.ndarray, tau_m: float) -> float:
    """Fraction of ground-truth surface samples within tau of the mesh."""
    if tau_m <= 0:
        raise InvalidConfig("tau must be positive")
    gt_samples = np.asarray(gt_samples, dtype=float).reshape(-1, 3)
    if len(gt_samples) == 0:
        raise EmptyCloud("no ground-truth samples")
    faces = np.asarray(faces, dtype=int)
    if len(faces) == 0:
        return 0.0
    tris = np.asarray(vertices, dtype=float)[faces]
    # prune with a centroid tree before the exact distance pass
    centroids = tris.mean(axis=1)
    radii = np.linalg.norm(tris - centroids[:, None, :], axis=2).max()
    d_centroid, _ = cKDTree(centroids).query(gt_samples)
    maybe = d_centroid <= tau_m + radii
    frac_far = np.flatnonzero(maybe)
    if len(frac_far) == 0:
        return 0.0
    d = _point_triangle_distances(gt_samples[maybe], tris)
    within = np.zeros(len(gt_samples), dtype=bool)
    within[maybe] = d <= tau_m
    return float(within.mean())


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    """Evaluation summary for one reconstruction run."""

    gcp_mean_error_mm: float | None
    gcp_per_id_mm: dict[int, float] = field(default_factory=dict)
    hausdorff: dict = field(default_factory=dict)
    completeness: float | None = None
    per_row: dict[str, dict] = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.completeness is not None and not 0.0 <= self.completeness <= 1.0:
            raise InvalidConfig("completeness must lie in [0, 1]")
        if self.hausdorff:
            q = [self.hausdorff.get(k) for k in ("q50_mm", "q90_mm", "q95_mm", "q100_mm")]
            if any(v is None for v in q) or any(x > y + 1e-12 for x, y in zip(q, q[1:])):
                raise InvalidConfig("hausdorff quantiles must be monotone")

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "gcp_mean_error_mm": self.gcp_mean_error_mm,
            "gcp_per_id_mm": {str(k): v for k, v in self.gcp_per_id_mm.items()},
            "hausdorff": self.hausdorff,
            "completeness": self.completeness,
            "per_row": self.per_row,
            "timing": self.timing,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def row_subset_report(dataset, reconstruct, rows: list[str] | None = None, tau_m: float = 0.01) -> dict[str, EvalReport]:
    """Run a reconstruction per row subset and evaluate each.

    ``reconstruct`` maps a list of image ids to a result object with
    ``points`` (n, 3), optional ``mesh`` (vertices, faces), optional
    ``gcp`` (mean_mm, per_id) already geo-registered. Row labels come
    from ``dataset.row_index``; ``rows`` defaults to all labels plus
    the combined "all" run.
    """
    labels = sorted(set(int(r) for r in dataset.row_index))
    wanted = rows if rows is not None else [str(r) for r in labels] + ["all"]
    gt_pts = None
    if dataset.facade is not None:
        gt_pts, _ = dataset.facade.sample_surface(4000, seed=17)

    reports: dict[str, EvalReport] = {}
    for label in wanted:
        if label == "all":
            img_ids = list(range(dataset.n_images))
        else:
            img_ids = [i for i in range(dataset.n_images) if int(dataset.row_index[i]) == int(label)]
        result = reconstruct(img_ids)
        gcp_mean, per_id = result.get("gcp", (None, {}))
        hd = {}
        comp = None
        pts = result.get("points")
        if gt_pts is not None and pts is not None and len(pts):
            hd = hausdorff_one_way(pts, gt_pts, tau_m=tau_m)
            comp = float(np.mean(cKDTree(pts).query(gt_pts)[0] <= tau_m))
        reports[label] = EvalReport(
            gcp_mean_error_mm=gcp_mean,
            gcp_per_id_mm=per_id,
            hausdorff=hd,
            completeness=comp,
            timing=result.get("timing", {}),
        )
    return reports
