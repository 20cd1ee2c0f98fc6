"""Incremental map building: bootstrap, retrieval-backed localization
and epipolar-filtered expansion.

The growing model holds cameras, 3D points with tracks, and the raw
per-image features. Scale is fixed by a unit bootstrap baseline until
geo-registration makes the map metric.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import BootstrapFailed, InconsistentMap
from .geometry import (
    CameraIntrinsics,
    PixelObservation,
    Pose,
    fundamental_from_poses,
    project,
    project_many,
    sampson_distances,
    triangulate_linear,
    triangulation_angle,
)
from .p3p import p3p_ransac
from .scenesim import ImageFeatures


@dataclass
class SfmConfig:
    match_ratio: float = 0.8
    epipolar_px: float = 2.0
    reproj_px: float = 2.0
    min_tri_angle_rad: float = np.deg2rad(1.0)
    min_bootstrap_inliers: int = 30
    min_localize_inliers: int = 15
    top_n_retrieval: int = 5
    ransac_seed: int = 0


@dataclass
class MapPoint:
    position: np.ndarray
    track: list[tuple[int, int]] = field(default_factory=list)  # (image_id, feat_idx)


class ReconstructionMap:
    def __init__(self, intrinsics: CameraIntrinsics):
        self.intrinsics = intrinsics
        self.cameras: dict[int, Pose] = {}
        self.points: dict[int, MapPoint] = {}
        self.images: dict[int, ImageFeatures] = {}
        self.feat_point: dict[int, np.ndarray] = {}  # feature idx -> point_id / -1
        self._next_pid = 0

    # -- mutation -----------------------------------------------------------
    def add_camera(self, image_id: int, pose: Pose, features: ImageFeatures):
        self.cameras[image_id] = pose
        self.images[image_id] = features
        if image_id not in self.feat_point:
            self.feat_point[image_id] = np.full(len(features.pixels), -1, dtype=np.int64)

    def new_point(self, position, track) -> int:
        pid = self._next_pid
        self._next_pid += 1
        self.points[pid] = MapPoint(position=np.asarray(position, dtype=float), track=list(track))
        for img, fi in track:
            self.feat_point[img][fi] = pid
        return pid

    def extend_track(self, pid: int, image_id: int, feat_idx: int) -> bool:
        track = self.points[pid].track
        if any(img == image_id for img, _ in track):
            return False
        if self.feat_point[image_id][feat_idx] != -1:
            return False
        track.append((image_id, feat_idx))
        self.feat_point[image_id][feat_idx] = pid
        return True

    # -- queries ------------------------------------------------------------
    def pixel_of(self, image_id, feat_idx):
        return self.images[image_id].pixels[feat_idx]

    def observations_of(self, pid):
        return [
            PixelObservation(img, *self.pixel_of(img, fi), point_id=pid)
            for img, fi in self.points[pid].track
        ]

    @property
    def n_cameras(self):
        return len(self.cameras)

    @property
    def n_points(self):
        return len(self.points)

    def validate(self):
        """Structural consistency; raises InconsistentMap on violation."""
        for pid, pt in self.points.items():
            if len(pt.track) < 2:
                raise InconsistentMap(f"point {pid} has track length {len(pt.track)}")
            seen = set()
            for img, fi in pt.track:
                if img not in self.cameras:
                    raise InconsistentMap(f"point {pid} references missing camera {img}")
                if img in seen:
                    raise InconsistentMap(f"point {pid} observes image {img} twice")
                seen.add(img)
                if self.feat_point[img][fi] != pid:
                    raise InconsistentMap(f"feature map out of sync for point {pid}")
        for img, fp in self.feat_point.items():
            for fi in np.flatnonzero(fp >= 0):
                pid = int(fp[fi])
                if pid not in self.points:
                    raise InconsistentMap(f"feature references missing point {pid}")

    # -- serialization ------------------------------------------------------
    def to_dict(self):
        return {
            "schema": 1,
            "intrinsics": self.intrinsics.to_dict(),
            "cameras": {str(k): self.cameras[k].to_dict() for k in sorted(self.cameras)},
            "points": {
                str(pid): {
                    "position": [float(x) for x in self.points[pid].position],
                    "track": [[int(a), int(b)] for a, b in self.points[pid].track],
                }
                for pid in sorted(self.points)
            },
        }

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def export(self, path):
        """Write map.json plus points.ply next to it."""
        from pathlib import Path

        from .scenesim import write_ply_points

        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        (path / "map.json").write_text(json.dumps(self.to_dict(), indent=1))
        pts = np.array([self.points[p].position for p in sorted(self.points)]).reshape(-1, 3)
        write_ply_points(path / "points.ply", pts)


# ---------------------------------------------------------------------------
# matching


def match_signatures(sig_a, sig_b, ratio: float = 0.8):
    """Nearest-neighbor matching with Lowe ratio test and cross check.

    Signatures are unit vectors; distance is Euclidean on the sphere.
    Returns (idx_a, idx_b) integer arrays.
    """
    if len(sig_a) == 0 or len(sig_b) == 0:
        return np.empty(0, dtype=int), np.empty(0, dtype=int)
    sim = np.asarray(sig_a) @ np.asarray(sig_b).T
    d2 = np.maximum(2.0 - 2.0 * sim, 0.0)
    nn = np.argmin(d2, axis=1)
    rows = np.arange(len(sig_a))
    best = d2[rows, nn]
    if d2.shape[1] >= 2:
        tmp = d2.copy()
        tmp[rows, nn] = np.inf
        second = tmp.min(axis=1)
        ok = np.sqrt(best) < ratio * np.sqrt(np.maximum(second, 1e-30))
    else:
        ok = np.ones(len(sig_a), dtype=bool)
    nn_b = np.argmin(d2, axis=0)
    mutual = nn_b[nn] == rows
    keep = ok & mutual
    return rows[keep], nn[keep]


# ---------------------------------------------------------------------------
# bootstrap


def _homography_poses(px_a, px_b, intrinsics, threshold_px):
    """Candidate relative poses from a RANSAC plane homography.

    Near-planar scenes make the eight-point essential estimate
    degenerate; the homography decomposition covers that case. Returns
    a list of (Pose, inlier mask) candidates (cheirality is settled by
    the triangulation census in the caller).
    """
    import cv2

    H, mask = cv2.findHomography(
        np.asarray(px_a, dtype=np.float64),
        np.asarray(px_b, dtype=np.float64),
        cv2.RANSAC,
        threshold_px,
    )
    if H is None or mask is None or mask.sum() < 8:
        return []
    K = intrinsics.K
    Hn = np.linalg.inv(K) @ H @ K
    try:
        _n, Rs, ts, _normals = cv2.decomposeHomographyMat(Hn, np.eye(3))
    except cv2.error:
        return []
    out = []
    mask = mask.ravel().astype(bool)
    for R, t in zip(Rs, ts):
        t = t.ravel()
        norm = np.linalg.norm(t)
        if norm < 1e-9:
            continue  # pure rotation: no baseline to reconstruct
        out.append((Pose.from_Rt(R, t / norm), mask))
    return out


def bootstrap(
    feat_a: ImageFeatures,
    feat_b: ImageFeatures,
    intrinsics: CameraIntrinsics,
    config: SfmConfig | None = None,
) -> ReconstructionMap:
    """Initial two-view map with unit baseline.

    Brute-force ratio matching, then relative pose candidates from
    both an essential RANSAC and a homography decomposition (the
    latter covers near-planar scenes where the eight-point solution
    degenerates); the candidate that triangulates the most points
    under the standard gates wins. Raises BootstrapFailed on too few
    inliers or an all-degenerate triangulation geometry.
    """
    from .geometry import estimate_essential_ransac
    from .errors import InsufficientMatches, NoConsensus

    cfg = config or SfmConfig()
    if len(feat_a.pixels) == 0 or len(feat_b.pixels) == 0:
        raise BootstrapFailed("empty feature set")
    ia, ib = match_signatures(feat_a.signatures, feat_b.signatures, cfg.match_ratio)
    if len(ia) < 8:
        raise BootstrapFailed(f"only {len(ia)} matches")

    candidates = []
    try:
        rel_pose, mask = estimate_essential_ransac(
            feat_a.pixels[ia],
            feat_b.pixels[ib],
            intrinsics,
            intrinsics,
            threshold_px=cfg.epipolar_px,
            min_inliers=cfg.min_bootstrap_inliers,
            rng=cfg.ransac_seed,
        )
        candidates.append((rel_pose, mask))
    except (InsufficientMatches, NoConsensus):
        pass
    candidates.extend(
        _homography_poses(feat_a.pixels[ia], feat_b.pixels[ib], intrinsics, cfg.epipolar_px)
    )
    if not candidates:
        raise BootstrapFailed("no relative pose candidate survived")

    pose_a = Pose.identity()

    def census(pose_b, mask):
        cams = {feat_a.image_id: (intrinsics, pose_a), feat_b.image_id: (intrinsics, pose_b)}
        ca, cb = pose_a.center, pose_b.center
        kept = []
        for fa, fb in zip(ia[mask], ib[mask]):
            oa = PixelObservation(feat_a.image_id, *feat_a.pixels[fa])
            ob = PixelObservation(feat_b.image_id, *feat_b.pixels[fb])
            try:
                X, err = triangulate_linear([oa, ob], cams)
            except Exception:
                continue
            if err > cfg.reproj_px:
                continue
            if triangulation_angle(ca, cb, X) < cfg.min_tri_angle_rad:
                continue
            if pose_a.transform(X)[2] <= 0 or pose_b.transform(X)[2] <= 0:
                continue
            kept.append((fa, fb, X))
        return kept

    best_pose, best_kept = None, []
    for pose_b, mask in candidates:
        kept = census(pose_b, mask)
        if len(kept) > len(best_kept):
            best_pose, best_kept = pose_b, kept
    if len(best_kept) < cfg.min_bootstrap_inliers:
        raise BootstrapFailed(f"only {len(best_kept)} triangulated bootstrap points")

    rmap = ReconstructionMap(intrinsics)
    rmap.add_camera(feat_a.image_id, pose_a, feat_a)
    rmap.add_camera(feat_b.image_id, best_pose, feat_b)
    for fa, fb, X in best_kept:
        rmap.new_point(X, [(feat_a.image_id, fa), (feat_b.image_id, fb)])
    return rmap


# ---------------------------------------------------------------------------
# localization


def localize(
    rmap: ReconstructionMap,
    tree,
    features: ImageFeatures,
    config: SfmConfig | None = None,
    rng_seed: int | None = None,
):
    """Pose of a new image against the map, or None when not localizable.

    Retrieval ranks indexed images; pairwise matching against the top n
    yields 2D-3D correspondences through already-triangulated features;
    a three-point RANSAC with nonlinear refinement produces the pose.
    Returns (pose, n_inliers, pair_matches) where pair_matches maps
    neighbor image_id -> (query_idx, neighbor_idx) arrays for reuse by
    expansion; or None.
    """
    cfg = config or SfmConfig()
    if len(features.pixels) == 0 or rmap.n_points == 0:
        return None
    ranked = tree.retrieve(features.signatures, cfg.top_n_retrieval)
    pair_matches = {}
    corr: dict[int, tuple[int, np.ndarray]] = {}  # query feat -> (pid, pixel)
    for img_id, _score in ranked:
        if img_id not in rmap.images:
            continue
        ia, ib = match_signatures(
            features.signatures, rmap.images[img_id].signatures, cfg.match_ratio
        )
        pair_matches[img_id] = (ia, ib)
        fp = rmap.feat_point[img_id]
        for qa, nb in zip(ia, ib):
            pid = int(fp[nb])
            if pid >= 0 and qa not in corr:
                corr[qa] = (pid, features.pixels[qa])
    if len(corr) < 4:
        return None
    pids = [v[0] for v in corr.values()]
    pts3d = np.array([rmap.points[p].position for p in pids])
    pts2d = np.array([v[1] for v in corr.values()])
    pose, mask = p3p_ransac(
        rmap.intrinsics,
        pts3d,
        pts2d,
        threshold_px=cfg.reproj_px,
        min_inliers=cfg.min_localize_inliers,
        rng=cfg.ransac_seed if rng_seed is None else rng_seed,
    )
    if pose is None:
        return None
    return pose, int(mask.sum()), pair_matches


# ---------------------------------------------------------------------------
# expansion


def expand_map(
    rmap: ReconstructionMap,
    features: ImageFeatures,
    pose: Pose,
    pair_matches: dict[int, tuple[np.ndarray, np.ndarray]],
    config: SfmConfig | None = None,
) -> list[int]:
    """Grow the map from a localized image.

    Matches to already-triangulated features extend tracks (gated by
    reprojection); remaining matches pass a Sampson gate, two-view
    triangulation, a minimum triangulation angle and a reprojection
    gate before becoming new points. Returns new point ids.
    """
    cfg = config or SfmConfig()
    img_new = features.image_id
    rmap.add_camera(img_new, pose, features)
    intr = rmap.intrinsics
    new_ids: list[int] = []
    c_new = pose.center
    for img_id, (ia, ib) in pair_matches.items():
        if img_id == img_new or img_id not in rmap.cameras:
            continue
        if len(ia) == 0:
            continue
        pose_nb = rmap.cameras[img_id]
        F = fundamental_from_poses(intr, pose, intr, pose_nb)
        d = sampson_distances(features.pixels[ia], rmap.images[img_id].pixels[ib], F)
        ok = d < cfg.epipolar_px
        fp_nb = rmap.feat_point[img_id]
        fp_q = rmap.feat_point[img_new]
        cams = {img_new: (intr, pose), img_id: (intr, pose_nb)}
        c_nb = pose_nb.center
        for qa, nb in zip(ia[ok], ib[ok]):
            pid = int(fp_nb[nb])
            if fp_q[qa] != -1:
                continue
            if pid >= 0:
                # track extension: gate on reprojection into the new view
                X = rmap.points[pid].position
                try:
                    uv = project(intr, pose, X)
                except Exception:
                    continue
                if np.linalg.norm(uv - features.pixels[qa]) <= cfg.reproj_px:
                    rmap.extend_track(pid, img_new, int(qa))
                continue
            oa = PixelObservation(img_new, *features.pixels[qa])
            ob = PixelObservation(img_id, *rmap.images[img_id].pixels[nb])
            try:
                X, err = triangulate_linear([oa, ob], cams)
            except Exception:
                continue
            if err > cfg.reproj_px:
                continue
            if triangulation_angle(c_new, c_nb, X) < cfg.min_tri_angle_rad:
                continue
            if pose.transform(X)[2] <= 0 or pose_nb.transform(X)[2] <= 0:
                continue
            new_ids.append(rmap.new_point(X, [(img_new, int(qa)), (img_id, int(nb))]))
    return new_ids


@dataclass
class IntegrationReport:
    image_id: int
    status: str  # "Localized" | "NotLocalized"
    pose: Pose | None = None
    inlier_count: int = 0
    new_point_count: int = 0
    timings_ms: dict[str, float] = field(default_factory=dict)

    def to_dict(self):
        return {
            "image_id": self.image_id,
            "status": self.status,
            "pose": self.pose.to_dict() if self.pose else None,
            "inlier_count": self.inlier_count,
            "new_point_count": self.new_point_count,
            "timings_ms": {k: round(v, 3) for k, v in self.timings_ms.items()},
        }
