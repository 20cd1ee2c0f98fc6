"""Closed-loop incremental reconstruction session.

Orchestrates per-image integration: retrieval-based localization,
structure expansion, local bundle adjustment every image, global
bundle adjustment on a fixed cadence, and the incremental surface /
quality updates that drive the operator feedback loop.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .bundle import BundleConfig, build_problem, solve
from .errors import BootstrapFailed, InvalidConfig
from .geometry import CameraIntrinsics, Pose
from .quality import QualityOverlay, face_quality
from .scenesim import ImageFeatures
from .sfm import (
    IntegrationReport,
    ReconstructionMap,
    SfmConfig,
    bootstrap,
    expand_map,
    localize,
)
from .surfex import SurfaceExtractor, SurfaceMesh
from .vocab import build_vocabulary


@dataclass
class PipelineConfig:
    sfm: SfmConfig = field(default_factory=SfmConfig)
    ba: BundleConfig = field(default_factory=lambda: BundleConfig(max_iters=15))
    local_ba_iters: int = 8
    local_ba_shared: int = 20  # points shared to join the local window
    global_ba_every: int = 10  # images between global adjustments
    vocab_k: int = 6
    vocab_depth: int = 3
    vocab_seed: int = 0
    extension_factor: float = 3.0
    padding_factor: float | None = 3.0
    max_rays_per_point: int = 4
    surface_updates: bool = True


class Session:
    """One exclusive-ownership reconstruction session.

    All mutation happens through bootstrap() and integrate_image();
    reads (mesh, overlay, hashes) are snapshots of consistent state.
    """

    def __init__(self, intrinsics: CameraIntrinsics, config: PipelineConfig | None = None):
        self.config = config or PipelineConfig()
        self.rmap = ReconstructionMap(intrinsics)
        self.tree = None
        self.extractor = SurfaceExtractor(
            extension_factor=self.config.extension_factor,
            padding_factor=self.config.padding_factor,
        )
        self.point_vertex: dict[int, int] = {}  # map point id -> mesh vertex id
        self.ray_count: dict[int, int] = {}  # point id -> registered rays
        self.reports: list[IntegrationReport] = []
        self.revision = 0
        self._mesh_cache: tuple[int, SurfaceMesh] | None = None
        self._overlay_cache: dict[tuple[int, bool], QualityOverlay] = {}
        self._images_since_global_ba = 0

    # -- construction -------------------------------------------------------
    def bootstrap(self, feat_a: ImageFeatures, feat_b: ImageFeatures) -> None:
        if self.tree is not None:
            raise InvalidConfig("session already bootstrapped")
        self.rmap = bootstrap(feat_a, feat_b, self.rmap.intrinsics, self.config.sfm)
        # the vocabulary is trained on the session's own first images
        corpus = np.vstack([feat_a.signatures, feat_b.signatures])
        self.tree = build_vocabulary(
            corpus, k=self.config.vocab_k, depth=self.config.vocab_depth, seed=self.config.vocab_seed
        )
        self.tree.add_image(feat_a.image_id, feat_a.signatures)
        self.tree.add_image(feat_b.image_id, feat_b.signatures)
        self._sync_surface(sorted(self.rmap.points))
        self.revision += 1

    @property
    def bootstrapped(self) -> bool:
        return self.tree is not None

    # -- integration --------------------------------------------------------
    def integrate_image(self, features: ImageFeatures) -> IntegrationReport:
        if self.tree is None:
            raise InvalidConfig("session not bootstrapped")
        t_start = time.perf_counter()
        timings: dict[str, float] = {}

        t0 = time.perf_counter()
        loc = localize(self.rmap, self.tree, features, self.config.sfm)
        timings["localize"] = (time.perf_counter() - t0) * 1000.0
        if loc is None:
            timings["total"] = (time.perf_counter() - t_start) * 1000.0
            report = IntegrationReport(image_id=features.image_id, status="NotLocalized", timings_ms=timings)
            self.reports.append(report)
            return report
        pose, n_inliers, pair_matches = loc

        t0 = time.perf_counter()
        new_pids = expand_map(self.rmap, features, pose, pair_matches, self.config.sfm)
        timings["expand"] = (time.perf_counter() - t0) * 1000.0

        t0 = time.perf_counter()
        self._local_ba(features.image_id)
        self._images_since_global_ba += 1
        if self._images_since_global_ba >= self.config.global_ba_every:
            self._global_ba()
            self._images_since_global_ba = 0
        timings["bundle"] = (time.perf_counter() - t0) * 1000.0

        t0 = time.perf_counter()
        if self.config.surface_updates:
            self._sync_surface(new_pids, observer=features.image_id)
        timings["surface"] = (time.perf_counter() - t0) * 1000.0

        self.tree.add_image(features.image_id, features.signatures)
        self.revision += 1
        timings["total"] = (time.perf_counter() - t_start) * 1000.0
        report = IntegrationReport(
            image_id=features.image_id,
            status="Localized",
            pose=self.rmap.cameras[features.image_id],
            inlier_count=n_inliers,
            new_point_count=len(new_pids),
            timings_ms=timings,
        )
        self.reports.append(report)
        return report

    # -- bundle adjustment --------------------------------------------------
    def _shared_counts(self, image_id: int) -> dict[int, int]:
        counts: dict[int, int] = {}
        fp = self.rmap.feat_point[image_id]
        for pid in fp[fp >= 0]:
            for img, _fi in self.rmap.points[int(pid)].track:
                if img != image_id:
                    counts[img] = counts.get(img, 0) + 1
        return counts

    def _local_ba(self, image_id: int) -> None:
        """Refine the freshly localized camera and its points against
        fixed anchor cameras sharing enough observations."""
        anchors = [
            img
            for img, n in self._shared_counts(image_id).items()
            if n >= self.config.local_ba_shared
        ]
        if not anchors:
            return
        window = set(anchors) | {image_id}
        sub = ReconstructionMap(self.rmap.intrinsics)
        for img in window:
            sub.cameras[img] = self.rmap.cameras[img]
            sub.images[img] = self.rmap.images[img]
            sub.feat_point[img] = np.full_like(self.rmap.feat_point[img], -1)
        for pid, pt in self.rmap.points.items():
            track = [(img, fi) for img, fi in pt.track if img in window]
            if len(track) >= 2 and any(img == image_id for img, _ in track):
                sub.points[pid] = replace(pt, track=track)
                for img, fi in track:
                    sub.feat_point[img][fi] = pid
        if not sub.points:
            return
        cfg = replace(
            self.config.ba,
            max_iters=self.config.local_ba_iters,
            fixed_cameras=tuple(anchors),
        )
        problem = build_problem(sub, cfg)
        solve(problem)
        self.rmap.cameras[image_id] = Pose(
            q=problem.q[problem.cam_ids.index(image_id)].copy(),
            t=problem.t[problem.cam_ids.index(image_id)].copy(),
        )
        for i, pid in enumerate(problem.pids):
            self.rmap.points[pid].position = problem.X[i].copy()

    def _global_ba(self) -> None:
        if self.rmap.n_points == 0:
            return
        problem = build_problem(self.rmap, self.config.ba)
        solve(problem)
        problem.write_back()

    # -- surface ------------------------------------------------------------
    def _sync_surface(self, new_pids: list[int], observer: int | None = None) -> None:
        fresh = [pid for pid in new_pids if pid in self.rmap.points and pid not in self.point_vertex]
        if fresh:
            positions = np.array([self.rmap.points[p].position for p in fresh])
            ch = self.extractor.insert_points(positions)
            for pid, vid in zip(fresh, ch.point_ids):
                self.point_vertex[pid] = int(vid)
        # visibility rays: up to the configured cap per point
        for pid in fresh:
            vid = self.point_vertex[pid]
            n = 0
            for img, _fi in self.rmap.points[pid].track:
                if n >= self.config.max_rays_per_point:
                    break
                self.extractor.register_ray(self.rmap.cameras[img].center, vid)
                n += 1
            self.ray_count[pid] = n
        # re-observed points gain one more ray from the new viewpoint;
        # occupancy evidence keeps accumulating as coverage grows
        if observer is not None:
            fresh_set = set(fresh)
            fp = self.rmap.feat_point[observer]
            center = self.rmap.cameras[observer].center
            for pid in np.unique(fp[fp >= 0]):
                pid = int(pid)
                if pid in fresh_set or pid not in self.point_vertex:
                    continue
                if self.ray_count.get(pid, 0) >= self.config.max_rays_per_point:
                    continue
                self.extractor.register_ray(center, self.point_vertex[pid])
                self.ray_count[pid] = self.ray_count.get(pid, 0) + 1
        self.extractor.solve_labels()

    def mesh(self) -> SurfaceMesh:
        if self._mesh_cache is None or self._mesh_cache[0] != self.revision:
            self.extractor.solve_labels()
            self._mesh_cache = (self.revision, self.extractor.extract_surface())
            self._overlay_cache.clear()
        return self._mesh_cache[1]

    def overlay(self, occlusion: bool = False) -> QualityOverlay:
        key = (self.revision, occlusion)
        if key not in self._overlay_cache:
            m = self.mesh()
            cams = [(self.rmap.intrinsics, p) for _img, p in sorted(self.rmap.cameras.items())]
            self._overlay_cache[key] = face_quality(m.vertices, m.faces, cams, occlusion=occlusion)
        return self._overlay_cache[key]

    # -- snapshots ----------------------------------------------------------
    def map_hash(self) -> str:
        return self.rmap.content_hash()

    def points_array(self) -> np.ndarray:
        pids = sorted(self.rmap.points)
        if not pids:
            return np.zeros((0, 3))
        return np.array([self.rmap.points[p].position for p in pids])


def run_sequence(
    intrinsics: CameraIntrinsics,
    features: list[ImageFeatures],
    config: PipelineConfig | None = None,
) -> Session:
    """Bootstrap from the first two images, then integrate the rest."""
    if len(features) < 2:
        raise BootstrapFailed("a session needs at least two images")
    session = Session(intrinsics, config)
    session.bootstrap(features[0], features[1])
    for feat in features[2:]:
        session.integrate_image(feat)
    return session
