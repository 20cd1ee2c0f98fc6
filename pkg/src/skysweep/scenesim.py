"""Synthetic facade scenes, camera networks and feature observations.

The facade is a height field over the x-z plane: the wall lies at y=0
with relief boxes protruding toward +y, cameras sit at y>0 looking in
the -y direction. Feature points carry 16-dim unit signatures standing
in for descriptors; observations are projected, footprint-gated,
occlusion-tested and corrupted per a NoiseConfig. All generation is
seeded and bit-reproducible.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import InvalidConfig, SchemaMismatch
from .geometry import CameraIntrinsics, Pose, project_many, quat_to_matrix

SIG_DIM = 16
SCHEMA_VERSION = 1

# APS-C 16.1 MP geometry at 16 mm focal length
DEFAULT_INTRINSICS = CameraIntrinsics(
    f_px=3344.0, cx=2456.0, cy=1632.0, width=4912, height=3264, k1=0.0
)


@dataclass(frozen=True)
class ReliefBox:
    x0: float
    x1: float
    z0: float
    z1: float
    depth: float  # protrusion toward the cameras, meters
    detail_scale: float


@dataclass
class FacadeConfig:
    width: float = 12.0
    height: float = 4.0
    n_relief: int = 4
    relief_depth: tuple[float, float] = (0.1, 0.4)
    relief_size: tuple[float, float] = (0.8, 2.5)
    n_coarse: int = 1500
    n_fine: int = 1500
    coarse_detail: float = 0.05
    fine_detail: tuple[float, float] = (0.003, 0.008)

    def validate(self):
        if self.width <= 0 or self.height <= 0:
            raise InvalidConfig("facade extents must be positive")
        if self.n_coarse < 0 or self.n_fine < 0:
            raise InvalidConfig("negative point counts")
        if self.fine_detail[0] <= 0:
            raise InvalidConfig("detail_scale must be positive")


@dataclass
class FacadeModel:
    config: FacadeConfig
    seed: int
    boxes: list[ReliefBox]
    points: np.ndarray  # (N, 3)
    normals: np.ndarray  # (N, 3)
    detail_scale: np.ndarray  # (N,)
    signatures: np.ndarray  # (N, SIG_DIM) unit rows

    @property
    def width(self):
        return self.config.width

    @property
    def height(self):
        return self.config.height

    def height_field(self, x, z):
        """Facade surface depth y = h(x, z) (0 on the bare wall)."""
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        h = np.zeros(np.broadcast(x, z).shape)
        for b in self.boxes:
            inside = (x >= b.x0) & (x <= b.x1) & (z >= b.z0) & (z <= b.z1)
            h = np.where(inside, np.maximum(h, b.depth), h)
        return h

    def segment_clear(self, cam_center, pts, n_samples=None, eps=1e-9):
        """True where the camera->point segment stays outside the interior.

        Exact for the box height field: per box, intersects the
        parameter intervals where the segment is inside the box
        footprint and below its top face. `n_samples` accepted for
        signature compatibility with sampled validators; ignored.
        """
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        c = np.asarray(cam_center, dtype=float)
        d = pts - c
        n = len(pts)
        blocked = np.zeros(n, dtype=bool)

        def axis_interval(c0, d0, lo, hi):
            # t-interval where c0 + t*d0 in [lo, hi]
            with np.errstate(divide="ignore", invalid="ignore"):
                t0 = (lo - c0) / d0
                t1 = (hi - c0) / d0
            tmin = np.where(d0 >= 0, t0, t1)
            tmax = np.where(d0 >= 0, t1, t0)
            inside = (c0 >= lo) & (c0 <= hi)
            tmin = np.where(np.abs(d0) < 1e-15, np.where(inside, -np.inf, np.inf), tmin)
            tmax = np.where(np.abs(d0) < 1e-15, np.where(inside, np.inf, -np.inf), tmax)
            return tmin, tmax

        margin = 1e-6
        for b in self.boxes:
            lo = np.full(n, margin)
            hi = np.full(n, 1.0 - margin)
            for c0, d0, a0, a1 in (
                (c[0], d[:, 0], b.x0, b.x1),
                (c[2], d[:, 2], b.z0, b.z1),
            ):
                tmin, tmax = axis_interval(np.full(n, c0), d0, a0, a1)
                lo = np.maximum(lo, tmin)
                hi = np.minimum(hi, tmax)
            # below the top face: y(t) < depth - eps
            tmin, tmax = axis_interval(np.full(n, c[1]), d[:, 1], -np.inf, b.depth - eps)
            lo = np.maximum(lo, tmin)
            hi = np.minimum(hi, tmax)
            blocked |= lo < hi - 1e-12
        # wall interior y < 0 cannot be entered between endpoints with
        # both endpoints at y >= 0 (y is linear in t)
        return ~blocked

    def sample_surface(self, n, seed=0):
        """Sample ground-truth surface points with normals."""
        rng = np.random.default_rng(seed)
        pos, nrm, _ = _sample_facade_surface(self, rng, n)
        return pos, nrm


def _sample_facade_surface(model_or_cfg, rng, n, boxes=None, width=None, height=None):
    """Uniform-ish surface samples: bare wall plus box top faces."""
    if boxes is None:
        boxes = model_or_cfg.boxes
        width = model_or_cfg.width
        height = model_or_cfg.height
    pos = np.empty((n, 3))
    nrm = np.tile(np.array([0.0, 1.0, 0.0]), (n, 1))
    on_box = np.zeros(n, dtype=bool)
    x = rng.uniform(0.0, width, n)
    z = rng.uniform(0.0, height, n)
    y = np.zeros(n)
    for b in boxes:
        inside = (x >= b.x0) & (x <= b.x1) & (z >= b.z0) & (z <= b.z1)
        y = np.where(inside, b.depth, y)
        on_box |= inside
    pos[:, 0], pos[:, 1], pos[:, 2] = x, y, z
    return pos, nrm, on_box


def _random_signatures(rng, n):
    s = rng.normal(size=(n, SIG_DIM))
    s /= np.linalg.norm(s, axis=1, keepdims=True)
    return s


def generate_facade(config: FacadeConfig, seed: int) -> FacadeModel:
    """Deterministic synthetic facade with coarse and fine feature points."""
    config.validate()
    rng = np.random.default_rng(seed)
    boxes = []
    for _ in range(config.n_relief):
        w = rng.uniform(*config.relief_size)
        h = rng.uniform(*config.relief_size)
        x0 = rng.uniform(0.0, max(config.width - w, 1e-6))
        z0 = rng.uniform(0.0, max(config.height - h, 1e-6))
        depth = rng.uniform(*config.relief_depth)
        detail = rng.uniform(*config.fine_detail)
        boxes.append(
            ReliefBox(
                x0=x0,
                x1=min(x0 + w, config.width),
                z0=z0,
                z1=min(z0 + h, config.height),
                depth=depth,
                detail_scale=detail,
            )
        )
    model = FacadeModel(
        config=config,
        seed=seed,
        boxes=boxes,
        points=np.empty((0, 3)),
        normals=np.empty((0, 3)),
        detail_scale=np.empty(0),
        signatures=np.empty((0, SIG_DIM)),
    )
    pos_c, nrm_c, _ = _sample_facade_surface(model, rng, config.n_coarse)
    det_c = np.full(config.n_coarse, config.coarse_detail)
    pos_f, nrm_f, on_box = _sample_facade_surface(model, rng, config.n_fine)
    det_f = rng.uniform(*config.fine_detail, size=config.n_fine)
    model.points = np.vstack([pos_c, pos_f])
    model.normals = np.vstack([nrm_c, nrm_f])
    model.detail_scale = np.concatenate([det_c, det_f])
    model.signatures = _random_signatures(rng, len(model.points))
    return model


# ---------------------------------------------------------------------------
# camera network


@dataclass(frozen=True)
class RowPlan:
    distance_m: float
    height_m: float
    count: int
    yaw_jitter: float = 0.0
    pitch_jitter: float = 0.0


@dataclass
class CameraNetworkPlan:
    rows: list[RowPlan]
    mode: str = "multi-scale"  # or "uni-scale"
    margin: float = 0.5

    def validate(self):
        if not self.rows:
            raise InvalidConfig("plan needs at least one row")
        for r in self.rows:
            if r.distance_m <= 0:
                raise InvalidConfig("row distance must be positive")
            if r.count < 2:
                raise InvalidConfig("row needs at least 2 cameras")
        if self.mode not in ("multi-scale", "uni-scale"):
            raise InvalidConfig(f"unknown mode {self.mode!r}")


def generate_network(plan: CameraNetworkPlan, facade: FacadeModel, seed: int = 0):
    """Spatially ordered sweep of wall-facing poses.

    Returns (poses, row_index) where row_index labels each pose with
    its originating row. Multi-scale mode emits every row (far rows
    first so coarse structure is mapped before fine); uni-scale emits
    only the first row. Consecutive rows sweep in alternating x
    direction so the sequence stays spatially continuous.
    """
    plan.validate()
    rng = np.random.default_rng(seed)
    rows = plan.rows if plan.mode == "multi-scale" else plan.rows[:1]
    order = sorted(range(len(rows)), key=lambda i: -rows[i].distance_m)
    poses = []
    row_idx = []
    flip = False
    for oi in order:
        row = rows[oi]
        xs = np.linspace(plan.margin, facade.width - plan.margin, row.count)
        if flip:
            xs = xs[::-1]
        flip = not flip
        for x in xs:
            center = np.array([x, row.distance_m, row.height_m])
            target = np.array([x, 0.0, row.height_m])
            pose = Pose.look_at(center, target, up=(0.0, 0.0, 1.0))
            if row.yaw_jitter or row.pitch_jitter:
                from .geometry import quat_mul, rotvec_to_quat

                yaw = rng.normal(0.0, row.yaw_jitter) if row.yaw_jitter else 0.0
                pitch = rng.normal(0.0, row.pitch_jitter) if row.pitch_jitter else 0.0
                dq = rotvec_to_quat([pitch, yaw, 0.0])
                # rotate about the camera center, keeping it fixed
                q = quat_mul(dq, pose.q)
                pose = Pose(q=q, t=-quat_to_matrix(q) @ center)
            poses.append(pose)
            row_idx.append(oi)
    return poses, np.array(row_idx, dtype=int)


# ---------------------------------------------------------------------------
# observation synthesis


@dataclass
class NoiseConfig:
    sigma_px: float = 0.5
    outlier_rate: float = 0.1
    descriptor_noise: float = 0.05
    footprint_px: float = 1.0
    # systematic per-camera image-warp bias random-walking along the
    # sweep; magnitude in pixels at the image corner, scaled by
    # (d_ref / d_j)**drift_power so close rows drift hardest
    drift_px: float = 0.0
    drift_power: float = 1.0
    marker_sigma_px: float | None = None  # defaults to sigma_px

    def validate(self):
        if self.sigma_px < 0 or not (0 <= self.outlier_rate < 1) or self.descriptor_noise < 0:
            raise InvalidConfig("invalid noise config")


@dataclass
class ImageFeatures:
    """Pipeline-facing features of one image: pixels and signatures only."""

    image_id: int
    pixels: np.ndarray  # (n, 2)
    signatures: np.ndarray  # (n, SIG_DIM)


@dataclass
class SyntheticDataset:
    intrinsics: CameraIntrinsics
    poses: list[Pose]  # ground truth, hidden from the pipeline
    row_index: np.ndarray
    features: list[ImageFeatures]
    true_point_ids: list[np.ndarray]  # per image, -1 for outliers; hidden
    marker_obs: dict[int, list[tuple[int, float, float]]]  # image -> (id, u, v)
    gcps: list[tuple[int, np.ndarray, float]]  # (marker id, world pos, sigma_m)
    facade: FacadeModel | None = None

    def pipeline_view(self):
        """Features only, with no ground-truth poses or point identities."""
        return [ImageFeatures(f.image_id, f.pixels.copy(), f.signatures.copy()) for f in self.features]

    @property
    def n_images(self):
        return len(self.features)


def _drift_biases(rng, n_cams, distances, cfg: NoiseConfig):
    """Per-camera low-order warp coefficients, random-walking over the sweep."""
    coeffs = np.zeros((n_cams, 3))  # (bias_x, bias_y, radial) at corner, px
    if cfg.drift_px <= 0:
        return coeffs
    d_ref = float(np.min(distances))
    step = cfg.drift_px / np.sqrt(max(n_cams, 1))
    walk = np.cumsum(rng.normal(0.0, step, size=(n_cams, 3)), axis=0)
    scale = (d_ref / np.asarray(distances)) ** cfg.drift_power
    return walk * scale[:, None]


def _apply_warp(px, coeffs, intr: CameraIntrinsics):
    """Quadratic image-space warp; not absorbable by a pose change."""
    du = px[:, 0] - intr.cx
    dv = px[:, 1] - intr.cy
    r0sq = intr.cx**2 + intr.cy**2
    r2 = (du * du + dv * dv) / r0sq
    out = px.copy()
    out[:, 0] += coeffs[0] * r2 + coeffs[2] * r2 * du / np.sqrt(r0sq)
    out[:, 1] += coeffs[1] * r2 + coeffs[2] * r2 * dv / np.sqrt(r0sq)
    return out


def synthesize_observations(
    facade: FacadeModel,
    poses: list[Pose],
    noise: NoiseConfig,
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
    seed: int = 0,
    row_index=None,
    gcps=None,
    max_features: int = 5000,
) -> SyntheticDataset:
    """Project facade points into every pose and corrupt per config.

    Emission requires: positive depth, in-image, front-facing, on-image
    footprint f_px*detail_scale/d above the threshold, and an unoccluded
    camera->point segment. Outliers are uniform pixels with random
    signatures, labeled -1 in the hidden truth.
    """
    noise.validate()
    rng = np.random.default_rng(seed)
    if row_index is None:
        row_index = np.zeros(len(poses), dtype=int)
    distances = np.array([abs(p.center[1]) for p in poses])
    drift = _drift_biases(rng, len(poses), distances, noise)

    features = []
    true_ids = []
    for img_id, pose in enumerate(poses):
        px, z = project_many(intrinsics, pose, facade.points)
        cam = pose.center
        view_dir = facade.points - cam
        dist = np.linalg.norm(view_dir, axis=1)
        facing = np.einsum("ij,ij->i", view_dir, facade.normals) < 0
        footprint = intrinsics.f_px * facade.detail_scale / np.maximum(dist, 1e-9)
        keep = (
            (z > 0.1)
            & (px[:, 0] >= 0)
            & (px[:, 0] < intrinsics.width)
            & (px[:, 1] >= 0)
            & (px[:, 1] < intrinsics.height)
            & facing
            & (footprint >= noise.footprint_px)
        )
        idx = np.flatnonzero(keep)
        if len(idx):
            idx = idx[facade.segment_clear(cam, facade.points[idx])]
        if len(idx) > max_features:
            idx = rng.choice(idx, size=max_features, replace=False)
            idx.sort()
        pix = px[idx].copy()
        if noise.drift_px > 0:
            pix = _apply_warp(pix, drift[img_id], intrinsics)
        if noise.sigma_px > 0:
            pix += rng.normal(0.0, noise.sigma_px, pix.shape)
        sig = facade.signatures[idx].copy()
        if noise.descriptor_noise > 0:
            sig += rng.normal(0.0, noise.descriptor_noise, sig.shape)
            sig /= np.linalg.norm(sig, axis=1, keepdims=True)
        pid = idx.astype(np.int64)
        if noise.outlier_rate > 0 and len(idx):
            out_mask = rng.random(len(idx)) < noise.outlier_rate
            n_out = int(out_mask.sum())
            if n_out:
                pix[out_mask, 0] = rng.uniform(0, intrinsics.width, n_out)
                pix[out_mask, 1] = rng.uniform(0, intrinsics.height, n_out)
                sig[out_mask] = _random_signatures(rng, n_out)
                pid[out_mask] = -1
        # clamp noise-pushed pixels back inside the image
        pix[:, 0] = np.clip(pix[:, 0], 0.0, intrinsics.width - 1e-6)
        pix[:, 1] = np.clip(pix[:, 1], 0.0, intrinsics.height - 1e-6)
        features.append(ImageFeatures(img_id, pix, sig))
        true_ids.append(pid)

    marker_sigma = noise.marker_sigma_px if noise.marker_sigma_px is not None else noise.sigma_px
    marker_obs: dict[int, list[tuple[int, float, float]]] = {}
    gcps = list(gcps) if gcps else []
    if gcps:
        gcp_pts = np.array([g[1] for g in gcps])
        for img_id, pose in enumerate(poses):
            px, z = project_many(intrinsics, pose, gcp_pts)
            obs = []
            for k, (mid, _, _) in enumerate(gcps):
                if z[k] <= 0.1:
                    continue
                u, v = px[k]
                if not (0 <= u < intrinsics.width and 0 <= v < intrinsics.height):
                    continue
                if noise.drift_px > 0:
                    u, v = _apply_warp(np.array([[u, v]]), drift[img_id], intrinsics)[0]
                if marker_sigma > 0:
                    u += rng.normal(0.0, marker_sigma)
                    v += rng.normal(0.0, marker_sigma)
                obs.append((mid, float(u), float(v)))
            if obs:
                marker_obs[img_id] = obs

    return SyntheticDataset(
        intrinsics=intrinsics,
        poses=list(poses),
        row_index=np.asarray(row_index, dtype=int),
        features=features,
        true_point_ids=true_ids,
        marker_obs=marker_obs,
        gcps=gcps,
        facade=facade,
    )


def default_gcps(facade: FacadeModel, n: int = 17, seed: int = 100, sigma_m: float = 0.001):
    """GCP markers spread over the facade wall."""
    rng = np.random.default_rng(seed)
    gcps = []
    for i in range(n):
        x = rng.uniform(0.3, facade.width - 0.3)
        z = rng.uniform(0.2, facade.height - 0.2)
        y = float(facade.height_field(x, z))
        gcps.append((i + 1, np.array([x, y + 1e-4, z]), sigma_m))
    return gcps


# ---------------------------------------------------------------------------
# scene-level convenience


@dataclass
class SceneConfig:
    facade: FacadeConfig = field(default_factory=FacadeConfig)
    plan: CameraNetworkPlan = field(
        default_factory=lambda: CameraNetworkPlan(
            rows=[RowPlan(4.0, 2.0, 24), RowPlan(6.0, 2.0, 20), RowPlan(10.0, 2.0, 16)]
        )
    )
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    n_gcps: int = 17
    seed: int = 0
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS

    def to_dict(self):
        return {
            "schema": SCHEMA_VERSION,
            "facade": asdict(self.facade),
            "plan": {
                "rows": [asdict(r) for r in self.plan.rows],
                "mode": self.plan.mode,
                "margin": self.plan.margin,
            },
            "noise": asdict(self.noise),
            "n_gcps": self.n_gcps,
            "seed": self.seed,
            "intrinsics": self.intrinsics.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != SCHEMA_VERSION:
            raise SchemaMismatch(f"scene schema {d.get('schema')!r} != {SCHEMA_VERSION}")
        fac = FacadeConfig(**{**d["facade"], "relief_depth": tuple(d["facade"]["relief_depth"]),
                              "relief_size": tuple(d["facade"]["relief_size"]),
                              "fine_detail": tuple(d["facade"]["fine_detail"])})
        plan = CameraNetworkPlan(
            rows=[RowPlan(**r) for r in d["plan"]["rows"]],
            mode=d["plan"]["mode"],
            margin=d["plan"]["margin"],
        )
        return cls(
            facade=fac,
            plan=plan,
            noise=NoiseConfig(**d["noise"]),
            n_gcps=d["n_gcps"],
            seed=d["seed"],
            intrinsics=CameraIntrinsics.from_dict(d["intrinsics"]),
        )


def build_scene(config: SceneConfig) -> SyntheticDataset:
    facade = generate_facade(config.facade, config.seed)
    poses, rows = generate_network(config.plan, facade, seed=config.seed + 1)
    gcps = default_gcps(facade, n=config.n_gcps, seed=config.seed + 2)
    return synthesize_observations(
        facade,
        poses,
        config.noise,
        intrinsics=config.intrinsics,
        seed=config.seed + 3,
        row_index=rows,
        gcps=gcps,
    )


# ---------------------------------------------------------------------------
# dataset export / import


def export_dataset(dataset: SyntheticDataset, path) -> None:
    """Write the documented on-disk layout (lossless round trip)."""
    root = Path(path)
    (root / "obs").mkdir(parents=True, exist_ok=True)
    (root / "truth").mkdir(parents=True, exist_ok=True)

    meta = {
        "schema": SCHEMA_VERSION,
        "n_images": dataset.n_images,
        "row_index": dataset.row_index.tolist(),
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=1))

    with open(root / "cameras.jsonl", "w") as fh:
        for img_id, pose in enumerate(dataset.poses):
            rec = {"image_id": img_id, "pose": pose.to_dict(), "intrinsics": dataset.intrinsics.to_dict()}
            fh.write(json.dumps(rec) + "\n")

    for f in dataset.features:
        with open(root / "obs" / f"{f.image_id}.bin", "wb") as fh:
            for (u, v), sig in zip(f.pixels, f.signatures):
                fh.write(struct.pack("<dd", float(u), float(v)))
                fh.write(struct.pack(f"<{SIG_DIM}f", *np.asarray(sig, dtype=np.float32)))

    for img_id, pid in enumerate(dataset.true_point_ids):
        pid.astype("<i8").tofile(root / "truth" / f"{img_id}.bin")

    with open(root / "gcp.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x", "y", "z", "sigma_m"])
        for mid, pos, sigma in dataset.gcps:
            w.writerow([mid, repr(float(pos[0])), repr(float(pos[1])), repr(float(pos[2])), repr(float(sigma))])

    with open(root / "markers.jsonl", "w") as fh:
        for img_id in sorted(dataset.marker_obs):
            fh.write(json.dumps({"image_id": img_id, "detections": dataset.marker_obs[img_id]}) + "\n")

    if dataset.facade is not None:
        pts, nrm = dataset.facade.sample_surface(20000, seed=dataset.facade.seed + 9)
        write_ply_points(root / "gt_surface.ply", pts, normals=nrm)


def import_dataset(path) -> SyntheticDataset:
    root = Path(path)
    try:
        meta = json.loads((root / "meta.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaMismatch(f"unreadable meta.json: {exc}") from exc
    if meta.get("schema") != SCHEMA_VERSION:
        raise SchemaMismatch(f"dataset schema {meta.get('schema')!r}")
    n_images = meta["n_images"]

    poses = []
    intr = None
    try:
        with open(root / "cameras.jsonl") as fh:
            for line in fh:
                rec = json.loads(line)
                poses.append(Pose.from_dict(rec["pose"]))
                intr = CameraIntrinsics.from_dict(rec["intrinsics"])
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise SchemaMismatch(f"bad cameras.jsonl: {exc}") from exc
    if len(poses) != n_images or intr is None:
        raise SchemaMismatch("camera count mismatch")

    rec_size = 16 + 4 * SIG_DIM
    features = []
    true_ids = []
    for img_id in range(n_images):
        try:
            raw = (root / "obs" / f"{img_id}.bin").read_bytes()
        except OSError as exc:
            raise SchemaMismatch(f"missing obs for image {img_id}") from exc
        if len(raw) % rec_size:
            raise SchemaMismatch(f"truncated obs file for image {img_id}")
        n = len(raw) // rec_size
        pix = np.empty((n, 2))
        sig = np.empty((n, SIG_DIM), dtype=np.float64)
        for i in range(n):
            off = i * rec_size
            pix[i] = struct.unpack_from("<dd", raw, off)
            sig[i] = np.frombuffer(raw, dtype="<f4", count=SIG_DIM, offset=off + 16)
        features.append(ImageFeatures(img_id, pix, sig))
        pid = np.fromfile(root / "truth" / f"{img_id}.bin", dtype="<i8")
        if len(pid) != n:
            raise SchemaMismatch(f"truth length mismatch for image {img_id}")
        true_ids.append(pid)

    gcps = []
    with open(root / "gcp.csv") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["id", "x", "y", "z", "sigma_m"]:
            raise SchemaMismatch("bad gcp.csv header")
        for row in reader:
            gcps.append((int(row[0]), np.array([float(row[1]), float(row[2]), float(row[3])]), float(row[4])))

    marker_obs = {}
    mpath = root / "markers.jsonl"
    if mpath.exists():
        with open(mpath) as fh:
            for line in fh:
                rec = json.loads(line)
                marker_obs[rec["image_id"]] = [tuple(d) for d in rec["detections"]]

    return SyntheticDataset(
        intrinsics=intr,
        poses=poses,
        row_index=np.array(meta["row_index"], dtype=int),
        features=features,
        true_point_ids=true_ids,
        marker_obs=marker_obs,
        gcps=gcps,
        facade=None,
    )


def write_ply_points(path, points, normals=None):
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        if normals is not None:
            fh.write("property float nx\nproperty float ny\nproperty float nz\n")
        fh.write("end_header\n")
        if normals is None:
            for p in points:
                fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")
        else:
            for p, n in zip(points, np.asarray(normals, dtype=float)):
                fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {n[0]:.4f} {n[1]:.4f} {n[2]:.4f}\n")


def read_ply_points(path):
    """Read vertex positions from an ASCII PLY file."""
    with open(path) as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise SchemaMismatch("not a PLY file")
        n_vertex = 0
        props = 0
        while True:
            line = fh.readline()
            if not line:
                raise SchemaMismatch("truncated PLY header")
            line = line.strip()
            if line.startswith("element vertex"):
                n_vertex = int(line.split()[-1])
                in_vertex = True
            elif line.startswith("element"):
                in_vertex = False
            elif line.startswith("property") and n_vertex and "list" not in line:
                props += 1
            if line == "end_header":
                break
        pts = np.empty((n_vertex, 3))
        for i in range(n_vertex):
            vals = fh.readline().split()
            pts[i] = [float(vals[0]), float(vals[1]), float(vals[2])]
    return pts
