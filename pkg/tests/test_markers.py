from pathlib import Path

import numpy as np
import pytest

from skysweep import markers as mk
from skysweep.errors import (
    DecodeFailed,
    DegenerateGeometry,
    InsufficientGCPs,
    InsufficientViews,
    InvalidConfig,
    NoConsensus,
    TableInfeasible,
    UnknownId,
)
from skysweep.geometry import CameraIntrinsics, Pose, Sim3, project_many, rotvec_to_quat
from skysweep.sfm import ReconstructionMap

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="module")
def spec():
    return mk.default_spec()


def patch_of_word(spec, word, angle=0.0):
    """Ideal canonical patch showing an arbitrary codeword, optionally
    rotated by an arbitrary angle."""
    size, radius = mk._PATCH, mk._PATCH_R
    c = (size - 1) / 2.0
    xs = (np.arange(size) - c) / radius
    X, Y = np.meshgrid(xs, xs)
    if angle:
        ca, sa = np.cos(angle), np.sin(angle)
        X, Y = ca * X + sa * Y, -sa * X + ca * Y
    img = mk._ideal_intensity(spec, word, X, Y)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def rotation_homography(size, angle):
    """Pixel-space rotation about the canvas center."""
    c = (size - 1) / 2.0
    ca, sa = np.cos(angle), np.sin(angle)
    return np.array(
        [[ca, -sa, c - ca * c + sa * c], [sa, ca, c - sa * c - ca * c], [0.0, 0.0, 1.0]]
    )


class TestIdTable:
    def test_single_id(self):
        table = mk.build_id_table(1)
        assert len(table) == 1
        mk.MarkerSpec(id_table=table)  # invariants hold

    def test_64_ids_pairwise_margin(self, spec):
        words = list(spec.id_table.values())
        assert len(words) == 64
        assert len(set(words)) == 64
        for w in words:
            assert w == mk.canonical_code(w, 16)
        for i, a in enumerate(words):
            for b in words[i + 1 :]:
                assert mk.rotational_hamming(a, b, 16) >= 4

    def test_id_20_round_trips(self, spec):
        assert 20 in spec.id_table
        patch = patch_of_word(spec, spec.id_table[20])
        decoded, _, _, _ = mk.decode_marker(patch, spec)
        assert decoded == 20

    def test_infeasible_table(self):
        with pytest.raises(TableInfeasible):
            mk.build_id_table(5000)

    def test_spec_invariants_enforced(self):
        with pytest.raises(InvalidConfig):
            mk.MarkerSpec(id_table={0: 0b11, 1: 0b110})  # margin violated
        with pytest.raises(InvalidConfig):
            mk.MarkerSpec(id_table={0: 0b1000})  # not canonical


class TestRender:
    def test_identity_render_matches_golden(self, spec):
        img = mk.render_marker(spec, 20, size=256)
        golden = mk.read_pgm(DATA / "marker20_golden.pgm")
        assert np.array_equal(img, golden)

    def test_pgm_roundtrip(self, spec, tmp_path):
        img = mk.render_marker(spec, 7, size=128)
        mk.write_pgm(tmp_path / "m.pgm", img)
        assert np.array_equal(mk.read_pgm(tmp_path / "m.pgm"), img)

    def test_tilt_45_axis_ratio(self, spec):
        # squash one axis by cos(45 deg) about the canvas center, as a
        # 45 deg out-of-plane tilt does in the affine limit
        size = 384
        c = (size - 1) / 2.0
        k = np.cos(np.pi / 4)
        H = np.array([[k, 0, c * (1 - k)], [0, 1, 0], [0, 0, 1.0]])
        img = mk.render_marker(spec, 5, size=size, homography=H)
        dets = mk.detect_markers(img, spec)
        assert len(dets) == 1
        a, b = dets[0].axes
        assert abs(b / a - k) < 0.02 * k

    def test_unknown_id(self, spec):
        with pytest.raises(UnknownId):
            mk.render_marker(spec, 999)


class TestDecode:
    def test_all_ids_all_sector_rotations(self, spec):
        for mid, word in spec.id_table.items():
            for k in range(16):
                patch = patch_of_word(spec, mk._rotate_bits(word, k, 16))
                decoded, _, p_code, _ = mk.decode_marker(patch, spec)
                assert decoded == mid
                assert p_code > 0.9

    def test_arbitrary_rotation(self, spec):
        for angle in [0.3, 1.234, 2.8, 4.4, 5.9]:
            patch = patch_of_word(spec, spec.id_table[20], angle=angle)
            decoded, _, _, _ = mk.decode_marker(patch, spec)
            assert decoded == 20

    def test_two_flipped_sectors_fail(self, spec):
        word = spec.id_table[20]
        corrupted = word ^ 0b101  # flip two sectors
        assert mk.rotational_hamming(corrupted, word, 16) == 2
        patch = patch_of_word(spec, corrupted)
        with pytest.raises(DecodeFailed):
            mk.decode_marker(patch, spec)

    def test_blank_patch_fails(self, spec):
        with pytest.raises(DecodeFailed):
            mk.decode_marker(np.full((mk._PATCH, mk._PATCH), 255, np.uint8), spec)

    def test_hamming_tolerance_is_exactly_one(self, spec):
        """Exhaustive unique-decodability: every 16-bit word within
        rotational distance 1 of a codeword matches exactly that one;
        words at distance >= 2 from all codewords match none."""
        words = np.arange(1 << 16, dtype=np.uint32)
        popcount = np.unpackbits(
            np.arange(1 << 16, dtype=np.uint16).view(np.uint8).reshape(-1, 2), axis=1
        ).sum(axis=1)
        rotations = np.array(
            [
                [mk._rotate_bits(cw, k, 16) for k in range(16)]
                for cw in spec.id_table.values()
            ],
            dtype=np.uint32,
        )  # (64, 16)
        # per word: min distance to each codeword over its rotations
        dmin = np.full((len(words), len(rotations)), 16, dtype=np.uint8)
        for j, rots in enumerate(rotations):
            d = popcount[(words[:, None] ^ rots[None, :]).astype(np.uint16)]
            dmin[:, j] = d.min(axis=1)
        n_matches = (dmin <= 1).sum(axis=1)
        assert n_matches.max() <= 1  # tolerance-1 balls are disjoint


class TestDetect:
    def test_clean_render_single_subpixel_detection(self, spec):
        img = mk.render_marker(spec, 33, size=256)
        dets = mk.detect_markers(img, spec)
        assert len(dets) == 1
        assert dets[0].marker_id == 33
        assert np.linalg.norm(dets[0].center - mk.marker_center(256)) < 0.5
        assert dets[0].confidence > 0.9

    def test_blank_image_empty(self, spec):
        assert mk.detect_markers(np.full((200, 200), 255, np.uint8), spec) == []
        assert mk.detect_markers(np.zeros((200, 200), np.uint8), spec) == []

    def test_corpus_scale_rotation_noise(self, spec):
        rng = np.random.default_rng(11)
        ok = 0
        for trial in range(40):
            mid = int(rng.integers(64))
            scale = float(rng.uniform(0.3, 3.0))
            angle = float(rng.uniform(0, 2 * np.pi))
            size = max(48, int(round(200 * scale)))
            H = rotation_homography(size, angle)
            img = mk.render_marker(
                spec, mid, size=size, homography=H, noise_sigma=5 / 255, seed=trial
            )
            dets = mk.detect_markers(img, spec)
            ids = [d.marker_id for d in dets]
            assert all(i == mid for i in ids), f"wrong id in trial {trial}"
            ok += ids == [mid]
        assert ok >= 39


def planar_views(f_true=3344.0, width=4000, height=3000, seed=3, tilts=None):
    """Synthetic detections of a planar 4x4 marker field."""
    intr = CameraIntrinsics(f_px=f_true, cx=width / 2, cy=height / 2, width=width, height=height)
    rng = np.random.default_rng(seed)
    plane = np.stack(np.meshgrid(np.linspace(0, 1.8, 4), np.linspace(0, 1.8, 4)), -1).reshape(-1, 2)
    plane = plane + rng.uniform(-0.15, 0.15, plane.shape)
    pts3 = np.column_stack([plane, np.zeros(len(plane))])
    if tilts is None:
        tilts = [(3.0, 25), (3.0, -20), (5.0, 30), (6.5, -25), (4.0, 15)]
    views = []
    for standoff, tilt in tilts:
        t = np.deg2rad(tilt)
        center = np.array([0.9 + 2.0 * np.sin(t), 0.9, standoff])
        pose = Pose.look_at(center, np.array([0.9, 0.9, 0.0]), up=(0, 1, 0))
        px, z = project_many(intr, pose, pts3)
        assert np.all(z > 0)
        views.append((plane, px))
    return views


class TestCalibrateFocal:
    def test_recovers_f_mixed_standoffs(self):
        views = planar_views()
        intr, report = mk.calibrate_focal(views, 4000, 3000)
        assert abs(intr.f_px - 3344.0) / 3344.0 < 0.01
        # returned f attains the exhaustive grid minimum
        errs = np.array(report["errors"])
        assert report["grid_argmin"] == int(np.argmin(errs))
        lo = report["f_grid"][max(0, report["grid_argmin"] - 1)]
        hi = report["f_grid"][min(len(errs) - 1, report["grid_argmin"] + 1)]
        assert lo <= intr.f_px <= hi

    def test_two_views_insufficient(self):
        views = planar_views()[:2]
        with pytest.raises(InsufficientViews):
            mk.calibrate_focal(views, 4000, 3000)

    def test_fronto_parallel_degenerate(self):
        views = planar_views(tilts=[(3.0, 0), (4.0, 0), (5.0, 0)])
        with pytest.raises(DegenerateGeometry):
            mk.calibrate_focal(views, 4000, 3000)


def gcp_scene(seed=0, sigma_px=0.0, f_px=1000.0, n_gcps=17):
    """Cameras ringing a wall of GCP markers, with projected centers."""
    rng = np.random.default_rng(seed)
    intr = CameraIntrinsics(f_px=f_px, cx=320, cy=240, width=640, height=480)
    gcp_pts = np.column_stack(
        [rng.uniform(0.5, 4.5, n_gcps), rng.uniform(-0.05, 0.05, n_gcps), rng.uniform(0.5, 2.5, n_gcps)]
    )
    poses = [
        Pose.look_at(np.array([1.0 + k * 0.6, 6.0, 1.5]), np.array([2.5, 0.0, 1.5]))
        for k in range(6)
    ]
    marker_obs = {}
    for k, pose in enumerate(poses):
        px, z = project_many(intr, pose, gcp_pts)
        obs = []
        for i, (u, v) in enumerate(px):
            if z[i] > 0 and 0 <= u < 640 and 0 <= v < 480:
                if sigma_px > 0:
                    u += rng.normal(0, sigma_px)
                    v += rng.normal(0, sigma_px)
                obs.append((i + 1, float(u), float(v)))
        marker_obs[k] = obs
    rmap = ReconstructionMap(intr)
    for k, pose in enumerate(poses):
        rmap.cameras[k] = pose
    return rmap, marker_obs, gcp_pts


class TestGeoregister:
    def test_noiseless_17_gcps(self):
        rmap, marker_obs, gcp_pts = gcp_scene()
        sim_true = Sim3(scale=2.5, q=rotvec_to_quat(np.array([0.2, -0.1, 0.4])), t=np.array([3.0, -1.0, 0.5]))
        gcps = [mk.GroundControlPoint(i + 1, sim_true.apply(gcp_pts[i]), 0.001) for i in range(17)]
        res = mk.georegister(rmap, marker_obs, gcps)
        assert len(res.residuals) == 17
        assert max(res.residuals.values()) < 1e-9
        assert abs(res.transform.scale - 2.5) < 1e-9
        # the map itself was transformed: retriangulation lands on the GCPs
        new_pts = mk.triangulate_markers(rmap, marker_obs)
        for i in range(17):
            assert np.linalg.norm(new_pts[i + 1] - sim_true.apply(gcp_pts[i])) < 1e-6

    def test_residuals_invariant_to_local_gauge(self):
        pre = Sim3(scale=0.4, q=rotvec_to_quat(np.array([-0.3, 0.25, 0.1])), t=np.array([-2.0, 1.0, 3.0]))
        results = []
        for apply_pre in (False, True):
            rmap, marker_obs, gcp_pts = gcp_scene(seed=2, sigma_px=0.3)
            gcps = [mk.GroundControlPoint(i + 1, gcp_pts[i], 0.01) for i in range(17)]
            if apply_pre:
                for k in list(rmap.cameras):
                    rmap.cameras[k] = pre.apply_pose(rmap.cameras[k])
            res = mk.georegister(rmap, marker_obs, gcps, apply=False)
            results.append(res.residuals)
        # DLT triangulation is only approximately equivariant under a
        # similarity once the observations carry noise
        for mid in results[0]:
            assert abs(results[0][mid] - results[1][mid]) < 1e-5

    def test_noisy_residuals_below_bound(self):
        sigma_px = 0.5
        rmap, marker_obs, gcp_pts = gcp_scene(seed=4, sigma_px=sigma_px)
        gcps = [mk.GroundControlPoint(i + 1, gcp_pts[i], 0.02) for i in range(17)]
        res = mk.georegister(rmap, marker_obs, gcps)
        # triangulation error scales like sigma_px * depth / f
        depth = 6.5
        bound = 5.0 * sigma_px * depth / 1000.0
        assert np.mean(list(res.residuals.values())) < bound

    def test_gross_outlier_rejected(self):
        rmap, marker_obs, gcp_pts = gcp_scene(seed=5)
        gcps = [mk.GroundControlPoint(i + 1, gcp_pts[i], 0.001) for i in range(17)]
        gcps[3] = mk.GroundControlPoint(4, gcp_pts[3] + np.array([1.0, 0, 0]), 0.001)
        res = mk.georegister(rmap, marker_obs, gcps)
        assert 4 not in res.inlier_ids
        good = [res.residuals[i + 1] for i in range(17) if i + 1 != 4]
        assert max(good) < 1e-9

    def test_two_markers_insufficient(self):
        rmap, marker_obs, gcp_pts = gcp_scene()
        gcps = [mk.GroundControlPoint(i + 1, gcp_pts[i], 0.001) for i in range(2)]
        with pytest.raises(InsufficientGCPs):
            mk.georegister(rmap, marker_obs, gcps)

    def test_no_consensus(self):
        rng = np.random.default_rng(8)
        rmap, marker_obs, gcp_pts = gcp_scene(seed=6)
        gcps = [
            mk.GroundControlPoint(i + 1, rng.uniform(-5, 5, 3), 0.0001) for i in range(17)
        ]
        with pytest.raises(NoConsensus):
            mk.georegister(rmap, marker_obs, gcps)

    def test_gcp_csv_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        gcps = [mk.GroundControlPoint(i + 1, rng.uniform(0, 5, 3), 0.001) for i in range(5)]
        mk.write_gcp_csv(tmp_path / "gcp.csv", gcps)
        back = mk.read_gcp_csv(tmp_path / "gcp.csv")
        assert [g.marker_id for g in back] == [g.marker_id for g in gcps]
        for a, b in zip(gcps, back):
            assert np.allclose(a.position, b.position, atol=1e-8)
