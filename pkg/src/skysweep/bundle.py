"""Bundle adjustment: Levenberg-Marquardt over poses, points and
optional shared intrinsics, with Huber robustification and per-image
multi-scale weights.

Residual for observation of point i in camera j:
    r_ij = w_j * (project(K, pose_j, X_i) - x_ij)
with the Huber loss applied through residual/Jacobian rescaling. In
`multi-scale` mode w_j = d_j / d_ref (camera distance to the point
centroid over the smallest such distance), which equalizes object-space
uncertainty across acquisition scales; `standard` mode sets w_j = 1.
The camera system is solved densely after a Schur complement eliminates
the block-diagonal point system.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InconsistentMap, NumericalFailure
from .geometry import CameraIntrinsics, Pose, quat_mul, quat_to_matrix, rotvec_to_quat


@dataclass
class BundleConfig:
    mode: str = "standard"  # "standard" | "multi-scale"
    huber_delta_px: float = 1.0
    refine_intrinsics: bool = False
    d_ref: float | None = None  # default: min camera-to-centroid distance
    max_iters: int = 50
    rel_cost_tol: float = 1e-10
    grad_tol: float = 1e-10
    # image ids whose poses are held constant (anchors for local BA);
    # when at least two cameras are anchored they define the gauge
    fixed_cameras: tuple[int, ...] = ()


@dataclass
class SolveStats:
    initial_cost: float
    final_cost: float
    iterations: int
    termination: str
    max_gradient: float
    wall_ms: float

    def to_dict(self):
        return {
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "iterations": self.iterations,
            "termination": self.termination,
            "max_gradient": self.max_gradient,
            "wall_ms": round(self.wall_ms, 3),
        }


class BundleProblem:
    """Parameter blocks, residual structure and gauge fixture."""

    def __init__(self, rmap, config: BundleConfig):
        self.rmap = rmap
        self.config = config
        self.cam_ids = sorted(rmap.cameras)
        self.pids = sorted(rmap.points)
        cam_index = {c: i for i, c in enumerate(self.cam_ids)}
        pid_index = {p: i for i, p in enumerate(self.pids)}

        self.q = np.array([rmap.cameras[c].q for c in self.cam_ids])
        self.t = np.array([rmap.cameras[c].t for c in self.cam_ids])
        self.X = np.array([rmap.points[p].position for p in self.pids]).reshape(-1, 3)
        intr = rmap.intrinsics
        self.intr_base = intr
        self.intr_vec = np.array([intr.f_px, intr.cx, intr.cy, intr.k1])

        cam_idx, pt_idx, uv = [], [], []
        for p in self.pids:
            for img, fi in rmap.points[p].track:
                cam_idx.append(cam_index[img])
                pt_idx.append(pid_index[p])
                uv.append(rmap.images[img].pixels[fi])
        if not cam_idx:
            raise InconsistentMap("no observations")
        self.cam_idx = np.array(cam_idx, dtype=int)
        self.pt_idx = np.array(pt_idx, dtype=int)
        self.uv = np.array(uv, dtype=float)

        # per-image scale weight
        if config.mode == "multi-scale":
            centroid = self.X.mean(axis=0)
            centers = np.array([Pose(q=q, t=t).center for q, t in zip(self.q, self.t)])
            d = np.linalg.norm(centers - centroid, axis=1)
            d_ref = config.d_ref if config.d_ref is not None else float(d.min())
            self.cam_weight = d / max(d_ref, 1e-12)
        else:
            self.cam_weight = np.ones(len(self.cam_ids))
        self.obs_weight = self.cam_weight[self.cam_idx]

        # gauge: first camera fixed; second camera loses the translation
        # coordinate with the largest baseline component
        self.fixed_cam_params = np.zeros((len(self.cam_ids), 6), dtype=bool)
        anchored = [c for c in config.fixed_cameras if c in cam_index]
        for c in anchored:
            self.fixed_cam_params[cam_index[c], :] = True
        if len(anchored) < 2:
            if len(self.cam_ids) > 0:
                self.fixed_cam_params[0, :] = True
            if len(self.cam_ids) > 1:
                base = Pose(q=self.q[1], t=self.t[1]).center - Pose(q=self.q[0], t=self.t[0]).center
                self.fixed_cam_params[1, 3 + int(np.argmax(np.abs(base)))] = True

    # -- bookkeeping --------------------------------------------------------
    @property
    def n_residuals(self):
        return 2 * len(self.cam_idx)

    def intrinsics(self) -> CameraIntrinsics:
        f, cx, cy, k1 = self.intr_vec
        return CameraIntrinsics(
            f_px=float(f), cx=float(cx), cy=float(cy),
            width=self.intr_base.width, height=self.intr_base.height, k1=float(k1),
        )

    def state_copy(self):
        return self.q.copy(), self.t.copy(), self.X.copy(), self.intr_vec.copy()

    def set_state(self, state):
        self.q, self.t, self.X, self.intr_vec = (s.copy() for s in state)

    # -- residuals ----------------------------------------------------------
    def residuals(self) -> np.ndarray:
        """Weighted (non-robust) residual vector, shape (n_obs, 2)."""
        f, cx, cy, k1 = self.intr_vec
        R = np.array([quat_to_matrix(q) for q in self.q])
        pc = np.einsum("oij,oj->oi", R[self.cam_idx], self.X[self.pt_idx]) + self.t[self.cam_idx]
        z = pc[:, 2]
        z_safe = np.where(np.abs(z) < 1e-12, 1e-12, z)
        xn = pc[:, 0] / z_safe
        yn = pc[:, 1] / z_safe
        r2 = xn * xn + yn * yn
        d = 1.0 + k1 * r2
        pred = np.stack([f * xn * d + cx, f * yn * d + cy], axis=1)
        return (pred - self.uv) * self.obs_weight[:, None]

    def robust_cost(self, res=None) -> float:
        res = self.residuals() if res is None else res
        e = np.linalg.norm(res, axis=1)
        delta = self.config.huber_delta_px
        quad = e <= delta
        return float(np.sum(np.where(quad, e * e, 2 * delta * e - delta * delta)))

    def _robust_scale(self, res) -> np.ndarray:
        """Per-observation factor s with ||s*r||^2 = huber(||r||)."""
        e = np.linalg.norm(res, axis=1)
        delta = self.config.huber_delta_px
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.sqrt(np.maximum(2 * delta * e - delta * delta, 0.0)) / np.maximum(e, 1e-30)
        return np.where(e <= delta, 1.0, s)

    def jacobian_blocks(self):
        """Analytic Jacobians of the weighted residuals.

        Returns (res, Jc, Jp, Ji): per-observation residual (n,2),
        d r/d(camera 6-dof tangent) (n,2,6), d r/d(point) (n,2,3) and
        d r/d(f,cx,cy,k1) (n,2,4). The camera tangent is a left-applied
        rotation-vector increment followed by a translation increment.
        """
        f, cx, cy, k1 = self.intr_vec
        n = len(self.cam_idx)
        R = np.array([quat_to_matrix(q) for q in self.q])
        Ro = R[self.cam_idx]
        Xo = self.X[self.pt_idx]
        v = np.einsum("oij,oj->oi", Ro, Xo)  # rotated point
        pc = v + self.t[self.cam_idx]
        z = pc[:, 2]
        z_safe = np.where(np.abs(z) < 1e-12, 1e-12, z)
        xn = pc[:, 0] / z_safe
        yn = pc[:, 1] / z_safe
        r2 = xn * xn + yn * yn
        dist = 1.0 + k1 * r2
        pred = np.stack([f * xn * dist + cx, f * yn * dist + cy], axis=1)
        res = (pred - self.uv) * self.obs_weight[:, None]

        # d(pixel)/d(xn, yn) including the radial term
        duu = f * (1.0 + k1 * (3 * xn * xn + yn * yn))
        duv = f * k1 * 2 * xn * yn
        dvv = f * (1.0 + k1 * (xn * xn + 3 * yn * yn))
        A = np.empty((n, 2, 2))
        A[:, 0, 0] = duu
        A[:, 0, 1] = duv
        A[:, 1, 0] = duv
        A[:, 1, 1] = dvv

        # d(xn, yn)/d(pc)
        B = np.zeros((n, 2, 3))
        B[:, 0, 0] = 1.0 / z_safe
        B[:, 0, 2] = -pc[:, 0] / z_safe**2
        B[:, 1, 1] = 1.0 / z_safe
        B[:, 1, 2] = -pc[:, 1] / z_safe**2

        dpix_dpc = np.einsum("nij,njk->nik", A, B)

        # d(pc)/d(theta) = -[v]_x for a left rotation increment
        neg_skew_v = np.zeros((n, 3, 3))
        neg_skew_v[:, 0, 1] = v[:, 2]
        neg_skew_v[:, 0, 2] = -v[:, 1]
        neg_skew_v[:, 1, 0] = -v[:, 2]
        neg_skew_v[:, 1, 2] = v[:, 0]
        neg_skew_v[:, 2, 0] = v[:, 1]
        neg_skew_v[:, 2, 1] = -v[:, 0]

        Jc = np.empty((n, 2, 6))
        Jc[:, :, :3] = np.einsum("nij,njk->nik", dpix_dpc, neg_skew_v)
        Jc[:, :, 3:] = dpix_dpc
        Jp = np.einsum("nij,njk->nik", dpix_dpc, Ro)

        Ji = np.zeros((n, 2, 4))
        Ji[:, 0, 0] = xn * dist
        Ji[:, 1, 0] = yn * dist
        Ji[:, 0, 1] = 1.0
        Ji[:, 1, 2] = 1.0
        Ji[:, 0, 3] = f * xn * r2
        Ji[:, 1, 3] = f * yn * r2

        w = self.obs_weight[:, None, None]
        return res, Jc * w, Jp * w, Ji * w

    def apply_step(self, dc, dp, di):
        """dc: (ncam, 6) tangent; dp: (npts, 3); di: (4,)."""
        for j in range(len(self.cam_ids)):
            if np.any(dc[j, :3]):
                self.q[j] = quat_mul(rotvec_to_quat(dc[j, :3]), self.q[j])
            self.t[j] = self.t[j] + dc[j, 3:]
        self.X = self.X + dp
        self.intr_vec = self.intr_vec + di

    def write_back(self):
        """Push the solved state into the reconstruction map."""
        for j, cid in enumerate(self.cam_ids):
            self.rmap.cameras[cid] = Pose(q=self.q[j], t=self.t[j])
        for i, pid in enumerate(self.pids):
            self.rmap.points[pid].position = self.X[i].copy()
        if self.config.refine_intrinsics:
            self.rmap.intrinsics = self.intrinsics()


def build_problem(rmap, config: BundleConfig | None = None) -> BundleProblem:
    config = config or BundleConfig()
    rmap.validate()
    return BundleProblem(rmap, config)


def solve(problem: BundleProblem, max_iters: int | None = None) -> SolveStats:
    """Levenberg-Marquardt with dense Schur complement on the cameras.

    Terminates on relative cost decrease below rel_cost_tol, gradient
    infinity-norm below grad_tol, or the iteration cap. The solved
    state is written back into the problem's map.
    """
    cfg = problem.config
    iters_cap = cfg.max_iters if max_iters is None else max_iters
    t0 = time.perf_counter()
    ncam = len(problem.cam_ids)
    npts = len(problem.pids)
    nintr = 4 if cfg.refine_intrinsics else 0

    res = problem.residuals()
    cost = problem.robust_cost(res)
    if not np.isfinite(cost):
        raise NumericalFailure("non-finite initial cost")
    initial_cost = cost

    cam_free = ~problem.fixed_cam_params.ravel()
    n_cam_free = int(cam_free.sum())
    lam = 1e-4
    termination = "max_iters"
    max_grad = np.inf
    it = 0
    done = False
    while it < iters_cap and not done:
        it += 1
        res, Jc, Jp, Ji = problem.jacobian_blocks()
        s = problem._robust_scale(res)
        res_r = res * s[:, None]
        Jc = Jc * s[:, None, None]
        Jp = Jp * s[:, None, None]
        if nintr:
            Ji = Ji * s[:, None, None]

        ci = problem.cam_idx
        pi = problem.pt_idx

        # gradient
        g_cam = np.zeros((ncam, 6))
        np.add.at(g_cam, ci, np.einsum("nij,ni->nj", Jc, res_r))
        g_pt = np.zeros((npts, 3))
        np.add.at(g_pt, pi, np.einsum("nij,ni->nj", Jp, res_r))
        g_int = np.einsum("nij,ni->j", Ji, res_r) if nintr else np.zeros(0)
        max_grad = max(
            np.abs(g_cam.ravel()[cam_free]).max(initial=0.0),
            np.abs(g_pt).max(initial=0.0),
            np.abs(g_int).max(initial=0.0),
        )
        if max_grad < cfg.grad_tol:
            termination = "gradient"
            break

        # normal-equation blocks
        Hcc = np.zeros((ncam, 6, 6))
        np.add.at(Hcc, ci, np.einsum("nij,nik->njk", Jc, Jc))
        Hpp = np.zeros((npts, 3, 3))
        np.add.at(Hpp, pi, np.einsum("nij,nik->njk", Jp, Jp))
        if nintr:
            Hii = np.einsum("nij,nik->jk", Ji, Ji)
            Hci = np.zeros((ncam, 6, 4))
            np.add.at(Hci, ci, np.einsum("nij,nik->njk", Jc, Ji))
            Hpi_all = np.einsum("nij,nik->njk", Jp, Ji)  # per obs (3,4)
            Hpi = np.zeros((npts, 3, 4))
            np.add.at(Hpi, pi, Hpi_all)

        # per-(camera, point) coupling blocks, grouped by point
        Wall = np.einsum("nij,nik->njk", Jc, Jp)  # (n, 6, 3)

        order = np.argsort(pi, kind="stable")
        pi_sorted = pi[order]
        bounds = np.searchsorted(pi_sorted, np.arange(npts + 1))

        nfull = ncam * 6 + nintr
        accept = False
        for _trial in range(8):
            S = np.zeros((nfull, nfull))
            b = np.zeros(nfull)
            for j in range(ncam):
                S[j * 6 : j * 6 + 6, j * 6 : j * 6 + 6] = Hcc[j] + lam * np.diag(np.diag(Hcc[j]) + 1e-12)
                b[j * 6 : j * 6 + 6] = -g_cam[j]
            if nintr:
                S[ncam * 6 :, ncam * 6 :] = Hii + lam * np.diag(np.diag(Hii) + 1e-12)
                b[ncam * 6 :] = -g_int
                for j in range(ncam):
                    S[j * 6 : j * 6 + 6, ncam * 6 :] = Hci[j]
                    S[ncam * 6 :, j * 6 : j * 6 + 6] = Hci[j].T

            Hpp_aug = Hpp.copy()
            diag3 = np.arange(3)
            Hpp_aug[:, diag3, diag3] += lam * (Hpp[:, diag3, diag3] + 1e-12)
            try:
                Hpp_aug_inv = np.linalg.inv(Hpp_aug)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            rhs_pt = -g_pt

            # Schur reduction: S -= W Hpp^-1 W^T, b -= W Hpp^-1 rhs_pt
            WHinv = np.einsum("nij,njl->nil", Wall, Hpp_aug_inv[pi])  # (n, 6, 3)
            b_cam = np.zeros((ncam, 6))
            np.add.at(b_cam, ci, np.einsum("nil,nl->ni", WHinv, rhs_pt[pi]))
            b[: ncam * 6] -= b_cam.ravel()
            S_cam = np.zeros((ncam, ncam, 6, 6))
            for p in range(npts):
                lo, hi = bounds[p], bounds[p + 1]
                if lo == hi:
                    continue
                idx = order[lo:hi]
                cams = ci[idx]
                contrib = np.einsum("kil,mjl->kmij", WHinv[idx], Wall[idx])
                np.add.at(S_cam, (cams[:, None], cams[None, :]), contrib)
            S[: ncam * 6, : ncam * 6] -= S_cam.transpose(0, 2, 1, 3).reshape(ncam * 6, ncam * 6)
            if nintr:
                HpiHinv = np.einsum("pij,pjl->pil", Hpp_aug_inv, Hpi)  # (p, 3, 4)
                WHi = np.einsum("nij,njl->nil", Wall, HpiHinv[pi])  # (n, 6, 4)
                Sci = np.zeros((ncam, 6, 4))
                np.add.at(Sci, ci, WHi)
                for j in range(ncam):
                    S[j * 6 : j * 6 + 6, ncam * 6 :] -= Sci[j]
                    S[ncam * 6 :, j * 6 : j * 6 + 6] -= Sci[j].T
                S[ncam * 6 :, ncam * 6 :] -= np.einsum("pli,plj->ij", Hpi, HpiHinv)
                b[ncam * 6 :] -= np.einsum("pil,pi->l", HpiHinv, rhs_pt)

            free = np.concatenate([cam_free, np.ones(nintr, dtype=bool)])
            Sf = S[np.ix_(free, free)]
            bf = b[free]
            try:
                dxf = np.linalg.solve(Sf, bf)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            dx = np.zeros(nfull)
            dx[free] = dxf
            dc = dx[: ncam * 6].reshape(ncam, 6)
            di = dx[ncam * 6 :] if nintr else np.zeros(4)

            # back-substitute points
            rhs_all = rhs_pt.copy()
            np.add.at(rhs_all, pi, -np.einsum("nij,ni->nj", Wall, dc[ci]))
            if nintr:
                rhs_all -= np.einsum("pij,j->pi", Hpi, di)
            dp = np.einsum("pij,pj->pi", Hpp_aug_inv, rhs_all)

            saved = problem.state_copy()
            problem.apply_step(dc, dp, di if nintr else np.zeros(4))
            new_cost = problem.robust_cost()
            if not np.isfinite(new_cost):
                raise NumericalFailure("non-finite cost during solve")
            if new_cost < cost:
                rel = (cost - new_cost) / max(cost, 1e-300)
                cost = new_cost
                lam = max(lam / 3.0, 1e-12)
                accept = True
                if rel < cfg.rel_cost_tol:
                    termination = "cost"
                    done = True
                break
            problem.set_state(saved)
            lam *= 10
        if not accept:
            termination = "stalled"
            break

    problem.write_back()
    stats = SolveStats(
        initial_cost=initial_cost,
        final_cost=cost,
        iterations=it,
        termination=termination,
        max_gradient=float(max_grad),
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )
    return stats


def check_jacobian(problem: BundleProblem, seed: int = 0, n_probe: int = 40) -> float:
    """Max relative error of analytic vs central finite differences.

    Perturbs the problem to a random feasible state, then probes
    `n_probe` randomly chosen parameters with central differences at
    step 1e-6 of the parameter scale.
    """
    rng = np.random.default_rng(seed)
    saved = problem.state_copy()
    ncam = len(problem.cam_ids)
    npts = len(problem.pids)
    problem.apply_step(
        rng.normal(0, 1e-3, size=(ncam, 6)), rng.normal(0, 1e-3, size=(npts, 3)), np.zeros(4)
    )

    _, Jc, Jp, Ji = problem.jacobian_blocks()
    nintr = 4 if problem.config.refine_intrinsics else 0
    nparams = ncam * 6 + npts * 3 + nintr
    probes = rng.choice(nparams, size=min(n_probe, nparams), replace=False)
    max_rel = 0.0
    base_state = problem.state_copy()
    for p in probes:
        if p < ncam * 6:
            j, k = divmod(p, 6)
            scale = max(1.0, abs(problem.t[j][k - 3]) if k >= 3 else 1.0)
            h = 1e-6 * scale
            dc = np.zeros((ncam, 6))
            dc[j, k] = h
            problem.set_state(base_state)
            problem.apply_step(dc, np.zeros((npts, 3)), np.zeros(4))
            rp = problem.residuals()
            problem.set_state(base_state)
            problem.apply_step(-dc, np.zeros((npts, 3)), np.zeros(4))
            rm = problem.residuals()
            fd = (rp - rm) / (2 * h)
            an = np.zeros_like(fd)
            sel = problem.cam_idx == j
            an[sel] = Jc[sel, :, k]
        elif p < ncam * 6 + npts * 3:
            q, k = divmod(p - ncam * 6, 3)
            h = 1e-6 * max(1.0, abs(problem.X[q][k]))
            dp = np.zeros((npts, 3))
            dp[q, k] = h
            problem.set_state(base_state)
            problem.apply_step(np.zeros((ncam, 6)), dp, np.zeros(4))
            rp = problem.residuals()
            problem.set_state(base_state)
            problem.apply_step(np.zeros((ncam, 6)), -dp, np.zeros(4))
            rm = problem.residuals()
            fd = (rp - rm) / (2 * h)
            an = np.zeros_like(fd)
            sel = problem.pt_idx == q
            an[sel] = Jp[sel, :, k]
        else:
            k = p - ncam * 6 - npts * 3
            h = 1e-6 * max(1.0, abs(problem.intr_vec[k]))
            di = np.zeros(4)
            di[k] = h
            problem.set_state(base_state)
            problem.apply_step(np.zeros((ncam, 6)), np.zeros((npts, 3)), di)
            rp = problem.residuals()
            problem.set_state(base_state)
            problem.apply_step(np.zeros((ncam, 6)), np.zeros((npts, 3)), -di)
            rm = problem.residuals()
            fd = (rp - rm) / (2 * h)
            an = Ji[:, :, k]
        denom = max(1.0, np.abs(an).max(), np.abs(fd).max())
        max_rel = max(max_rel, float(np.abs(an - fd).max() / denom))
    problem.set_state(saved)
    return max_rel
