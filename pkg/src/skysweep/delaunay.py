"""Incremental 3D Delaunay cell complex with change tracking.

Cells are identified by the sorted 4-tuple of their global vertex ids,
which is stable across internal re-triangulation. `insert_points`
returns the exact sets of destroyed and created cells so that
downstream energy bookkeeping can be patched instead of rebuilt.
Robust geometric predicates are delegated to Qhull (via scipy); near
duplicates are dropped at 1e-9 relative tolerance before insertion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree

from numba import njit

from .errors import DegenerateGeometry

CellKey = tuple[int, int, int, int]


@njit(cache=True)
def _bfs_crossed(normals, offsets, neighbors, seeds, a, b, min_frac):
    """Flood fill of cells crossed by segment a->b, seeded at `seeds`;
    a cell is crossed when the clipped span exceeds min_frac."""
    n = normals.shape[0]
    seen = np.zeros(n, np.uint8)
    stack = np.empty(n, np.int64)
    out = np.empty(n, np.int64)
    top = 0
    m = 0
    for i in range(seeds.shape[0]):
        s = seeds[i]
        if s >= 0 and seen[s] == 0:
            seen[s] = 1
            stack[top] = s
            top += 1
    dx, dy, dz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    while top > 0:
        top -= 1
        r = stack[top]
        t0, t1 = 0.0, 1.0
        ok = True
        for f in range(4):
            nx = normals[r, f, 0]
            ny = normals[r, f, 1]
            nz = normals[r, f, 2]
            denom = nx * dx + ny * dy + nz * dz
            num = offsets[r, f] - (nx * a[0] + ny * a[1] + nz * a[2])
            if abs(denom) < 1e-30:
                if num > 0.0:  # parallel and entirely outside
                    ok = False
                    break
            else:
                t = num / denom
                if denom > 0.0:
                    if t > t0:
                        t0 = t
                else:
                    if t < t1:
                        t1 = t
                if t0 >= t1:
                    ok = False
                    break
        if not ok or t1 - t0 <= min_frac:
            continue
        out[m] = r
        m += 1
        for f in range(4):
            nb = neighbors[r, f]
            if nb >= 0 and seen[nb] == 0:
                seen[nb] = 1
                stack[top] = nb
                top += 1
    return out[:m]


def _rows_view(a: np.ndarray):
    a = np.ascontiguousarray(a, dtype=np.int64)
    return a.view([("", np.int64)] * a.shape[1]).ravel()


@dataclass
class ChangeSet:
    created: list[CellKey] = field(default_factory=list)
    destroyed: list[CellKey] = field(default_factory=list)
    point_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def empty(self) -> bool:
        return not self.created and not self.destroyed


class CellComplex:
    """Growing Delaunay tetrahedralization of a 3D point cloud."""

    def __init__(self, rel_tol: float = 1e-9):
        self.rel_tol = rel_tol
        self._pts = np.zeros((0, 3))
        self._tri: Delaunay | None = None
        self._incremental = False
        self._keys = np.zeros((0, 4), dtype=np.int64)  # sorted per row
        self._key_to_row: dict[CellKey, int] | None = None
        self._tree: cKDTree | None = None
        self._hull_eqs: np.ndarray | None = None
        self._planes: tuple[np.ndarray, np.ndarray] | None = None
        self._nb64: np.ndarray | None = None
        self._key_tuples: list[CellKey] | None = None
        self._star_cache: dict[int, list[int]] = {}

    # -- basic accessors ----------------------------------------------------
    @property
    def positions(self) -> np.ndarray:
        return self._pts

    @property
    def n_vertices(self) -> int:
        return len(self._pts)

    @property
    def n_cells(self) -> int:
        return len(self._keys)

    @property
    def cell_keys(self) -> np.ndarray:
        """(n_cells, 4) sorted vertex ids; row order matches simplices."""
        return self._keys

    def key_of_row(self, row: int) -> CellKey:
        if self._key_tuples is None:
            self._key_tuples = [tuple(map(int, k)) for k in self._keys]
        return self._key_tuples[row]

    def row_of_key(self, key: CellKey) -> int:
        if self._key_to_row is None:
            self._key_to_row = {tuple(map(int, k)): i for i, k in enumerate(self._keys)}
        return self._key_to_row[tuple(key)]

    def is_hull_cell(self, row: int) -> bool:
        return bool((self._tri.neighbors[row] == -1).any())

    def neighbor_rows(self, row: int) -> np.ndarray:
        """Neighbor row per facet; -1 marks a hull facet."""
        return self._tri.neighbors[row]

    # -- insertion ----------------------------------------------------------
    def insert_points(self, points) -> ChangeSet:
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise DegenerateGeometry("non-finite input point")
        if len(pts) == 0:
            return ChangeSet(point_ids=np.zeros(0, dtype=np.int64))

        scale = max(1.0, np.abs(self._pts).max(initial=0.0), np.abs(pts).max())
        tol = self.rel_tol * scale

        ids = np.full(len(pts), -1, dtype=np.int64)
        # dedup against existing cloud
        if len(self._pts):
            if self._tree is None:
                self._tree = cKDTree(self._pts)
            dist, idx = self._tree.query(pts)
            dup = dist < tol
            ids[dup] = idx[dup]
        # dedup within the batch (later duplicates map to the first)
        fresh_mask = ids < 0
        fresh_local = np.flatnonzero(fresh_mask)
        if len(fresh_local):
            sub = pts[fresh_local]
            canon = np.arange(len(sub))
            for a, b in sorted(cKDTree(sub).query_pairs(tol)):
                a, b = min(a, b), max(a, b)
                canon[b] = canon[a]
            # path-compress
            for i in range(len(canon)):
                while canon[canon[i]] != canon[i]:
                    canon[i] = canon[canon[i]]
            keep = np.flatnonzero(canon == np.arange(len(sub)))
            new_global = {int(k): self.n_vertices + j for j, k in enumerate(keep)}
            for i, c in enumerate(canon):
                ids[fresh_local[i]] = new_global[int(c)]
            new_pts = sub[keep]
        else:
            new_pts = np.zeros((0, 3))

        old_keys = self._keys
        if len(new_pts):
            self._pts = np.vstack([self._pts, new_pts])
            self._tree = None
            self._hull_eqs = None
            self._rebuild_or_extend(len(new_pts))

        change = self._diff(old_keys)
        change.point_ids = ids
        return change

    def _rebuild_or_extend(self, n_new: int) -> None:
        if self._tri is not None and self._incremental:
            self._tri.add_points(self._pts[-n_new:])
        elif len(self._pts) >= 4:
            # Qhull's incremental mode needs 5+ points; rebuild small or
            # previously degenerate clouds from scratch until it engages
            try:
                self._tri = Delaunay(self._pts, incremental=True)
                self._incremental = True
            except QhullError:
                self._incremental = False
                try:
                    self._tri = Delaunay(self._pts)
                except QhullError:
                    self._tri = None  # degenerate so far; keep buffering
        if self._tri is not None:
            self._keys = np.sort(self._tri.simplices.astype(np.int64), axis=1)
        self._key_to_row = None
        self._planes = None
        self._nb64 = None
        self._key_tuples = None
        self._star_cache = {}

    def _diff(self, old_keys: np.ndarray) -> ChangeSet:
        new_keys = self._keys
        if len(old_keys) == 0 and len(new_keys) == 0:
            return ChangeSet()
        ov = _rows_view(old_keys) if len(old_keys) else np.zeros(0, dtype=_rows_view(new_keys).dtype)
        nv = _rows_view(new_keys) if len(new_keys) else np.zeros(0, dtype=_rows_view(old_keys).dtype)
        created_rows = np.flatnonzero(~np.isin(nv, ov)) if len(nv) else np.zeros(0, dtype=int)
        destroyed_rows = np.flatnonzero(~np.isin(ov, nv)) if len(ov) else np.zeros(0, dtype=int)
        return ChangeSet(
            created=[tuple(map(int, new_keys[r])) for r in created_rows],
            destroyed=[tuple(map(int, old_keys[r])) for r in destroyed_rows],
        )

    # -- topology queries ---------------------------------------------------
    def _star_index(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR index vertex -> incident cell rows, built per epoch."""
        cached = self._star_cache.get(-1)
        if cached is None:
            flat = self._tri.simplices.ravel()
            rows = np.repeat(np.arange(len(self._tri.simplices)), 4)
            order = np.argsort(flat, kind="stable")
            starts = np.searchsorted(flat[order], np.arange(self.n_vertices + 1))
            cached = (starts, rows[order])
            self._star_cache[-1] = cached
        return cached

    def star_rows(self, vertex_id: int) -> list[int]:
        """Rows of all cells incident to a vertex."""
        if self._tri is None:
            return []
        starts, rows = self._star_index()
        return [int(r) for r in rows[starts[vertex_id] : starts[vertex_id + 1]]]

    _FACET_OPP = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])

    def _all_planes(self) -> tuple[np.ndarray, np.ndarray]:
        """Inward-oriented facet planes of every cell, computed lazily
        once per triangulation epoch: (n, 4, 3) normals, (n, 4) offsets."""
        if self._planes is None:
            verts = self._pts[self._tri.simplices]  # (n, 4, 3)
            tri = verts[:, self._FACET_OPP]  # (n, 4, 3, 3)
            e1 = tri[:, :, 1] - tri[:, :, 0]
            e2 = tri[:, :, 2] - tri[:, :, 0]
            normals = np.empty_like(e1)
            normals[..., 0] = e1[..., 1] * e2[..., 2] - e1[..., 2] * e2[..., 1]
            normals[..., 1] = e1[..., 2] * e2[..., 0] - e1[..., 0] * e2[..., 2]
            normals[..., 2] = e1[..., 0] * e2[..., 1] - e1[..., 1] * e2[..., 0]
            offsets = np.einsum("nfj,nfj->nf", normals, tri[:, :, 0])
            # orient towards the opposite vertex (facet i faces vertex i)
            flip = np.einsum("nfj,nfj->nf", normals, verts) < offsets
            normals[flip] *= -1.0
            offsets[flip] *= -1.0
            self._planes = (normals, offsets)
        return self._planes

    def _cell_planes(self, row: int):
        """Inward-oriented facet planes (normals, offsets) of a cell."""
        normals, offsets = self._all_planes()
        return normals[row], offsets[row]

    def _clip_rows(self, rows: np.ndarray | None, a: np.ndarray, b: np.ndarray):
        """Batched segment clipping: per-row (t0, t1, valid) arrays.
        With rows=None, clips against every cell."""
        normals, offsets = self._all_planes()
        if rows is None:
            N, off = normals, offsets
        else:
            N, off = normals[rows], offsets[rows]
        denoms = N @ (b - a)  # (m, 4)
        nums = off - N @ a
        par = np.abs(denoms) < 1e-30
        outside = np.any(par & (nums > 0), axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ts = nums / denoms
        t0 = np.maximum(0.0, np.max(np.where((denoms > 0) & ~par, ts, -np.inf), axis=1))
        t1 = np.minimum(1.0, np.min(np.where((denoms < 0) & ~par, ts, np.inf), axis=1))
        return t0, t1, ~outside & (t0 < t1)

    def clip_segment(self, row: int, a: np.ndarray, b: np.ndarray):
        """Parameter interval [t0, t1] of segment a->b inside the cell,
        or None if the intersection is empty/degenerate."""
        t0, t1, ok = self._clip_rows(np.array([row]), np.asarray(a, float), np.asarray(b, float))
        if not ok[0]:
            return None
        return (float(t0[0]), float(t1[0]))

    def segment_cells(self, a, b, seed_rows=None, min_frac: float = 1e-9) -> list[int]:
        """Rows of all cells whose interior is crossed by segment a->b.

        Clips the segment against every cell in one vectorized pass
        (`seed_rows` is accepted for interface stability but unused);
        a cell counts as crossed when the clipped span exceeds
        `min_frac` of the segment.
        """
        if self._tri is None:
            return []
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if seed_rows is None:
            seed_rows = [int(r) for r in self._tri.find_simplex([a, b]) if r >= 0]
            if not seed_rows:
                # both endpoints outside the hull: clip to the hull and
                # locate a cell at interior samples of the clipped span
                iv = self._clip_to_hull(a, b)
                if iv is None:
                    return []
                t0, t1 = iv
                ts = t0 + (t1 - t0) * np.linspace(0.1, 0.9, 9)
                samples = a[None] + ts[:, None] * (b - a)[None]
                seed_rows = [int(r) for r in self._tri.find_simplex(samples) if r >= 0]
        normals, offsets = self._all_planes()
        if self._nb64 is None:
            self._nb64 = np.ascontiguousarray(self._tri.neighbors, dtype=np.int64)
        rows = _bfs_crossed(
            normals,
            offsets,
            self._nb64,
            np.asarray(seed_rows, dtype=np.int64),
            a,
            b,
            min_frac,
        )
        return rows.tolist()

    def _clip_to_hull(self, a, b):
        """Parameter interval of segment a->b inside the convex hull."""
        from scipy.spatial import ConvexHull

        if self._hull_eqs is None:
            self._hull_eqs = ConvexHull(self._pts).equations
        n = self._hull_eqs[:, :3]
        off = self._hull_eqs[:, 3]
        d = b - a
        fa = n @ a + off  # <= 0 means inside
        fd = n @ d
        t0, t1 = 0.0, 1.0
        for i in range(len(off)):
            if abs(fd[i]) < 1e-30:
                if fa[i] > 0:
                    return None
                continue
            t = -fa[i] / fd[i]
            if fd[i] < 0:
                t0 = max(t0, t)
            else:
                t1 = min(t1, t)
            if t0 >= t1:
                return None
        return (t0, t1)

    # -- metric queries ------------------------------------------------------
    def circumsphere(self, row: int):
        verts = self._pts[self._tri.simplices[row]]
        A = 2.0 * (verts[1:] - verts[0])
        rhs = (verts[1:] ** 2).sum(axis=1) - (verts[0] ** 2).sum()
        try:
            center = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError as e:
            raise DegenerateGeometry("flat cell has no circumsphere") from e
        return center, float(np.linalg.norm(center - verts[0]))

    def median_spacing(self) -> float:
        """Median nearest-neighbor distance of the vertex cloud."""
        if len(self._pts) < 2:
            raise DegenerateGeometry("need at least 2 vertices")
        if self._tree is None:
            self._tree = cKDTree(self._pts)
        d, _ = self._tree.query(self._pts, k=2)
        return float(np.median(d[:, 1]))

    def validate_empty_circumsphere(self, rows=None, rel_tol: float = 1e-7) -> None:
        """Brute-force Delaunay check: no vertex strictly inside any
        sampled cell's circumsphere. Raises DegenerateGeometry on
        violation."""
        if self._tri is None:
            return
        tree = cKDTree(self._pts)
        rows = range(self.n_cells) if rows is None else rows
        for row in rows:
            center, r = self.circumsphere(row)
            inside = tree.query_ball_point(center, r * (1.0 - rel_tol))
            cell_verts = set(int(v) for v in self._tri.simplices[row])
            bad = [v for v in inside if v not in cell_verts]
            if bad:
                raise DegenerateGeometry(
                    f"vertex {bad[0]} inside circumsphere of cell row {row}"
                )

    def facet_of(self, row_a: int, row_b: int) -> tuple[int, int, int]:
        """Sorted shared-facet vertex ids of two neighboring cells."""
        shared = sorted(
            set(map(int, self._tri.simplices[row_a])) & set(map(int, self._tri.simplices[row_b]))
        )
        if len(shared) != 3:
            raise DegenerateGeometry("cells do not share a facet")
        return tuple(shared)
