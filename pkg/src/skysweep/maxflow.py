"""Dynamic s-t min-cut over binary cell labelings.

Each node carries two non-negative integer label costs (occupied /
free); undirected links carry a non-negative disagreement weight. The
minimum-energy labeling is found by max-flow (Dinic) on the standard
graph construction: source adjacency encodes the occupied cost, sink
adjacency the free cost, link weights become symmetric edge pairs.

The solver is dynamic: costs may be raised or lowered and nodes added
between solves, and the previous flow is reused. Capacity decreases
are handled by flow reparameterization - excess flow on a shrunk edge
is rerouted through freshly added, already-saturated terminal edges
whose constant energy contribution is tracked in an offset, so that

    energy(labels) == flow_value + offset            (exactly, integers)

holds after every re-solve.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .errors import InvalidConfig

_INF = np.int64(1 << 60)


@njit(cache=True)
def _dinic(first, nxt, head, cap, s, t, n_nodes):
    total = np.int64(0)
    level = np.empty(n_nodes, np.int64)
    cur = np.empty(n_nodes, np.int64)
    q = np.empty(n_nodes, np.int64)
    path_e = np.empty(n_nodes + 1, np.int64)
    while True:
        for i in range(n_nodes):
            level[i] = -1
        level[s] = 0
        q[0] = s
        qh, qt = 0, 1
        while qh < qt:
            u = q[qh]
            qh += 1
            e = first[u]
            while e != -1:
                v = head[e]
                if cap[e] > 0 and level[v] < 0:
                    level[v] = level[u] + 1
                    q[qt] = v
                    qt += 1
                e = nxt[e]
        if level[t] < 0:
            break
        for i in range(n_nodes):
            cur[i] = first[i]
        # blocking flow via iterative DFS with current-arc optimization
        while True:
            u = s
            depth = 0
            found = False
            while True:
                if u == t:
                    found = True
                    break
                e = cur[u]
                advanced = False
                while e != -1:
                    v = head[e]
                    if cap[e] > 0 and level[v] == level[u] + 1:
                        cur[u] = e
                        path_e[depth] = e
                        depth += 1
                        u = v
                        advanced = True
                        break
                    e = nxt[e]
                    cur[u] = e
                if not advanced:
                    if depth == 0:
                        break
                    level[u] = -1  # dead end: prune from this phase
                    depth -= 1
                    e_back = path_e[depth]
                    u = head[e_back ^ 1]
                    cur[u] = nxt[cur[u]]
            if not found:
                break
            f = _INF
            for d in range(depth):
                if cap[path_e[d]] < f:
                    f = cap[path_e[d]]
            for d in range(depth):
                cap[path_e[d]] -= f
                cap[path_e[d] ^ 1] += f
            total += f
    return total


@njit(cache=True)
def _reachable(first, nxt, head, cap, s, n_nodes):
    seen = np.zeros(n_nodes, np.bool_)
    q = np.empty(n_nodes, np.int64)
    seen[s] = True
    q[0] = s
    qh, qt = 0, 1
    while qh < qt:
        u = q[qh]
        qh += 1
        e = first[u]
        while e != -1:
            v = head[e]
            if cap[e] > 0 and not seen[v]:
                seen[v] = True
                q[qt] = v
                qt += 1
            e = nxt[e]
    return seen


class DynamicMinCut:
    """Min-cut labeler with incremental updates and flow recycling."""

    S = 0
    T = 1

    def __init__(self):
        self._first = np.full(64, -1, dtype=np.int64)
        self._head = np.empty(256, dtype=np.int64)
        self._nxt = np.empty(256, dtype=np.int64)
        self._cap = np.zeros(256, dtype=np.int64)
        self.n_nodes = 2
        self.n_edges = 0
        self.flow_value = 0
        self.offset = 0
        # logical per-node label costs and terminal edge ids
        self._cost_occ: list[int] = []
        self._cost_free: list[int] = []
        self._es: list[int] = []  # source->node edge id
        self._et: list[int] = []  # node->sink edge id
        self._dead: list[bool] = []
        # links
        self._link_edge: list[int] = []
        self._link_w: list[int] = []
        self._link_uv: list[tuple[int, int]] = []
        self.augment_calls = 0

    # -- storage ------------------------------------------------------------
    def _grow_edges(self, need):
        while self.n_edges + need > len(self._cap):
            for name in ("_head", "_nxt", "_cap"):
                arr = getattr(self, name)
                bigger = np.zeros(len(arr) * 2, dtype=np.int64)
                bigger[: len(arr)] = arr
                setattr(self, name, bigger)

    def _raw_edge(self, u, v, c_uv, c_vu):
        self._grow_edges(2)
        e = self.n_edges
        self._head[e], self._cap[e] = v, c_uv
        self._nxt[e] = self._first[u]
        self._first[u] = e
        self._head[e + 1], self._cap[e + 1] = u, c_vu
        self._nxt[e + 1] = self._first[v]
        self._first[v] = e + 1
        self.n_edges += 2
        return e

    # -- construction -------------------------------------------------------
    def add_node(self) -> int:
        node = self.n_nodes
        if node >= len(self._first):
            bigger = np.full(len(self._first) * 2, -1, dtype=np.int64)
            bigger[: len(self._first)] = self._first
            self._first = bigger
        self._first[node] = -1
        self.n_nodes += 1
        self._cost_occ.append(0)
        self._cost_free.append(0)
        self._dead.append(False)
        self._es.append(self._raw_edge(self.S, node, 0, 0))
        self._et.append(self._raw_edge(node, self.T, 0, 0))
        return node - 2  # external ids count cells only

    def set_tlink(self, cell: int, cost_occ: int, cost_free: int) -> None:
        if cost_occ < 0 or cost_free < 0:
            raise InvalidConfig("label costs must be non-negative")
        d_occ = int(cost_occ) - self._cost_occ[cell]
        d_free = int(cost_free) - self._cost_free[cell]
        es, et = self._es[cell], self._et[cell]
        # decreases are re-expressed as increases of the opposite
        # terminal plus a constant, which keeps all capacities growing
        if d_occ >= 0:
            self._cap[es] += d_occ
        else:
            self._cap[et] += -d_occ
            self.offset += d_occ
        if d_free >= 0:
            self._cap[et] += d_free
        else:
            self._cap[es] += -d_free
            self.offset += d_free
        self._cost_occ[cell] = int(cost_occ)
        self._cost_free[cell] = int(cost_free)

    def add_nlink(self, a: int, b: int, w: int) -> int:
        if w < 0:
            raise InvalidConfig("link weights must be non-negative")
        if a == b:
            raise InvalidConfig("self-link")
        e = self._raw_edge(a + 2, b + 2, int(w), int(w))
        self._link_edge.append(e)
        self._link_w.append(int(w))
        self._link_uv.append((a, b))
        return len(self._link_edge) - 1

    def set_nlink(self, link: int, w: int) -> None:
        if w < 0:
            raise InvalidConfig("link weights must be non-negative")
        w = int(w)
        e = self._link_edge[link]
        w_old = self._link_w[link]
        delta = w - w_old
        if delta >= 0:
            self._cap[e] += delta
            self._cap[e ^ 1] += delta
            self._link_w[link] = w
            return
        a, b = self._link_uv[link]
        # signed flow a->b currently on the link
        f = (self._cap[e ^ 1] - self._cap[e]) // 2
        if abs(f) <= w:
            self._cap[e] = w - f
            self._cap[e ^ 1] = w + f
        else:
            # overflow d is rerouted: donor node keeps sending d into
            # the sink, receiver keeps drawing d from the source, and
            # matching unsaturated capacities keep both label costs
            # shifted by the same constant (absorbed into the offset)
            d = abs(f) - w
            donor, recv = (a, b) if f > 0 else (b, a)
            if f > 0:
                self._cap[e] = 0
                self._cap[e ^ 1] = 2 * w
            else:
                self._cap[e ^ 1] = 0
                self._cap[e] = 2 * w
            self._cap[self._et[donor] ^ 1] += d  # saturated donor->sink
            self._cap[self._es[recv] ^ 1] += d  # saturated source->recv
            self._cap[self._es[donor]] += d  # unsaturated compensators
            self._cap[self._et[recv]] += d
            self.flow_value += d
            self.offset -= 2 * d
        self._link_w[link] = w

    def neutralize_node(self, cell: int) -> None:
        """Make a node's energy contribution zero for either label
        (used when its cell is destroyed). Incident links must be
        zeroed by the caller."""
        m = max(self._cost_occ[cell], self._cost_free[cell])
        self.set_tlink(cell, m, m)
        self.offset -= m
        self._cost_occ[cell] = 0
        self._cost_free[cell] = 0
        self._dead[cell] = True

    # -- solving ------------------------------------------------------------
    def solve(self) -> int:
        """Augment to max flow (reusing existing flow) and return the
        minimum energy = flow + offset."""
        self.augment_calls += 1
        added = _dinic(
            self._first[: self.n_nodes],
            self._nxt[: self.n_edges],
            self._head[: self.n_edges],
            self._cap[: self.n_edges],
            self.S,
            self.T,
            self.n_nodes,
        )
        self.flow_value += int(added)
        return self.flow_value + self.offset

    def labels(self) -> np.ndarray:
        """True = occupied (sink side of the minimum cut)."""
        seen = _reachable(
            self._first[: self.n_nodes],
            self._nxt[: self.n_edges],
            self._head[: self.n_edges],
            self._cap[: self.n_edges],
            self.S,
            self.n_nodes,
        )
        return ~seen[2:]

    def energy_of(self, labels) -> int:
        """Direct energy of a labeling from the logical costs (oracle
        path, independent of the flow bookkeeping)."""
        labels = np.asarray(labels, dtype=bool)
        e = 0
        for c in range(self.n_nodes - 2):
            e += self._cost_occ[c] if labels[c] else self._cost_free[c]
        for link, w in enumerate(self._link_w):
            a, b = self._link_uv[link]
            if labels[a] != labels[b]:
                e += w
        return e
