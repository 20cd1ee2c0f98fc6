"""Hierarchical k-means vocabulary tree with tf-idf image retrieval."""

from __future__ import annotations

import numpy as np

from .errors import EmptyIndex, InsufficientData


def _kmeans(data, k, rng, iters=15):
    """Seeded k-means with k-means++ init; always returns k centroids
    (padded by duplication when clusters empty or data is small)."""
    n = len(data)
    if n == 0:
        raise InsufficientData("no data for k-means")
    # k-means++ seeding
    centroids = [data[rng.integers(n)]]
    d2 = np.full(n, np.inf)
    for _ in range(1, k):
        d2 = np.minimum(d2, ((data - centroids[-1]) ** 2).sum(axis=1))
        total = d2.sum()
        if total <= 1e-18:
            centroids.append(centroids[-1])
            continue
        probs = d2 / total
        centroids.append(data[rng.choice(n, p=probs)])
    C = np.array(centroids)
    for _ in range(iters):
        assign = np.argmin(((data[:, None, :] - C[None, :, :]) ** 2).sum(axis=2), axis=1)
        newC = C.copy()
        for j in range(k):
            mask = assign == j
            if mask.any():
                newC[j] = data[mask].mean(axis=0)
        if np.allclose(newC, C):
            C = newC
            break
        C = newC
    assign = np.argmin(((data[:, None, :] - C[None, :, :]) ** 2).sum(axis=2), axis=1)
    return C, assign


class VocabularyTree:
    """Complete k-ary tree of depth L over signature space.

    Nodes are stored breadth-first; leaves own an inverted file of
    (image_id -> term frequency). idf = ln(N / N_leaf) is evaluated
    lazily against the current index.
    """

    def __init__(self, k: int, depth: int, centroids: np.ndarray):
        self.k = k
        self.depth = depth
        self.centroids = centroids  # (n_nodes, dim); root excluded
        self.n_leaves = k**depth
        self.inverted: list[dict[int, int]] = [dict() for _ in range(self.n_leaves)]
        self.image_totals: dict[int, int] = {}

    # -- tree navigation ----------------------------------------------------
    def _level_offset(self, level):
        # offset of level `level` (1-based) in the centroid array
        return (self.k**level - self.k) // (self.k - 1) if self.k > 1 else self.k * (level - 1)

    def quantize(self, signatures) -> np.ndarray:
        """Leaf index for each signature."""
        sigs = np.asarray(signatures, dtype=float).reshape(-1, self.centroids.shape[1])
        node = np.zeros(len(sigs), dtype=int)  # index within level
        for level in range(1, self.depth + 1):
            off = self._level_offset(level)
            child_base = off + node * self.k
            best = np.zeros(len(sigs), dtype=int)
            bestd = np.full(len(sigs), np.inf)
            for j in range(self.k):
                C = self.centroids[child_base + j]
                d = ((sigs - C) ** 2).sum(axis=1) if C.ndim == 1 else ((sigs - C) ** 2).sum(axis=1)
                upd = d < bestd
                bestd[upd] = d[upd]
                best[upd] = j
            node = node * self.k + best
        return node

    def quantize_batch(self, signatures) -> np.ndarray:
        sigs = np.asarray(signatures, dtype=float)
        node = np.zeros(len(sigs), dtype=int)
        for level in range(1, self.depth + 1):
            off = self._level_offset(level)
            child_idx = off + node[:, None] * self.k + np.arange(self.k)[None, :]
            C = self.centroids[child_idx]  # (n, k, dim)
            d = ((sigs[:, None, :] - C) ** 2).sum(axis=2)
            node = node * self.k + np.argmin(d, axis=1)
        return node

    # -- index --------------------------------------------------------------
    def add_image(self, image_id: int, signatures) -> None:
        leaves = self.quantize_batch(signatures)
        for leaf in leaves:
            f = self.inverted[leaf]
            f[image_id] = f.get(image_id, 0) + 1
        self.image_totals[image_id] = self.image_totals.get(image_id, 0) + len(leaves)

    @property
    def n_images(self):
        return len(self.image_totals)

    def _tfidf_vector(self, leaf_counts, idf):
        vec = {}
        for leaf, c in leaf_counts.items():
            w = c * idf[leaf]
            if w > 0:
                vec[leaf] = w
        norm = np.sqrt(sum(v * v for v in vec.values()))
        if norm > 0:
            vec = {k: v / norm for k, v in vec.items()}
        return vec

    def retrieve(self, signatures, n: int) -> list[tuple[int, float]]:
        """Top-n (image_id, score) by L2-normalized tf-idf similarity."""
        if not self.image_totals:
            raise EmptyIndex("no images indexed")
        N = self.n_images
        idf = np.zeros(self.n_leaves)
        for leaf, f in enumerate(self.inverted):
            if f:
                idf[leaf] = np.log(N / len(f))
        leaves = self.quantize_batch(signatures)
        q_counts: dict[int, int] = {}
        for leaf in leaves:
            q_counts[leaf] = q_counts.get(leaf, 0) + 1
        q_vec = self._tfidf_vector(q_counts, idf)

        img_counts: dict[int, dict[int, int]] = {i: {} for i in self.image_totals}
        for leaf in set(q_counts):
            for img, c in self.inverted[leaf].items():
                img_counts[img][leaf] = c
        # norms need the full image vectors
        full_counts: dict[int, dict[int, int]] = {i: {} for i in self.image_totals}
        for leaf, f in enumerate(self.inverted):
            for img, c in f.items():
                full_counts[img][leaf] = c
        scores = []
        for img in self.image_totals:
            vec = self._tfidf_vector(full_counts[img], idf)
            s = sum(q_vec.get(leaf, 0.0) * w for leaf, w in vec.items())
            scores.append((img, s))
        scores.sort(key=lambda t: (-t[1], t[0]))
        return scores[:n]


def build_vocabulary(signatures, k: int = 8, depth: int = 3, seed: int = 0) -> VocabularyTree:
    """Train a complete k^depth-leaf tree by hierarchical k-means."""
    sigs = np.asarray(signatures, dtype=float)
    if len(sigs) < k:
        raise InsufficientData(f"{len(sigs)} signatures < k={k}")
    rng = np.random.default_rng(seed)
    dim = sigs.shape[1]
    centroids = []
    # breadth-first: list of per-node training subsets at current level
    level_sets = [sigs]
    for _ in range(depth):
        next_sets = []
        for data in level_sets:
            if len(data) == 0:
                C = np.zeros((k, dim))
                assign = np.zeros(0, dtype=int)
            else:
                C, assign = _kmeans(data, k, rng)
            centroids.append(C)
            for j in range(k):
                next_sets.append(data[assign == j] if len(data) else data)
        level_sets = next_sets
    return VocabularyTree(k=k, depth=depth, centroids=np.vstack(centroids))
