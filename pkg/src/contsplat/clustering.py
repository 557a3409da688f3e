"""HDBSCAN with excess-of-mass selection, and k-means with k-means++ seeding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import DisjointSet
from scipy.spatial.distance import cdist

_TINY = 1e-300
# single-cluster case: a point is noise once its fall-out distance exceeds this multiple of the median
OUTLIER_FACTOR = 10.0


@dataclass(eq=False)
class ClusterSet:
    clusters: list[np.ndarray] = field(default_factory=list)
    noise: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def labels(self) -> np.ndarray:
        n = sum(len(c) for c in self.clusters) + len(self.noise)
        out = np.full(n, -1, dtype=np.int64)
        for k, c in enumerate(self.clusters):
            out[c] = k
        return out

    def __len__(self) -> int:
        return len(self.clusters)


def _from_labels(labels: np.ndarray) -> ClusterSet:
    ks = np.unique(labels[labels >= 0])
    return ClusterSet([np.flatnonzero(labels == k) for k in ks], np.flatnonzero(labels < 0))


def _mst(points: np.ndarray, core: np.ndarray) -> np.ndarray:
    """Prim's algorithm on the dense mutual-reachability graph; rows (a, b, weight)."""
    n = len(points)
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    parent = np.zeros(n, dtype=np.int64)
    edges = np.zeros((n - 1, 3))
    cur = 0
    for e in range(n - 1):
        in_tree[cur] = True
        d = np.sqrt(((points - points[cur]) ** 2).sum(axis=1))
        mr = np.maximum(np.maximum(d, core), core[cur])
        upd = (~in_tree) & (mr < best)
        best[upd] = mr[upd]
        parent[upd] = cur
        cand = np.where(in_tree, np.inf, best)
        nxt = int(np.argmin(cand))
        edges[e] = (parent[nxt], nxt, best[nxt])
        cur = nxt
    return edges


def _single_linkage(edges: np.ndarray, n: int) -> np.ndarray:
    """scipy-style linkage rows (left, right, distance, size) from MST edges."""
    order = np.argsort(edges[:, 2], kind="stable")
    ds = DisjointSet(range(n))
    node_of = {i: i for i in range(n)}
    size = {i: 1 for i in range(n)}
    out = np.zeros((n - 1, 4))
    for j, e in enumerate(order):
        a, b, w = int(edges[e, 0]), int(edges[e, 1]), edges[e, 2]
        ra, rb = ds[a], ds[b]
        na, nb = node_of[ra], node_of[rb]
        ds.merge(ra, rb)
        root = ds[a]
        new = n + j
        size[new] = size[na] + size[nb]
        node_of[root] = new
        out[j] = (na, nb, w, size[new])
    return out


def _leaves(link: np.ndarray, node: int, n: int) -> list[int]:
    stack = [node]
    out = []
    while stack:
        x = stack.pop()
        if x < n:
            out.append(x)
        else:
            stack.extend((int(link[x - n, 0]), int(link[x - n, 1])))
    return out


def _condense(link: np.ndarray, n: int, min_size: int):
    """Condensed tree rows (parent, child, lambda, child_size); clusters are labelled from n."""
    root = 2 * n - 2
    relabel = {root: n}
    next_label = n + 1
    rows = []
    queue = [root]
    while queue:
        node = queue.pop(0)
        left, right, dist, _ = link[node - n]
        left, right = int(left), int(right)
        lam = 1.0 / max(dist, _TINY)
        lc = int(link[left - n, 3]) if left >= n else 1
        rc = int(link[right - n, 3]) if right >= n else 1
        p = relabel[node]
        if lc >= min_size and rc >= min_size:
            for child, cnt in ((left, lc), (right, rc)):
                relabel[child] = next_label
                rows.append((p, next_label, lam, cnt))
                next_label += 1
                queue.append(child)
            continue
        for child, cnt in ((left, lc), (right, rc)):
            if cnt >= min_size:
                relabel[child] = p
                queue.append(child)
            else:
                rows.extend((p, leaf, lam, 1) for leaf in _leaves(link, child, n))
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def _select_eom(tree: np.ndarray, n: int):
    parents = tree[:, 0].astype(np.int64)
    children = tree[:, 1].astype(np.int64)
    lams = tree[:, 2]
    sizes = tree[:, 3]
    cluster_ids = np.unique(parents)
    birth = {n: 0.0}
    for c, lam in zip(children, lams):
        if c >= n:
            birth[int(c)] = lam
    stability = {int(c): 0.0 for c in cluster_ids}
    for p, lam, s in zip(parents, lams, sizes):
        stability[int(p)] += (lam - birth[int(p)]) * s
    kids: dict[int, list[int]] = {int(c): [] for c in cluster_ids}
    for p, c in zip(parents, children):
        if c >= n:
            kids[int(p)].append(int(c))
    selected = {c: True for c in stability}
    for c in sorted(stability, reverse=True):
        if c == n:
            continue
        sub = sum(stability[k] for k in kids[c])
        if kids[c] and sub > stability[c]:
            selected[c] = False
            stability[c] = sub
        else:
            stack = list(kids[c])
            while stack:
                k = stack.pop()
                selected[k] = False
                stack.extend(kids[k])
    selected[n] = False
    return [c for c in sorted(selected) if selected[c]], kids


def hdbscan(points: np.ndarray, min_cluster_size: int) -> ClusterSet:
    """Cluster ``points`` (N, D); see :func:`cluster`."""
    pts = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    n = len(pts)
    if n < max(min_cluster_size, 2):
        return ClusterSet([], np.arange(n))
    k = min(min_cluster_size, n)
    # core distance counts the point itself as its first neighbour
    core = np.sort(cdist(pts, pts), axis=1)[:, k - 1]
    link = _single_linkage(_mst(pts, core), n)
    tree = _condense(link, n, min_cluster_size)
    chosen, kids = _select_eom(tree, n)
    labels = np.full(n, -1, dtype=np.int64)
    leaf_rows = tree[tree[:, 1] < n]
    if not chosen:
        # the root never split: keep it as one cluster and drop points that fall out far later than the rest
        fall = 1.0 / np.maximum(leaf_rows[:, 2], _TINY)
        pts_idx = leaf_rows[:, 1].astype(np.int64)
        labels[pts_idx[fall <= OUTLIER_FACTOR * np.median(fall)]] = 0
        return _from_labels(labels)
    owner = {}
    for label, c in enumerate(chosen):
        stack = [c]
        while stack:
            x = stack.pop()
            owner[x] = label
            stack.extend(kids.get(x, []))
    for p, c, _, _ in leaf_rows:
        lab = owner.get(int(p))
        if lab is not None:
            labels[int(c)] = lab
    return _from_labels(labels)


# ---------------------------------------------------------------------------
# k-means


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator, iterations: int = 20):
    """Lloyd's algorithm from k-means++ seeds; returns ``(centroids (k, D), labels)``."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    k = min(k, n)
    centroids = np.empty((k, pts.shape[1]))
    centroids[0] = pts[rng.integers(n)]
    d2 = ((pts - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        i = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centroids[j] = pts[i]
        d2 = np.minimum(d2, ((pts - centroids[j]) ** 2).sum(axis=1))
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(iterations):
        labels = cdist(pts, centroids, "sqeuclidean").argmin(axis=1)
        for j in range(k):
            members = pts[labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    labels = cdist(pts, centroids, "sqeuclidean").argmin(axis=1)
    return centroids, labels
