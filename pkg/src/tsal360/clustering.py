"""HDBSCAN over haversine distances, sized for per-frame salient-pixel sets.

The classic pipeline: core distances at k = min_samples (counting the point
itself), mutual-reachability distances, a Prim minimum spanning tree, a
single-linkage hierarchy, the condensed tree at min_cluster_size, and
excess-of-mass cluster extraction.  Noise is labeled -1 and the hierarchy
root is never selected, so a single all-engulfing cluster cannot win.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import _haversine


def pairwise_haversine(points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    lat, lon = pts[:, 0], pts[:, 1]
    return _haversine(lat[:, None], lon[None, :], lat[None, :], lon[:, None]).T


def core_distances(dist: np.ndarray, min_samples: int) -> np.ndarray:
    """Distance to the min_samples-th nearest neighbor, the point itself included."""
    n = dist.shape[0]
    if min_samples > n:
        raise ValueError(f"min_samples={min_samples} exceeds point count {n}")
    return np.partition(dist, min_samples - 1, axis=1)[:, min_samples - 1]


def mutual_reachability(dist: np.ndarray, min_samples: int) -> np.ndarray:
    core = core_distances(dist, min_samples)
    mrd = np.maximum(dist, np.maximum(core[:, None], core[None, :]))
    np.fill_diagonal(mrd, 0.0)
    return mrd


def _prim_mst(mrd: np.ndarray) -> list[tuple[int, int, float]]:
    n = mrd.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    best = mrd[0].copy()
    parent = np.zeros(n, dtype=np.int64)
    edges = []
    for _ in range(n - 1):
        cand = np.where(in_tree, np.inf, best)
        j = int(np.argmin(cand))
        edges.append((int(parent[j]), j, float(best[j])))
        in_tree[j] = True
        closer = (~in_tree) & (mrd[j] < best)
        parent[closer] = j
        best[closer] = mrd[j][closer]
    return edges


@dataclass
class Dendrogram:
    """Single-linkage merge tree; node ids < n are points, >= n are merges."""

    n: int
    children: dict[int, tuple[int, int, float]]   # node -> (left, right, distance)
    sizes: dict[int, int]
    root: int


def single_linkage(mrd: np.ndarray) -> Dendrogram:
    n = mrd.shape[0]
    edges = sorted(_prim_mst(mrd), key=lambda e: (e[2], e[0], e[1]))
    owner = list(range(n))                         # union-find with path halving
    current = list(range(n))                       # representative -> live cluster id
    children: dict[int, tuple[int, int, float]] = {}
    sizes = {i: 1 for i in range(n)}
    next_id = n

    def find(i: int) -> int:
        while owner[i] != i:
            owner[i] = owner[owner[i]]
            i = owner[i]
        return i

    for u, v, d in edges:
        ru, rv = find(u), find(v)
        cu, cv = current[ru], current[rv]
        children[next_id] = (cu, cv, d)
        sizes[next_id] = sizes[cu] + sizes[cv]
        owner[rv] = ru
        current[ru] = next_id
        next_id += 1
    return Dendrogram(n=n, children=children, sizes=sizes, root=next_id - 1)


@dataclass
class CondensedCluster:
    parent: int                    # condensed parent id, -1 for the root
    birth_lambda: float
    children: list[int] = field(default_factory=list)
    points: list[tuple[int, float]] = field(default_factory=list)   # (point, leave lambda)
    stability: float = 0.0


def _leaf_points(tree: Dendrogram, node: int) -> list[int]:
    out, stack = [], [node]
    while stack:
        cur = stack.pop()
        if cur < tree.n:
            out.append(cur)
        else:
            left, right, _ = tree.children[cur]
            stack.extend((left, right))
    return out


def _level_children(tree: Dendrogram, node: int) -> list[int]:
    """Subtrees hanging below `node`'s merge level, flattening tied distances.

    Mutual-reachability graphs tie frequently (every edge capped by one
    point's core distance carries that exact value), so consecutive merges
    at the same distance are one multiway split of the canonical hierarchy,
    not a meaningful binary order.
    """
    d = tree.children[node][2]
    parts: list[int] = []
    stack = [node]
    while stack:
        cur = stack.pop()
        for child in tree.children[cur][:2]:
            if child >= tree.n and tree.children[child][2] == d:
                stack.append(child)
            else:
                parts.append(child)
    return parts


def condense_tree(tree: Dendrogram, min_cluster_size: int) -> list[CondensedCluster]:
    """Collapse the dendrogram into clusters of at least min_cluster_size points.

    Walking top-down, a level is a true split only when at least two of its
    sides hold min_cluster_size points; the other sides' points fall out of
    the running cluster at that level's lambda = 1/distance.
    """
    mcs = max(2, min_cluster_size)
    clusters = [CondensedCluster(parent=-1, birth_lambda=0.0)]
    stack = [(tree.root, 0)]
    while stack:
        node, cid = stack.pop()
        while True:
            if node < tree.n:
                # a cluster can only shrink to a bare point when mcs members
                # were never available; record it leaving at its own level
                clusters[cid].points.append((node, clusters[cid].birth_lambda))
                break
            d = tree.children[node][2]
            lam = np.inf if d <= 0 else 1.0 / d
            parts = _level_children(tree, node)
            big = [p for p in parts if tree.sizes[p] >= mcs]
            for shed in parts:
                if tree.sizes[shed] >= mcs:
                    continue
                for p in _leaf_points(tree, shed):
                    clusters[cid].points.append((p, lam))
                    clusters[cid].stability += lam - clusters[cid].birth_lambda
            if len(big) >= 2:
                survivors = sum(tree.sizes[p] for p in big)
                clusters[cid].stability += survivors * (lam - clusters[cid].birth_lambda)
                for child in big:
                    clusters.append(CondensedCluster(parent=cid, birth_lambda=lam))
                    clusters[cid].children.append(len(clusters) - 1)
                    stack.append((child, len(clusters) - 1))
                break
            if not big:
                break
            node = big[0]
    return clusters


def extract_clusters(clusters: list[CondensedCluster]) -> list[int]:
    """Excess-of-mass selection; returns selected condensed cluster ids."""
    subtree = [0.0] * len(clusters)
    selected = [False] * len(clusters)
    for cid in range(len(clusters) - 1, -1, -1):
        node = clusters[cid]
        child_sum = sum(subtree[k] for k in node.children)
        if cid == 0:
            break
        if not node.children or node.stability >= child_sum:
            selected[cid] = True
            drop = list(node.children)
            while drop:
                k = drop.pop()
                selected[k] = False
                drop.extend(clusters[k].children)
            subtree[cid] = node.stability
        else:
            subtree[cid] = child_sum
    return [i for i, s in enumerate(selected) if s]


def hdbscan(points: np.ndarray, min_cluster_size: int, min_samples: int) -> np.ndarray:
    """Cluster (lat, lon) points; returns int labels with -1 for noise.

    Fewer points than min_samples yields all noise.  Labels are numbered in
    order of each cluster's smallest member index.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    labels = np.full(n, -1, dtype=np.int64)
    if n < max(min_samples, 2) or n < min_cluster_size:
        return labels
    mrd = mutual_reachability(pairwise_haversine(pts), min_samples)
    clusters = condense_tree(single_linkage(mrd), min_cluster_size)
    chosen = extract_clusters(clusters)
    if not chosen:
        return labels
    chosen_set = set(chosen)
    membership: dict[int, list[int]] = {c: [] for c in chosen}
    for cid, cluster in enumerate(clusters):
        # the selected ancestor (if any) claims every point recorded below it
        anc = cid
        while anc != -1 and anc not in chosen_set:
            anc = clusters[anc].parent
        if anc == -1:
            continue
        membership[anc].extend(p for p, _ in cluster.points)
    ordered = sorted((min(v), k) for k, v in membership.items() if v)
    for label, (_, cid) in enumerate(ordered):
        labels[membership[cid]] = label
    return labels
