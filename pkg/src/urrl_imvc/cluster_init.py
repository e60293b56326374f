"""Cluster-center initialization: Ward agglomerative clustering and a k-means++ fallback."""
from __future__ import annotations

import numpy as np


def ward_linkage(x: np.ndarray) -> np.ndarray:
    """Ward linkage matrix in the ``scipy.cluster.hierarchy`` layout.

    Rows are ``(id_a, id_b, height, size)`` sorted by height; new clusters get
    ids ``N, N+1, ...``. Squared heights follow the Lance-Williams update
    starting from squared Euclidean distances, found with a nearest-neighbor
    chain in O(N^2) time.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        return np.zeros((0, 4))
    sq = (x * x).sum(axis=1)
    d = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    np.fill_diagonal(d, np.inf)
    size = np.ones(n)
    active = np.ones(n, dtype=bool)
    merges: list[tuple[int, int, float]] = []
    chain: list[int] = []
    while len(merges) < n - 1:
        if not chain:
            chain.append(int(np.flatnonzero(active)[0]))
        a = chain[-1]
        row = np.where(active, d[a], np.inf)
        b = int(np.argmin(row))
        if len(chain) > 1 and row[chain[-2]] <= row[b]:
            b = chain[-2]
        if len(chain) > 1 and b == chain[-2]:
            chain.pop()
            chain.pop()
            lo, hi = min(a, b), max(a, b)
            height = d[lo, hi]
            merges.append((lo, hi, height))
            na, nb = size[lo], size[hi]
            nk = size
            # Lance-Williams update for Ward; the merged cluster lives in slot ``lo``
            new = ((na + nk) * d[lo] + (nb + nk) * d[hi] - nk * height) / (na + nb + nk)
            active[hi] = False
            new[~active] = np.inf
            new[lo] = np.inf
            d[lo, :] = new
            d[:, lo] = new
            d[hi, :] = np.inf
            d[:, hi] = np.inf
            size[lo] = na + nb
        else:
            chain.append(b)
    return _relabel(merges, n)


def _relabel(merges: list[tuple[int, int, float]], n: int) -> np.ndarray:
    order = sorted(range(len(merges)), key=lambda t: (merges[t][2], t))
    parent = list(range(n))
    cluster_id = list(range(n))
    count = [1] * n

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    out = np.zeros((len(merges), 4))
    for step, t in enumerate(order):
        a, b, height = merges[t]
        ra, rb = find(a), find(b)
        ia, ib = sorted((cluster_id[ra], cluster_id[rb]))
        parent[rb] = ra
        count[ra] += count[rb]
        cluster_id[ra] = n + step
        out[step] = (ia, ib, np.sqrt(height), count[ra])
    return out


def cut_linkage(linkage: np.ndarray, n: int, n_clusters: int) -> np.ndarray:
    """Flat labels ``0..n_clusters-1`` after applying the first ``n - n_clusters`` merges.

    Labels are numbered by first appearance in sample order.
    """
    parent = list(range(2 * n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for step in range(n - n_clusters):
        a, b = int(linkage[step, 0]), int(linkage[step, 1])
        parent[find(a)] = n + step
        parent[find(b)] = n + step
    roots = [find(i) for i in range(n)]
    relabel: dict[int, int] = {}
    return np.array([relabel.setdefault(r, len(relabel)) for r in roots], dtype=np.int64)


def ward_labels(x: np.ndarray, n_clusters: int) -> np.ndarray:
    return cut_linkage(ward_linkage(x), len(x), n_clusters)


def kmeans_pp(x: np.ndarray, n_clusters: int, seed: int = 0, iters: int = 100) -> np.ndarray:
    """Lloyd iterations from k-means++ seeding; returns labels."""
    rng = np.random.default_rng(seed)
    n = len(x)
    centers = [x[rng.integers(n)]]
    for _ in range(1, n_clusters):
        d2 = np.min(((x[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        centers.append(x[rng.choice(n, p=d2 / total)] if total > 0 else x[rng.integers(n)])
    c = np.array(centers)
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        d2 = ((x[:, None, :] - c[None]) ** 2).sum(-1)
        new = d2.argmin(axis=1)
        if _ and np.array_equal(new, labels):
            break
        labels = new
        for j in range(n_clusters):
            members = x[labels == j]
            if len(members):
                c[j] = members.mean(axis=0)
    return labels


def init_centers(embeddings: np.ndarray, n_clusters: int, method: str = "ward",
                 cap: int = 10_000, seed: int = 0) -> np.ndarray:
    """Cluster ``embeddings`` into ``n_clusters`` groups and return the group means.

    Above ``cap`` rows a uniform subsample is clustered instead.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if n_clusters > len(x):
        raise ValueError(f"cannot form {n_clusters} clusters from {len(x)} embeddings")
    if len(x) > cap:
        rng = np.random.default_rng(seed)
        x = x[np.sort(rng.choice(len(x), cap, replace=False))]
    if method == "ward":
        labels = ward_labels(x, n_clusters)
    elif method == "kmeans++":
        labels = kmeans_pp(x, n_clusters, seed)
    else:
        raise ValueError(f"unknown center init method {method!r}")
    centers = np.zeros((n_clusters, x.shape[1]))
    for j in range(n_clusters):
        members = x[labels == j]
        centers[j] = members.mean(axis=0) if len(members) else x[j]
    return centers
