"""Cross-view KNN imputation and the training-time augmentations built on it."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import MultiViewDataset, missing_fraction


@dataclass(frozen=True)
class AugmentationParams:
    phi1: float | None = None  # None: derived from the dataset's missing fraction
    phi2: float = 0.05
    phi3: float = 0.05
    eps: float = 0.15


class KnnIndex:
    """Per-view neighbor rankings by ascending cosine distance.

    ``lists[v][i]`` is an int array of sample ids (query excluded), or ``None``
    when sample ``i`` lacks view ``v``. Ties are broken by ascending sample id.
    """

    def __init__(self, lists: list[list[np.ndarray | None]]):
        self.lists = lists

    def neighbors(self, v: int, i: int) -> np.ndarray | None:
        return self.lists[v][i]


def cosine_distance_matrix(x: np.ndarray) -> np.ndarray:
    """Pairwise ``1 - cos``; any pair involving a zero-norm row sits at the maximal distance 2."""
    sq = (x * x).sum(axis=1)
    zero = sq == 0
    denom = np.sqrt(np.outer(sq, sq))
    d = np.clip(1.0 - (x @ x.T) / np.where(denom > 0, denom, 1.0), 0.0, 2.0)
    d[zero, :] = 2.0
    d[:, zero] = 2.0
    np.fill_diagonal(d, 0.0)
    return d


def build_knn_index(ds: MultiViewDataset, max_neighbors: int | None = None) -> KnnIndex:
    """Exact cosine-distance ranking per view over the samples that have the view."""
    lists: list[list[np.ndarray | None]] = []
    for v, x in enumerate(ds.views):
        avail = np.flatnonzero(ds.mask[:, v])
        per_view: list[np.ndarray | None] = [None] * ds.n_samples
        if avail.size:
            d = cosine_distance_matrix(x[avail])
            np.fill_diagonal(d, np.inf)
            # stable sort over ascending ids keeps the lower id first on ties
            order = np.argsort(d, axis=1, kind="stable")[:, : avail.size - 1]
            if max_neighbors is not None:
                order = order[:, :max_neighbors]
            ranked = avail[order]
            for row, i in enumerate(avail):
                per_view[i] = ranked[row]
        lists.append(per_view)
    return KnnIndex(lists)


def select_neighbors(i: int, v: int, k: int, row_mask: np.ndarray, mask: np.ndarray,
                     index: KnnIndex) -> list[int]:
    """Sample ids filling the ``k`` slots of view ``v`` for sample ``i`` (self first if present).

    ``row_mask`` is the sample's effective availability (possibly after view
    dropout); ``mask`` is the dataset mask that decides whether a neighbor can
    donate view ``v``.
    """
    if row_mask[v]:
        return [i] + [int(j) for j in index.neighbors(v, i)[: k - 1]]
    picked: list[int] = []
    seen: set[int] = set()
    sources = [b for b in range(len(row_mask)) if b != v and row_mask[b]]
    for a in range(k):
        for b in sources:
            ranked = index.neighbors(b, i)
            if ranked is None or a >= len(ranked):
                continue
            j = int(ranked[a])
            if mask[j, v] and j not in seen:
                seen.add(j)
                picked.append(j)
    return picked[:k]


def knn_impute(i: int, v: int, k: int, ds: MultiViewDataset, index: KnnIndex,
               row_mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``(k x d_v stack, k validity flags)`` for view ``v`` of sample ``i``; unused slots are zero."""
    row_mask = ds.mask[i] if row_mask is None else row_mask
    ids = select_neighbors(i, v, k, row_mask, ds.mask, index)
    out = np.zeros((k, ds.dims[v]))
    valid = np.zeros(k, dtype=np.uint8)
    if ids:
        out[: len(ids)] = ds.views[v][ids]
        valid[: len(ids)] = 1
    return out, valid


def impute_sample(i: int, k: int, ds: MultiViewDataset, index: KnnIndex, row_mask: np.ndarray,
                  use_knn: bool = True) -> tuple[list[np.ndarray], np.ndarray]:
    """All views of one sample: per-view ``k x d_v`` stacks and the ``k x V`` validity matrix.

    With ``use_knn`` off, an available view holds only the sample's own vector
    and a missing view stays empty.
    """
    stacks = []
    mbar = np.zeros((k, ds.n_views), dtype=np.uint8)
    for v in range(ds.n_views):
        if use_knn:
            x, valid = knn_impute(i, v, k, ds, index, row_mask)
        else:
            x = np.zeros((k, ds.dims[v]))
            valid = np.zeros(k, dtype=np.uint8)
            if row_mask[v]:
                x[0] = ds.views[v][i]
                valid[0] = 1
        stacks.append(x)
        mbar[:, v] = valid
    return stacks, mbar


def phi1_schedule(mask: np.ndarray, eps: float = 0.15) -> float:
    """View-dropout probability rising with the squared missing fraction."""
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"eps={eps} outside [0, 1)")
    return eps + (1.0 - eps) * missing_fraction(mask) ** 2


def draw_view_keep(n_views: int, phi1: float, rng: np.random.Generator) -> np.ndarray:
    """Independent keep flags, each view dropped with probability ``phi1``."""
    return (rng.random(n_views) >= phi1).astype(np.uint8)


def view_dropout(m: np.ndarray, phi1: float, rng: np.random.Generator) -> np.ndarray:
    """Drop available views with probability ``phi1``, redrawing until one survives."""
    m = np.asarray(m, dtype=np.uint8)
    if m.sum() < 1:
        raise ValueError("view_dropout needs at least one available view")
    if phi1 <= 0.0:
        return m.copy()
    if phi1 >= 1.0:
        out = np.zeros_like(m)
        out[rng.choice(np.flatnonzero(m))] = 1
        return out
    while True:
        out = m * draw_view_keep(len(m), phi1, rng)
        if out.sum() >= 1:
            return out


def noise_and_dropout(x: np.ndarray, phi2: float, phi3: float, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian noise of scale ``phi2``, then elementwise zeroing with probability ``phi3``."""
    out = x + phi2 * rng.standard_normal(x.shape) if phi2 else x.copy()
    if phi3:
        out = out * (rng.random(x.shape) >= phi3)
    return out


@dataclass
class KidaSample:
    clean: list[np.ndarray]
    aug: list[np.ndarray]
    mbar: np.ndarray
    mbar_aug: np.ndarray
    m: np.ndarray
    m_aug: np.ndarray


def augmented_twin(i: int, ds: MultiViewDataset, index: KnnIndex, k: int, params: AugmentationParams,
                   phi1: float, rng: np.random.Generator, use_knn: bool = True
                   ) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
    """View dropout, imputation under the reduced mask, then noise and random dropout."""
    m_aug = view_dropout(ds.mask[i], phi1, rng)
    aug, mbar_aug = impute_sample(i, k, ds, index, m_aug, use_knn)
    aug = [noise_and_dropout(x, params.phi2, params.phi3, rng) for x in aug]
    return aug, mbar_aug, m_aug


def kida(i: int, ds: MultiViewDataset, index: KnnIndex, k: int, params: AugmentationParams,
         rng: np.random.Generator | None, training: bool, use_knn: bool = True,
         phi1: float | None = None) -> KidaSample:
    m = ds.mask[i].astype(np.uint8)
    clean, mbar = impute_sample(i, k, ds, index, m, use_knn)
    if not training:
        return KidaSample(clean, clean, mbar, mbar, m, m)
    if phi1 is None:
        phi1 = params.phi1 if params.phi1 is not None else phi1_schedule(ds.mask, params.eps)
    aug, mbar_aug, m_aug = augmented_twin(i, ds, index, k, params, phi1, rng, use_knn)
    return KidaSample(clean, aug, mbar, mbar_aug, m, m_aug)


@dataclass
class Batch:
    """Stacked KIDA outputs for a minibatch. Arrays are ``B``-leading."""

    ids: np.ndarray
    x: list[np.ndarray]          # original per-view vectors, B x d_v
    m: np.ndarray                # original masks, B x V
    clean: list[np.ndarray]      # B x k x d_v
    mbar: np.ndarray             # B x k x V
    aug: list[np.ndarray]
    mbar_aug: np.ndarray
    m_aug: np.ndarray


def sample_rng(seed: int, step: int, i: int) -> np.random.Generator:
    return np.random.default_rng((seed, step, i))


def make_batch(ids, ds: MultiViewDataset, index: KnnIndex, k: int, params: AugmentationParams,
               training: bool, seed: int = 0, step: int = 0, use_knn: bool = True,
               phi1: float | None = None) -> Batch:
    """Run KIDA per sample with a per-(seed, step, sample) rng so results ignore batch order."""
    ids = np.asarray(ids, dtype=np.int64)
    if training and phi1 is None:
        phi1 = params.phi1 if params.phi1 is not None else phi1_schedule(ds.mask, params.eps)
    samples = [kida(int(i), ds, index, k, params,
                    sample_rng(seed, step, int(i)) if training else None,
                    training, use_knn, phi1) for i in ids]
    V = ds.n_views
    return Batch(
        ids=ids,
        x=[ds.views[v][ids] for v in range(V)],
        m=ds.mask[ids].astype(np.uint8),
        clean=[np.stack([s.clean[v] for s in samples]) for v in range(V)],
        mbar=np.stack([s.mbar for s in samples]),
        aug=[np.stack([s.aug[v] for s in samples]) for v in range(V)],
        mbar_aug=np.stack([s.mbar_aug for s in samples]),
        m_aug=np.stack([s.m_aug for s in samples]),
    )


def augment_batch(ids, ds: MultiViewDataset, index: KnnIndex, k: int, params: AugmentationParams,
                  phi1: float, seed: int, step: int, use_knn: bool = True
                  ) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
    """Augmented twins only, stacked: ``(per-view B x k x d_v, B x k x V validity, B x V mask)``."""
    twins = [augmented_twin(int(i), ds, index, k, params, phi1, sample_rng(seed, step, int(i)), use_knn)
             for i in ids]
    return ([np.stack([t[0][v] for t in twins]) for v in range(ds.n_views)],
            np.stack([t[1] for t in twins]), np.stack([t[2] for t in twins]))
