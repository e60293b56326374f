"""Multi-view datasets, the missing-view protocol, synthetic data and file formats."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MVDS"
VERSION = 1


class FormatError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


@dataclass
class MultiViewDataset:
    """``V`` feature matrices sharing ``N`` rows, an ``N x V`` availability mask and optional labels.

    Features of missing views are zeroed at construction, so the mask is the
    only source of truth for availability.
    """

    views: list[np.ndarray]
    mask: np.ndarray
    labels: np.ndarray | None = None
    n_clusters: int = 0

    def __post_init__(self):
        if not self.views:
            raise ValueError("dataset needs at least one view")
        self.views = [np.array(x, dtype=np.float64, order="C") for x in self.views]
        for v, x in enumerate(self.views):
            if x.ndim != 2:
                raise ValueError(f"view {v} must be 2-D, got shape {x.shape}")
        n = self.views[0].shape[0]
        if any(x.shape[0] != n for x in self.views):
            raise ValueError(f"views disagree on N: {[x.shape[0] for x in self.views]}")
        mask = np.asarray(self.mask)
        if mask.shape != (n, len(self.views)):
            raise ValueError(f"mask shape {mask.shape} != ({n}, {len(self.views)})")
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("mask must be binary")
        self.mask = mask.astype(np.uint8)
        if n and self.mask.sum(axis=1).min() < 1:
            bad = int(np.argmin(self.mask.sum(axis=1)))
            raise ValueError(f"sample {bad} has no available view")
        for v, x in enumerate(self.views):
            x[self.mask[:, v] == 0] = 0.0
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ValueError(f"labels shape {self.labels.shape} != ({n},)")
            if self.labels.size and self.labels.min() < 0:
                raise ValueError("labels must be non-negative")
            if not self.n_clusters and self.labels.size:
                self.n_clusters = int(self.labels.max()) + 1

    @property
    def n_samples(self) -> int:
        return self.views[0].shape[0]

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def dims(self) -> list[int]:
        return [x.shape[1] for x in self.views]

    def with_mask(self, mask: np.ndarray) -> "MultiViewDataset":
        """Copy with a new mask applied on top of the current features."""
        return MultiViewDataset([x.copy() for x in self.views], mask, self.labels, self.n_clusters)


@dataclass(frozen=True)
class MissingProtocol:
    missing_rate: float = 0.0
    missing_per_sample: int = 1
    seed: int = 0


@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int = 600
    n_views: int = 2
    n_clusters: int = 3
    view_dims: tuple[int, ...] = (40, 40)
    latent_dim: int = 8
    separation: float = 6.0
    noise: float = 2.5
    view_overlap: float = 1.0  # weight a view puts on latent blocks owned by other views
    seed: int = 0

    def dims(self) -> tuple[int, ...]:
        if len(self.view_dims) == 1:
            return tuple(self.view_dims) * self.n_views
        if len(self.view_dims) != self.n_views:
            raise ValueError(f"view_dims has {len(self.view_dims)} entries for {self.n_views} views")
        return tuple(self.view_dims)


def missing_fraction(mask: np.ndarray) -> float:
    mask = np.asarray(mask)
    return 1.0 - float(mask.sum()) / mask.size


def n_incomplete(n: int, missing_rate: float) -> int:
    # tolerance guards products such as 100 * 0.29 landing just below an integer
    return int(math.floor(n * missing_rate + 1e-9))


def generate_missing_mask(n: int, n_views: int, protocol: MissingProtocol) -> np.ndarray:
    """Pick ``floor(N * m_r)`` incomplete samples, then ``m_n`` distinct views of each to drop."""
    if protocol.missing_per_sample >= n_views:
        raise ProtocolError(
            f"missing_per_sample={protocol.missing_per_sample} must be < n_views={n_views}")
    if not 0.0 <= protocol.missing_rate <= 1.0:
        raise ProtocolError(f"missing_rate={protocol.missing_rate} outside [0, 1]")
    if protocol.missing_per_sample < 1:
        raise ProtocolError("missing_per_sample must be >= 1")
    rng = np.random.default_rng(protocol.seed)
    mask = np.ones((n, n_views), dtype=np.uint8)
    rows = rng.choice(n, n_incomplete(n, protocol.missing_rate), replace=False)
    for i in np.sort(rows):
        mask[i, rng.choice(n_views, protocol.missing_per_sample, replace=False)] = 0
    return mask


def synthesize(spec: SyntheticSpec) -> MultiViewDataset:
    """Gaussian clusters in a shared latent space, observed through per-view random linear maps.

    Centers sit on a scaled simplex so every pair is ``separation`` latent
    standard deviations apart. Cluster ids are assigned round-robin and then
    shuffled, so cluster sizes differ by at most one. The latent coordinates
    are split into one block per view; a view reads its own block at full
    weight and the other blocks at ``view_overlap``, so values below 1 make
    the views complementary.
    """
    if spec.n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    if spec.separation < 0:
        raise ValueError("separation must be >= 0")
    dims = spec.dims()
    rng = np.random.default_rng(spec.seed)
    latent_dim = max(spec.latent_dim, spec.n_clusters)
    rotation, _ = np.linalg.qr(rng.standard_normal((latent_dim, latent_dim)))
    centers = np.eye(spec.n_clusters, latent_dim) * (spec.separation / math.sqrt(2.0)) @ rotation
    labels = rng.permutation(np.arange(spec.n_samples) % spec.n_clusters)
    latent = centers[labels] + rng.standard_normal((spec.n_samples, latent_dim))
    if not 0.0 <= spec.view_overlap <= 1.0:
        raise ValueError("view_overlap must lie in [0, 1]")
    blocks = np.array_split(np.arange(latent_dim), spec.n_views)
    views = []
    for v, d in enumerate(dims):
        weight = np.full(latent_dim, spec.view_overlap)
        weight[blocks[v]] = 1.0
        proj = rng.standard_normal((latent_dim, d)) / math.sqrt(latent_dim) * weight[:, None]
        views.append(latent @ proj + spec.noise * rng.standard_normal((spec.n_samples, d)))
    mask = np.ones((spec.n_samples, spec.n_views), dtype=np.uint8)
    return MultiViewDataset(views, mask, labels, spec.n_clusters)


# ---------------------------------------------------------------- binary format

_U32 = struct.Struct("<I")


def dataset_to_bytes(ds: MultiViewDataset) -> bytes:
    parts = [MAGIC, struct.pack("<IIII", VERSION, ds.n_samples, ds.n_views, ds.n_clusters)]
    for x in ds.views:
        parts.append(_U32.pack(x.shape[1]))
        parts.append(np.ascontiguousarray(x, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(ds.mask, dtype=np.uint8).tobytes())
    if ds.labels is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01")
        parts.append(np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what} "
                              f"(need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def dataset_from_bytes(buf: bytes) -> MultiViewDataset:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    n, n_views, n_clusters = r.u32("N"), r.u32("V"), r.u32("d_c")
    if n_views == 0:
        raise FormatError("V must be positive")
    views = []
    for v in range(n_views):
        d = r.u32(f"d_v of view {v}")
        raw = r.take(8 * n * d, f"features of view {v}")
        views.append(np.frombuffer(raw, dtype="<f8").reshape(n, d).astype(np.float64))
    mask = np.frombuffer(r.take(n * n_views, "mask"), dtype=np.uint8).reshape(n, n_views)
    if not np.isin(mask, (0, 1)).all():
        raise FormatError("mask: entries must be 0 or 1")
    if n and mask.sum(axis=1).min() < 1:
        raise FormatError(f"mask: sample {int(np.argmin(mask.sum(axis=1)))} has no available view")
    flag = r.take(1, "labels flag")[0]
    labels = None
    if flag == 1:
        labels = np.frombuffer(r.take(4 * n, "labels"), dtype="<u4").astype(np.int64)
    elif flag != 0:
        raise FormatError(f"labels flag must be 0 or 1, got {flag}")
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after labels")
    return MultiViewDataset(views, mask.copy(), labels, n_clusters)


def save_dataset(ds: MultiViewDataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dataset_to_bytes(ds))
    tmp.replace(path)


def load_dataset(path) -> MultiViewDataset:
    path = Path(path)
    try:
        if path.is_dir():
            return load_csv_dir(path)
        return dataset_from_bytes(path.read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


# ---------------------------------------------------------------- CSV directory


def save_csv_dir(ds: MultiViewDataset, directory) -> None:
    """Headerless ``view_<v>.csv``, ``mask.csv`` and, when labelled, ``labels.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for v, x in enumerate(ds.views):
        np.savetxt(directory / f"view_{v}.csv", x, delimiter=",", fmt="%.17g")
    np.savetxt(directory / "mask.csv", ds.mask, delimiter=",", fmt="%d")
    if ds.labels is not None:
        np.savetxt(directory / "labels.csv", ds.labels.reshape(-1, 1), delimiter=",", fmt="%d")


def load_csv_dir(directory) -> MultiViewDataset:
    directory = Path(directory)
    views = []
    v = 0
    while (directory / f"view_{v}.csv").exists():
        views.append(np.loadtxt(directory / f"view_{v}.csv", delimiter=",", ndmin=2))
        v += 1
    if not views:
        raise FormatError(f"no view_0.csv in {directory}")
    mask = np.loadtxt(directory / "mask.csv", delimiter=",", ndmin=2).astype(np.int64)
    labels = None
    if (directory / "labels.csv").exists():
        labels = np.loadtxt(directory / "labels.csv", delimiter=",", ndmin=1).astype(np.int64)
    try:
        return MultiViewDataset(views, mask, labels)
    except ValueError as exc:
        raise FormatError(str(exc)) from None
