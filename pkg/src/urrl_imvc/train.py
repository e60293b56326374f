"""Losses, optimizer and the two-stage training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cluster_init import init_centers
from .data import MultiViewDataset
from .kida import (AugmentationParams, Batch, KnnIndex, augment_batch, build_knn_index, make_batch,
                   phi1_schedule)
from .model import ModelConfig, Params, decode, encode, init_params, soft_assign, target_distribution

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    e_pretrain: int = 100
    e_joint: int = 100
    batch_size: int = 64
    lr: float = 3e-4
    weight_decay: float = 4e-5
    lambda1: float = 1e-3
    lambda2: float = 0.1
    gamma: float = -10.0
    k: int = 4
    phi1: float | None = None
    phi2: float = 0.05
    phi3: float = 0.05
    eps: float = 0.15
    d_e: int = 256
    n_clusters: int = 3
    nde_layers: int = 1
    nde_heads: int = 4
    vde_layers: int = 1
    vde_heads: int = 4
    ff_mult: int = 2
    ffn_hidden: int | None = None
    dec_hidden: int | None = None
    nde_output: str = "first"
    vde_output: str = "mean"
    center_init: str = "ward"
    center_cap: int = 10_000
    use_knn: bool = True
    use_aug: bool = True
    use_cdpe_tam: bool = True
    use_cluster_module: bool = True
    seed: int = 0

    def model_config(self, dims) -> ModelConfig:
        return ModelConfig(
            dims=tuple(dims), k=self.k, d_e=self.d_e, n_clusters=self.n_clusters,
            nde_layers=self.nde_layers, nde_heads=self.nde_heads,
            vde_layers=self.vde_layers, vde_heads=self.vde_heads, ff_mult=self.ff_mult,
            ffn_hidden=self.ffn_hidden, dec_hidden=self.dec_hidden, gamma=self.gamma,
            use_cdpe=self.use_cdpe_tam, use_tam=self.use_cdpe_tam, use_knn=self.use_knn,
            nde_output=self.nde_output, vde_output=self.vde_output, seed=self.seed,
        )

    def augmentation(self) -> AugmentationParams:
        return AugmentationParams(phi1=self.phi1, phi2=self.phi2, phi3=self.phi3, eps=self.eps)


# ---------------------------------------------------------------- losses


def loss_rec(x: list[np.ndarray], xhat: list[Tensor], m: np.ndarray) -> Tensor:
    """Squared reconstruction error over available views, summed per sample and averaged over the batch."""
    B = m.shape[0]
    total = None
    for v, (target, pred) in enumerate(zip(x, xhat)):
        err = ad.square(ad.sub(pred, target))
        term = ad.sum(ad.mul(err, m[:, v:v + 1].astype(np.float64)))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / B)


def loss_aug(z: Tensor, z_aug: Tensor) -> Tensor:
    """In-batch cross-entropy on negative Euclidean distances between augmented and clean embeddings."""
    B, d = z.shape
    diff = ad.sub(ad.reshape(z_aug, (B, 1, d)), ad.reshape(z, (1, B, d)))
    dist = ad.l2_norm(diff)
    idx = np.arange(B)
    per_sample = ad.add(dist[idx, idx], ad.logsumexp(ad.scale(dist, -1.0), axis=1))
    return ad.mean(per_sample)


def loss_clu(q: Tensor, p) -> Tensor:
    """KL(p || q) summed over the batch; ``p`` is detached and acts as a constant target."""
    p = np.array(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy_term = float(np.where(p > 0, p * np.log(p), 0.0).sum())
    cross = ad.sum(ad.mul(p, ad.log(q)))
    return ad.sub(entropy_term, cross)


def total_loss(l_rec: Tensor, l_aug: Tensor | None, l_clu: Tensor | None,
               lambda1: float, lambda2: float) -> Tensor:
    out = l_rec
    if l_aug is not None and lambda1:
        out = ad.add(out, ad.scale(l_aug, lambda1))
    if l_clu is not None and lambda2:
        out = ad.add(out, ad.scale(l_clu, lambda2))
    return out


# ---------------------------------------------------------------- optimizer


class AdamW:
    """Adam moments with decoupled weight decay."""

    def __init__(self, params: list[Tensor], lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


# ---------------------------------------------------------------- training loop


@dataclass
class FitResult:
    params: Params
    model_config: ModelConfig
    history: list[dict] = field(default_factory=list)
    stage2_skipped: bool = False
    phi1: float = 0.0


def batch_losses(batch: Batch, params: Params, mcfg: ModelConfig, cfg: TrainConfig,
                 joint: bool, target: np.ndarray | None = None) -> dict[str, Tensor | None]:
    """Forward pass of one minibatch; returns the individual loss terms and the total.

    ``target`` overrides the sharpened distribution computed from the batch,
    which lets finite-difference checks hold it fixed.
    """
    z = encode(batch.clean, batch.mbar, batch.m, params, mcfg)
    z_aug = encode(batch.aug, batch.mbar_aug, batch.m_aug, params, mcfg) if cfg.use_aug else z
    xhat = decode(z_aug, params, mcfg)
    l_rec = loss_rec(batch.x, xhat, batch.m)
    l_aug = loss_aug(z, z_aug) if cfg.use_aug and cfg.lambda1 else None
    l_clu = None
    if joint:
        q = soft_assign(z_aug, params["centers"])
        l_clu = loss_clu(q, target_distribution(q.data) if target is None else target)
    total = total_loss(l_rec, l_aug, l_clu, cfg.lambda1, cfg.lambda2 if joint else 0.0)
    return {"l_rec": l_rec, "l_aug": l_aug, "l_clu": l_clu, "total": total}


def _check_finite(losses: dict, epoch: int, it: int) -> None:
    for name, t in losses.items():
        if t is not None and not math.isfinite(t.item()):
            raise NonFiniteLossError(f"non-finite {name}={t.item()} at epoch {epoch}, iteration {it}")


def embed(ds: MultiViewDataset, params: Params, mcfg: ModelConfig, index: KnnIndex | None = None,
          batch_size: int = 64) -> np.ndarray:
    """Clean (un-augmented) embeddings of every sample, ``N x d_e``."""
    index = index or build_knn_index(ds, max_neighbors=mcfg.k)
    aug = AugmentationParams()
    out = []
    for start in range(0, ds.n_samples, batch_size):
        ids = np.arange(start, min(start + batch_size, ds.n_samples))
        batch = make_batch(ids, ds, index, mcfg.k, aug, training=False, use_knn=mcfg.use_knn)
        out.append(encode(batch.clean, batch.mbar, batch.m, params, mcfg).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, mcfg.d_e))


def predict(ds: MultiViewDataset, params: Params, mcfg: ModelConfig, index: KnnIndex | None = None,
            batch_size: int = 64) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hard labels (argmax, lowest index on ties), soft memberships and embeddings."""
    z = embed(ds, params, mcfg, index, batch_size)
    q = soft_assign(z, params["centers"].data).data
    return np.argmax(q, axis=1), q, z


def fit(ds: MultiViewDataset, cfg: TrainConfig, index: KnnIndex | None = None,
        on_epoch=None) -> FitResult:
    """Stage 1 on reconstruction + robustness, center initialization, then stage 2 with the clustering loss."""
    mcfg = cfg.model_config(ds.dims)
    params = init_params(mcfg)
    index = index or build_knn_index(ds, max_neighbors=cfg.k)
    aug = cfg.augmentation()
    phi1 = aug.phi1 if aug.phi1 is not None else phi1_schedule(ds.mask, aug.eps)
    e_joint = cfg.e_joint if cfg.use_cluster_module else 0
    result = FitResult(params, mcfg, stage2_skipped=e_joint == 0, phi1=phi1)
    if cfg.e_pretrain == 0 and e_joint == 0:
        return result

    clean_cache = _clean_cache(ds, index, cfg)
    n = ds.n_samples
    step = 0
    # one optimizer throughout: the centers stay at zero with zero gradients until stage 2
    opt = AdamW(list(params), cfg.lr, cfg.weight_decay)

    def run_epoch(epoch: int, joint: bool) -> None:
        nonlocal step
        order = np.random.default_rng((cfg.seed, 7919, epoch)).permutation(n)
        for it, start in enumerate(range(0, n, cfg.batch_size)):
            ids = order[start:start + cfg.batch_size]
            batch = _assemble(ids, ds, index, cfg, aug, phi1, clean_cache, step)
            with ad.tape() as tp:
                losses = batch_losses(batch, params, mcfg, cfg, joint)
                _check_finite(losses, epoch, it)
                ad.backward(losses["total"], opt.params, tp)
            opt.step()
            step += 1
            result.history.append({
                "epoch": epoch, "iter": it,
                **{k: (v.item() if v is not None else 0.0) for k, v in losses.items()},
            })
        if on_epoch is not None:
            on_epoch(epoch, result)

    for epoch in range(cfg.e_pretrain):
        run_epoch(epoch, joint=False)

    z = embed(ds, params, mcfg, index, cfg.batch_size)
    params["centers"].data[...] = init_centers(z, cfg.n_clusters, cfg.center_init, cfg.center_cap, cfg.seed)

    for epoch in range(cfg.e_pretrain, cfg.e_pretrain + e_joint):
        run_epoch(epoch, joint=True)
    return result


def _clean_cache(ds: MultiViewDataset, index: KnnIndex, cfg: TrainConfig) -> Batch:
    ids = np.arange(ds.n_samples)
    return make_batch(ids, ds, index, cfg.k, cfg.augmentation(), training=False, use_knn=cfg.use_knn)


def _assemble(ids, ds, index, cfg: TrainConfig, aug: AugmentationParams, phi1: float,
              cache: Batch, step: int) -> Batch:
    clean = [c[ids] for c in cache.clean]
    mbar = cache.mbar[ids]
    if cfg.use_aug:
        aug_x, mbar_aug, m_aug = augment_batch(ids, ds, index, cfg.k, aug, phi1, cfg.seed, step,
                                               cfg.use_knn)
    else:
        aug_x, mbar_aug, m_aug = clean, mbar, cache.m[ids]
    return Batch(ids=np.asarray(ids), x=[x[ids] for x in ds.views], m=cache.m[ids],
                 clean=clean, mbar=mbar, aug=aug_x, mbar_aug=mbar_aug, m_aug=m_aug)
