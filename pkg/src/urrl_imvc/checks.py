"""Built-in finite-difference checks on small toy shapes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import MultiViewDataset
from .kida import build_knn_index, make_batch
from .model import decode, encode, init_params, nde_forward, soft_assign, target_distribution, vde_forward
from .train import TrainConfig, batch_losses

THRESHOLDS = {"linear": 1e-6, "nde": 1e-4, "vde": 1e-4, "decoder": 1e-4, "full_loss": 1e-4}


@dataclass
class CheckRow:
    name: str
    error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.error < self.threshold


def toy_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(k=3, d_e=8, n_clusters=2, nde_heads=2, vde_heads=2, phi1=0.4, seed=seed)


def toy_dataset(seed: int = 0) -> MultiViewDataset:
    """Four samples, two views, one missing entry per incomplete sample."""
    rng = np.random.default_rng(seed)
    views = [rng.standard_normal((4, 3)), rng.standard_normal((4, 5))]
    return MultiViewDataset(views, np.array([[1, 1], [1, 0], [0, 1], [1, 1]]))


def check_linear(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    c = rng.standard_normal((5, 3))
    return ad.grad_check(lambda: ad.sum(ad.mul(ad.linear(x, w, b), c)), [x, w, b])


def check_nde(seed: int = 0) -> float:
    mcfg = toy_config(seed).model_config((3, 5))
    params = init_params(mcfg)
    rng = np.random.default_rng(seed + 1)
    x = rng.standard_normal((2, 3, 3))
    valid = np.array([[1, 1, 1], [1, 1, 0]])
    w = rng.standard_normal((2, 6))
    tensors = [params[n] for n in params.names() if n.startswith("nde.0.")]
    return ad.grad_check(lambda: ad.sum(ad.mul(nde_forward(x, valid, params, mcfg, 0), w)), tensors)


def check_vde(seed: int = 0) -> float:
    mcfg = toy_config(seed).model_config((3, 5))
    params = init_params(mcfg)
    rng = np.random.default_rng(seed + 2)
    tokens = [Tensor(rng.standard_normal((3, 6))), Tensor(rng.standard_normal((3, 8)))]
    mask = np.array([[0.0, -10.0], [0.0, 0.0], [-np.inf, 0.0]])
    w = rng.standard_normal((3, mcfg.d_e))
    tensors = [params[n] for n in params.names() if n.startswith("vde.")]
    return ad.grad_check(lambda: ad.sum(ad.mul(vde_forward(tokens, mask, params, mcfg), w)), tensors)


def check_decoder(seed: int = 0) -> float:
    mcfg = toy_config(seed).model_config((3, 5))
    params = init_params(mcfg)
    rng = np.random.default_rng(seed + 3)
    z = Tensor(rng.standard_normal((4, mcfg.d_e)))
    targets = [rng.standard_normal((4, d)) for d in mcfg.dims]

    def loss():
        outs = decode(z, params, mcfg)
        return ad.add(*[ad.sum(ad.square(ad.sub(o, t))) for o, t in zip(outs, targets)])

    return ad.grad_check(loss, [params[n] for n in params.names() if n.startswith("dec.")])


def check_full_loss(seed: int = 0, max_entries: int | None = None) -> float:
    """Stage-2 total loss on the 4-sample toy with the augmentation draw and the target held fixed."""
    cfg = toy_config(seed)
    ds = toy_dataset(seed)
    mcfg = cfg.model_config(ds.dims)
    params = init_params(mcfg)
    params["centers"].data[...] = np.random.default_rng(seed + 4).standard_normal(params["centers"].shape)
    batch = make_batch(np.arange(4), ds, build_knn_index(ds), cfg.k, cfg.augmentation(),
                       training=True, seed=seed, step=0)
    z_aug = encode(batch.aug, batch.mbar_aug, batch.m_aug, params, mcfg)
    p = target_distribution(soft_assign(z_aug, params["centers"]).data)
    return ad.grad_check(lambda: batch_losses(batch, params, mcfg, cfg, joint=True, target=p)["total"],
                         list(params), max_entries=max_entries)


def gradient_suite(seed: int = 0, max_entries: int | None = None) -> list[CheckRow]:
    return [
        CheckRow("linear", check_linear(seed), THRESHOLDS["linear"]),
        CheckRow("nde", check_nde(seed), THRESHOLDS["nde"]),
        CheckRow("vde", check_vde(seed), THRESHOLDS["vde"]),
        CheckRow("decoder", check_decoder(seed), THRESHOLDS["decoder"]),
        CheckRow("full_loss", check_full_loss(seed, max_entries), THRESHOLDS["full_loss"]),
    ]
