"""Fusion auto-encoder: neighbor encoders, view encoder with three-level masking, decoders, DEC head."""
from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_INF = -np.inf


class ContractError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    dims: tuple[int, ...]
    k: int = 4
    d_e: int = 256
    n_clusters: int = 3
    nde_layers: int = 1
    nde_heads: int = 4
    vde_layers: int = 1
    vde_heads: int = 4
    ff_mult: int = 2
    ffn_hidden: int | None = None   # VDE projection FFN; defaults to d_e
    dec_hidden: int | None = None   # decoder; defaults to d_e
    gamma: float = -10.0
    use_cdpe: bool = True
    use_tam: bool = True
    use_knn: bool = True
    nde_output: str = "first"       # first | nth:<n> | mean | concat
    vde_output: str = "mean"
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.gamma >= 0:
            raise ValueError(f"gamma must be negative, got {self.gamma}")
        if self.n_clusters < 2:
            raise ValueError("n_clusters must be >= 2")
        for d in self.dims:
            if (d + self.k) % self.nde_heads:
                raise ValueError(f"NDE width d_v + k = {d + self.k} not divisible by {self.nde_heads} heads")
        if self.d_e % self.vde_heads:
            raise ValueError(f"d_e={self.d_e} not divisible by {self.vde_heads} heads")
        for choice in (self.nde_output, self.vde_output):
            _parse_output_choice(choice)

    @property
    def n_views(self) -> int:
        return len(self.dims)


def _parse_output_choice(choice: str) -> tuple[str, int]:
    if choice in ("first", "mean", "concat"):
        return choice, 0
    if choice.startswith("nth:"):
        n = int(choice[4:])
        if n < 1:
            raise ValueError(f"output choice {choice!r}: n must be >= 1")
        return "nth", n - 1
    raise ValueError(f"unknown output choice {choice!r}")


class Params:
    """Named parameter tensors in deterministic insertion order."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self):
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy_values(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for n, t in self.tensors.items():
            t.data[...] = values[n]


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


def _add_linear(params: Params, rng, name: str, n_in: int, n_out: int) -> None:
    bound = 1.0 / math.sqrt(n_in)
    params.add(f"{name}.w", _uniform(rng, (n_in, n_out), bound))
    params.add(f"{name}.b", _uniform(rng, (n_out,), bound))


def _add_block(params: Params, rng, name: str, width: int, ff_mult: int) -> None:
    xavier = math.sqrt(6.0 / (2 * width))
    params.add(f"{name}.ln1.g", np.ones(width))
    params.add(f"{name}.ln1.b", np.zeros(width))
    for proj in ("q", "k", "v", "o"):
        params.add(f"{name}.attn.w{proj}", _uniform(rng, (width, width), xavier))
        params.add(f"{name}.attn.b{proj}", np.zeros(width))
    params.add(f"{name}.ln2.g", np.ones(width))
    params.add(f"{name}.ln2.b", np.zeros(width))
    _add_linear(params, rng, f"{name}.ff1", width, ff_mult * width)
    _add_linear(params, rng, f"{name}.ff2", ff_mult * width, width)


def init_params(cfg: ModelConfig) -> Params:
    rng = np.random.default_rng(cfg.seed)
    p = Params()
    ffn_hidden = cfg.ffn_hidden or cfg.d_e
    dec_hidden = cfg.dec_hidden or cfg.d_e
    nde_kind, _ = _parse_output_choice(cfg.nde_output)
    vde_kind, _ = _parse_output_choice(cfg.vde_output)
    for v, d in enumerate(cfg.dims):
        w = d + cfg.k
        for layer in range(cfg.nde_layers):
            _add_block(p, rng, f"nde.{v}.layer{layer}", w, cfg.ff_mult)
        if nde_kind == "concat":
            _add_linear(p, rng, f"nde.{v}.out", cfg.k * w, w)
    for v, d in enumerate(cfg.dims):
        w = d + cfg.k
        _add_linear(p, rng, f"vde.ffn.{v}.fc1", w, ffn_hidden)
        p.add(f"vde.ffn.{v}.act1", np.array(0.25))
        _add_linear(p, rng, f"vde.ffn.{v}.fc2", ffn_hidden, ffn_hidden)
        p.add(f"vde.ffn.{v}.act2", np.array(0.25))
        _add_linear(p, rng, f"vde.ffn.{v}.fc3", ffn_hidden, cfg.d_e)
    for layer in range(cfg.vde_layers):
        _add_block(p, rng, f"vde.layer{layer}", cfg.d_e, cfg.ff_mult)
    if vde_kind == "concat":
        _add_linear(p, rng, "vde.out", cfg.n_views * cfg.d_e, cfg.d_e)
    for v, d in enumerate(cfg.dims):
        sizes = [cfg.d_e, dec_hidden, dec_hidden, dec_hidden, d]
        for layer in range(4):
            _add_linear(p, rng, f"dec.{v}.fc{layer + 1}", sizes[layer], sizes[layer + 1])
            if layer < 3:
                p.add(f"dec.{v}.act{layer + 1}", np.array(0.25))
    p.add("centers", np.zeros((cfg.n_clusters, cfg.d_e)))
    return p


# ---------------------------------------------------------------- building blocks


def cdpe(xbar: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Append the pairwise cosine-distance block to each neighbor stack.

    ``xbar`` is ``(..., k, d)``; the result is ``(..., k, d + k)``. Distance
    rows and columns of invalid (padding) rows are zeroed. Pairs involving a
    zero-norm row sit at the maximal distance 2.
    """
    xbar = np.asarray(xbar, dtype=np.float64)
    sq = (xbar * xbar).sum(axis=-1, keepdims=True)
    zero = sq == 0
    denom = np.sqrt(sq * np.swapaxes(sq, -1, -2))
    # dot / sqrt(|a|^2 |b|^2) is exactly 1 for a row paired with an identical row
    cos = (xbar @ np.swapaxes(xbar, -1, -2)) / np.where(denom > 0, denom, 1.0)
    dist = np.clip(1.0 - cos, 0.0, 2.0)
    dist = np.where(zero | np.swapaxes(zero, -1, -2), 2.0, dist)
    k = xbar.shape[-2]
    dist[..., np.arange(k), np.arange(k)] = 0.0
    if valid is not None:
        flags = np.asarray(valid, dtype=np.float64)
        dist = dist * flags[..., :, None] * flags[..., None, :]
    return np.concatenate([xbar, dist], axis=-1)


def key_mask(valid: np.ndarray) -> np.ndarray:
    """Additive ``(B, 1, 1, T)`` attention mask: 0 for valid keys, -inf otherwise."""
    valid = np.asarray(valid)
    return np.where(valid > 0, 0.0, NEG_INF)[:, None, None, :]


def attention(x: Tensor, params: Params, name: str, heads: int, mask: np.ndarray | None) -> Tensor:
    B, T, w = x.shape
    dh = w // heads

    def split(t):
        return ad.permute(ad.reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

    q = split(ad.linear(x, params[f"{name}.wq"], params[f"{name}.bq"]))
    k = split(ad.linear(x, params[f"{name}.wk"], params[f"{name}.bk"]))
    v = split(ad.linear(x, params[f"{name}.wv"], params[f"{name}.bv"]))
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dh))
    weights = ad.masked_softmax(scores, mask)
    ctx = ad.reshape(ad.permute(ad.matmul(weights, v), (0, 2, 1, 3)), (B, T, w))
    return ad.linear(ctx, params[f"{name}.wo"], params[f"{name}.bo"])


def encoder_block(x: Tensor, params: Params, name: str, heads: int, mask: np.ndarray | None) -> Tensor:
    """Pre-norm transformer encoder layer without dropout."""
    h = ad.layer_norm(x, params[f"{name}.ln1.g"], params[f"{name}.ln1.b"])
    x = ad.add(x, attention(h, params, f"{name}.attn", heads, mask))
    h = ad.layer_norm(x, params[f"{name}.ln2.g"], params[f"{name}.ln2.b"])
    h = ad.relu(ad.linear(h, params[f"{name}.ff1.w"], params[f"{name}.ff1.b"]))
    return ad.add(x, ad.linear(h, params[f"{name}.ff2.w"], params[f"{name}.ff2.b"]))


def _select_output(seq: Tensor, choice: str, weights: np.ndarray, params: Params, name: str) -> Tensor:
    kind, n = _parse_output_choice(choice)
    if kind == "first":
        return seq[:, 0, :]
    if kind == "nth":
        return seq[:, n, :]
    if kind == "mean":
        w = weights / weights.sum(axis=1, keepdims=True)
        return ad.sum(ad.mul(seq, w[:, :, None]), axis=1)
    B, T, width = seq.shape
    flat = ad.reshape(ad.mul(seq, weights[:, :, None]), (B, T * width))
    return ad.linear(flat, params[f"{name}.w"], params[f"{name}.b"])


def nde_forward(xbar: np.ndarray, valid: np.ndarray, params: Params, cfg: ModelConfig, v: int) -> Tensor:
    """Neighbor encoder for view ``v`` on a batch of ``(b, k, d_v)`` stacks with ``(b, k)`` validity.

    Every stack must hold at least one valid row.
    """
    valid = np.asarray(valid)
    if (valid.sum(axis=1) == 0).any():
        raise ContractError(f"view {v}: neighbor stack with no valid row reached the neighbor encoder")
    if cfg.use_cdpe:
        seq = cdpe(xbar, valid)
    else:
        seq = np.concatenate([xbar, np.zeros(xbar.shape[:-1] + (xbar.shape[-2],))], axis=-1)
    h = Tensor(seq)
    mask = key_mask(valid)
    for layer in range(cfg.nde_layers):
        h = encoder_block(h, params, f"nde.{v}.layer{layer}", cfg.nde_heads, mask)
    return _select_output(h, cfg.nde_output, valid.astype(np.float64), params, f"nde.{v}.out")


def tam(mbar: np.ndarray, m: np.ndarray, gamma: float) -> np.ndarray:
    """Per-view additive mask: 0 available, ``gamma`` imputed, -inf empty. Broadcasts over a batch."""
    if gamma >= 0:
        raise ValueError("gamma must be negative")
    m = np.asarray(m)
    imputed = np.asarray(mbar).sum(axis=-2) > 0
    return np.where(m > 0, 0.0, np.where(imputed, gamma, NEG_INF))


def vde_ffn(x: Tensor, params: Params, v: int) -> Tensor:
    name = f"vde.ffn.{v}"
    h = ad.prelu(ad.linear(x, params[f"{name}.fc1.w"], params[f"{name}.fc1.b"]), params[f"{name}.act1"])
    h = ad.prelu(ad.linear(h, params[f"{name}.fc2.w"], params[f"{name}.fc2.b"]), params[f"{name}.act2"])
    return ad.linear(h, params[f"{name}.fc3.w"], params[f"{name}.fc3.b"])


def vde_forward(nde_out: list[Tensor], view_mask: np.ndarray, params: Params, cfg: ModelConfig) -> Tensor:
    """Fuse per-view neighbor-encoder outputs into ``(B, d_e)`` embeddings.

    ``view_mask`` is the ``(B, V)`` three-level mask. Views at -inf are zeroed,
    excluded from the keys and left out of the average, so they are inert.
    """
    view_mask = np.asarray(view_mask, dtype=np.float64)
    present = np.isfinite(view_mask)
    if (present.sum(axis=1) == 0).any():
        raise ContractError("sample with every view at -inf reached the view encoder")
    tokens = [ad.mul(vde_ffn(x, params, v), present[:, v:v + 1].astype(np.float64))
              for v, x in enumerate(nde_out)]
    h = ad.stack(tokens, axis=1)
    mask = view_mask[:, None, None, :]
    for layer in range(cfg.vde_layers):
        h = encoder_block(h, params, f"vde.layer{layer}", cfg.vde_heads, mask)
    return _select_output(h, cfg.vde_output, present.astype(np.float64), params, "vde.out")


def encode(xbar: list[np.ndarray], mbar: np.ndarray, m: np.ndarray, params: Params, cfg: ModelConfig) -> Tensor:
    """Batched encoder: ``xbar[v]`` is ``(B, k, d_v)``, ``mbar`` ``(B, k, V)``, ``m`` ``(B, V)``."""
    B = m.shape[0]
    outs = []
    for v in range(cfg.n_views):
        valid = mbar[:, :, v]
        rows = np.flatnonzero(valid.sum(axis=1) > 0)
        width = cfg.dims[v] + cfg.k
        if rows.size == 0:
            outs.append(Tensor(np.zeros((B, width))))
            continue
        out = nde_forward(xbar[v][rows], valid[rows], params, cfg, v)
        outs.append(out if rows.size == B else ad.scatter_rows(out, rows, B))
    view_mask = tam(mbar, m, cfg.gamma)
    if not cfg.use_tam:
        view_mask = np.where(np.isfinite(view_mask), 0.0, NEG_INF)
    return vde_forward(outs, view_mask, params, cfg)


def decode(z: Tensor, params: Params, cfg: ModelConfig) -> list[Tensor]:
    outs = []
    for v in range(cfg.n_views):
        h = z
        for layer in range(1, 5):
            h = ad.linear(h, params[f"dec.{v}.fc{layer}.w"], params[f"dec.{v}.fc{layer}.b"])
            if layer < 4:
                h = ad.prelu(h, params[f"dec.{v}.act{layer}"])
        outs.append(h)
    return outs


def soft_assign(z, centers) -> Tensor:
    """Student-t (one degree of freedom) memberships of embeddings to centers."""
    z, centers = ad.as_tensor(z), ad.as_tensor(centers)
    diff = ad.sub(ad.reshape(z, (z.shape[0], 1, z.shape[1])), centers)
    kernel = ad.div(1.0, ad.add(1.0, ad.sum(ad.square(diff), axis=-1)))
    return ad.div(kernel, ad.sum(kernel, axis=1, keepdims=True))


def target_distribution(q: np.ndarray) -> np.ndarray:
    """Sharpened targets ``q^2 / f`` renormalized per row, with ``f`` the batch soft cluster sizes.

    Clusters with zero soft size are dropped from the normalization.
    """
    q = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=np.float64)
    f = q.sum(axis=0)
    empty = f <= 0
    if empty.any():
        warnings.warn(f"target distribution: {int(empty.sum())} cluster(s) with zero soft size",
                      RuntimeWarning, stacklevel=2)
    weight = np.where(empty, 0.0, q * q / np.where(empty, 1.0, f))
    return weight / weight.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"URRL"
CKPT_VERSION = 1


def save_checkpoint(path, params: Params, cfg: ModelConfig) -> None:
    meta = json.dumps(asdict(cfg), sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta)), meta, struct.pack("<I", len(params))]
    for name, t in params.tensors.items():
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[Params, ModelConfig]:
    from .data import FormatError, _Reader

    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != CKPT_MAGIC:
        raise FormatError("not a URRL checkpoint")
    version = r.u32("version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    meta = json.loads(r.take(r.u32("config length"), "config").decode())
    cfg = ModelConfig(**meta)
    params = init_params(cfg)
    count = r.u32("tensor count")
    if count != len(params):
        raise FormatError(f"checkpoint holds {count} tensors, model expects {len(params)}")
    for _ in range(count):
        name = r.take(r.u32("name length"), "name").decode()
        rank = r.u32(f"{name} rank")
        shape = tuple(r.u32(f"{name} dim") for _ in range(rank))
        if name not in params.tensors or params[name].shape != shape:
            raise FormatError(f"unexpected tensor {name} with shape {shape}")
        n = int(np.prod(shape)) if shape else 1
        params[name].data[...] = np.frombuffer(r.take(8 * n, name), dtype="<f8").reshape(shape)
    return params, cfg
