"""Plain-text experiment configuration.

A config file holds ``key = value`` lines; ``#`` starts a comment. Every key
has a documented default (see :data:`KEYS`) and unknown keys are rejected.
Values resolve as: built-in default, then config file, then command-line flag.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import MissingProtocol, SyntheticSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none", "auto") else int(text)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _fmt(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class Key:
    name: str
    parse: object
    default: object
    doc: str


KEYS: dict[str, Key] = {k.name: k for k in [
    # training schedule and optimizer
    Key("epochs_pretrain", int, 100, "stage-1 epochs (reconstruction + robustness)"),
    Key("epochs_joint", int, 100, "stage-2 epochs with the clustering loss; 0 skips stage 2"),
    Key("batch_size", int, 64, "minibatch size"),
    Key("lr", float, 3e-4, "learning rate"),
    Key("weight_decay", float, 4e-5, "decoupled weight decay"),
    Key("lambda1", float, 1e-3, "weight of the augmentation-consistency loss"),
    Key("lambda2", float, 0.1, "weight of the clustering loss in stage 2"),
    # model
    Key("gamma", float, -10.0, "view-mask value for imputed views (negative)"),
    Key("k", int, 4, "neighbors per view, self included for present views"),
    Key("d_e", int, 256, "embedding width"),
    Key("nde_layers", int, 1, "neighbor encoder layers"),
    Key("nde_heads", int, 4, "neighbor encoder heads; must divide d_v + k"),
    Key("vde_layers", int, 1, "view encoder layers"),
    Key("vde_heads", int, 4, "view encoder heads; must divide d_e"),
    Key("ff_mult", int, 2, "transformer feed-forward width multiplier"),
    Key("ffn_hidden", _opt_int, None, "hidden width of the per-view projection FFN (auto: d_e)"),
    Key("dec_hidden", _opt_int, None, "hidden width of the decoders (auto: d_e)"),
    Key("nde_output", str, "first", "neighbor encoder output: first | nth:<n> | mean | concat"),
    Key("vde_output", str, "mean", "view encoder output: first | nth:<n> | mean | concat"),
    Key("center_init", str, "ward", "center initialization: ward | kmeans++"),
    Key("center_cap", int, 10_000, "subsample size cap for center initialization"),
    # augmentation
    Key("phi1", _opt_float, None, "view-dropout probability (auto: schedule from missing fraction)"),
    Key("phi2", float, 0.05, "Gaussian noise scale"),
    Key("phi3", float, 0.05, "elementwise dropout probability"),
    Key("eps", float, 0.15, "floor of the view-dropout schedule"),
    # module toggles
    Key("use_knn", _bool, True, "cross-view KNN imputation"),
    Key("use_aug", _bool, True, "augmented twin and consistency loss"),
    Key("use_cdpe_tam", _bool, True, "distance encoding and three-level view mask"),
    Key("use_cluster_module", _bool, True, "clustering head and stage 2"),
    # missing-view protocol
    Key("missing_rate", _opt_float, None, "fraction of incomplete samples (auto: keep the dataset's mask)"),
    Key("miss_per_sample", int, 1, "views dropped per incomplete sample"),
    Key("missing_rates", _floats, (0.0, 0.25, 0.5, 0.75), "sweep grid of missing rates"),
    # synthetic data
    Key("n_samples", int, 600, "synthetic samples"),
    Key("n_views", int, 2, "synthetic views"),
    Key("n_clusters", int, 3, "clusters (synthetic generator and clustering head)"),
    Key("view_dims", _ints, (40, 40), "per-view feature widths (one value repeats)"),
    Key("latent_dim", int, 8, "shared latent width of the generator"),
    Key("separation", float, 6.0, "distance between latent cluster centers"),
    Key("noise", float, 2.5, "per-view observation noise scale"),
    Key("view_overlap", float, 1.0, "weight a view puts on latent blocks owned by other views"),
    # repeats
    Key("seed", int, 0, "base seed for synth and mask, first training seed"),
    Key("repeats", int, 1, "training repeats; seeds run seed, seed+1, ..."),
    Key("seeds", _ints, (), "explicit seed list (overrides seed/repeats; length must match repeats if both set)"),
]}


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: {k: v.default for k, v in KEYS.items()})
    explicit: set = field(default_factory=set)

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, raw, source: str = "") -> None:
        if key not in KEYS:
            raise ConfigError(f"{source}unknown key {key!r}")
        try:
            value = KEYS[key].parse(raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"{source}bad value for {key}: {exc}") from None
        self.values[key] = value
        self.explicit.add(key)

    def seed_list(self) -> list[int]:
        seeds = list(self["seeds"])
        if seeds:
            if "repeats" in self.explicit and self["repeats"] != len(seeds):
                raise ConfigError(f"repeats={self['repeats']} but {len(seeds)} seeds listed")
            return seeds
        if self["repeats"] < 1:
            raise ConfigError("repeats must be >= 1")
        return [self["seed"] + r for r in range(self["repeats"])]

    def train_config(self, seed: int) -> TrainConfig:
        v = self.values
        kw = {f.name: v[f.name] for f in fields(TrainConfig) if f.name in v}
        kw.update(e_pretrain=v["epochs_pretrain"], e_joint=v["epochs_joint"], seed=seed)
        return TrainConfig(**kw)

    def synthetic_spec(self) -> SyntheticSpec:
        v = self.values
        return SyntheticSpec(n_samples=v["n_samples"], n_views=v["n_views"], n_clusters=v["n_clusters"],
                             view_dims=tuple(v["view_dims"]), latent_dim=v["latent_dim"],
                             separation=v["separation"], noise=v["noise"],
                             view_overlap=v["view_overlap"], seed=v["seed"])

    def protocol(self, seed: int, missing_rate: float | None = None) -> MissingProtocol:
        rate = self["missing_rate"] if missing_rate is None else missing_rate
        return MissingProtocol(rate or 0.0, self["miss_per_sample"], seed)

    def echo(self) -> dict[str, str]:
        """Every effective key with its value rendered as in a config file."""
        return {k: _fmt(self.values[k]) for k in KEYS}


def parse_config_text(text: str, cfg: ExperimentConfig | None = None, origin: str = "<config>") -> ExperimentConfig:
    cfg = cfg or ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{origin}:{lineno}: expected key = value, got {body!r}")
        key, value = (part.strip() for part in body.split("=", 1))
        cfg.set(key.replace("-", "_"), value, f"{origin}:{lineno}: ")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config_text(path.read_text(), origin=str(path))


def default_config_text() -> str:
    """A config file listing every key at its default, with its description."""
    lines = []
    for key in KEYS.values():
        lines.append(f"# {key.doc}")
        lines.append(f"{key.name} = {_fmt(key.default)}")
    return "\n".join(lines) + "\n"
