"""Single runs, repeated runs and missing-rate sweeps, plus their on-disk artifacts."""
from __future__ import annotations

import csv
import io
import json
import os
import struct
import subprocess
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .data import MultiViewDataset, generate_missing_mask
from .metrics import evaluate
from .model import save_checkpoint
from .train import FitResult, fit, predict

HISTORY_COLUMNS = ("epoch", "iter", "l_rec", "l_aug", "l_clu", "total")
SWEEP_COLUMNS = ("kind", "missing_rate", "seed", "acc", "nmi", "ari")
METRICS = ("acc", "nmi", "ari")
EMBED_MAGIC = b"EMBD"


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data.encode() if isinstance(data, str) else data)
    os.replace(tmp, path)


def build_id() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def apply_protocol(ds: MultiViewDataset, cfg: ExperimentConfig, seed: int,
                   missing_rate: float | None = None) -> MultiViewDataset:
    """Replace the mask with a protocol mask when a missing rate is requested."""
    rate = cfg["missing_rate"] if missing_rate is None else missing_rate
    if rate is None:
        return ds
    if not ds.mask.all():
        raise ValueError("a missing rate can only be applied to a dataset with every view present")
    return ds.with_mask(generate_missing_mask(ds.n_samples, ds.n_views, cfg.protocol(seed, rate)))


@dataclass
class RunResult:
    seed: int
    metrics: dict[str, float]
    fit: FitResult
    labels: np.ndarray
    seconds: float


def run_once(ds: MultiViewDataset, cfg: ExperimentConfig, seed: int,
             missing_rate: float | None = None) -> RunResult:
    data = apply_protocol(ds, cfg, seed, missing_rate)
    tcfg = cfg.train_config(seed)
    if "n_clusters" not in cfg.explicit and data.n_clusters >= 2:
        tcfg = replace(tcfg, n_clusters=data.n_clusters)
    start = time.perf_counter()
    result = fit(data, tcfg)
    labels, _, _ = predict(data, result.params, result.model_config)
    seconds = time.perf_counter() - start
    metrics = evaluate(data.labels, labels) if data.labels is not None else {}
    return RunResult(seed, metrics, result, labels, seconds)


def summarize(rows: list[dict[str, float]]) -> dict[str, dict[str, float]]:
    out = {}
    for m in METRICS:
        vals = np.array([r[m] for r in rows if m in r])
        if vals.size:
            out[m] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    for row in history:
        writer.writerow([row["epoch"], row["iter"], *(repr(float(row[c])) for c in HISTORY_COLUMNS[2:])])
    return buf.getvalue()


@dataclass
class TrainArtifacts:
    report: dict
    runs: list[RunResult] = field(default_factory=list)


def train_experiment(ds: MultiViewDataset, cfg: ExperimentConfig, out_dir) -> TrainArtifacts:
    """Train once per seed; write checkpoints, loss CSVs, ``report.json`` and ``timing.json``.

    The report holds only deterministic content so two identical invocations
    produce identical bytes; wall-clock times go to ``timing.json``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = []
    for seed in cfg.seed_list():
        run = run_once(ds, cfg, seed)
        save_checkpoint(out_dir / f"model_seed{seed}.ckpt", run.fit.params, run.fit.model_config)
        atomic_write(out_dir / f"losses_seed{seed}.csv", history_csv(run.fit.history))
        atomic_write(out_dir / f"labels_seed{seed}.csv", "".join(f"{int(v)}\n" for v in run.labels))
        runs.append(run)
    per_seed = [{"seed": r.seed, **r.metrics, "stage2_skipped": r.fit.stage2_skipped,
                 "phi1": r.fit.phi1} for r in runs]
    report = {
        "build": build_id(),
        "config": cfg.echo(),
        "seeds": [r.seed for r in runs],
        "runs": per_seed,
        "summary": summarize([r.metrics for r in runs]),
        "notes": ["stage 2 skipped (clustering module off or epochs_joint = 0)"]
        if any(r.fit.stage2_skipped for r in runs) else [],
    }
    atomic_write(out_dir / "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    timing = {"runs": [{"seed": r.seed, "seconds": r.seconds} for r in runs]}
    atomic_write(out_dir / "timing.json", json.dumps(timing, indent=2) + "\n")
    return TrainArtifacts(report, runs)


# ---------------------------------------------------------------- sweeps


def sweep_rows(results: dict[float, list[RunResult]]) -> list[dict]:
    rows = []
    for rate, runs in results.items():
        for r in runs:
            rows.append({"kind": "run", "missing_rate": rate, "seed": r.seed, **r.metrics})
        summary = summarize([r.metrics for r in runs])
        for stat in ("mean", "std"):
            rows.append({"kind": stat, "missing_rate": rate, "seed": "",
                         **{m: summary[m][stat] for m in METRICS if m in summary}})
    return rows


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for row in rows:
        writer.writerow([row["kind"], f"{row['missing_rate']:.4f}", row["seed"],
                         *(f"{row[m]:.6f}" if m in row else "" for m in METRICS)])
    return buf.getvalue()


def trend_flags(rows: list[dict], threshold: float = 0.02) -> list[str]:
    """Anomaly notes where mean accuracy rises by more than ``threshold`` as the missing rate grows."""
    means = sorted((r["missing_rate"], r["acc"]) for r in rows if r["kind"] == "mean" and "acc" in r)
    flags = []
    for (r0, a0), (r1, a1) in zip(means, means[1:]):
        if a1 - a0 > threshold:
            flags.append(f"mean acc rises from {a0:.4f} at m_r={r0:g} to {a1:.4f} at m_r={r1:g}")
    return flags


def sweep_svg(rows: list[dict], width: int = 480, height: int = 320) -> str:
    """Self-contained line chart of mean Acc/NMI/ARI against the missing rate."""
    means = sorted((r for r in rows if r["kind"] == "mean"), key=lambda r: r["missing_rate"])
    left, right, top, bottom = 50, 110, 20, 40
    pw, ph = width - left - right, height - top - bottom
    rates = [r["missing_rate"] for r in means]
    lo, hi = (min(rates), max(rates)) if rates else (0.0, 1.0)
    span = hi - lo or 1.0

    def px(rate):
        return left + (rate - lo) / span * pw if len(rates) > 1 else left + pw / 2

    def py(value):
        return top + (1.0 - min(max(value, 0.0), 1.0)) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
             f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = py(tick)
        parts.append(f'<line x1="{left - 4}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end">{tick:.2f}</text>')
    for rate in rates:
        x = px(rate)
        parts.append(f'<text x="{x:.1f}" y="{top + ph + 16}" text-anchor="middle">{rate:g}</text>')
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 6}" text-anchor="middle">missing rate</text>')
    colors = {"acc": "#1f77b4", "nmi": "#d62728", "ari": "#2ca02c"}
    for i, (metric, color) in enumerate(colors.items()):
        pts = [(px(r["missing_rate"]), py(r[metric])) for r in means if metric in r]
        if pts:
            path = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
            parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
            parts.extend(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3" fill="{color}"/>' for x, y in pts)
        ly = top + 14 + 16 * i
        parts.append(f'<line x1="{left + pw + 12}" y1="{ly - 4}" x2="{left + pw + 32}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 36}" y="{ly}">{metric.upper()}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def sweep_experiment(ds: MultiViewDataset, cfg: ExperimentConfig, out_dir,
                     rates: list[float] | None = None) -> tuple[list[dict], list[str]]:
    rates = list(cfg["missing_rates"] if rates is None else rates)
    for rate in rates:
        if not 0.0 <= rate <= 1.0:
            raise ValueError(f"missing rate {rate} outside [0, 1]")
    results = {rate: [run_once(ds, cfg, seed, rate) for seed in cfg.seed_list()] for rate in rates}
    rows = sweep_rows(results)
    flags = trend_flags(rows)
    out_dir = Path(out_dir)
    atomic_write(out_dir / "sweep.csv", sweep_csv(rows))
    atomic_write(out_dir / "sweep.svg", sweep_svg(rows))
    summary = {"build": build_id(), "config": cfg.echo(), "missing_rates": rates, "trend_flags": flags}
    atomic_write(out_dir / "sweep.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return rows, flags


# ---------------------------------------------------------------- ablations

# module toggles per variant; every key not listed keeps the config's value
ABLATIONS: dict[str, dict[str, bool]] = {
    "full": {},
    "no_knn": {"use_knn": False},
    "no_aug": {"use_aug": False},
    "no_knn_aug": {"use_knn": False, "use_aug": False},
    "no_cdpe_tam": {"use_cdpe_tam": False},
    "no_cluster_module": {"use_cluster_module": False},
}


def with_toggles(cfg: ExperimentConfig, toggles: dict) -> ExperimentConfig:
    out = ExperimentConfig(dict(cfg.values), set(cfg.explicit))
    for key, value in toggles.items():
        out.set(key, value)
    return out


def ablation_experiment(ds: MultiViewDataset, cfg: ExperimentConfig, variants: list[str],
                        on_run=None) -> dict[str, list[RunResult]]:
    """Train every variant on every seed with the same masks; ``on_run(variant, run)`` after each."""
    unknown = [v for v in variants if v not in ABLATIONS]
    if unknown:
        raise ValueError(f"unknown ablation variants {unknown}; choose from {sorted(ABLATIONS)}")
    results: dict[str, list[RunResult]] = {}
    for name in variants:
        vcfg = with_toggles(cfg, ABLATIONS[name])
        results[name] = []
        for seed in vcfg.seed_list():
            run = run_once(ds, vcfg, seed)
            results[name].append(run)
            if on_run is not None:
                on_run(name, run)
    return results


# ---------------------------------------------------------------- embedding dumps


def embedding_bytes(z: np.ndarray) -> bytes:
    """``EMBD``, u32 version=1, u32 N, u32 d_e, then N x d_e little-endian float64 row-major."""
    z = np.ascontiguousarray(z, dtype="<f8")
    return EMBED_MAGIC + struct.pack("<III", 1, *z.shape) + z.tobytes()


def read_embedding(path) -> np.ndarray:
    from .data import FormatError, _Reader

    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != EMBED_MAGIC:
        raise FormatError("not an embedding dump")
    if r.u32("version") != 1:
        raise FormatError("unsupported embedding version")
    n, d = r.u32("N"), r.u32("d_e")
    z = np.frombuffer(r.take(8 * n * d, "embedding payload"), dtype="<f8").reshape(n, d)
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after embedding payload")
    return z.astype(np.float64)
