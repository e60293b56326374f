import csv
import json
import re
from pathlib import Path

import numpy as np
import pytest

from urrl_imvc.cli import main
from urrl_imvc.config import KEYS, ConfigError, ExperimentConfig, default_config_text, parse_config_text
from urrl_imvc.data import load_dataset
from urrl_imvc.experiment import read_embedding, sweep_svg, trend_flags
from urrl_imvc.model import load_checkpoint

GOLDEN = Path(__file__).parent / "golden"
FAST = ["--epochs-pretrain", "1", "--epochs-joint", "1", "--d-e", "16"]


@pytest.fixture
def dataset(tmp_path):
    path = tmp_path / "d.mvds"
    assert main(["synth", "--out", str(path), "--n-samples", "60"]) == 0
    return path


# ---------------------------------------------------------------- config


def test_every_key_documented_and_parses_its_default():
    text = default_config_text()
    cfg = parse_config_text(text)
    for name, key in KEYS.items():
        assert key.doc
        assert cfg[name] == key.default


def test_config_comments_and_unknown_keys():
    cfg = parse_config_text("# comment\nk = 6  # trailing\n\nuse_aug = off\nmissing_rate = 0.25\n")
    assert cfg["k"] == 6 and cfg["use_aug"] is False and cfg["missing_rate"] == 0.25
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("lamda1 = 3")
    with pytest.raises(ConfigError, match=":1:"):
        parse_config_text("k = four")
    with pytest.raises(ConfigError):
        parse_config_text("just words")


def test_seed_list_rules():
    cfg = parse_config_text("seed = 3\nrepeats = 2")
    assert cfg.seed_list() == [3, 4]
    assert parse_config_text("seeds = 5,9").seed_list() == [5, 9]
    with pytest.raises(ConfigError):
        parse_config_text("seeds = 5,9\nrepeats = 3").seed_list()


def test_train_config_mapping():
    cfg = parse_config_text("epochs_pretrain = 7\nlambda2 = 0.5\nuse_knn = false")
    tc = cfg.train_config(11)
    assert (tc.e_pretrain, tc.lambda2, tc.use_knn, tc.seed) == (7, 0.5, False, 11)
    assert ExperimentConfig().train_config(0).e_joint == 100


def test_flags_override_config_file(tmp_path, dataset):
    conf = tmp_path / "c.cfg"
    conf.write_text("epochs_pretrain = 1\nepochs_joint = 0\nd_e = 16\nk = 2\n")
    out = tmp_path / "run"
    assert main(["train", str(dataset), "--out", str(out), "--config", str(conf), "--k", "4"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["config"]["k"] == "4"
    assert report["config"]["d_e"] == "16"


def test_unknown_config_key_exits_nonzero(tmp_path, dataset, capsys):
    conf = tmp_path / "bad.cfg"
    conf.write_text("nosuch = 1\n")
    assert main(["train", str(dataset), "--out", str(tmp_path / "x"), "--config", str(conf)]) == 2
    assert "unknown key" in capsys.readouterr().err


# ---------------------------------------------------------------- commands


def test_synth_is_byte_identical_and_balanced(tmp_path):
    a, b = tmp_path / "a.mvds", tmp_path / "b.mvds"
    assert main(["synth", "--out", str(a)]) == 0
    assert main(["synth", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert np.bincount(load_dataset(a).labels).tolist() == [200, 200, 200]


def test_mask_command(tmp_path, dataset):
    out = tmp_path / "m.mvds"
    assert main(["mask", str(dataset), "--out", str(out), "--missing-rate", "0.5",
                 "--miss-per-sample", "1"]) == 0
    assert (load_dataset(out).mask.sum(axis=1) == 1).sum() == 30


def test_train_smoke_and_rerun_identical(tmp_path, dataset):
    runs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert main(["train", str(dataset), "--out", str(out), "--missing-rate", "0.5", *FAST]) == 0
        runs.append(out)
    for f in ("report.json", "model_seed0.ckpt", "losses_seed0.csv"):
        assert (runs[0] / f).read_bytes() == (runs[1] / f).read_bytes()
    with open(runs[0] / "losses_seed0.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "iter", "l_rec", "l_aug", "l_clu", "total"]
    assert all(np.isfinite(float(r["total"])) for r in rows)
    report = json.loads((runs[0] / "report.json").read_text())
    assert set(report["runs"][0]) >= {"seed", "acc", "nmi", "ari"}
    assert set(report["summary"]["acc"]) == {"mean", "std"}
    assert report["build"]
    assert "seconds" in (runs[0] / "timing.json").read_text()


def test_train_reports_skipped_stage_two(tmp_path, dataset, capsys):
    out = tmp_path / "run"
    assert main(["train", str(dataset), "--out", str(out), *FAST, "--use-cluster-module", "off"]) == 0
    assert "stage 2 skipped" in capsys.readouterr().out
    assert json.loads((out / "report.json").read_text())["runs"][0]["stage2_skipped"] is True


def test_embed_round_trip(tmp_path, dataset):
    run = tmp_path / "run"
    assert main(["train", str(dataset), "--out", str(run), *FAST]) == 0
    out = tmp_path / "emb"
    assert main(["embed", str(dataset), str(run / "model_seed0.ckpt"), "--out", str(out)]) == 0
    z = read_embedding(out / "embedding.bin")
    assert z.shape == (60, 16)
    from urrl_imvc.train import embed
    params, mcfg = load_checkpoint(run / "model_seed0.ckpt")
    assert z.tobytes() == embed(load_dataset(dataset), params, mcfg).tobytes()
    lines = (out / "labels.csv").read_text().splitlines()
    assert len(lines) == 60 and all("," not in line for line in lines)


def test_sweep_schema_matches_golden(tmp_path, dataset):
    out = tmp_path / "sw"
    assert main(["sweep", str(dataset), "--out", str(out), *FAST, "--missing-rates", "0,0.5",
                 "--repeats", "2"]) == 0
    produced = (out / "sweep.csv").read_text().splitlines()
    golden = (GOLDEN / "sweep_schema.csv").read_text().splitlines()
    assert len(produced) == len(golden)
    assert produced[0] == golden[0]
    for got, want in zip(produced[1:], golden[1:]):
        pattern = re.escape(want).replace("\\#", r"-?\d+\.\d{6}")
        assert re.fullmatch(pattern, got), (got, want)
    svg = (out / "sweep.svg").read_text()
    assert svg.startswith("<svg") and "polyline" in svg and "http" in svg.splitlines()[0]
    assert "trend_flags" in json.loads((out / "sweep.json").read_text())


def test_sweep_single_rate_equals_train(tmp_path, dataset):
    sw, tr = tmp_path / "sw", tmp_path / "tr"
    assert main(["sweep", str(dataset), "--out", str(sw), *FAST, "--missing-rates", "0"]) == 0
    assert main(["train", str(dataset), "--out", str(tr), *FAST, "--missing-rate", "0"]) == 0
    run_row = next(csv.DictReader(open(sw / "sweep.csv")))
    report = json.loads((tr / "report.json").read_text())
    assert float(run_row["acc"]) == pytest.approx(report["runs"][0]["acc"], abs=1e-6)


def test_trend_flag():
    rows = [{"kind": "mean", "missing_rate": r, "acc": a, "nmi": a, "ari": a}
            for r, a in ((0.0, 0.80), (0.5, 0.85), (0.75, 0.84))]
    flags = trend_flags(rows)
    assert len(flags) == 1 and "0.5" in flags[0]
    assert sweep_svg(rows).count("<circle") == 9


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--max-entries", "20"]) == 0
    out = capsys.readouterr().out
    for name in ("linear", "nde", "vde", "full_loss"):
        assert re.search(rf"^{name}\s+\S+\s+\S+\s+PASS$", out, re.M)


def test_gradcheck_failure_exits_nonzero(monkeypatch):
    import urrl_imvc.checks as checks
    monkeypatch.setitem(checks.THRESHOLDS, "linear", 0.0)
    assert main(["gradcheck", "--max-entries", "5"]) == 1


def test_missing_dataset_reports_path(tmp_path, capsys):
    assert main(["train", str(tmp_path / "nope.mvds"), "--out", str(tmp_path / "o")]) == 2
    assert "nope.mvds" in capsys.readouterr().err
