import csv
import json
import os

import numpy as np
import pytest

from sheaf_sim import cli
from sheaf_sim import config as cfgmod
from sheaf_sim import graph as gr
from sheaf_sim.errors import ConfigError, DisconnectedSubgraph

SHORT = ["--set", "train.rounds=5"]


def write_config(path, body):
    path.write_text(json.dumps(body))
    return str(path)


def test_defaults_resolve():
    cfg = cfgmod.from_dict()
    assert cfg.train.algorithm == "sheaf_dmfl_att" and cfg.fusion == "attention"
    assert cfg.data.split_frac == 0.8


def test_reference_scenario():
    cfg = cfgmod.reference()
    assert cfg.graph().n_clients == 9
    assert (cfg.data.n_per_client, cfg.data.split_frac, cfg.train.lam) == (400, 0.25, 1.0)


def test_overrides_parse_json_values():
    cfg = cfgmod.from_dict({}, ["train.rounds=7", "sheaf.init=random", "data.m_k=[3,5]"])
    assert cfg.train.rounds == 7 and cfg.sheaf.init == "random" and cfg.data.m_k == (3, 5)


@pytest.mark.parametrize("override", [
    "train.rounds=0", "sheaf.gamma=0", "sheaf.gamma=1.5", "train.algorithm=\"fedavg\"",
    "train.nonsense=1", "data.split_frac=1.0", "model.fusion=\"concat\"", "sheaf.init=\"zeros\"",
])
def test_invalid_values_are_config_errors(override):
    with pytest.raises(ConfigError):
        cfgmod.from_dict({}, [override])


def test_alias_conflict_detected():
    with pytest.raises(ConfigError, match="conflicts"):
        cfgmod.from_dict({"sheaf": {"lambda": 1.0}, "train": {"lambda": 0.5}})
    assert cfgmod.from_dict({"sheaf": {"lambda": 0.5}, "train": {"lambda": 0.5}}).train.lam == 0.5


def test_sheaf_algorithms_fix_the_fusion():
    assert cfgmod.from_dict({}, ["train.algorithm=sheaf_dmfl"]).fusion == "concat"
    assert cfgmod.from_dict({}, ["train.algorithm=local"]).fusion == "attention"


def test_hash_ignores_output_section_only():
    a = cfgmod.from_dict({"output": {"dir": "x"}})
    b = cfgmod.from_dict({"output": {"dir": "y"}})
    c = cfgmod.from_dict({}, ["train.rounds=3"])
    assert a.hash == b.hash != c.hash


def test_explicit_graph_with_disconnected_modality():
    body = {"graph": {"n_clients": 3, "edges": [[0, 1], [1, 2]], "modalities": [[0], [1], [0]]}}
    with pytest.raises(DisconnectedSubgraph):
        cfgmod.from_dict(body)


def test_unreadable_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        cfgmod.load(str(bad))


def test_shipped_configs_resolve():
    here = os.path.join(os.path.dirname(__file__), "..", "configs")
    for name in sorted(os.listdir(here)):
        cfg = cfgmod.load(os.path.join(here, name))
        assert gr.mixing_matrices(cfg.graph())


# ---------------------------------------------------------------- command line

def run_cli(*argv):
    return cli.main([str(a) for a in argv])


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_run_writes_log_summary_and_config(tmp_path):
    out = tmp_path / "run"
    assert run_cli("run", *SHORT, "--out", out) == 0
    rows = read_csv(out / "runlog.csv")
    assert len(rows) == 5
    summary = json.loads((out / "summary.json").read_text())
    stored = json.loads((out / "config.json").read_text())
    assert summary["config_hash"] == stored["config_hash"]
    assert {r["config_hash"] for r in rows} == {stored["config_hash"]}
    assert cfgmod.resolve(stored["config"]).hash == stored["config_hash"]


def test_run_is_byte_identical_when_repeated(tmp_path):
    run_cli("run", *SHORT, "--out", tmp_path / "a")
    run_cli("run", *SHORT, "--out", tmp_path / "b")
    assert (tmp_path / "a" / "runlog.csv").read_bytes() == (tmp_path / "b" / "runlog.csv").read_bytes()


def test_run_writes_nothing_outside_its_directory(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run_cli("run", *SHORT, "--set", "train.checkpoint_every=2", "--out", "result") == 0
    assert os.listdir(tmp_path) == ["result"]
    assert sorted(os.listdir(tmp_path / "result")) == ["checkpoints", "config.json", "runlog.csv",
                                                      "summary.json"]


def test_disconnected_modality_exits_with_config_code(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"graph": {"n_clients": 3, "edges": [[0, 1], [1, 2]],
                                                        "modalities": [[0], [1], [0]]}})
    out = tmp_path / "never"
    assert run_cli("run", "--config", cfg, "--out", out) == 2
    assert "DisconnectedSubgraph" in capsys.readouterr().err
    assert not out.exists()


def test_bad_override_exits_with_config_code(tmp_path):
    assert run_cli("run", "--set", "sheaf.gamma=2", "--out", tmp_path / "x") == 2


def test_numeric_failure_exits_three_with_partial_log(tmp_path):
    out = tmp_path / "boom"
    code = run_cli("run", "--set", "train.rounds=50", "--set", "train.alpha=1e6",
                   "--set", "train.eta_phi=1e6", "--out", out)
    assert code == 3
    summary = json.loads((out / "summary.json").read_text())
    assert "NonFinite" in summary["error"] and summary["rounds_completed"] < 50


def test_resume_from_checkpoint_matches_full_run(tmp_path):
    args = ["--set", "train.rounds=4", "--set", "train.checkpoint_every=2"]
    run_cli("run", *args, "--out", tmp_path / "full")
    ckpt = tmp_path / "full" / "checkpoints" / "checkpoint_r00002.npz"
    assert run_cli("run", *args, "--resume", ckpt, "--out", tmp_path / "resumed") == 0
    assert (tmp_path / "full" / "runlog.csv").read_bytes() == \
        (tmp_path / "resumed" / "runlog.csv").read_bytes()


def test_single_seed_sweep_equals_plain_run(tmp_path):
    assert run_cli("sweep", *SHORT, "--seeds", "4", "--out", tmp_path / "sw") == 0
    seeded = ["--set", "train.seeds.data=4", "--set", "train.seeds.model=4", "--set", "train.seeds.shuffle=4"]
    run_cli("run", *SHORT, *seeded, "--out", tmp_path / "one")
    sweep_log = tmp_path / "sw" / "sheaf_dmfl_att" / "seed_4" / "runlog.csv"
    assert sweep_log.read_bytes() == (tmp_path / "one" / "runlog.csv").read_bytes()
    agg = read_csv(tmp_path / "sw" / "aggregate.csv")
    summary = json.loads((tmp_path / "one" / "summary.json").read_text())
    for row in agg:
        assert float(row["mean"]) == summary["final_test_acc"][row["group"]]
        assert float(row["sd"]) == 0.0 and row["n_seeds"] == "1"


def test_sweep_aggregates_algorithms_and_seeds(tmp_path):
    out = tmp_path / "sw"
    assert run_cli("sweep", *SHORT, "--seeds", "0,1", "--algorithms", "local,dsgd", "--out", out) == 0
    agg = read_csv(out / "aggregate.csv")
    assert {(r["algorithm"], r["group"]) for r in agg} == {
        (a, g) for a in ("local", "dsgd") for g in ("m0", "m1", "m0+m1")}
    meta = json.loads((out / "aggregate.json").read_text())
    assert set(meta["config_hashes"]) == {"local/seed_0", "local/seed_1", "dsgd/seed_0", "dsgd/seed_1"}
    for r in agg:
        vals = [json.loads((out / r["algorithm"] / f"seed_{s}" / "summary.json").read_text())
                ["final_test_acc"][r["group"]] for s in (0, 1)]
        assert float(r["mean"]) == pytest.approx(np.mean(vals))
        assert float(r["sd"]) == pytest.approx(np.std(vals, ddof=1))


def test_different_seeds_give_different_runs(tmp_path):
    run_cli("sweep", *SHORT, "--seeds", "0,1", "--out", tmp_path)
    a = (tmp_path / "sheaf_dmfl_att" / "seed_0" / "runlog.csv").read_text()
    b = (tmp_path / "sheaf_dmfl_att" / "seed_1" / "runlog.csv").read_text()
    assert a != b


@pytest.mark.parametrize("seeds", ["", "1,1", "a,b"])
def test_bad_seed_lists(tmp_path, seeds):
    assert run_cli("sweep", "--seeds", seeds, "--out", tmp_path) == 2


def test_verify_fast_passes(capsys):
    assert run_cli("verify", "--level", "fast") == 0
    out = capsys.readouterr().out
    assert "[FAIL]" not in out and "checks passed" in out


def test_verify_catches_broken_mixing(monkeypatch, capsys):
    real = gr.metropolis_weights

    def lopsided(sub):
        w = real(sub)
        bad = w.weights.copy()
        bad[0, 0] += 0.05
        return gr.MixingMatrix(w.modality, w.members, bad)

    monkeypatch.setattr(gr, "metropolis_weights", lopsided)
    assert run_cli("verify", "--level", "fast") == 1
    assert "[FAIL] mixing matrices" in capsys.readouterr().out
