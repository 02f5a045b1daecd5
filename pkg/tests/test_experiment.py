import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gnak import experiment as ex
from gnak.cli import main
from gnak.data import make_synthetic_transfer_task

TINY = dict(runs=2, k=2, ks="1,2", arch="conv4-3,relu,dense8,relu", pretrain_iters=40, max_iters=15, lr=0.1,
            per_class=30, clustering_per_class=5, alpha=0.0, beta=0.0, gamma=0.0, group_counts="2")


def tiny(tmp_path, **kw):
    return ex.load_config(None, {**TINY, "out": str(tmp_path), **kw})


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[experiment]\nseed = 7\nk = 3\n[search]\nbaseline = on\n[loss]\nalpha = 0.5\n")
    cfg = ex.load_config(path, {"k": "4"})
    assert (cfg.seed, cfg.k, cfg.baseline, cfg.alpha) == (7, 4, True, 0.5)
    back = tmp_path / "back.ini"
    back.write_text(ex.config_to_text(cfg))
    assert ex.load_config(back) == cfg


@pytest.mark.parametrize("text", ["[bogus]\nx = 1\n", "[loss]\nalpha_intra = 1\n", "[experiment]\nk = two\n",
                                  "[experiment]\nmethod = random\n", "[search]\nbaseline = maybe\n"])
def test_config_errors(tmp_path, text):
    path = tmp_path / "c.ini"
    path.write_text(text)
    with pytest.raises(ex.ConfigError):
        ex.load_config(path)


def test_config_rejects_missing_files():
    with pytest.raises(ex.ConfigError):
        ex.load_config(None, {"data": "idx", "source_images": "/nonexistent"})
    with pytest.raises(ex.ConfigError):
        ex.load_config(None, {"pretrained": "/nonexistent.gnak"})


def test_parse_helpers():
    defs = ex.parse_arch("conv8-3s2, relu, dense4")
    assert [d["kind"] for d in defs] == ["conv2d", "relu", "dense"] and defs[0]["stride"] == 2
    with pytest.raises(ex.ConfigError):
        ex.parse_arch("pool2")
    assert ex.resolve_counts("all", [4, 8]) == [4, 8]
    assert ex.resolve_counts("2", [4, 8]) == [2, 2]
    assert ex.resolve_counts("1,all", [4, 8]) == [1, 8]
    with pytest.raises(ex.ConfigError):
        ex.resolve_counts("1,2,3", [4, 8])
    assert ex.cluster_positions("all", 3) == (0, 1, 2)
    assert ex.cluster_positions("3,1", 3) == (0, 2)
    with pytest.raises(ex.ConfigError):
        ex.cluster_positions("4", 3)
    assert ex.prefix_positions("all", 4) == (0, 1, 2, 3) and ex.prefix_positions("2", 4) == (0, 1)


def test_named_streams_are_independent_and_reproducible():
    draws = {n: np.random.default_rng(ex.stream(3, n, 1)).random() for n in ex.STREAMS}
    assert len(set(draws.values())) == len(ex.STREAMS)
    assert np.random.default_rng(ex.stream(3, "init", 1)).random() == draws["init"]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 50), st.integers(0, 9), st.sampled_from([1, 5, 10, 15, 20, 25]))
def test_split_hygiene(seed, run, k):
    cfg = ex.ExperimentConfig(seed=seed)
    src, tgt = make_synthetic_transfer_task(seed, per_class=40)
    s = ex.make_splits(cfg, src, tgt, run, k)
    sets = [set(s.kshot_index), set(s.val_index), set(s.test_index)]
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
    assert sum(map(len, sets)) == len(tgt)
    assert np.bincount(s.kshot.labels).tolist() == [k] * 5


def test_metrics_are_byte_identical_and_aggregates_match(tmp_path):
    a = tiny(tmp_path / "a", task="ablation-k")
    b = tiny(tmp_path / "b", task="ablation-k")
    ex.run_experiment(a)
    ex.run_experiment(b)
    first = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert first == (tmp_path / "b" / "metrics.csv").read_bytes()
    rows = ex.read_metrics(tmp_path / "a" / "metrics.csv")
    aggs = [r for r in rows if r["kind"] == "aggregate"]
    assert len(aggs) == 4  # two arms x two k values
    for agg in aggs:
        accs = np.array([float(r["accuracy"]) for r in rows if r["kind"] == "run"
                         and (r["method"], r["layers"], r["k"]) == (agg["method"], agg["layers"], agg["k"])])
        assert len(accs) == int(agg["n"]) == 2
        assert abs(accs.mean() - float(agg["accuracy"])) <= 1e-12
        assert abs(accs.std(ddof=1) - float(agg["std"])) <= 1e-12


def test_parallel_runs_match_serial(tmp_path, monkeypatch):
    ex.run_experiment(tiny(tmp_path / "s"))
    monkeypatch.setenv("GNAK_THREADS", "2")
    ex.run_experiment(tiny(tmp_path / "p"))
    assert (tmp_path / "s" / "metrics.csv").read_bytes() == (tmp_path / "p" / "metrics.csv").read_bytes()


def test_singleton_groups_reproduce_plain_rows(tmp_path):
    rows = ex.run_experiment(tiny(tmp_path, group_counts="all"))
    runs = [r for r in rows if r["kind"] == "run"]
    plain = [r["accuracy"] for r in runs if r["method"] == "finetune"]
    grouped = [r["accuracy"] for r in runs if r["method"] == "gna"]
    assert plain == grouped


def test_stage_failures_are_recorded(tmp_path):
    rows = ex.run_experiment(tiny(tmp_path, group_counts="64"))
    bad = [r for r in rows if r["method"] == "gna"]
    assert all(r["status"] == "failed:cluster" for r in bad if r["kind"] == "run")
    agg = [r for r in bad if r["kind"] == "aggregate"][0]
    assert agg["n"] == 0 and agg["status"] == "partial" and agg["accuracy"] is None
    assert "stage cluster failed" in (tmp_path / "run.log").read_text()


def test_layer_ablation_rows(tmp_path):
    arch = "conv4-3,relu,conv4-3,relu," + ",".join(["dense6,relu"] * 6)
    cfg = tiny(tmp_path, task="ablation-layers", arch=arch, runs=2, k=1)
    rows = ex.run_experiment(cfg)
    aggs = [r for r in rows if r["kind"] == "aggregate"]
    assert [r["layers"] for r in aggs] == ["none", "1", "3", "5", "7", "all"]


def test_pretrained_checkpoint_is_reused(tmp_path):
    ex.run_experiment(tiny(tmp_path / "a", runs=1))
    ckpt = tmp_path / "a" / "pretrained.gnak"
    ex.run_experiment(tiny(tmp_path / "b", runs=1, pretrained=str(ckpt)))
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


# --- CLI ---------------------------------------------------------------------------------

def cli_args(tmp_path, *extra):
    flat = []
    for key, val in TINY.items():
        if key not in ("ks",):
            flat += ["--" + key.replace("_", "-"), str(val)]
    return [*extra, "--out", str(tmp_path), *flat]


def test_cli_ablate_k(tmp_path, capsys):
    assert main(["ablate-k", *cli_args(tmp_path), "--ks", "1"]) == 0
    out = capsys.readouterr().out
    assert "finetune" in out and "gna" in out
    rows = list(csv.DictReader((tmp_path / "metrics.csv").open()))
    assert {r["k"] for r in rows} == {"1"}


def test_cli_pipeline(tmp_path, capsys):
    assert main(["pretrain", *cli_args(tmp_path)]) == 0
    ckpt = str(tmp_path / "pretrained.gnak")
    assert main(["cluster", *cli_args(tmp_path), "--pretrained", ckpt]) == 0
    assert "[layer 0]" in (tmp_path / "groups.ini").read_text()
    assert main(["finetune", *cli_args(tmp_path), "--pretrained", ckpt, "--alpha", "0.01"]) == 0
    trace = list(csv.reader((tmp_path / "loss_trace.csv").open()))
    assert trace[0][0] == "iteration" and len(trace) == 16
    assert main(["search", *cli_args(tmp_path), "--pretrained", ckpt, "--budget", "4",
                 "--episodes-per-update", "2", "--baseline", "on"]) == 0
    hist = list(csv.reader((tmp_path / "search_history.csv").open()))
    assert hist[0] == ["episode", "reward", "action_1", "action_2", "best_reward"] and len(hist) == 5
    assert (tmp_path / "policy.gnak").exists()
    assert main(["eval", *cli_args(tmp_path), "--checkpoint", str(tmp_path / "finetuned.gnak")]) == 0
    assert "accuracy" in capsys.readouterr().out


def test_cli_config_error(tmp_path, capsys):
    assert main(["finetune", "--out", str(tmp_path), "--method", "random"]) == 2
    assert "config error" in capsys.readouterr().err
