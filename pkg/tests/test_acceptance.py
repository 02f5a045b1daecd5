"""Acceptance criteria, one test each; every test records a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` (the lines appear in the summary)
or ``python tests/test_acceptance.py``.
"""

import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE
from oracles import brute_force_kmeans, partition_sse, same_partition

from gnak import experiment as ex
from gnak.cli import main
from gnak.checkpoint import load_checkpoint, save_checkpoint
from gnak.clustering import GroupAssignment, build_group_assignment, kmeans, profile_matrix
from gnak.data import load_idx_dataset, make_synthetic_transfer_task, per_class_batch, sample_kshot
from gnak.losses import (ComponentLoss, LossWeights, cross_entropy, inter_group_loss, intra_group_loss,
                         margin_loss, pairwise_distances, total_loss, triplet_loss)
from gnak.network import Network, backward, check_gradients, conv2d, dense, forward, relu, snap
from gnak.policy import (ActionSpace, PolicyNetwork, all_sequences, exact_policy_gradient, policy_gradient,
                         sample_episodes, sequence_log_prob)
from gnak.search import FineTuneEnvironment, compute_reward, search
from gnak.trainer import FineTuneConfig, fine_tune, write_loss_trace


def record(num, name, ok, detail):
    ACCEPTANCE.append((num, name, bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'}  {num:>2}. {name}: {detail}")
    assert ok, detail


# --- 1. gradient correctness ------------------------------------------------------------

KINK = 1e-3
GRAD_TOL = 1e-4


def _relu_inputs(net, rec):
    return [rec.outputs[i - 1] for i, s in enumerate(net.layers) if s.kind == "relu"]


def _gradient_case(seed):
    """A random small net, batch and grouping whose losses sit away from every kink."""
    rng = np.random.default_rng([seed, 101])
    labels = np.array([0, 0, 1, 1, 2, 2])
    for _ in range(200):
        if seed % 2:
            net = Network.build((4,), [dense(6), relu(), dense(5), relu(), dense(3)], rng)
            x = rng.normal(size=(6, 4))
        else:
            net = Network.build((5, 5, 1), [conv2d(4, 2), relu(), dense(5), relu(), dense(3)], rng)
            x = rng.random((6, 5, 5, 1))
        for p in net.params:
            if "b" in p:
                p["b"] = rng.normal(scale=0.3, size=p["b"].shape)
        _, rec = forward(net, x)
        if min(np.abs(z).min() for z in _relu_inputs(net, rec)) < KINK:
            continue
        emb = rec.outputs[net.head - 1]
        d = pairwise_distances(emb, "squared-euclidean")
        same = labels[:, None] == labels[None, :]
        gap = (d[:, :, None] - d[:, None, :])[(same & ~np.eye(6, dtype=bool))[:, :, None] & ~same[:, None, :]]
        cross = d[np.triu(~same, 1)]
        t_margin = -float(np.median(gap))
        m_margin = float(np.median(cross))
        if min(np.abs(gap + t_margin).min(), np.abs(m_margin - cross).min()) < KINK:
            continue
        asg = build_group_assignment(net, [2, 2], x, seed=seed)
        ok = True
        for layer, lg in asg.layers.items():
            prof = profile_matrix(rec, layer)
            for members in lg.groups:
                for a in members:
                    for b in members:
                        if a < b and np.linalg.norm(prof[:, a] - prof[:, b]) < KINK:
                            ok = False
        if ok:
            return net, x, labels, asg, t_margin, m_margin
    raise RuntimeError(f"no kink-free case for seed {seed}")


def _loss_fns(labels, asg, t_margin, m_margin):
    tw = LossWeights(margin=t_margin if t_margin > 0 else 1.0)
    mw = LossWeights(margin=m_margin)

    def wrap(component):
        def fn(net, batch):
            logits, rec = forward(net, batch)
            part = component(net, logits, rec)
            return part.value, backward(net, rec, None, part.grads)
        return fn

    def ce(net, logits, rec):
        v, g = cross_entropy(logits, labels)
        return ComponentLoss(v, {len(net.layers) - 1: g})

    def metric(fn, w):
        def comp(net, logits, rec):
            v, g = fn(rec.outputs[net.head - 1], labels, w)
            return ComponentLoss(v, {net.head - 1: g})
        return comp

    weights = LossWeights(0.3, 0.2, 0.7, margin=tw.margin)

    def total(net, logits, rec):
        parts = {"class": ce(net, logits, rec), "intra": intra_group_loss(rec, asg),
                 "inter": inter_group_loss(rec, asg), "triplet": metric(triplet_loss, weights)(net, logits, rec)}
        return total_loss(parts, weights)

    return {
        "cross-entropy": wrap(ce),
        "triplet": wrap(metric(triplet_loss, tw)),
        "margin": wrap(metric(margin_loss, mw)),
        "intra": wrap(lambda net, logits, rec: intra_group_loss(rec, asg)),
        "inter": wrap(lambda net, logits, rec: inter_group_loss(rec, asg)),
        "total": wrap(total),
    }


def test_01_gradient_correctness():
    start = time.perf_counter()
    worst = {}
    for seed in range(20):
        net, x, labels, asg, tm, mm = _gradient_case(seed)
        for name, fn in _loss_fns(labels, asg, tm, mm).items():
            worst[name] = max(worst.get(name, 0.0), check_gradients(net, fn, x, eps=1e-5))
    secs = time.perf_counter() - start
    ok = max(worst.values()) < GRAD_TOL and secs < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" (limit {GRAD_TOL:g}); {secs:.1f}s"
    record(1, "gradient correctness", ok, detail)


# --- 2. shared-delta invariant ------------------------------------------------------------

def _offsets(net, asg):
    out = []
    for layer, lg in asg.layers.items():
        for members in lg.groups:
            for p in net.params[layer].values():
                out.extend((p[..., i] - p[..., members[0]]).tobytes() for i in members[1:])
    return out


def test_02_shared_delta_invariant():
    start = time.perf_counter()
    src, tgt = make_synthetic_transfer_task(0, per_class=60)
    kshot, _ = sample_kshot(tgt, 5, 0)
    net = Network.build((8, 8, 1), [conv2d(8, 3), relu(), conv2d(8, 3), relu(), dense(16), relu(), dense(5)], 0)
    asg = build_group_assignment(net, [2, 4, 4], per_class_batch(src, 20, 0), seed=0)
    cfg = FineTuneConfig(lr=0.05, max_iters=500, weights=LossWeights(1e-3, 1e-6, 1e-3))
    res = fine_tune(net, asg, kshot, None, cfg)
    start_net = net.with_params([{k: snap(v) for k, v in p.items()} for p in net.params])
    before, after = _offsets(start_net, asg), _offsets(res.net, asg)
    moved = sum(float(np.abs(a - b).max()) for a, b in zip(
        (p["W"] for p in res.net.params if "W" in p), (p["W"] for p in start_net.params if "W" in p)))
    secs = time.perf_counter() - start
    ok = before == after and moved > 0 and secs < 60
    record(2, "shared-delta invariant", ok,
           f"{len(before)} within-group offset tensors bit-identical after 500 iterations "
           f"(params moved by {moved:.3f}); {secs:.1f}s")


# --- 3. baseline reduction ----------------------------------------------------------------

def test_03_baseline_reduction(tmp_path):
    src, tgt = make_synthetic_transfer_task(0, per_class=60)
    kshot, _ = sample_kshot(tgt, 5, 0)
    net = Network.build((8, 8, 1), [conv2d(8, 3), relu(), dense(16), relu(), dense(5)], 0)
    cfg = FineTuneConfig(lr=0.05, max_iters=300, weights=LossWeights(0.0, 0.0, 0.0))
    grouped = fine_tune(net, GroupAssignment.singletons(net), kshot, None, cfg)
    plain = fine_tune(net, None, kshot, None, cfg)
    write_loss_trace(tmp_path / "a.csv", grouped.trace)
    write_loss_trace(tmp_path / "b.csv", plain.trace)
    same_trace = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    same_params = all(a[k].tobytes() == b[k].tobytes() for a, b in zip(grouped.net.params, plain.net.params)
                      for k in a)
    record(3, "baseline reduction", same_trace and same_params,
           f"300-iteration loss trace CSVs identical: {same_trace}; final params identical: {same_params}")


# --- 4. k-means oracle equivalence -----------------------------------------------------------

def _separated_instance(rng):
    k = int(rng.integers(1, 4))
    n = int(rng.integers(max(k, 2), 9))
    d = int(rng.integers(1, 5))
    while True:
        labels = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
        centres = rng.normal(scale=10.0, size=(k, d))
        x = centres[labels] + rng.uniform(-1, 1, size=(n, d))
        cents = np.array([x[labels == c].mean(axis=0) for c in range(k)])
        radius = max(np.linalg.norm(x - cents[labels], axis=1).max(), 1e-12)
        gaps = [np.linalg.norm(cents[a] - cents[b]) for a in range(k) for b in range(a + 1, k)]
        if not gaps or min(gaps) / radius >= 4:
            return x, k, labels


def test_04_kmeans_oracle():
    rng = np.random.default_rng(404)
    exact = 0
    for i in range(200):
        x, k, _ = _separated_instance(rng)
        oracle, _ = brute_force_kmeans(x, k)
        exact += same_partition(kmeans(x, k, restarts=10, seed=i).labels, oracle)
    close = 0
    for i in range(200):
        n = int(rng.integers(2, 9))
        k = int(rng.integers(1, min(3, n) + 1))
        x = rng.normal(size=(n, int(rng.integers(1, 5))))
        _, best = brute_force_kmeans(x, k)
        sse = partition_sse(x, kmeans(x, k, restarts=10, seed=i).labels)
        close += sse <= 1.05 * best + 1e-12
    ok = exact == 200 and close >= 190
    record(4, "k-means oracle equivalence", ok,
           f"separated: {exact}/200 exact partitions; random: {close}/200 within 5% of optimal SSE (need 190)")


# --- 5. REINFORCE exactness ----------------------------------------------------------------

def _reinforce_error(filter_counts, table, seed, episodes=100_000):
    space = ActionSpace.for_filters(filter_counts)
    policy = PolicyNetwork.init(space.n_actions, 8, seed)

    def reward(seq):
        return table[seq] if space.is_valid(seq) else -1.0

    exact = exact_policy_gradient(policy, space, reward)
    eps = sample_episodes(policy, space, np.random.default_rng(seed), episodes)
    for e in eps:
        e.reward = reward(e.actions)
    est = policy_gradient(policy, space, eps)
    g = np.concatenate([exact[k].ravel() for k in sorted(exact)])
    s = np.concatenate([est[k].ravel() for k in sorted(exact)])
    return float(np.abs(s - g).max() / np.abs(g).max()), len(all_sequences(space))


def test_05_reinforce_exactness():
    rng = np.random.default_rng(55)
    two = {seq: float(v) for seq, v in zip(
        [(a, b) for a in range(3) for b in range(3)], [.5, .6, .7, .55, .8, .9, .3, .4, .2])}
    three = {tuple(s): float(v) for s, v in zip(np.ndindex(3, 3, 3), rng.random(27))}
    err2, n2 = _reinforce_error([2, 4], two, 0)
    err3, n3 = _reinforce_error([2, 4, 4], three, 1)
    ok = err2 < 0.02 and err3 < 0.02 and (n2, n3) == (9, 27)
    record(5, "REINFORCE exactness", ok,
           f"max coordinate error / max |exact| over 100000 episodes: {err2:.4f} ({n2} sequences), "
           f"{err3:.4f} ({n3} sequences); limit 0.02")


# --- 6. controller convergence -------------------------------------------------------------

class TargetEnv:
    def __init__(self, filter_counts, target):
        self.filter_counts = list(filter_counts)
        self.target = list(target)

    def evaluate(self, counts):
        return float(np.mean([a == b for a, b in zip(counts, self.target)]))


CONTROLLER = dict(budget=2000, m=5, lr=0.7, hidden=32, baseline=True)


def test_06_controller_convergence():
    start = time.perf_counter()
    env = TargetEnv([8, 8, 8], [4, 1, 8])
    space = ActionSpace.for_filters(env.filter_counts)
    target = [space.index(c) for c in env.target]
    probs = []
    for seed in range(5):
        res = search(env, seed=seed, **CONTROLLER)
        probs.append(float(np.exp(sequence_log_prob(res.policy, space, [target])[0])))
    secs = time.perf_counter() - start
    ok = min(probs) >= 0.9 and secs < 120
    record(6, "controller convergence", ok,
           "P(target) for seeds 0-4: " + ", ".join(f"{p:.3f}" for p in probs) + f" (need 0.9); {secs:.1f}s")


# --- 7. k-sweep trend ----------------------------------------------------------------------------

TREND = dict(task="ablation-k", seed=0, runs=10, ks="1,5,10", group_counts="8,8,16,16",
             arch="conv32-3,relu,conv32-3,relu,dense64,relu,dense64,relu", pretrain_iters=2000,
             pretrain_lr=0.05, lr=0.1, decay_step=100000, max_iters=300, alpha=1e-4, beta=1e-8, gamma=1e-4)


def test_07_k_sweep_trend(tmp_path):
    start = time.perf_counter()
    rows = ex.run_experiment(ex.load_config(None, {**TREND, "out": str(tmp_path)}))
    secs = time.perf_counter() - start
    agg = {(r["method"], r["k"]): r for r in rows if r["kind"] == "aggregate"}
    parts, ok = [], secs < 600
    for k in (1, 5, 10):
        plain, gna = agg[("finetune", k)], agg[("gna", k)]
        mean_ok = gna["accuracy"] >= plain["accuracy"]
        std_ok = k == 1 or gna["std"] <= plain["std"]
        ok &= mean_ok and std_ok and gna["n"] == plain["n"] == 10
        parts.append(f"k={k} acc {gna['accuracy']:.3f} vs {plain['accuracy']:.3f}"
                     f" std {gna['std']:.3f} vs {plain['std']:.3f}")
    record(7, "k-sweep trend (grouped vs plain)", ok, "; ".join(parts) + f"; {secs:.0f}s")


# --- 8. layer-prefix ablation --------------------------------------------------------------

ABLATION = dict(task="ablation-layers", seed=0, runs=10, k=5, prefixes="1,3,5,7,all", group_counts="4",
                arch="conv8-3,relu,conv8-3,relu," + ",".join(["dense16,relu"] * 6), pretrain_iters=1500,
                lr=0.1, decay_step=100000, max_iters=300, alpha=1e-4, beta=1e-8, gamma=1e-4)


def test_08_layer_prefix_ablation(tmp_path):
    cfg = ex.load_config(None, {**ABLATION, "out": str(tmp_path)})
    rows = ex.run_experiment(cfg)
    aggs = [r for r in rows if r["kind"] == "aggregate" and r["method"] != "finetune"]
    layers = [r["layers"] for r in aggs]
    n_layers = len(load_checkpoint(tmp_path / "pretrained.gnak").clusterable_layers)
    by = {r["layers"]: r for r in aggs}
    best = max(aggs[:-1], key=lambda r: r["accuracy"])
    full = by["all"]
    ok = (layers == ["1", "3", "5", "7", "all"] and n_layers >= 8
          and full["accuracy"] >= best["accuracy"] - full["std"])
    record(8, "layer-prefix ablation", ok,
           f"{n_layers} clusterable layers; " + ", ".join(f"{r['layers']}: {r['accuracy']:.3f}" for r in aggs)
           + f"; all-layers gap to best prefix {best['accuracy'] - full['accuracy']:+.3f}"
           f" vs std {full['std']:.3f}")


# --- 9. reward rule ---------------------------------------------------------------------------

def test_09_reward_rule():
    src, tgt = make_synthetic_transfer_task(0, per_class=40)
    kshot, held = sample_kshot(tgt, 3, 0)
    net = Network.build((8, 8, 1), [conv2d(4, 3), relu(), dense(2), relu(), dense(5)], 0)
    env = FineTuneEnvironment(net, per_class_batch(src, 5, 0), kshot, held,
                              FineTuneConfig(lr=0.1, max_iters=10, weights=LossWeights(0.0, 0.0, 0.0)))
    space = ActionSpace.for_filters(env.filter_counts)
    invalid_ok, valid = True, []
    for seq in all_sequences(space):
        before = env.trainings
        r = compute_reward(seq, env, space)
        if space.is_valid(seq):
            valid.append(r)
        else:
            invalid_ok &= r == -1.0 and env.trainings == before
    n_invalid = len(all_sequences(space)) - len(valid)
    ok = invalid_ok and n_invalid > 0 and all(0.0 <= r <= 1.0 for r in valid)
    record(9, "reward rule conformance", ok,
           f"{n_invalid} impossible sequences gave -1 with no training; "
           f"{len(valid)} valid rewards in [{min(valid):.3f}, {max(valid):.3f}]")


# --- 10. determinism and formats ----------------------------------------------------------------

def test_10_determinism_and_formats(tmp_path):
    tiny = dict(runs=2, k=2, arch="conv4-3,relu,dense8,relu", pretrain_iters=40, max_iters=10, lr=0.1,
                per_class=30, clustering_per_class=5, alpha=0.01, beta=1e-4, gamma=0.01, method="rl",
                budget=4, episodes_per_update=2)
    outs = []
    for name in ("a", "b"):
        ex.run_experiment(ex.load_config(None, {**tiny, "out": str(tmp_path / name)}))
        outs.append({p.name: p.read_bytes() for p in sorted((tmp_path / name).glob("*.csv"))})
    for name in ("a", "b"):
        args = ["finetune", "--out", str(tmp_path / name)]
        for key, val in {**tiny, "method": "none"}.items():
            args += ["--" + key.replace("_", "-"), str(val)]
        assert main(args) == 0
        outs.append((tmp_path / name / "loss_trace.csv").read_bytes())
    csv_same = outs[0] == outs[1] and len(outs[0]) >= 3 and outs[2] == outs[3]
    net = Network.build((6, 6, 2), [conv2d(3, 3), relu(), dense(4)], 3)
    save_checkpoint(net, tmp_path / "n.gnak")
    save_checkpoint(load_checkpoint(tmp_path / "n.gnak"), tmp_path / "m.gnak")
    back = load_checkpoint(tmp_path / "m.gnak")
    gnak_same = (tmp_path / "n.gnak").read_bytes() == (tmp_path / "m.gnak").read_bytes() and all(
        a[k].astype(np.float32).tobytes() == b[k].astype(np.float32).tobytes()
        for a, b in zip(net.params, back.params) for k in a)
    (tmp_path / "i.idx").write_bytes(bytes([0, 0, 8, 3, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 2]) + bytes(range(12)))
    (tmp_path / "l.idx").write_bytes(bytes([0, 0, 8, 1, 0, 0, 0, 3, 0, 1, 0]))
    idx_shape = load_idx_dataset(tmp_path / "i.idx", tmp_path / "l.idx").images.shape
    ok = csv_same and gnak_same and idx_shape == (3, 2, 2, 1)
    record(10, "determinism and formats", ok,
           f"{len(outs[0]) + 1} CSV files (metrics, search histories, loss trace) byte-identical across runs: {csv_same}; GNAK round trip exact: "
           f"{gnak_same}; IDX fixture shape {idx_shape}")


if __name__ == "__main__":
    import tempfile

    failed = 0
    for name, fn in sorted((n, f) for n, f in globals().items() if n.startswith("test_")):
        with tempfile.TemporaryDirectory() as tmp:
            try:
                fn(Path(tmp)) if fn.__code__.co_argcount else fn()
            except AssertionError:
                failed += 1
    sys.exit(1 if failed else 0)
