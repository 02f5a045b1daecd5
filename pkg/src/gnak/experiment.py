"""Experiment orchestration: config, pretraining, per-seed runs, sweeps and metrics.

Configs are INI-style text files (``configparser``); every key lives in one
section and can be overridden by a CLI flag of the same name. Parsing is
type-driven by the ``ExperimentConfig`` field annotations.

Randomness comes from one root seed. Each subsystem draws from a named
stream (``init``, ``sampling``, ``kmeans``, ``policy``, ``episodes``) keyed by
run index and k, so arms compared within one run see identical data.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .clustering import build_group_assignment
from .data import (Dataset, load_idx_dataset, make_synthetic_domain_task, make_synthetic_transfer_task,
                   per_class_batch, sample_kshot, split_indices)
from .losses import LossWeights, cross_entropy
from .network import Network, backward, conv2d, dense, forward, relu, softmax
from .search import FineTuneEnvironment, greedy_search, manual_search, search, write_search_history
from .trainer import DivergenceError, FineTuneConfig, evaluate, fine_tune, sgd_step

log = logging.getLogger(__name__)

STREAMS = ("init", "sampling", "kmeans", "policy", "episodes")
TASKS = ("transfer", "domain-adapt-toy", "ablation-k", "ablation-layers")
METHODS = ("none", "manual", "greedy", "rl")
METRIC_FIELDS = ("kind", "run_id", "seed", "run", "method", "k", "layers", "counts",
                 "accuracy", "val_accuracy", "std", "n", "status")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # [experiment]
    task: str = "transfer"
    seed: int = 0
    runs: int = 10
    k: int = 5
    ks: str = "1,5,10"
    method: str = "none"
    group_counts: str = "all"
    cluster_layers: str = "all"
    prefixes: str = "1,3,5,7,all"
    out: str = "runs"
    pretrained: str = ""
    # [data]
    data: str = "synthetic"
    source_images: str = ""
    source_labels: str = ""
    target_images: str = ""
    target_labels: str = ""
    per_class: int = 200
    clustering_per_class: int = 20
    val_fraction: float = 0.2
    # [pretrain]
    arch: str = "conv32-3,relu,conv32-3,relu,dense64,relu,dense64,relu"
    pretrain_iters: int = 2000
    pretrain_lr: float = 0.05
    pretrain_batch: int = 50
    # [finetune]
    lr: float = 0.01
    decay_rate: float = 0.1
    decay_step: int = 1000
    max_iters: int = 2000
    embedding: str = "penultimate"
    regularize_on: str = "kshot"
    # [loss]
    alpha: float = 0.1
    beta: float = 0.01
    gamma: float = 1.0
    margin: float = 1.0
    distance: str = "squared-euclidean"
    metric_loss: str = "auto"
    # [search]
    budget: int = 50
    episodes_per_update: int = 5
    policy_lr: float = 0.005
    baseline: bool = False
    hidden: int = 32
    search_data: str = "kshot"
    restarts: int = 10

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {', '.join(TASKS)}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {', '.join(METHODS)}")
        if self.k < 1 or self.runs < 1:
            raise ConfigError("k and runs must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.data not in ("synthetic", "idx"):
            raise ConfigError("data must be synthetic or idx")
        if self.data == "idx":
            for key in ("source_images", "source_labels", "target_images", "target_labels"):
                if not Path(getattr(self, key)).is_file():
                    raise ConfigError(f"{key}: file {getattr(self, key)!r} does not exist")
        if self.pretrained and not Path(self.pretrained).is_file():
            raise ConfigError(f"pretrained: file {self.pretrained!r} does not exist")
        if self.search_data not in ("kshot", "source"):
            raise ConfigError("search_data must be kshot or source")
        parse_arch(self.arch)
        self.finetune_config()

    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma, self.margin, self.distance, self.metric_loss)

    def finetune_config(self, cluster_positions=None) -> FineTuneConfig:
        return FineTuneConfig(self.lr, self.decay_rate, self.decay_step, self.max_iters, self.weights(),
                              cluster_positions, self.embedding, self.regularize_on)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


SECTIONS = {
    "experiment": ("task", "seed", "runs", "k", "ks", "method", "group_counts", "cluster_layers",
                   "prefixes", "out", "pretrained"),
    "data": ("data", "source_images", "source_labels", "target_images", "target_labels", "per_class",
             "clustering_per_class", "val_fraction"),
    "pretrain": ("arch", "pretrain_iters", "pretrain_lr", "pretrain_batch"),
    "finetune": ("lr", "decay_rate", "decay_step", "max_iters", "embedding", "regularize_on"),
    "loss": ("alpha", "beta", "gamma", "margin", "distance", "metric_loss"),
    "search": ("budget", "episodes_per_update", "policy_lr", "baseline", "hidden", "search_data", "restarts"),
}
FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def parse_value(key: str, text: str):
    kind = FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("on", "true", "yes", "1"):
                return True
            if low in ("off", "false", "no", "0"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from None
    return text


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read an INI config (optional) and apply string or typed overrides on top."""
    values = {}
    if path is not None:
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise ConfigError(f"config file {path} not found")
        for section in cp.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            for key, text in cp.items(section):
                if key not in SECTIONS[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                values[key] = parse_value(key, text)
    for key, val in (overrides or {}).items():
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = parse_value(key, val) if isinstance(val, str) else val
    return ExperimentConfig(**values)


def config_to_text(cfg: ExperimentConfig) -> str:
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            val = getattr(cfg, key)
            lines.append(f"{key} = {('on' if val else 'off') if isinstance(val, bool) else val}")
        lines.append("")
    return "\n".join(lines)


# --- helpers --------------------------------------------------------------------------

def stream(seed: int, name: str, *key: int) -> np.random.SeedSequence:
    """Named, independent RNG stream under the root ``seed``."""
    return np.random.SeedSequence(entropy=seed, spawn_key=(STREAMS.index(name), *key))


def parse_arch(text: str) -> list[dict]:
    """``conv32-3[s2]``, ``dense64``, ``relu`` and ``softmax`` tokens, comma separated; the head is added later."""
    defs = []
    for tok in (t.strip() for t in text.split(",") if t.strip()):
        try:
            if tok == "relu":
                defs.append(relu())
            elif tok == "softmax":
                defs.append(softmax())
            elif tok.startswith("dense"):
                defs.append(dense(int(tok[5:])))
            elif tok.startswith("conv"):
                body, _, stride = tok[4:].partition("s")
                filters, kernel = body.split("-")
                defs.append(conv2d(int(filters), int(kernel), int(stride or 1)))
            else:
                raise ValueError
        except ValueError:
            raise ConfigError(f"bad architecture token {tok!r}") from None
    if not defs:
        raise ConfigError("architecture is empty")
    return defs


def parse_int_list(text: str, what: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"{what}: expected comma-separated integers, got {text!r}") from None


def cluster_positions(text: str, n_layers: int) -> tuple[int, ...]:
    """1-based clusterable-layer positions (or ``all``) as 0-based positions."""
    if text.strip() == "all":
        return tuple(range(n_layers))
    pos = parse_int_list(text, "cluster_layers")
    if any(p < 1 or p > n_layers for p in pos):
        raise ConfigError(f"cluster_layers must lie in 1..{n_layers}")
    return tuple(sorted(set(p - 1 for p in pos)))


def resolve_counts(text: str, filter_counts: list[int]) -> list[int]:
    """``all`` or integers, one per clusterable layer or a single value for every layer."""
    toks = [t.strip() for t in text.split(",") if t.strip()]
    if len(toks) == 1:
        toks = toks * len(filter_counts)
    if len(toks) != len(filter_counts):
        raise ConfigError(f"group_counts has {len(toks)} entries for {len(filter_counts)} clusterable layers")
    out = []
    for t, n in zip(toks, filter_counts):
        if t == "all":
            out.append(n)
        else:
            try:
                out.append(int(t))
            except ValueError:
                raise ConfigError(f"group_counts: bad entry {t!r}") from None
    return out


def prefix_positions(token: str, n_layers: int) -> tuple[int, ...]:
    n = n_layers if token == "all" else int(token)
    if not 1 <= n <= n_layers:
        raise ConfigError(f"prefix {token} outside 1..{n_layers}")
    return tuple(range(n))


# --- data and pretraining ----------------------------------------------------------------

def load_task(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.data == "idx":
        return (load_idx_dataset(cfg.source_images, cfg.source_labels),
                load_idx_dataset(cfg.target_images, cfg.target_labels))
    if cfg.task == "domain-adapt-toy":
        return make_synthetic_domain_task(cfg.seed, per_class=cfg.per_class)
    return make_synthetic_transfer_task(cfg.seed, per_class=cfg.per_class)


def pretrain(net: Network, data: Dataset, iters: int, lr: float, batch: int, seed) -> Network:
    """Minibatch SGD on cross-entropy."""
    rng = np.random.default_rng(seed)
    batch = min(batch, len(data))
    for _ in range(iters):
        idx = rng.choice(len(data), batch, replace=False)
        logits, rec = forward(net, data.images[idx])
        _, g = cross_entropy(logits, data.labels[idx])
        net = sgd_step(net, backward(net, rec, g), lr)
    return net


def pretrained_network(cfg: ExperimentConfig, source: Dataset, out_dir: Path | None = None) -> Network:
    """Load ``cfg.pretrained`` or pretrain on the source data.

    A freshly trained net is passed through the float32 checkpoint format so
    that loading it later gives exactly the same starting point.
    """
    if cfg.pretrained:
        return load_checkpoint(cfg.pretrained)
    defs = parse_arch(cfg.arch) + [dense(source.n_classes)]
    net = Network.build(source.images.shape[1:], defs, np.random.default_rng(stream(cfg.seed, "init")))
    net = pretrain(net, source, cfg.pretrain_iters, cfg.pretrain_lr, cfg.pretrain_batch,
                   stream(cfg.seed, "sampling"))
    log.info("pretrained: source accuracy %.4f", evaluate(net, source))
    path = (out_dir or Path(cfg.out)) / "pretrained.gnak"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, path)
    return load_checkpoint(path)


# --- single run --------------------------------------------------------------------------

@dataclass(frozen=True)
class RunSplits:
    kshot: Dataset
    val: Dataset
    test: Dataset
    clustering_batch: np.ndarray
    kshot_index: np.ndarray
    val_index: np.ndarray
    test_index: np.ndarray


def make_splits(cfg: ExperimentConfig, source: Dataset, target: Dataset, run: int, k: int) -> RunSplits:
    """k-shot, validation and test sets for one run; pairwise disjoint by index."""
    s_kshot, s_val, s_batch = stream(cfg.seed, "sampling", run + 1, k).spawn(3)
    index = np.arange(len(target))
    tagged = Dataset(index[:, None].astype(np.float64), target.labels, target.n_classes)
    kshot, held = sample_kshot(tagged, k, s_kshot)
    vi, ti = split_indices(len(held), cfg.val_fraction, s_val)
    k_idx = kshot.images[:, 0].astype(np.int64)
    held_idx = held.images[:, 0].astype(np.int64)
    v_idx, t_idx = held_idx[vi], held_idx[ti]
    batch = per_class_batch(source, cfg.clustering_per_class, s_batch)
    return RunSplits(target.subset(k_idx), target.subset(v_idx), target.subset(t_idx), batch,
                     k_idx, v_idx, t_idx)


def make_environment(cfg: ExperimentConfig, pre: Network, splits: RunSplits, source: Dataset, run: int, k: int,
                     positions) -> FineTuneEnvironment:
    """Search environment: fine-tune on the k-shot set (or source samples) and score on validation data."""
    ft_cfg = cfg.finetune_config(positions)
    kseed = int(stream(cfg.seed, "kmeans", run + 1, k).generate_state(1)[0])
    if cfg.search_data == "source":
        s_k, s_v = stream(cfg.seed, "sampling", run + 1, k, 1).spawn(2)
        data, held = sample_kshot(source, k, s_k)
        vi, _ = split_indices(len(held), cfg.val_fraction, s_v)
        return FineTuneEnvironment(pre, splits.clustering_batch, data, held.subset(vi), ft_cfg, kseed, cfg.restarts)
    net = pre.replace_head(splits.kshot.n_classes, stream(cfg.seed, "init", run + 1, k))
    return FineTuneEnvironment(net, splits.clustering_batch, splits.kshot, splits.val, ft_cfg, kseed, cfg.restarts)


def run_rl_search(cfg: ExperimentConfig, env, run: int, k: int):
    pseed = int(stream(cfg.seed, "policy", run + 1, k).generate_state(1)[0])
    return search(env, cfg.budget, cfg.episodes_per_update, pseed, cfg.policy_lr, cfg.hidden, cfg.baseline)


def choose_counts(cfg: ExperimentConfig, pre: Network, splits: RunSplits, source: Dataset, run: int, k: int,
                  positions, out_dir: Path | None = None) -> list[int]:
    """Group counts for one run: fixed by config, or found by the configured search method."""
    filter_counts = [pre.filter_count(l) for l in pre.clusterable_layers]
    if cfg.method == "none":
        return resolve_counts(cfg.group_counts, filter_counts)
    env = make_environment(cfg, pre, splits, source, run, k, positions)
    if cfg.method == "greedy":
        return greedy_search(env)
    if cfg.method == "manual":
        return manual_search(env)
    res = run_rl_search(cfg, env, run, k)
    if out_dir is not None:
        write_search_history(out_dir / f"search_history_l{len(positions)}_r{run}_k{k}.csv", res.history)
    return res.best_counts


@dataclass
class RunOutcome:
    accuracy: float | None
    val_accuracy: float | None
    counts: list[int] | None
    status: str
    trace: list[dict] | None = None
    net: Network | None = None


def execute_run(cfg: ExperimentConfig, pre: Network, source: Dataset, target: Dataset, run: int, k: int,
                grouped: bool, positions, out_dir: Path | None = None) -> RunOutcome:
    """Search (optional), cluster, fine-tune and test one seeded run.

    ``grouped=False`` is plain fine-tuning: no assignment and no auxiliary losses.
    """
    stage = "split"
    counts = None
    try:
        splits = make_splits(cfg, source, target, run, k)
        net = pre.replace_head(target.n_classes, stream(cfg.seed, "init", run + 1, k))
        if grouped:
            stage = "search"
            counts = choose_counts(cfg, pre, splits, source, run, k, positions, out_dir)
            stage = "cluster"
            active = [c if i in positions else None for i, c in enumerate(counts)]
            kseed = stream(cfg.seed, "kmeans", run + 1, k).generate_state(1)[0]
            assignment = build_group_assignment(net, active, splits.clustering_batch, seed=int(kseed),
                                                restarts=cfg.restarts)
            ft_cfg = cfg.finetune_config(positions)
        else:
            assignment = None
            ft_cfg = FineTuneConfig(cfg.lr, cfg.decay_rate, cfg.decay_step, cfg.max_iters,
                                    LossWeights(0.0, 0.0, 0.0))
        stage = "finetune"
        aux = splits.clustering_batch if ft_cfg.regularize_on == "clustering" else None
        res = fine_tune(net, assignment, splits.kshot, splits.val, ft_cfg, aux)
        stage = "eval"
        return RunOutcome(evaluate(res.net, splits.test), res.accuracy, counts, "ok", res.trace, res.net)
    except DivergenceError as exc:
        log.error("run %d k=%d: stage %s diverged: %s", run, k, stage, exc)
        return RunOutcome(None, None, counts, f"diverged:{stage}")
    except Exception as exc:  # noqa: BLE001 - recorded in the metrics, not swallowed silently
        log.error("run %d k=%d: stage %s failed: %s", run, k, stage, exc)
        return RunOutcome(None, None, counts, f"failed:{stage}")


# --- sweeps ------------------------------------------------------------------------------

@dataclass(frozen=True)
class Arm:
    method: str
    layers: str
    grouped: bool
    positions: tuple[int, ...]


def _job(args):
    cfg, pre, source, target, run, k, arm, out_dir = args
    out = execute_run(cfg, pre, source, target, run, k, arm.grouped, arm.positions, out_dir)
    return out.accuracy, out.val_accuracy, out.counts, out.status


def n_workers() -> int:
    try:
        return max(1, int(os.environ.get("GNAK_THREADS", "1")))
    except ValueError:
        return 1


def run_grid(cfg: ExperimentConfig, pre: Network, source: Dataset, target: Dataset, ks, arms,
             out_dir: Path | None = None) -> list[dict]:
    """Every (arm, k, run) combination; results come back in that fixed order."""
    jobs = [(cfg, pre, source, target, r, k, arm, out_dir)
            for arm in arms for k in ks for r in range(cfg.runs)]
    workers = min(n_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    rows = []
    for (_, _, _, _, r, k, arm, _), (acc, vacc, counts, status) in zip(jobs, results):
        rows.append({"kind": "run", "run_id": f"{arm.method}/{arm.layers}/k{k}/r{r}", "seed": cfg.seed,
                     "run": r, "method": arm.method, "k": k, "layers": arm.layers,
                     "counts": " ".join(map(str, counts)) if counts else "",
                     "accuracy": acc, "val_accuracy": vacc, "std": None, "n": None, "status": status})
    return rows


def aggregate(rows: list[dict]) -> list[dict]:
    """One mean/std row per (method, layers, k), in first-seen order; std uses ddof=1."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        if r["kind"] == "run":
            groups.setdefault((r["method"], r["layers"], r["k"]), []).append(r)
    out = []
    for (method, layers, k), members in groups.items():
        acc = np.array([m["accuracy"] for m in members if m["status"] == "ok"], dtype=np.float64)
        vacc = np.array([m["val_accuracy"] for m in members if m["status"] == "ok"], dtype=np.float64)
        n = len(acc)
        out.append({"kind": "aggregate", "run_id": f"{method}/{layers}/k{k}", "seed": members[0]["seed"],
                    "run": "", "method": method, "k": k, "layers": layers, "counts": "",
                    "accuracy": float(acc.mean()) if n else None,
                    "val_accuracy": float(vacc.mean()) if n else None,
                    "std": float(acc.std(ddof=1)) if n > 1 else (0.0 if n else None), "n": n,
                    "status": "ok" if n == len(members) else "partial"})
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(METRIC_FIELDS)
        for r in rows:
            wr.writerow([_fmt(r[k]) for k in METRIC_FIELDS])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _n_clusterable(pre: Network) -> int:
    return len(pre.clusterable_layers)


def method_label(cfg: ExperimentConfig) -> str:
    return "gna" if cfg.method == "none" else f"gna-{cfg.method}"


def experiment_arms(cfg: ExperimentConfig, pre: Network) -> list[Arm]:
    n = _n_clusterable(pre)
    plain = Arm("finetune", "none", False, ())
    if cfg.task == "ablation-layers":
        arms = [plain]
        for tok in (t.strip() for t in cfg.prefixes.split(",") if t.strip()):
            arms.append(Arm(method_label(cfg), tok, True, prefix_positions(tok, n)))
        return arms
    positions = cluster_positions(cfg.cluster_layers, n)
    return [plain, Arm(method_label(cfg), cfg.cluster_layers, True, positions)]


def prepare(cfg: ExperimentConfig, out_dir: Path | None = None):
    """Source data, target data and the pre-trained network."""
    source, target = load_task(cfg)
    return source, target, pretrained_network(cfg, source, out_dir)


def run_experiment(cfg: ExperimentConfig) -> list[dict]:
    """Pretrain or load, then every arm over ``runs`` seeds; writes ``metrics.csv`` in ``cfg.out``."""
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out_dir / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger("gnak").addHandler(handler)
    try:
        source, target, pre = prepare(cfg, out_dir)
        ks = parse_int_list(cfg.ks, "ks") if cfg.task == "ablation-k" else [cfg.k]
        rows = run_grid(cfg, pre, source, target, ks, experiment_arms(cfg, pre), out_dir)
        rows += aggregate(rows)
        write_metrics(out_dir / "metrics.csv", rows)
        (out_dir / "config.ini").write_text(config_to_text(cfg))
        return rows
    finally:
        logging.getLogger("gnak").removeHandler(handler)
        handler.close()
