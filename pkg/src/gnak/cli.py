"""Command-line entry point: ``gnak <subcommand> [--config FILE] [--key value ...]``.

Every config key has a flag of the same name (underscores become dashes),
and flags win over the config file.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .checkpoint import load_checkpoint, save_checkpoint
from .clustering import build_group_assignment
from .policy import ActionSpace, save_policy
from .search import write_search_history
from .trainer import evaluate, write_loss_trace

COMMANDS = {
    "pretrain": "train the source network and write pretrained.gnak",
    "cluster": "group filters by activation and write groups.ini",
    "finetune": "fine-tune one run with group-averaged updates",
    "search": "search per-layer group counts (rl, greedy or manual)",
    "ablate-k": "grouped vs plain fine-tuning over the k sweep",
    "ablate-layers": "grouped fine-tuning over clustered-layer prefixes",
    "eval": "accuracy of a checkpoint on a run's test split",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gnak", description="Grouped fine-tuning for k-shot transfer.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--run", type=int, default=0, help="run index for single-run commands")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--on", choices=("test", "val", "source"), default="test")
        for key, kind in ex.FIELD_TYPES.items():
            flag = "--" + key.replace("_", "-")
            metavar = "on|off" if kind == "bool" else key.upper()
            p.add_argument(flag, dest=key, default=None, metavar=metavar, help=f"override [{_section(key)}] {key}")
    return parser


def _section(key: str) -> str:
    return next(s for s, keys in ex.SECTIONS.items() if key in keys)


def config_from_args(args) -> ex.ExperimentConfig:
    overrides = {k: getattr(args, k) for k in ex.FIELD_TYPES if getattr(args, k) is not None}
    return ex.load_config(args.config, overrides)


def _single_run_context(cfg, args, out_dir):
    source, target, pre = ex.prepare(cfg, out_dir)
    positions = ex.cluster_positions(cfg.cluster_layers, len(pre.clusterable_layers))
    splits = ex.make_splits(cfg, source, target, args.run, cfg.k)
    return source, target, pre, positions, splits


def cmd_pretrain(cfg, args, out_dir):
    source, _ = ex.load_task(cfg)
    net = ex.pretrained_network(cfg.replace(pretrained=""), source, out_dir)
    print(f"source accuracy {evaluate(net, source):.4f}")
    print(f"wrote {out_dir / 'pretrained.gnak'}")


def cmd_cluster(cfg, args, out_dir):
    source, target, pre, positions, splits = _single_run_context(cfg, args, out_dir)
    counts = ex.resolve_counts(cfg.group_counts, [pre.filter_count(l) for l in pre.clusterable_layers])
    active = [c if i in positions else None for i, c in enumerate(counts)]
    kseed = int(ex.stream(cfg.seed, "kmeans", args.run + 1, cfg.k).generate_state(1)[0])
    asg = build_group_assignment(pre, active, splits.clustering_batch, seed=kseed, restarts=cfg.restarts)
    (out_dir / "groups.ini").write_text(asg.to_text())
    for layer, lg in asg.layers.items():
        sizes = sorted((len(g) for g in lg.groups), reverse=True)
        print(f"layer {layer}: {lg.n_filters} filters -> {lg.n_groups} groups, sizes {sizes}")
    print(f"wrote {out_dir / 'groups.ini'}")


def cmd_finetune(cfg, args, out_dir):
    source, target, pre, positions, splits = _single_run_context(cfg, args, out_dir)
    out = ex.execute_run(cfg, pre, source, target, args.run, cfg.k, True, positions, out_dir)
    if out.status != "ok":
        print(f"run failed: {out.status}", file=sys.stderr)
        return 1
    write_loss_trace(out_dir / "loss_trace.csv", out.trace)
    save_checkpoint(out.net, out_dir / "finetuned.gnak")
    row = {"kind": "run", "run_id": f"{ex.method_label(cfg)}/{cfg.cluster_layers}/k{cfg.k}/r{args.run}",
           "seed": cfg.seed, "run": args.run, "method": ex.method_label(cfg), "k": cfg.k,
           "layers": cfg.cluster_layers, "counts": " ".join(map(str, out.counts)), "accuracy": out.accuracy,
           "val_accuracy": out.val_accuracy, "std": None, "n": None, "status": out.status}
    ex.write_metrics(out_dir / "metrics.csv", [row])
    print(f"counts {out.counts}  val {out.val_accuracy:.4f}  test {out.accuracy:.4f}")
    return 0


def cmd_search(cfg, args, out_dir):
    source, target, pre, positions, splits = _single_run_context(cfg, args, out_dir)
    env = ex.make_environment(cfg, pre, splits, source, args.run, cfg.k, positions)
    method = cfg.method if cfg.method != "none" else "rl"
    if method == "rl":
        res = ex.run_rl_search(cfg, env, args.run, cfg.k)
        write_search_history(out_dir / "search_history.csv", res.history)
        save_policy(res.policy, ActionSpace.for_filters(env.filter_counts), out_dir / "policy.gnak")
        print(f"best counts {res.best_counts}  reward {res.best_reward:.4f}  after {len(res.history)} episodes")
    else:
        fn = ex.greedy_search if method == "greedy" else ex.manual_search
        counts = fn(env)
        print(f"{method} counts {counts}  after {env.trainings} fine-tuning runs")
    return 0


def cmd_ablate(cfg, args, out_dir):
    rows = ex.run_experiment(cfg.replace(out=str(out_dir)))
    for r in rows:
        if r["kind"] == "aggregate":
            acc = "nan" if r["accuracy"] is None else f"{r['accuracy']:.4f}"
            std = "nan" if r["std"] is None else f"{r['std']:.4f}"
            print(f"{r['method']:>12} layers={r['layers']:<5} k={r['k']:<3} acc {acc} std {std} n={r['n']}")
    print(f"wrote {out_dir / 'metrics.csv'}")
    return 0


def cmd_eval(cfg, args, out_dir):
    net = load_checkpoint(args.checkpoint)
    source, target = ex.load_task(cfg)
    if args.on == "source":
        data = source
    else:
        splits = ex.make_splits(cfg, source, target, args.run, cfg.k)
        data = splits.test if args.on == "test" else splits.val
    print(f"accuracy {evaluate(net, data):.4f} on {len(data)} {args.on} samples")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
        if args.command == "ablate-k":
            cfg = cfg.replace(task="ablation-k")
        elif args.command == "ablate-layers":
            cfg = cfg.replace(task="ablation-layers")
    except (ex.ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    handler = {"pretrain": cmd_pretrain, "cluster": cmd_cluster, "finetune": cmd_finetune,
               "search": cmd_search, "ablate-k": cmd_ablate, "ablate-layers": cmd_ablate, "eval": cmd_eval}
    return handler[args.command](cfg, args, out_dir) or 0


if __name__ == "__main__":
    sys.exit(main())
