"""Group-count search: reward rule, REINFORCE loop, greedy and manual baselines.

An environment is anything with a ``filter_counts`` sequence (one entry per
clusterable layer) and an ``evaluate(counts) -> accuracy`` method.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .clustering import build_group_assignment
from .policy import ActionSpace, PolicyNetwork, reinforce_update, sample_episodes
from .trainer import DivergenceError, FineTuneConfig, fine_tune

log = logging.getLogger(__name__)

INVALID_REWARD = -1.0


@dataclass
class FineTuneEnvironment:
    """Cluster -> fine-tune -> validate, for one pre-trained network.

    ``finetune_data`` may be source-domain data or the target k-shot set.
    """

    net: object
    clustering_batch: np.ndarray
    finetune_data: object
    val_data: object
    cfg: FineTuneConfig
    seed: int = 0
    restarts: int = 10
    trainings: int = field(default=0, init=False)

    @property
    def filter_counts(self) -> list[int]:
        return [self.net.filter_count(l) for l in self.net.clusterable_layers]

    def evaluate(self, counts) -> float:
        counts = list(counts)
        if self.cfg.cluster_layers is not None:
            counts = [c if i in self.cfg.cluster_layers else None for i, c in enumerate(counts)]
        assignment = build_group_assignment(self.net, counts, self.clustering_batch,
                                            seed=self.seed, restarts=self.restarts)
        self.trainings += 1
        aux = self.clustering_batch if self.cfg.regularize_on == "clustering" else None
        return fine_tune(self.net, assignment, self.finetune_data, self.val_data, self.cfg, aux).accuracy


def compute_reward(actions, env, space: ActionSpace) -> float:
    """Validation accuracy for valid actions, -1 if any layer gets an impossible count.

    A fine-tune that diverges scores 0 so it stays distinguishable from -1.
    """
    if not space.is_valid(actions):
        return INVALID_REWARD
    try:
        return float(env.evaluate(space.counts(actions)))
    except DivergenceError as exc:
        log.warning("fine-tuning diverged for actions %s: %s", list(actions), exc)
        return 0.0


@dataclass
class SearchResult:
    best_counts: list[int] | None
    best_reward: float
    history: list[dict]
    policy: PolicyNetwork


def search(env, budget: int, m: int = 5, seed: int = 0, lr: float = 0.005, hidden: int = 32,
           baseline: bool = False, baseline_decay: float = 0.9, space: ActionSpace | None = None,
           policy: PolicyNetwork | None = None) -> SearchResult:
    """REINFORCE over group counts: sample ``m`` episodes, score them, update; ``budget`` episodes total."""
    if m < 1 or budget < m:
        raise ValueError("need 1 <= m <= budget")
    space = space or ActionSpace.for_filters(env.filter_counts)
    ss_policy, ss_episodes = np.random.SeedSequence(seed).spawn(2)
    if policy is None:
        policy = PolicyNetwork.init(space.n_actions, hidden, np.random.default_rng(ss_policy))
    rng = np.random.default_rng(ss_episodes)
    history: list[dict] = []
    best_reward, best_actions = -np.inf, None
    avg = None
    done = 0
    while done < budget:
        n = min(m, budget - done)
        episodes = sample_episodes(policy, space, rng, n)
        for ep in episodes:
            ep.reward = compute_reward(ep.actions, env, space)
            if ep.reward > best_reward:
                best_reward, best_actions = ep.reward, ep.actions
            history.append({"episode": done, "reward": ep.reward,
                            "actions": space.counts(ep.actions), "best_reward": best_reward})
            done += 1
        b = 0.0
        if baseline:
            mean_r = float(np.mean([e.reward for e in episodes]))
            avg = mean_r if avg is None else baseline_decay * avg + (1 - baseline_decay) * mean_r
            b = avg
        policy = reinforce_update(policy, space, episodes, lr, b)
    best = space.counts(best_actions) if best_actions is not None else None
    return SearchResult(best, float(best_reward), history, policy)


def write_search_history(path, history) -> None:
    horizon = max((len(r["actions"]) for r in history), default=0)
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["episode", "reward"] + [f"action_{i + 1}" for i in range(horizon)] + ["best_reward"])
        for r in history:
            wr.writerow([r["episode"], repr(float(r["reward"]))] + list(r["actions"])
                        + [repr(float(r["best_reward"]))])


class _Memo:
    def __init__(self, env):
        self.env = env
        self.cache: dict[tuple, float] = {}

    def __call__(self, counts) -> float:
        key = tuple(counts)
        if key not in self.cache:
            try:
                self.cache[key] = float(self.env.evaluate(list(counts)))
            except DivergenceError as exc:
                log.warning("fine-tuning diverged for counts %s: %s", list(counts), exc)
                self.cache[key] = 0.0
        return self.cache[key]


def greedy_search(env, space: ActionSpace | None = None) -> list[int]:
    """Layer by layer: start at 2 groups and double while accuracy improves, else keep the previous count."""
    space = space or ActionSpace.for_filters(env.filter_counts)
    acc = _Memo(env)
    counts = list(space.filter_counts)
    best = acc(counts)
    for l, n_f in enumerate(space.filter_counts):
        cands = space.layer_candidates(l)
        if 2 not in cands:
            continue
        idx = cands.index(2)
        while idx < len(cands) and cands[idx] < n_f:
            trial = counts.copy()
            trial[l] = cands[idx]
            a = acc(trial)
            if a <= best:
                break
            best, counts = a, trial
            idx += 1
    return counts


def manual_search(env, space: ActionSpace | None = None, max_sweeps: int = 100) -> list[int]:
    """Start every layer at 2 groups; per layer take doubling or halving if it strictly helps; repeat."""
    space = space or ActionSpace.for_filters(env.filter_counts)
    acc = _Memo(env)
    counts = [min(2, n) for n in space.filter_counts]
    best = acc(counts)
    for _ in range(max_sweeps):
        improved = False
        for l in range(space.horizon):
            cands = space.layer_candidates(l)
            idx = cands.index(counts[l])
            moves = []
            for j in (idx + 1, idx - 1):  # double, then halve
                if 0 <= j < len(cands):
                    trial = counts.copy()
                    trial[l] = cands[j]
                    moves.append((acc(trial), trial))
            if moves:
                a, trial = max(moves, key=lambda t: t[0])
                if a > best:
                    best, counts, improved = a, trial, True
        if not improved:
            break
    return counts
