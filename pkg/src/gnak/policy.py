"""LSTM policy over per-layer group counts, trained with REINFORCE.

At step ``l`` the input is the layer's filter count (scaled by the largest
filter count) concatenated with a one-hot of the previous action. The LSTM
output goes through a dense layer and a softmax over the global action list.
Rollouts and gradients are batched over episodes.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import CheckpointError, read_gnak, write_gnak

PARAM_NAMES = ("Wx", "Wh", "b", "Wo", "bo")


@dataclass(frozen=True)
class ActionSpace:
    """Candidate group counts {1, 2, 4, ..., N_f}, shared across layers.

    ``candidates`` is the sorted union over layers; candidate ``a`` is valid at
    layer ``l`` iff it does not exceed that layer's filter count.
    """

    filter_counts: tuple[int, ...]
    candidates: tuple[int, ...]

    @classmethod
    def for_filters(cls, filter_counts) -> "ActionSpace":
        counts = tuple(int(n) for n in filter_counts)
        cands = set()
        for n in counts:
            p = 1
            while p < n:
                cands.add(p)
                p *= 2
            cands.add(n)
        return cls(counts, tuple(sorted(cands)))

    @property
    def n_actions(self) -> int:
        return len(self.candidates)

    @property
    def horizon(self) -> int:
        return len(self.filter_counts)

    def layer_candidates(self, layer: int) -> list[int]:
        return [c for c in self.candidates if c <= self.filter_counts[layer]]

    def counts(self, actions) -> list[int]:
        return [self.candidates[int(a)] for a in actions]

    def is_valid(self, actions) -> bool:
        return all(self.candidates[int(a)] <= n for a, n in zip(actions, self.filter_counts))

    def index(self, count: int) -> int:
        return self.candidates.index(count)


def encode_policy_input(filter_count: int, prev_action: int | None, space: ActionSpace) -> np.ndarray:
    x = np.zeros(space.n_actions + 1)
    x[0] = filter_count / max(space.filter_counts)
    if prev_action is not None:
        x[1 + prev_action] = 1.0
    return x


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class PolicyNetwork:
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, n_actions: int, hidden: int = 32, rng=0) -> "PolicyNetwork":
        rng = np.random.default_rng(rng)
        d = n_actions + 1
        return cls({
            "Wx": rng.normal(0, 1 / np.sqrt(d), size=(d, 4 * hidden)),
            "Wh": rng.normal(0, 1 / np.sqrt(hidden), size=(hidden, 4 * hidden)),
            "b": np.zeros(4 * hidden),
            "Wo": rng.normal(0, 1 / np.sqrt(hidden), size=(hidden, n_actions)),
            "bo": np.zeros(n_actions),
        })

    @property
    def hidden(self) -> int:
        return self.params["Wh"].shape[0]

    @property
    def n_actions(self) -> int:
        return self.params["bo"].shape[0]

    def copy(self) -> "PolicyNetwork":
        return PolicyNetwork({k: v.copy() for k, v in self.params.items()})


@dataclass
class Episode:
    actions: tuple[int, ...]
    log_probs: tuple[float, ...]
    reward: float | None = None

    @property
    def log_prob(self) -> float:
        return float(sum(self.log_probs))


@dataclass
class Rollout:
    actions: np.ndarray  # (n, L)
    log_probs: np.ndarray  # (n, L)
    probs: list[np.ndarray] = field(repr=False)
    cache: list[tuple] = field(repr=False)


def rollout(policy: PolicyNetwork, space: ActionSpace, n: int = 1, rng=None, actions=None) -> Rollout:
    """Run ``n`` episodes: sample actions with ``rng`` or replay the given ``actions``."""
    if policy.n_actions != space.n_actions:
        raise ValueError("policy width does not match the action space")
    p = policy.params
    hdim = policy.hidden
    if actions is not None:
        actions = np.asarray(actions, dtype=np.int64).reshape(-1, space.horizon)
        n = len(actions)
    h = np.zeros((n, hdim))
    c = np.zeros((n, hdim))
    out_a = np.zeros((n, space.horizon), dtype=np.int64)
    out_lp = np.zeros((n, space.horizon))
    probs_all, cache = [], []
    nmax = max(space.filter_counts)
    rows = np.arange(n)
    for t, n_f in enumerate(space.filter_counts):
        x = np.zeros((n, space.n_actions + 1))
        x[:, 0] = n_f / nmax
        if t > 0:
            x[rows, 1 + out_a[:, t - 1]] = 1.0
        z = x @ p["Wx"] + h @ p["Wh"] + p["b"]
        i = _sigmoid(z[:, :hdim])
        f = _sigmoid(z[:, hdim:2 * hdim])
        o = _sigmoid(z[:, 2 * hdim:3 * hdim])
        g = np.tanh(z[:, 3 * hdim:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        probs = _softmax(h_new @ p["Wo"] + p["bo"])
        if actions is not None:
            a = actions[:, t]
        else:
            u = rng.random(n)
            a = np.minimum((np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1), space.n_actions - 1)
        out_a[:, t] = a
        out_lp[:, t] = np.log(probs[rows, a])
        cache.append((x, h, c, i, f, o, g, tc, h_new))
        probs_all.append(probs)
        h, c = h_new, c_new
    return Rollout(out_a, out_lp, probs_all, cache)


def sample_episodes(policy: PolicyNetwork, space: ActionSpace, rng, n: int) -> list[Episode]:
    r = rollout(policy, space, n=n, rng=rng)
    return [Episode(tuple(int(a) for a in r.actions[k]), tuple(float(v) for v in r.log_probs[k]))
            for k in range(n)]


def sample_action_sequence(policy: PolicyNetwork, space: ActionSpace, rng) -> Episode:
    return sample_episodes(policy, space, rng, 1)[0]


def sequence_log_prob(policy: PolicyNetwork, space: ActionSpace, actions) -> np.ndarray:
    """log P(a_1..a_L) for each row of ``actions``."""
    return rollout(policy, space, actions=actions).log_probs.sum(axis=1)


def log_prob_gradient(policy: PolicyNetwork, space: ActionSpace, actions, weights) -> dict[str, np.ndarray]:
    """sum_k weights[k] * grad log P(actions[k]) by backpropagation through time."""
    r = rollout(policy, space, actions=actions)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    p = policy.params
    hdim = policy.hidden
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    n = len(w)
    rows = np.arange(n)
    dh_next = np.zeros((n, hdim))
    dc_next = np.zeros((n, hdim))
    for t in range(space.horizon - 1, -1, -1):
        x, h_prev, c_prev, i, f, o, g, tc, h = r.cache[t]
        dlogits = -r.probs[t]
        dlogits[rows, r.actions[:, t]] += 1.0
        dlogits *= w[:, None]
        grads["Wo"] += h.T @ dlogits
        grads["bo"] += dlogits.sum(axis=0)
        dh = dlogits @ p["Wo"].T + dh_next
        do = dh * tc
        dc = dh * o * (1 - tc**2) + dc_next
        di, df, dg = dc * g, dc * c_prev, dc * i
        dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g**2)], axis=1)
        grads["Wx"] += x.T @ dz
        grads["Wh"] += h_prev.T @ dz
        grads["b"] += dz.sum(axis=0)
        dh_next = dz @ p["Wh"].T
        dc_next = dc * f
    return grads


def policy_gradient(policy: PolicyNetwork, space: ActionSpace, episodes, baseline: float = 0.0):
    """(1/m) sum_k sum_t grad log P(a_t | a_<t) (R_k - baseline)."""
    if not episodes:
        raise ValueError("need at least one episode")
    if any(e.reward is None for e in episodes):
        raise ValueError("every episode needs a reward")
    actions = np.array([e.actions for e in episodes])
    weights = (np.array([e.reward for e in episodes]) - baseline) / len(episodes)
    return log_prob_gradient(policy, space, actions, weights)


def reinforce_update(policy: PolicyNetwork, space: ActionSpace, episodes, lr: float,
                     baseline: float = 0.0) -> PolicyNetwork:
    """One gradient-ascent step on the empirical policy gradient."""
    grad = policy_gradient(policy, space, episodes, baseline)
    return PolicyNetwork({k: v + lr * grad[k] for k, v in policy.params.items()})


def all_sequences(space: ActionSpace) -> np.ndarray:
    return np.array(list(itertools.product(range(space.n_actions), repeat=space.horizon)), dtype=np.int64)


def exact_policy_gradient(policy: PolicyNetwork, space: ActionSpace, reward_fn) -> dict[str, np.ndarray]:
    """sum over every action sequence of P(seq) * grad log P(seq) * R(seq)."""
    seqs = all_sequences(space)
    prob = np.exp(sequence_log_prob(policy, space, seqs))
    rewards = np.array([reward_fn(tuple(s)) for s in seqs], dtype=np.float64)
    return log_prob_gradient(policy, space, seqs, prob * rewards)


def save_policy(policy: PolicyNetwork, space: ActionSpace, path) -> None:
    p = policy.params
    d, hdim = p["Wx"].shape[0], policy.hidden
    entries = [
        ("lstm", (d,), (hdim,), hdim, 0, 1, True, {"Wx": p["Wx"], "Wh": p["Wh"], "b": p["b"]}),
        ("dense", (hdim,), (space.n_actions,), space.n_actions, 0, 1, True, {"W": p["Wo"], "b": p["bo"]}),
    ]
    write_gnak(path, (d,), entries)


def load_policy(path) -> PolicyNetwork:
    _, entries = read_gnak(path)
    if len(entries) != 2 or entries[0][0] != "lstm" or entries[1][0] != "dense":
        raise CheckpointError("checkpoint is not a policy (expected lstm + dense)")
    lstm, head = entries[0][-1], entries[1][-1]
    return PolicyNetwork({"Wx": lstm["Wx"], "Wh": lstm["Wh"], "b": lstm["b"], "Wo": head["W"], "bo": head["b"]})
