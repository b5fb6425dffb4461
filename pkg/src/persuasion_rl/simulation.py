"""Population state-distribution propagation under a policy and estimated dynamics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .abstraction import FeatureSet, project, state_label
from .dataset import Dataset, consecutive_pairs
from .mdp import MdpModel, Policy, ValueFunctions, effort_to_reward

Population = Literal["uniform", "session1_all", "session1_low_reward"]
POPULATIONS: tuple[str, ...] = ("uniform", "session1_all", "session1_low_reward")


def check_distribution(d: np.ndarray, atol: float = 1e-12) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    if (d < 0).any() or abs(d.sum() - 1.0) > atol:
        raise ValueError(f"not a probability distribution (sum {d.sum()!r})")
    return d


def nearest_rank_percentile(values: Sequence[float], q: float) -> float:
    """Smallest value with at least ``q`` percent of the data at or below it."""
    xs = sorted(values)
    if not xs:
        raise ValueError("percentile of an empty sample")
    rank = max(1, math.ceil(q / 100.0 * len(xs)))
    return xs[rank - 1]


def initial_distribution(
    dataset: Dataset | None,
    population: Population,
    feature_set: FeatureSet,
    mean_effort: float | None = None,
) -> np.ndarray:
    """Starting state distribution.

    ``session1_all`` uses every user's session-1 state; ``session1_low_reward``
    keeps users whose first reward (the effort reported in session 2) lies at
    or below the nearest-rank 25th percentile of all first rewards.
    """
    n = feature_set.n_states
    if population == "uniform":
        return np.full(n, 1.0 / n)
    if population not in POPULATIONS:
        raise ValueError(f"unknown population {population!r}")
    if dataset is None or not dataset.sessions:
        raise ValueError(f"population {population!r} needs a non-empty dataset")
    first = {s.user_id: s for s in dataset.sessions if s.session_index == 1}
    if population == "session1_low_reward":
        ebar = dataset.mean_effort() if mean_effort is None else mean_effort
        first_reward = {
            prev.user_id: effort_to_reward(nxt.effort, ebar)
            for prev, nxt in consecutive_pairs(dataset)
            if prev.session_index == 1
        }
        if not first_reward:
            raise ValueError("no first rewards to take a percentile of")
        cut = nearest_rank_percentile(list(first_reward.values()), 25)
        keep = {u for u, r in first_reward.items() if r <= cut}
        first = {u: s for u, s in first.items() if u in keep}
    if not first:
        raise ValueError(f"population {population!r} is empty")
    counts = np.bincount([project(s, feature_set) for s in first.values()], minlength=n).astype(float)
    return counts / counts.sum()


def _state_matrix(policy: Policy, model: MdpModel) -> np.ndarray:
    pi = policy.matrix(model.n_states)
    if pi.shape[1] != model.n_actions:
        raise ValueError("policy and model disagree on the number of actions")
    return np.einsum("sa,sat->st", pi, model.transitions)


@dataclass(frozen=True)
class TrajectoryReport:
    policy_id: str
    population_id: str
    horizon: int
    distributions: np.ndarray | None = None  # [horizon, n_states], d_1 .. d_H
    mean_rewards: np.ndarray | None = None  # [horizon], reward of the t-th transition

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        for arr in (self.distributions, self.mean_rewards):
            if arr is not None and len(arr) != self.horizon:
                raise ValueError("trajectory length does not match the horizon")


def evolve(
    d0: np.ndarray, policy: Policy, model: MdpModel, horizon: int, *, policy_id: str = "", population_id: str = ""
) -> TrajectoryReport:
    """Exact propagation d_{t+1} = d_t P_pi; records d_1 .. d_horizon."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    d = check_distribution(d0, 1e-9)
    if d.size != model.n_states:
        raise ValueError("distribution and model disagree on the number of states")
    P = _state_matrix(policy, model)
    out = np.empty((horizon, model.n_states))
    for t in range(horizon):
        d = d @ P
        out[t] = d
    return TrajectoryReport(policy_id or policy.name, population_id, horizon, distributions=out)


def reward_trajectory(
    d0: np.ndarray, policy: Policy, model: MdpModel, horizon: int, *, policy_id: str = "", population_id: str = ""
) -> TrajectoryReport:
    """Expected reward of the t-th transition, t = 1 .. horizon, starting from d0."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    d = check_distribution(d0, 1e-9)
    P = _state_matrix(policy, model)
    r = (policy.matrix(model.n_states) * model.rewards).sum(axis=1)
    out = np.empty(horizon)
    for t in range(horizon):
        out[t] = d @ r
        d = d @ P
    return TrajectoryReport(policy_id or policy.name, population_id, horizon, mean_rewards=out)


def monte_carlo_evolve(
    d0: np.ndarray, policy: Policy, model: MdpModel, horizon: int, n_agents: int, seed: int = 0
) -> np.ndarray:
    """Agent-level simulation; returns the empirical state shares [horizon, n_states]."""
    rng = np.random.default_rng(seed)
    pi = policy.matrix(model.n_states)
    counts = rng.multinomial(n_agents, check_distribution(d0, 1e-9))
    out = np.empty((horizon, model.n_states))
    for t in range(horizon):
        nxt = np.zeros(model.n_states, dtype=np.int64)
        for s in np.flatnonzero(counts):
            for a, n_sa in enumerate(rng.multinomial(counts[s], pi[s])):
                if n_sa:
                    nxt += rng.multinomial(n_sa, model.transitions[s, a])
        counts = nxt
        out[t] = counts / n_agents
    return out


@dataclass(frozen=True)
class Edge:
    source: int
    target: int
    probability: float
    kind: Literal["better", "worse", "same"]


def transition_graph(
    policy: Policy, model: MdpModel, value_functions: ValueFunctions, threshold: float | None = None
) -> list[Edge]:
    """Edges s -> s' with T[s][pi(s)][s'] >= threshold, classed by the change in V*.

    A self-loop counts as better in the top-valued state and worse in the
    bottom-valued one.
    """
    if policy.kind != "deterministic":
        raise ValueError("the transition graph needs a deterministic policy")
    threshold = 1.0 / model.n_states if threshold is None else threshold
    V = value_functions.V
    best, worst = int(np.argmax(V)), int(np.argmin(V))
    edges = []
    for s, a in enumerate(policy.actions):
        for s2 in range(model.n_states):
            p = float(model.transitions[s, a, s2])
            if p < threshold:
                continue
            if s2 == s:
                kind = "better" if s == best else "worse" if s == worst else "same"
            elif V[s2] > V[s]:
                kind = "better"
            elif V[s2] < V[s]:
                kind = "worse"
            else:
                kind = "same"
            edges.append(Edge(s, s2, p, kind))
    return edges


# -- reports -----------------------------------------------------------------


def _writer():
    buf = io.StringIO()
    return buf, csv.writer(buf, lineterminator="\n")


def format_distributions(reports: Sequence[TrajectoryReport], k: int) -> str:
    buf, w = _writer()
    n = 2**k
    w.writerow(["policy", "population", "t", *(state_label(s, k) for s in range(n))])
    for rep in reports:
        for t, row in enumerate(rep.distributions, start=1):
            w.writerow([rep.policy_id, rep.population_id, t, *(f"{x:.6f}" for x in row)])
    return buf.getvalue()


def format_rewards(reports: Sequence[TrajectoryReport]) -> str:
    buf, w = _writer()
    w.writerow(["population", "t", *(r.policy_id for r in reports if r.population_id == reports[0].population_id)])
    populations = list(dict.fromkeys(r.population_id for r in reports))
    for pop in populations:
        group = [r for r in reports if r.population_id == pop]
        for t in range(group[0].horizon):
            w.writerow([pop, t + 1, *(f"{r.mean_rewards[t]:.6f}" for r in group)])
    return buf.getvalue()


def format_graph(edges: Sequence[Edge], k: int) -> str:
    buf, w = _writer()
    w.writerow(["source", "target", "probability", "kind"])
    for e in edges:
        w.writerow([state_label(e.source, k), state_label(e.target, k), f"{e.probability:.6f}", e.kind])
    return buf.getvalue()
