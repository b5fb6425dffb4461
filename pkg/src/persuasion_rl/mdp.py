"""Reward mapping, tabular MDP estimation, value iteration and policies."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from .dataset import N_ACTIONS, TransitionSample

GAMMA = 0.85
TOLERANCE = 1e-9
MAX_ITERS = 10_000

Mode = Literal["optimal", "worst"]


class ConvergenceError(RuntimeError):
    """Value iteration ran out of iterations."""

    def __init__(self, residual: float, iterations: int) -> None:
        super().__init__(f"value iteration did not converge after {iterations} iterations (residual {residual:.3g})")
        self.residual = residual
        self.iterations = iterations


def effort_to_reward(effort: float, mean_effort: float) -> float:
    """Map a 0..10 effort to [-1, 1], piecewise linear around the mean effort.

    Efforts below the mean are spaced evenly on [-1, 0), those above on (0, 1].
    """
    if not 0.0 < mean_effort < 10.0:
        raise ValueError(f"mean effort must lie strictly between 0 and 10, got {mean_effort}")
    if not 0.0 <= effort <= 10.0:
        raise ValueError(f"effort must lie in [0, 10], got {effort}")
    if effort < mean_effort:
        return -1.0 + effort / mean_effort
    if effort > mean_effort:
        return 1.0 - (10.0 - effort) / (10.0 - mean_effort)
    return 0.0


def efforts_to_rewards(efforts: np.ndarray, mean_effort: float) -> np.ndarray:
    """Vectorised :func:`effort_to_reward`."""
    e = np.asarray(efforts, dtype=float)
    if not 0.0 < mean_effort < 10.0:
        raise ValueError(f"mean effort must lie strictly between 0 and 10, got {mean_effort}")
    if e.size and (e.min() < 0.0 or e.max() > 10.0):
        raise ValueError("efforts must lie in [0, 10]")
    out = np.zeros_like(e)
    lo, hi = e < mean_effort, e > mean_effort
    out[lo] = -1.0 + e[lo] / mean_effort
    out[hi] = 1.0 - (10.0 - e[hi]) / (10.0 - mean_effort)
    return out


@dataclass(frozen=True)
class MdpModel:
    transitions: np.ndarray  # [s, a, s']
    rewards: np.ndarray  # [s, a]
    support: np.ndarray  # [s, a] sample counts
    gamma: float = GAMMA

    def __post_init__(self) -> None:
        T, R = self.transitions, self.rewards
        if T.ndim != 3 or T.shape[0] != T.shape[2] or R.shape != T.shape[:2] or self.support.shape != R.shape:
            raise ValueError(f"inconsistent shapes T{T.shape} R{R.shape} support{self.support.shape}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if (T < 0).any() or not np.allclose(T.sum(axis=2), 1.0, rtol=0, atol=1e-9):
            raise ValueError("transition rows must be probability distributions")
        if (R < -1.0).any() or (R > 1.0).any():
            raise ValueError("expected rewards must lie in [-1, 1]")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "transitions": self.transitions.tolist(),
            "rewards": self.rewards.tolist(),
            "support": self.support.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> MdpModel:
        model = cls(
            transitions=np.array(data["transitions"], dtype=float),
            rewards=np.array(data["rewards"], dtype=float),
            support=np.array(data["support"], dtype=int),
            gamma=float(data["gamma"]),
        )
        if (model.n_states, model.n_actions) != (data["n_states"], data["n_actions"]):
            raise ValueError("declared dimensions do not match the stored tables")
        return model

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> MdpModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


def estimate_model_arrays(
    states: np.ndarray,
    actions: np.ndarray,
    rewards: np.ndarray,
    next_states: np.ndarray,
    n_states: int,
    n_actions: int = N_ACTIONS,
    gamma: float = GAMMA,
    weights: np.ndarray | None = None,
) -> MdpModel:
    """Maximum-likelihood T and mean-reward R from parallel sample arrays.

    Unobserved (s, a) rows get a uniform next-state distribution; their reward
    falls back to the mean reward of action a, then to the overall mean.
    """
    states = np.asarray(states, dtype=int)
    actions = np.asarray(actions, dtype=int)
    next_states = np.asarray(next_states, dtype=int)
    rewards = np.asarray(rewards, dtype=float)
    if states.size == 0:
        raise ValueError("cannot estimate a model from zero transitions")
    w = np.ones(states.size) if weights is None else np.asarray(weights, dtype=float)

    counts = np.zeros((n_states, n_actions, n_states))
    np.add.at(counts, (states, actions, next_states), w)
    sa_counts = counts.sum(axis=2)
    seen = sa_counts > 0
    T = np.full_like(counts, 1.0 / n_states)
    T[seen] = counts[seen] / sa_counts[seen][:, None]

    reward_sum = np.zeros((n_states, n_actions))
    np.add.at(reward_sum, (states, actions), w * rewards)
    R = np.empty((n_states, n_actions))
    R[seen] = reward_sum[seen] / sa_counts[seen]
    action_n = sa_counts.sum(axis=0)
    action_sum = reward_sum.sum(axis=0)
    overall = float(reward_sum.sum() / sa_counts.sum())
    action_mean = np.where(action_n > 0, action_sum / np.where(action_n > 0, action_n, 1), overall)
    R[~seen] = np.broadcast_to(action_mean, R.shape)[~seen]
    np.clip(R, -1.0, 1.0, out=R)

    support = np.zeros((n_states, n_actions), dtype=int)
    np.add.at(support, (states, actions), 1)
    return MdpModel(T, R, support, gamma)


def estimate_model(
    transitions: Sequence[TransitionSample],
    n_states: int,
    n_actions: int = N_ACTIONS,
    gamma: float = GAMMA,
) -> MdpModel:
    if not transitions:
        raise ValueError("cannot estimate a model from zero transitions")
    return estimate_model_arrays(
        [t.state for t in transitions],
        [t.action for t in transitions],
        [t.reward for t in transitions],
        [t.next_state for t in transitions],
        n_states,
        n_actions,
        gamma,
    )


@dataclass(frozen=True)
class ValueFunctions:
    V: np.ndarray
    Q: np.ndarray
    residual: float
    iterations: int
    mode: Mode = "optimal"
    residuals: tuple[float, ...] = field(default=(), repr=False)


def value_iteration(
    model: MdpModel,
    mode: Mode = "optimal",
    tolerance: float = TOLERANCE,
    max_iters: int = MAX_ITERS,
) -> ValueFunctions:
    """Bellman backups until the sup-norm change drops below ``tolerance``.

    ``mode="worst"`` backs up with a min over actions instead of a max.
    """
    if mode not in ("optimal", "worst"):
        raise ValueError(f"unknown mode {mode!r}")
    reduce = np.max if mode == "optimal" else np.min
    T, R, g = model.transitions, model.rewards, model.gamma
    V = np.zeros(model.n_states)
    residuals: list[float] = []
    for it in range(1, max_iters + 1):
        Q = R + g * (T @ V)
        V_new = reduce(Q, axis=1)
        delta = float(np.max(np.abs(V_new - V)))
        residuals.append(delta)
        V = V_new
        if delta < tolerance:
            return ValueFunctions(V, Q, delta, it, mode, tuple(residuals))
    raise ConvergenceError(residuals[-1], max_iters)


@dataclass(frozen=True)
class Policy:
    kind: Literal["deterministic", "uniform"]
    n_actions: int
    actions: tuple[int, ...] = ()
    name: str = ""

    def __post_init__(self) -> None:
        if self.kind == "deterministic":
            if any(not 0 <= a < self.n_actions for a in self.actions):
                raise ValueError(f"invalid action ids in {self.actions}")
        elif self.kind != "uniform":
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.n_actions < 1:
            raise ValueError("a policy needs at least one action")

    def matrix(self, n_states: int) -> np.ndarray:
        """Action probabilities pi(a|s) as an [n_states, n_actions] array."""
        if self.kind == "uniform":
            return np.full((n_states, self.n_actions), 1.0 / self.n_actions)
        if len(self.actions) != n_states:
            raise ValueError(f"policy covers {len(self.actions)} states, model has {n_states}")
        out = np.zeros((n_states, self.n_actions))
        out[np.arange(n_states), list(self.actions)] = 1.0
        return out


def extract_policy(value_functions: ValueFunctions, mode: Mode = "optimal") -> Policy:
    """Greedy (argmax) or worst (argmin) policy over Q; ties go to the lowest action id."""
    Q = value_functions.Q
    pick = np.argmax if mode == "optimal" else np.argmin
    name = {"optimal": "optimal", "worst": "worst"}[mode]
    return Policy("deterministic", Q.shape[1], tuple(int(a) for a in pick(Q, axis=1)), name)


def uniform_policy(n_actions: int = N_ACTIONS) -> Policy:
    return Policy("uniform", n_actions, name="uniform")


def policy_evaluation(model: MdpModel, policy: Policy) -> np.ndarray:
    """Exact V^pi by solving (I - gamma P_pi) V = R_pi."""
    pi = policy.matrix(model.n_states)
    P = np.einsum("sa,sat->st", pi, model.transitions)
    r = (pi * model.rewards).sum(axis=1)
    return np.linalg.solve(np.eye(model.n_states) - model.gamma * P, r)


def expected_rewards(model: MdpModel, policy: Policy) -> np.ndarray:
    """Per-state expected immediate reward under ``policy``."""
    return (policy.matrix(model.n_states) * model.rewards).sum(axis=1)


def fit_policies(model: MdpModel, tolerance: float = TOLERANCE, max_iters: int = MAX_ITERS):
    """Optimal and worst value functions with their policies."""
    best = value_iteration(model, "optimal", tolerance, max_iters)
    worst = value_iteration(model, "worst", tolerance, max_iters)
    return best, extract_policy(best, "optimal"), worst, extract_policy(worst, "worst")


def transitions_from(samples: Iterable[TransitionSample]) -> tuple[np.ndarray, ...]:
    rows = [(t.state, t.action, t.reward, t.next_state) for t in samples]
    if not rows:
        return (np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.zeros(0, int))
    s, a, r, s2 = zip(*rows)
    return np.array(s), np.array(a), np.array(r, dtype=float), np.array(s2)
