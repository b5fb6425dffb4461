"""Ground-truth MDPs and synthetic study-shaped corpora with known structure.

State bit j of the true model is written to answer column ``bit_columns[j]``
(1 -> Likert 5, 0 -> Likert 1), which keeps mean-threshold binarisation
faithful whenever both values occur. The remaining answer columns are
uniform noise on 1..5.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .abstraction import bits_to_states
from .dataset import ANSWER_COLUMNS, N_ACTIONS, Dataset, SessionRecord, TransitionSample, UserProfile
from .mdp import GAMMA, MdpModel, extract_policy, value_iteration

NOMINAL_MEAN_EFFORT = 5.0


@dataclass(frozen=True)
class StructureSpec:
    """What the generated world looks like.

    ``reward_gaps`` maps a state bit to the reward difference between its 1
    and 0 values. ``characteristic_response`` maps a characteristic name to
    the reward shift between users at the top and bottom of its range.
    """

    reward_gaps: Mapping[int, float] = field(default_factory=dict)
    action_spread: float = 0.2
    state_noise: float = 0.0
    concentration: float = 1.0
    stay_bias: float = 0.0
    reward_noise: float = 0.3
    min_q_gap: float = 0.0
    characteristic_response: Mapping[str, float] = field(default_factory=dict)
    n_characteristics: int = 4
    involvement_missing: float = 0.0

    def validate(self, n_state_bits: int) -> None:
        for bit, gap in self.reward_gaps.items():
            if not 0 <= bit < n_state_bits:
                raise ValueError(f"informative bit {bit} outside 0..{n_state_bits - 1}")
            if not -2.0 <= gap <= 2.0:
                raise ValueError(f"reward gap {gap} outside [-2, 2]")
        for name, gap in self.characteristic_response.items():
            if not -2.0 <= gap <= 2.0:
                raise ValueError(f"characteristic gap {gap} for {name!r} outside [-2, 2]")
        if not 0.0 <= self.stay_bias < 1.0:
            raise ValueError("stay_bias must lie in [0, 1)")
        if self.concentration <= 0:
            raise ValueError("concentration must be positive")
        if not 0.0 <= self.involvement_missing <= 1.0:
            raise ValueError("involvement_missing must lie in [0, 1]")


@dataclass(frozen=True)
class GroundTruth:
    model: MdpModel
    n_state_bits: int
    informative_bits: tuple[int, ...]
    spec: StructureSpec
    seed: int
    bit_columns: tuple[str, ...]

    @property
    def optimal_actions(self) -> tuple[int, ...]:
        return extract_policy(value_iteration(self.model, "optimal"), "optimal").actions

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_state_bits": self.n_state_bits,
            "informative_bits": list(self.informative_bits),
            "bit_columns": list(self.bit_columns),
            "reward_gaps": {str(k): v for k, v in self.spec.reward_gaps.items()},
            "characteristic_response": dict(self.spec.characteristic_response),
            "optimal_actions": list(self.optimal_actions),
            "model": self.model.to_dict(),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def _bits(n_state_bits: int) -> np.ndarray:
    idx = np.arange(2**n_state_bits)
    return (idx[:, None] >> np.arange(n_state_bits - 1, -1, -1)) & 1


def q_gaps(model: MdpModel) -> np.ndarray:
    """Per-state gap between the best and second-best optimal Q-value."""
    Q = np.sort(value_iteration(model, "optimal").Q, axis=1)
    return Q[:, -1] - Q[:, -2] if Q.shape[1] > 1 else np.full(Q.shape[0], np.inf)


def generate_mdp(
    n_state_bits: int,
    n_actions: int = N_ACTIONS,
    structure_spec: StructureSpec | None = None,
    seed: int = 0,
    *,
    gamma: float = GAMMA,
    max_tries: int = 1000,
) -> GroundTruth:
    """Random transition rows plus rewards shifted by the declared bit gaps.

    With ``min_q_gap > 0`` the draw is repeated (same seed stream) until every
    state's optimal action beats the runner-up by that margin.
    """
    spec = structure_spec or StructureSpec()
    if not 1 <= n_state_bits <= len(ANSWER_COLUMNS):
        raise ValueError(f"n_state_bits must lie in 1..{len(ANSWER_COLUMNS)}")
    spec.validate(n_state_bits)
    rng = np.random.default_rng(seed)
    n = 2**n_state_bits
    bits = _bits(n_state_bits)
    shift = np.zeros(n)
    for bit, gap in spec.reward_gaps.items():
        shift += gap * (bits[:, bit] - 0.5)
    for _ in range(max_tries):
        T = rng.gamma(spec.concentration, size=(n, n_actions, n))
        T /= T.sum(axis=2, keepdims=True)
        if spec.stay_bias:
            T *= 1.0 - spec.stay_bias
            T[np.arange(n), :, np.arange(n)] += spec.stay_bias
        action_effect = rng.uniform(-spec.action_spread, spec.action_spread, size=n_actions)
        noise = rng.uniform(-spec.state_noise, spec.state_noise, size=(n, n_actions)) if spec.state_noise else 0.0
        R = np.clip(shift[:, None] + action_effect[None, :] + noise, -1.0, 1.0)
        model = MdpModel(T, R, np.zeros((n, n_actions), dtype=int), gamma)
        if spec.min_q_gap <= 0 or q_gaps(model).min() >= spec.min_q_gap:
            break
    else:
        raise ValueError(f"no model with min Q-gap {spec.min_q_gap} in {max_tries} draws")
    informative = tuple(sorted(b for b, g in spec.reward_gaps.items() if g != 0))
    return GroundTruth(model, n_state_bits, informative, spec, seed, ANSWER_COLUMNS[:n_state_bits])


def _draw_rewards(rng: np.random.Generator, means: np.ndarray, noise: float) -> np.ndarray:
    # symmetric uniform noise, narrowed near the bounds so the mean is kept
    width = np.minimum(noise, 1.0 - np.abs(means))
    return means + rng.uniform(-1.0, 1.0, size=means.shape) * width


def _categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One draw per row of ``probs``."""
    cum = probs.cumsum(axis=1)
    return np.minimum((rng.random(len(probs))[:, None] > cum).sum(axis=1), probs.shape[1] - 1)


def sample_transitions(gt: GroundTruth, n: int, seed: int = 0) -> list[TransitionSample]:
    """``n`` i.i.d. samples with uniformly drawn (state, action) pairs and true-mean rewards."""
    rng = np.random.default_rng(seed)
    model = gt.model
    s = rng.integers(0, model.n_states, size=n)
    a = rng.integers(0, model.n_actions, size=n)
    s2 = _categorical(rng, model.transitions[s, a])
    r = _draw_rewards(rng, model.rewards[s, a], gt.spec.reward_noise)
    return [TransitionSample(f"u{i}", int(x), int(y), float(z), int(w)) for i, (x, y, z, w) in enumerate(zip(s, a, r, s2))]


def reward_to_effort(reward: np.ndarray, mean_effort: float = NOMINAL_MEAN_EFFORT) -> np.ndarray:
    """Approximate inverse of the effort-to-reward map, rounded to the 0..10 grid."""
    r = np.asarray(reward, dtype=float)
    e = np.where(r < 0, mean_effort * (1.0 + r), 10.0 - (10.0 - mean_effort) * (1.0 - r))
    return np.clip(np.rint(e), 0, 10).astype(int)


def characteristic_names(n: int) -> list[str]:
    return [f"c{i:02d}" for i in range(1, n + 1)]


def sample_dataset(
    gt: GroundTruth,
    n_users: int,
    sessions_per_user: int = 5,
    seed: int = 0,
    behavior: Sequence[float] | None = None,
) -> Dataset:
    """Simulate users walking the true model under a random behaviour policy.

    Session k's answers encode the user's state, session k's action is drawn
    from ``behavior`` (uniform by default), and session k+1 reports the effort
    obtained from a reward drawn around R[s][a] plus the user's characteristic
    shift. Profiles hold ``n_characteristics`` uniform traits on [0, 10] and
    an involvement score, missing for a ``involvement_missing`` share of users.
    """
    if n_users < 1:
        raise ValueError("n_users must be at least 1")
    if not 1 <= sessions_per_user <= 5:
        raise ValueError("sessions_per_user must lie in 1..5")
    spec = gt.spec
    rng = np.random.default_rng(seed)
    model = gt.model
    n_actions = model.n_actions
    probs = np.full(n_actions, 1.0 / n_actions) if behavior is None else np.asarray(behavior, dtype=float)
    names = characteristic_names(spec.n_characteristics)
    for name in spec.characteristic_response:
        if name not in names and name != "involvement":
            raise ValueError(f"characteristic_response names unknown characteristic {name!r}")
    bits = _bits(gt.n_state_bits)
    col_index = [ANSWER_COLUMNS.index(c) for c in gt.bit_columns]
    noise_cols = [j for j in range(len(ANSWER_COLUMNS)) if j not in col_index]

    width = len(str(n_users))
    uids = [f"s{u:0{width}d}" for u in range(n_users)]
    traits = rng.uniform(0.0, 10.0, size=(n_users, len(names)))
    involvement = rng.uniform(0.0, 10.0, size=n_users)
    missing_inv = rng.random(n_users) < spec.involvement_missing
    user_shift = np.zeros(n_users)
    for name, gap in spec.characteristic_response.items():
        value = involvement if name == "involvement" else traits[:, names.index(name)]
        user_shift += gap * (value / 10.0 - 0.5)
    profiles = [
        UserProfile(uid, dict(zip(names, map(float, traits[u]))), None if missing_inv[u] else float(involvement[u]))
        for u, uid in enumerate(uids)
    ]

    n_q = len(ANSWER_COLUMNS)
    answers = np.empty((sessions_per_user, n_users, n_q), dtype=int)
    actions = np.full((sessions_per_user, n_users), -1)
    efforts = np.full((sessions_per_user, n_users), -1)
    state = rng.integers(0, model.n_states, size=n_users)
    for k in range(sessions_per_user):
        answers[k][:, col_index] = np.where(bits[state] == 1, 5, 1)
        answers[k][:, noise_cols] = rng.integers(1, 6, size=(n_users, len(noise_cols)))
        if k == sessions_per_user - 1:
            break
        a = _categorical(rng, np.broadcast_to(probs, (n_users, n_actions)))
        actions[k] = a
        mean = np.clip(model.rewards[state, a] + user_shift, -1.0, 1.0)
        efforts[k + 1] = reward_to_effort(_draw_rewards(rng, mean, spec.reward_noise))
        state = _categorical(rng, model.transitions[state, a])

    sessions = [
        SessionRecord(
            uid,
            k + 1,
            tuple(int(x) for x in answers[k, u]),
            None if actions[k, u] < 0 else int(actions[k, u]),
            None if efforts[k, u] < 0 else int(efforts[k, u]),
        )
        for u, uid in enumerate(uids)
        for k in range(sessions_per_user)
    ]
    return Dataset(sessions=tuple(sessions), profiles=tuple(profiles))


def states_of(dataset: Dataset, gt: GroundTruth) -> dict[tuple[str, int], int]:
    """True state of every (user, session), recovered from the encoded answers."""
    idx = [ANSWER_COLUMNS.index(c) for c in gt.bit_columns]
    answers = np.array([s.answers for s in dataset.sessions])[:, idx]
    states = bits_to_states(answers == 5)
    return {(s.user_id, s.session_index): int(x) for s, x in zip(dataset.sessions, states)}
