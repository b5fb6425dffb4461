"""Mean-threshold binarisation and greedy selection of compact binary state spaces.

A state over selected features ``(f1, ..., fk)`` is written as a k-character
binary string with the first selected feature leftmost, so ``"011"`` means
f1 = 0, f2 = 1, f3 = 1. Its integer index is that string read in base 2.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Literal, Mapping, Sequence

import numpy as np

from .dataset import ANSWER_COLUMNS, INVOLVEMENT, N_ACTIONS, Dataset, PairTable, TransitionSample, UserProfile
from .mdp import GAMMA, TOLERANCE, MAX_ITERS, efforts_to_rewards, estimate_model_arrays, value_iteration

logger = logging.getLogger(__name__)

Source = Literal["state_answers", "user_characteristics"]
Scoring = Literal["conditional", "marginal"]
Aggregate = Literal["mean", "max"]


class MissingFeatureError(KeyError):
    def __init__(self, feature: str) -> None:
        super().__init__(feature)
        self.feature = feature

    def __str__(self) -> str:
        return f"missing feature {self.feature!r}"


@dataclass(frozen=True)
class FeatureSet:
    source: Source
    selected: tuple[str, ...]
    thresholds: tuple[float, ...]
    scores: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if len(set(self.selected)) != len(self.selected):
            raise ValueError(f"selected features are not distinct: {self.selected}")
        if len(self.thresholds) != len(self.selected):
            raise ValueError("one threshold per selected feature is required")
        if self.source not in ("state_answers", "user_characteristics"):
            raise ValueError(f"unknown feature source {self.source!r}")

    @property
    def k(self) -> int:
        return len(self.selected)

    @property
    def n_states(self) -> int:
        return 2**self.k

    def labels(self) -> list[str]:
        return [state_label(i, self.k) for i in range(self.n_states)]

    def with_thresholds(self, thresholds: Mapping[str, float]) -> FeatureSet:
        return FeatureSet(self.source, self.selected, tuple(float(thresholds[f]) for f in self.selected), self.scores)

    def to_dict(self) -> dict[str, Any]:
        return {
            "source": self.source,
            "k": self.k,
            "selected": list(self.selected),
            "thresholds": list(self.thresholds),
            "scores": list(self.scores),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> FeatureSet:
        fs = cls(
            data["source"],
            tuple(data["selected"]),
            tuple(float(t) for t in data["thresholds"]),
            tuple(float(s) for s in data.get("scores", ())),
        )
        if fs.k != data.get("k", fs.k):
            raise ValueError("declared k does not match the selected features")
        return fs

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> FeatureSet:
        return cls.from_dict(json.loads(Path(path).read_text()))


def state_label(index: int, k: int) -> str:
    return format(index, f"0{k}b") if k else ""


def bits_to_states(bits: np.ndarray) -> np.ndarray:
    """Pack an [n, k] 0/1 array into state indices, column 0 as the most significant bit."""
    bits = np.asarray(bits, dtype=int)
    k = bits.shape[1]
    weights = 1 << np.arange(k - 1, -1, -1)
    return bits @ weights if k else np.zeros(len(bits), dtype=int)


def _features_of(item: Any) -> Mapping[str, float]:
    return item.features if hasattr(item, "features") else item


def compute_thresholds(records: Iterable[Any], feature_names: Sequence[str]) -> dict[str, float]:
    """Arithmetic mean of each feature over the records that carry it."""
    sums = dict.fromkeys(feature_names, 0.0)
    counts = dict.fromkeys(feature_names, 0)
    for rec in records:
        values = _features_of(rec)
        for name in feature_names:
            v = values.get(name)
            if v is not None:
                sums[name] += float(v)
                counts[name] += 1
    empty = [n for n in feature_names if counts[n] == 0]
    if empty:
        raise ValueError(f"no values to compute thresholds for {empty}")
    return {n: sums[n] / counts[n] for n in feature_names}


def project(item: Any, feature_set: FeatureSet) -> int:
    """State index of a session record, profile or plain mapping."""
    values = _features_of(item)
    index = 0
    for name, threshold in zip(feature_set.selected, feature_set.thresholds):
        v = values.get(name)
        if v is None:
            raise MissingFeatureError(name)
        index = (index << 1) | int(v >= threshold)
    return index


# -- COM-B state features ----------------------------------------------------


def _q_score(
    before_bits: np.ndarray,
    after_bits: np.ndarray,
    actions: np.ndarray,
    rewards: np.ndarray,
    gamma: float,
    aggregate: Aggregate,
) -> float:
    """Support-weighted |Q(b, f=0, a) - Q(b, f=1, a)| for the last column f."""
    n_bits = before_bits.shape[1]
    states = bits_to_states(before_bits)
    next_states = bits_to_states(after_bits)
    model = estimate_model_arrays(states, actions, rewards, next_states, 2**n_bits, N_ACTIONS, gamma)
    Q = value_iteration(model, "optimal", TOLERANCE, MAX_ITERS).Q
    n_ctx = 2 ** (n_bits - 1)
    Q = Q.reshape(n_ctx, 2, N_ACTIONS)
    sup = model.support.reshape(n_ctx, 2, N_ACTIONS).astype(float)
    both = (sup[:, 0] > 0) & (sup[:, 1] > 0)
    diff = np.abs(Q[:, 0] - Q[:, 1])
    weight = np.where(both, sup[:, 0] + sup[:, 1], 0.0)
    if weight.sum() == 0:
        return 0.0
    if aggregate == "mean":
        return float((weight * diff).sum() / weight.sum())
    ctx_weight = weight.sum(axis=1)
    ctx_max = np.where(both, diff, -np.inf).max(axis=1)
    keep = ctx_weight > 0
    return float((ctx_weight[keep] * ctx_max[keep]).sum() / ctx_weight[keep].sum())


def score_state_candidates(
    table: PairTable,
    rewards: np.ndarray,
    thresholds: Mapping[str, float],
    selected: Sequence[str],
    candidates: Sequence[str],
    *,
    gamma: float = GAMMA,
    scoring: Scoring = "conditional",
    aggregate: Aggregate = "mean",
) -> dict[str, float]:
    """Q-difference score of every candidate given the already ``selected`` features.

    ``scoring="conditional"`` builds the state space over selected + candidate;
    ``"marginal"`` scores each candidate on its own two-state abstraction.
    """
    if scoring not in ("conditional", "marginal"):
        raise ValueError(f"unknown scoring mode {scoring!r}")
    if aggregate not in ("mean", "max"):
        raise ValueError(f"unknown aggregate {aggregate!r}")
    if len(table) == 0:
        return {c: 0.0 for c in candidates}
    base = list(selected) if scoring == "conditional" else []
    scores = {}
    for cand in candidates:
        cols = base + [cand]
        idx = [ANSWER_COLUMNS.index(c) for c in cols]
        thr = np.array([thresholds[c] for c in cols])
        scores[cand] = _q_score(
            table.before[:, idx] >= thr,
            table.after[:, idx] >= thr,
            table.actions,
            rewards,
            gamma,
            aggregate,
        )
    return scores


def _greedy(k: int, candidates: Sequence[str], score_round) -> tuple[list[str], list[float]]:
    chosen: list[str] = []
    chosen_scores: list[float] = []
    remaining = sorted(candidates)
    for _ in range(k):
        scores = score_round(chosen, remaining)
        best = min(remaining, key=lambda c: (-scores[c], c))
        logger.info("selected %s (score %.4f)", best, scores[best])
        chosen.append(best)
        chosen_scores.append(scores[best])
        remaining.remove(best)
    return chosen, chosen_scores


def select_state_features(
    dataset: Dataset,
    k: int = 3,
    gamma: float = GAMMA,
    candidates: Sequence[str] | None = None,
    *,
    scoring: Scoring = "conditional",
    aggregate: Aggregate = "mean",
    mean_effort: float | None = None,
) -> FeatureSet:
    """Greedily pick ``k`` answer features whose binary split moves Q the most.

    Thresholds and the mean effort come from every session in ``dataset``.
    Ties break on the feature name.
    """
    candidates = list(ANSWER_COLUMNS if candidates is None else candidates)
    unknown = [c for c in candidates if c not in ANSWER_COLUMNS]
    if unknown:
        raise ValueError(f"unknown answer features {unknown}")
    if not 0 <= k <= len(candidates):
        raise ValueError(f"k={k} must lie in 0..{len(candidates)}")
    thresholds = compute_thresholds(dataset.sessions, candidates)
    table = PairTable.from_dataset(dataset)
    ebar = dataset.mean_effort() if mean_effort is None else mean_effort
    rewards = efforts_to_rewards(table.efforts, ebar)

    def round_scores(chosen, remaining):
        return score_state_candidates(
            table, rewards, thresholds, chosen, remaining, gamma=gamma, scoring=scoring, aggregate=aggregate
        )

    chosen, scores = _greedy(k, candidates, round_scores)
    return FeatureSet("state_answers", tuple(chosen), tuple(thresholds[c] for c in chosen), tuple(scores))


# -- user characteristics ----------------------------------------------------


def characteristic_candidates(profiles: Sequence[UserProfile], mode: Literal["pre", "all"]) -> list[str]:
    names: list[str] = []
    for p in profiles:
        if p.characteristics:
            names = list(p.characteristics)
            break
    if mode == "all":
        names.append(INVOLVEMENT)
    elif mode != "pre":
        raise ValueError(f"unknown characteristic mode {mode!r}")
    return names


def score_characteristics(
    profiles: Sequence[UserProfile],
    transitions: Sequence[TransitionSample],
    candidates: Sequence[str],
    thresholds: Mapping[str, float] | None = None,
) -> tuple[dict[str, float], dict[str, float]]:
    """|mean reward (c = 1) - mean reward (c = 0)| for each candidate.

    Only users that have transitions and a value for every candidate are
    used. Returns (scores, thresholds).
    """
    by_user = {p.user_id: p.features for p in profiles}
    pool = sorted(
        {t.user_id for t in transitions if t.user_id in by_user}
        & {u for u, f in by_user.items() if all(c in f for c in candidates)}
    )
    if thresholds is None:
        thresholds = compute_thresholds([by_user[u] for u in pool], candidates) if pool else {}
    pool_set = set(pool)
    samples = [t for t in transitions if t.user_id in pool_set]
    rewards = np.array([t.reward for t in samples])
    scores = {}
    for c in candidates:
        if not samples:
            scores[c] = 0.0
            continue
        bit = np.array([by_user[t.user_id][c] >= thresholds[c] for t in samples])
        if bit.all() or not bit.any():
            scores[c] = 0.0
        else:
            scores[c] = float(abs(rewards[bit].mean() - rewards[~bit].mean()))
    return scores, dict(thresholds)


def select_characteristic_features(
    profiles: Sequence[UserProfile],
    transitions: Sequence[TransitionSample],
    k: int = 3,
    mode: Literal["pre", "all"] = "pre",
    candidates: Sequence[str] | None = None,
) -> FeatureSet:
    """Pick ``k`` characteristics with the largest reward gap between their binary halves.

    Candidates are scored marginally, so the greedy rounds reduce to ranking
    by score with ties broken on the name.
    """
    candidates = list(characteristic_candidates(profiles, mode) if candidates is None else candidates)
    if not 0 <= k <= len(candidates):
        raise ValueError(f"k={k} must lie in 0..{len(candidates)}")
    scores, thresholds = score_characteristics(profiles, transitions, candidates)
    if not thresholds:
        raise ValueError("no user has transitions and values for every candidate characteristic")
    chosen, chosen_scores = _greedy(k, candidates, lambda chosen, remaining: scores)
    return FeatureSet(
        "user_characteristics", tuple(chosen), tuple(thresholds[c] for c in chosen), tuple(chosen_scores)
    )


def state_transitions(dataset: Dataset, feature_set: FeatureSet, mean_effort: float | None = None):
    """Project every consecutive pair of ``dataset`` onto ``feature_set``."""
    from .dataset import pair_transitions
    from .mdp import effort_to_reward

    ebar = dataset.mean_effort() if mean_effort is None else mean_effort
    return pair_transitions(dataset, feature_set, lambda e: effort_to_reward(e, ebar))


def fit_state_space(dataset: Dataset, feature_set: FeatureSet) -> FeatureSet:
    """Recompute the thresholds of ``feature_set`` from ``dataset``'s sessions."""
    return feature_set.with_thresholds(compute_thresholds(dataset.sessions, feature_set.selected))
