"""Leave-one-person-out evaluation of reward and next-state predictors.

Every fold refits the mean effort, the feature thresholds and all predictor
tables on the remaining users; the selected features stay fixed so per-state
results line up across folds.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Iterable, Literal, Sequence

import numpy as np
from scipy import stats

from .abstraction import FeatureSet, bits_to_states
from .dataset import ANSWER_COLUMNS, N_ACTIONS, Dataset, PairTable, TransitionSample
from .mdp import GAMMA, efforts_to_rewards, estimate_model_arrays

if TYPE_CHECKING:
    from .similarity import SimilarityConfig

PREDICTOR_KINDS = ("overall_mean", "per_action", "per_action_state", "per_action_charstate", "similarity_weighted")
NEXT_STATE_APPROACHES = ("uniform", "stay", "transition_fn")


# -- intervals ---------------------------------------------------------------


def bayesian_mean_ci(values: Sequence[float], level: float = 0.95) -> tuple[float, float, float]:
    """Posterior mean and equal-tailed credible interval for a mean.

    With a flat prior on (mean, log sigma) the marginal posterior of the
    mean is Student-t with n - 1 degrees of freedom, centred on the sample
    mean with scale s / sqrt(n).
    """
    x = np.asarray(values, dtype=float)
    n = x.size
    if n < 2:
        raise ValueError(f"need at least two values for an interval, got {n}")
    m = float(x.mean())
    s = float(x.std(ddof=1))
    if s == 0.0:
        return m, m, m
    half = float(stats.t.ppf(0.5 + level / 2, df=n - 1)) * s / math.sqrt(n)
    return m, m - half, m + half


def bootstrap_mean_ci(
    values: Sequence[float], level: float = 0.95, n_resamples: int = 10_000, seed: int = 0
) -> tuple[float, float, float]:
    """Percentile bootstrap interval for the mean."""
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise ValueError(f"need at least two values for an interval, got {x.size}")
    rng = np.random.default_rng(seed)
    means = x[rng.integers(0, x.size, size=(n_resamples, x.size))].mean(axis=1)
    lo, hi = np.quantile(means, [0.5 - level / 2, 0.5 + level / 2])
    m = float(x.mean())
    return m, min(float(lo), m), max(float(hi), m)


@dataclass(frozen=True)
class EvalResult:
    group: str
    mean: float
    ci_low: float
    ci_high: float
    n: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("an EvalResult needs at least one value")
        if not self.ci_low <= self.mean <= self.ci_high:
            raise ValueError(f"interval [{self.ci_low}, {self.ci_high}] does not contain the mean {self.mean}")


class IntervalComparison(str, Enum):
    A_CREDIBLY_LOWER = "a_credibly_lower"
    B_CREDIBLY_LOWER = "b_credibly_lower"
    OVERLAPPING = "overlapping"


def compare_intervals(a: EvalResult, b: EvalResult) -> IntervalComparison:
    """Non-overlapping intervals count as a credible difference."""
    if a.ci_high < b.ci_low:
        return IntervalComparison.A_CREDIBLY_LOWER
    if b.ci_high < a.ci_low:
        return IntervalComparison.B_CREDIBLY_LOWER
    return IntervalComparison.OVERLAPPING


def summarize(
    group: str,
    values: np.ndarray,
    *,
    ci_method: Literal["t", "bootstrap"] = "t",
    level: float = 0.95,
    n_resamples: int = 10_000,
    seed: int = 0,
) -> EvalResult:
    if values.size == 1:
        v = float(values[0])
        return EvalResult(group, v, -math.inf, math.inf, 1)
    if ci_method == "t":
        m, lo, hi = bayesian_mean_ci(values, level)
    elif ci_method == "bootstrap":
        m, lo, hi = bootstrap_mean_ci(values, level, n_resamples, seed)
    else:
        raise ValueError(f"unknown CI method {ci_method!r}")
    return EvalResult(group, m, lo, hi, int(values.size))


# -- predictors --------------------------------------------------------------


@dataclass(frozen=True)
class RewardPredictor:
    """Mean-reward tables with the fallback chain action+state -> action -> overall.

    Unseen cells hold NaN in the tables; :meth:`predict` never returns NaN.
    """

    kind: str
    overall: float
    per_action: np.ndarray
    per_action_state: np.ndarray  # [state, action]

    @classmethod
    def fit(
        cls,
        kind: str,
        states: np.ndarray,
        actions: np.ndarray,
        rewards: np.ndarray,
        n_states: int,
        n_actions: int = N_ACTIONS,
        weights: np.ndarray | None = None,
    ) -> RewardPredictor:
        if kind not in PREDICTOR_KINDS:
            raise ValueError(f"unknown predictor kind {kind!r}")
        if rewards.size == 0:
            raise ValueError("cannot fit a reward predictor without samples")
        w = np.ones(rewards.size) if weights is None else np.asarray(weights, dtype=float)
        overall = float(rewards.mean())
        a_sum = np.bincount(actions, weights=rewards, minlength=n_actions)
        a_n = np.bincount(actions, minlength=n_actions).astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            per_action = np.where(a_n > 0, a_sum / a_n, np.nan)
        keep = states >= 0
        flat = states[keep] * n_actions + actions[keep]
        sa_sum = np.bincount(flat, weights=w[keep] * rewards[keep], minlength=n_states * n_actions)
        sa_w = np.bincount(flat, weights=w[keep], minlength=n_states * n_actions)
        with np.errstate(invalid="ignore", divide="ignore"):
            table = np.where(sa_w > 0, sa_sum / np.where(sa_w > 0, sa_w, 1.0), np.nan)
        return cls(kind, overall, per_action, table.reshape(n_states, n_actions))

    def predict(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        out = np.full(actions.shape, self.overall)
        if self.kind == "overall_mean":
            return out
        by_action = self.per_action[actions]
        out = np.where(np.isnan(by_action), out, by_action)
        if self.kind == "per_action":
            return out
        known = states >= 0
        by_cell = np.full(actions.shape, np.nan)
        by_cell[known] = self.per_action_state[states[known], actions[known]]
        return np.where(np.isnan(by_cell), out, by_cell)


# -- fold machinery ----------------------------------------------------------


@dataclass(frozen=True)
class LoocvOptions:
    ci_method: Literal["t", "bootstrap"] = "t"
    aggregate: Literal["pooled", "per_user"] = "pooled"
    level: float = 0.95
    characteristic_set: FeatureSet | None = None
    similarity: "SimilarityConfig | None" = None
    gamma: float = GAMMA
    n_resamples: int = 10_000
    seed: int = 0


@dataclass
class Fold:
    user: str
    train: np.ndarray  # bool mask over pair rows
    test: np.ndarray
    states: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    mean_effort: float
    thresholds: np.ndarray


class FoldBuilder:
    """Precomputed arrays from which each leave-one-user-out fold is derived."""

    def __init__(self, dataset: Dataset, feature_set: FeatureSet | None) -> None:
        self.dataset = dataset
        self.feature_set = feature_set
        self.table = PairTable.from_dataset(dataset)
        self.session_users = np.array([s.user_id for s in dataset.sessions], dtype=object)
        self.session_answers = np.array([s.answers for s in dataset.sessions], dtype=float).reshape(
            -1, len(ANSWER_COLUMNS)
        )
        self.effort_users = np.array([s.user_id for s in dataset.sessions if s.effort is not None], dtype=object)
        self.effort_values = dataset.effort_reports()
        self.users = sorted(set(self.table.user_ids.tolist()))
        if len(self.users) < 2:
            raise ValueError("leave-one-out needs at least two users with transitions")
        if feature_set is not None:
            if feature_set.source != "state_answers":
                raise ValueError("the grouping feature set must be built from state answers")
            self.cols = [ANSWER_COLUMNS.index(f) for f in feature_set.selected]
        else:
            self.cols = []
        self.n_states = 2 ** len(self.cols)

    def fold(self, user: str) -> Fold:
        test = self.table.user_ids == user
        train = ~test
        sess = self.session_users != user
        thr = self.session_answers[sess][:, self.cols].mean(axis=0) if self.cols else np.zeros(0)
        ebar = float(self.effort_values[self.effort_users != user].mean())
        states = bits_to_states(self.table.before[:, self.cols] >= thr)
        next_states = bits_to_states(self.table.after[:, self.cols] >= thr)
        rewards = efforts_to_rewards(self.table.efforts, ebar)
        return Fold(user, train, test, states, next_states, rewards, ebar, thr)


class _CharStates:
    """Per-user characteristic states with fold-local thresholds."""

    def __init__(self, dataset: Dataset, feature_set: FeatureSet, users: Sequence[str]) -> None:
        self.feature_set = feature_set
        profiles = dataset.profile_map()
        self.users = list(users)
        self.index = {u: i for i, u in enumerate(self.users)}
        self.values = np.array(
            [[profiles[u].features.get(c, np.nan) if u in profiles else np.nan for c in feature_set.selected]
             for u in self.users],
            dtype=float,
        ).reshape(len(self.users), feature_set.k)
        self.complete = ~np.isnan(self.values).any(axis=1)

    def states_for_fold(self, user: str) -> np.ndarray:
        """State per user (-1 where a characteristic is missing)."""
        pool = self.complete.copy()
        pool[self.index[user]] = False
        if not pool.any():
            raise ValueError("no training user carries all selected characteristics")
        thr = self.values[pool].mean(axis=0)
        with np.errstate(invalid="ignore"):
            bits = self.values >= thr
        out = bits_to_states(bits)
        out[~self.complete] = -1
        return out


@dataclass
class LoocvResult:
    approach: str
    overall: EvalResult
    per_state: list[EvalResult]
    user_ids: np.ndarray
    states: np.ndarray
    values: np.ndarray
    predictions: np.ndarray = field(repr=False)
    state_labels: list[str] = field(default_factory=list, repr=False)


def _aggregate(
    approach: str,
    values: np.ndarray,
    states: np.ndarray,
    users: np.ndarray,
    labels: list[str],
    options: LoocvOptions,
) -> tuple[EvalResult, list[EvalResult]]:
    def reduce(mask: np.ndarray) -> np.ndarray:
        if options.aggregate == "pooled":
            return values[mask]
        if options.aggregate != "per_user":
            raise ValueError(f"unknown aggregate {options.aggregate!r}")
        sub_u, sub_v = users[mask], values[mask]
        return np.array([sub_v[sub_u == u].mean() for u in sorted(set(sub_u.tolist()))])

    kw = dict(ci_method=options.ci_method, level=options.level, n_resamples=options.n_resamples, seed=options.seed)
    overall = summarize("overall", reduce(np.ones(values.size, dtype=bool)), **kw)
    per_state = []
    if labels:
        for s, label in enumerate(labels):
            mask = states == s
            if mask.any():
                per_state.append(summarize(label, reduce(mask), **kw))
    return overall, per_state


def _similarity_pool(dataset: Dataset, config: "SimilarityConfig", users: Sequence[str]):
    from .similarity import profile_matrix

    return profile_matrix(dataset.profile_map(), users, config.characteristics)


def loocv_reward(
    dataset: Dataset,
    predictor_kind: str,
    feature_set: FeatureSet | None,
    options: LoocvOptions | None = None,
) -> LoocvResult:
    """Leave-one-user-out L1 error of a reward predictor.

    Errors are grouped by the sample's current state under ``feature_set``
    (fold-local thresholds); ``feature_set`` may be None for predictors that
    ignore the state, in which case only the overall result is reported.
    """
    options = options or LoocvOptions()
    if predictor_kind not in PREDICTOR_KINDS:
        raise ValueError(f"unknown predictor kind {predictor_kind!r}")
    needs_state = predictor_kind in ("per_action_state", "similarity_weighted")
    if needs_state and feature_set is None:
        raise ValueError(f"{predictor_kind} needs a state feature set")
    builder = FoldBuilder(dataset, feature_set)
    table = builder.table
    n = len(table)
    predictions = np.empty(n)
    actual = np.empty(n)  # fold mean effort, so rewards differ per fold
    group_states = np.zeros(n, dtype=int)

    chars = None
    if predictor_kind == "per_action_charstate":
        if options.characteristic_set is None:
            raise ValueError("per_action_charstate needs options.characteristic_set")
        chars = _CharStates(dataset, options.characteristic_set, builder.users)
    sim = None
    if predictor_kind == "similarity_weighted":
        if options.similarity is None:
            raise ValueError("similarity_weighted needs options.similarity")
        from .similarity import fold_weights

        sim_values = _similarity_pool(dataset, options.similarity, builder.users)
        user_index = {u: i for i, u in enumerate(builder.users)}
        row_user = np.array([user_index[u] for u in table.user_ids], dtype=int)

    for user in builder.users:
        f = builder.fold(user)
        tr, te = f.train, f.test
        group_states[te] = f.states[te]
        actual[te] = f.rewards[te]
        if predictor_kind == "per_action_charstate":
            cs = chars.states_for_fold(user)
            row_cs = cs[[chars.index[u] for u in table.user_ids]]
            model = RewardPredictor.fit(
                predictor_kind, row_cs[tr], table.actions[tr], f.rewards[tr], chars.feature_set.n_states
            )
            predictions[te] = model.predict(row_cs[te], table.actions[te])
            continue
        base_kind = "per_action_state" if predictor_kind == "similarity_weighted" else predictor_kind
        base = RewardPredictor.fit(base_kind, f.states[tr], table.actions[tr], f.rewards[tr], builder.n_states)
        pred = base.predict(f.states[te], table.actions[te])
        if predictor_kind == "similarity_weighted":
            w_user = fold_weights(sim_values, user_index[user], options.similarity)
            if w_user is not None:
                w = w_user[row_user[tr]]
                pooled = ~np.isnan(w)
                weighted = RewardPredictor.fit(
                    "per_action_state",
                    np.where(pooled, f.states[tr], -1),
                    table.actions[tr],
                    f.rewards[tr],
                    builder.n_states,
                    weights=np.nan_to_num(w),
                )
                cell = weighted.per_action_state[f.states[te], table.actions[te]]
                pred = np.where(np.isnan(cell), pred, cell)
        predictions[te] = pred

    errors = np.abs(predictions - actual)
    labels = feature_set.labels() if feature_set is not None else []
    overall, per_state = _aggregate(predictor_kind, errors, group_states, table.user_ids, labels, options)
    return LoocvResult(predictor_kind, overall, per_state, table.user_ids, group_states, errors, predictions, labels)


def loocv_next_state(
    dataset: Dataset,
    approach: str,
    feature_set: FeatureSet,
    options: LoocvOptions | None = None,
) -> LoocvResult:
    """Leave-one-user-out likelihood assigned to the realised next state."""
    options = options or LoocvOptions()
    if approach not in NEXT_STATE_APPROACHES:
        raise ValueError(f"unknown next-state approach {approach!r}")
    builder = FoldBuilder(dataset, feature_set)
    table = builder.table
    n_states = builder.n_states
    likelihood = np.empty(len(table))
    group_states = np.zeros(len(table), dtype=int)
    for user in builder.users:
        f = builder.fold(user)
        te, tr = f.test, f.train
        s, s2 = f.states[te], f.next_states[te]
        group_states[te] = s
        if approach == "uniform":
            likelihood[te] = 1.0 / n_states
        elif approach == "stay":
            likelihood[te] = (s == s2).astype(float)
        else:
            model = estimate_model_arrays(
                f.states[tr], table.actions[tr], f.rewards[tr], f.next_states[tr], n_states, N_ACTIONS, options.gamma
            )
            likelihood[te] = model.transitions[s, table.actions[te], s2]
    labels = feature_set.labels()
    overall, per_state = _aggregate(approach, likelihood, group_states, table.user_ids, labels, options)
    return LoocvResult(approach, overall, per_state, table.user_ids, group_states, likelihood, likelihood, labels)


def mean_reward_by_state(
    transitions: Sequence[TransitionSample], feature_set: FeatureSet, options: LoocvOptions | None = None
) -> tuple[EvalResult, list[EvalResult]]:
    """Mean observed reward overall and per current state (no cross-validation)."""
    options = options or LoocvOptions()
    rewards = np.array([t.reward for t in transitions])
    states = np.array([t.state for t in transitions], dtype=int)
    users = np.array([t.user_id for t in transitions], dtype=object)
    return _aggregate("reward", rewards, states, users, feature_set.labels(), options)


# -- reports -----------------------------------------------------------------

REPORT_COLUMNS = ("approach", "group", "mean", "ci_low", "ci_high", "n")


def _num(x: float) -> str:
    return f"{x:.6f}" if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def result_rows(result: LoocvResult, include_overall: bool = True) -> list[list[str]]:
    rows = [[result.approach, r.group, _num(r.mean), _num(r.ci_low), _num(r.ci_high), str(r.n)]
            for r in result.per_state]
    if include_overall:
        o = result.overall
        rows.append([result.approach, o.group, _num(o.mean), _num(o.ci_low), _num(o.ci_high), str(o.n)])
    return rows


def format_report(results: Iterable[LoocvResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for res in results:
        writer.writerows(result_rows(res))
    return buf.getvalue()
