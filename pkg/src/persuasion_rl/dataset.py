"""Session/profile ingestion and pairing of consecutive sessions into transition samples.

Sessions file: one row per (user, session) with columns ``user_id``,
``session_index``, ``action``, ``effort``, ``q1`` .. ``q8``. An empty cell
means the value is absent. Profiles file: ``user_id``, the characteristic
columns, and ``involvement``.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

ACTIONS: tuple[str, ...] = (
    "commitment",
    "consensus",
    "authority",
    "action_planning",
    "no_persuasion",
)
N_ACTIONS = len(ACTIONS)
ANSWER_COLUMNS: tuple[str, ...] = tuple(f"q{i}" for i in range(1, 9))
SESSION_COLUMNS: tuple[str, ...] = ("user_id", "session_index", "action", "effort") + ANSWER_COLUMNS
INVOLVEMENT = "involvement"
MAX_SESSIONS = 5


class DataError(ValueError):
    """Raised when input data cannot be ingested."""


@dataclass(frozen=True)
class RejectedRow:
    line: int
    column: str
    message: str

    def __str__(self) -> str:
        return f"line {self.line}, column {self.column!r}: {self.message}"


@dataclass(frozen=True)
class SessionRecord:
    user_id: str
    session_index: int
    answers: tuple[int, ...]
    action: int | None = None
    effort: int | None = None

    def __post_init__(self) -> None:
        if len(self.answers) != len(ANSWER_COLUMNS):
            raise ValueError(f"expected {len(ANSWER_COLUMNS)} answers, got {len(self.answers)}")
        if any(not 1 <= v <= 5 for v in self.answers):
            raise ValueError(f"answers out of 1..5: {self.answers}")
        if not 1 <= self.session_index <= MAX_SESSIONS:
            raise ValueError(f"session_index out of 1..{MAX_SESSIONS}: {self.session_index}")
        if self.action is not None and not 0 <= self.action < N_ACTIONS:
            raise ValueError(f"unknown action id {self.action}")
        if self.effort is not None and not 0 <= self.effort <= 10:
            raise ValueError(f"effort out of 0..10: {self.effort}")

    @property
    def features(self) -> dict[str, float]:
        return dict(zip(ANSWER_COLUMNS, map(float, self.answers)))


@dataclass(frozen=True)
class TransitionSample:
    user_id: str
    state: int
    action: int
    reward: float
    next_state: int

    def __post_init__(self) -> None:
        if not -1.0 <= self.reward <= 1.0:
            raise ValueError(f"reward out of [-1, 1]: {self.reward}")


@dataclass(frozen=True)
class UserProfile:
    user_id: str
    characteristics: Mapping[str, float] = field(default_factory=dict)
    involvement: float | None = None

    @property
    def features(self) -> dict[str, float]:
        """Characteristics plus involvement when present."""
        out = dict(self.characteristics)
        if self.involvement is not None:
            out[INVOLVEMENT] = self.involvement
        return out


@dataclass(frozen=True)
class Dataset:
    sessions: tuple[SessionRecord, ...] = ()
    profiles: tuple[UserProfile, ...] = ()
    transitions: tuple[TransitionSample, ...] = ()
    rejected: tuple[RejectedRow, ...] = ()

    def __post_init__(self) -> None:
        known = {p.user_id for p in self.profiles}
        for t in self.transitions:
            if t.user_id not in known:
                raise ValueError(f"transition for unknown user {t.user_id!r}")

    @property
    def user_ids(self) -> list[str]:
        return sorted({s.user_id for s in self.sessions} | {p.user_id for p in self.profiles})

    @property
    def characteristic_names(self) -> tuple[str, ...]:
        for p in self.profiles:
            if p.characteristics:
                return tuple(p.characteristics)
        return ()

    def profile_map(self) -> dict[str, UserProfile]:
        return {p.user_id: p for p in self.profiles}

    def sessions_by_user(self) -> dict[str, list[SessionRecord]]:
        out: dict[str, list[SessionRecord]] = defaultdict(list)
        for s in self.sessions:
            out[s.user_id].append(s)
        for recs in out.values():
            recs.sort(key=lambda r: r.session_index)
        return dict(sorted(out.items()))

    def with_transitions(self, transitions: Iterable[TransitionSample]) -> Dataset:
        return replace(self, transitions=tuple(transitions))

    def subset(self, user_ids: Iterable[str]) -> Dataset:
        keep = set(user_ids)
        return Dataset(
            sessions=tuple(s for s in self.sessions if s.user_id in keep),
            profiles=tuple(p for p in self.profiles if p.user_id in keep),
            transitions=tuple(t for t in self.transitions if t.user_id in keep),
        )

    def effort_reports(self) -> np.ndarray:
        return np.array([s.effort for s in self.sessions if s.effort is not None], dtype=float)

    def mean_effort(self) -> float:
        efforts = self.effort_reports()
        if efforts.size == 0:
            raise DataError("no effort reports to compute a mean effort from")
        return float(efforts.mean())


# -- parsing -----------------------------------------------------------------


def _parse_action(raw: str) -> int:
    raw = raw.strip()
    if raw.lstrip("-").isdigit():
        value = int(raw)
        if 0 <= value < N_ACTIONS:
            return value
        raise ValueError(f"unknown action id {value}")
    name = raw.lower().replace(" ", "_")
    if name in ACTIONS:
        return ACTIONS.index(name)
    raise ValueError(f"unknown action {raw!r}")


def _parse_int(raw: str, lo: int, hi: int, what: str) -> int:
    try:
        value = float(raw)
    except ValueError:
        raise ValueError(f"{what} is not a number: {raw!r}") from None
    if not value.is_integer():
        raise ValueError(f"{what} is not an integer: {raw!r}")
    if not lo <= value <= hi:
        raise ValueError(f"{what} {int(value)} outside {lo}..{hi}")
    return int(value)


def _read_rows(path: Path, required: Sequence[str], schema: Mapping[str, str]):
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file, expected a header row")
        header = [h.strip() for h in reader.fieldnames]
        missing = [schema.get(c, c) for c in required if schema.get(c, c) not in header]
        if missing:
            raise DataError(f"{path}: header lacks columns {missing}")
        reader.fieldnames = header
        for row in reader:
            yield reader.line_num, header, {k: (v or "").strip() for k, v in row.items() if k is not None}


def parse_sessions(
    path: str | Path,
    schema: Mapping[str, str] | None = None,
    *,
    strict: bool = True,
) -> Dataset:
    """Read a sessions file into a Dataset of SessionRecords.

    ``schema`` maps canonical column names to the names used in the file.
    Every bad row is reported with its line number; with ``strict=True`` any
    rejected row raises DataError listing all of them, otherwise the rejected
    rows are kept on ``Dataset.rejected``.
    """
    schema = dict(schema or {})
    col = lambda name: schema.get(name, name)  # noqa: E731
    records: list[SessionRecord] = []
    rejected: list[RejectedRow] = []
    seen: dict[tuple[str, int], int] = {}
    n_rows = 0
    for line, _, row in _read_rows(Path(path), SESSION_COLUMNS, schema):
        n_rows += 1
        problems: list[RejectedRow] = []

        def grab(name: str, parse: Callable[[str], object], optional: bool = False):
            raw = row.get(col(name), "")
            if raw == "":
                if not optional:
                    problems.append(RejectedRow(line, col(name), "missing value"))
                return None
            try:
                return parse(raw)
            except ValueError as exc:
                problems.append(RejectedRow(line, col(name), str(exc)))
                return None

        user_id = row.get(col("user_id"), "")
        if not user_id:
            problems.append(RejectedRow(line, col("user_id"), "missing value"))
        session = grab("session_index", lambda r: _parse_int(r, 1, MAX_SESSIONS, "session_index"))
        action = grab("action", _parse_action, optional=True)
        effort = grab("effort", lambda r: _parse_int(r, 0, 10, "effort"), optional=True)
        answers = [grab(q, lambda r, q=q: _parse_int(r, 1, 5, f"Likert answer {q}")) for q in ANSWER_COLUMNS]
        if not problems and (user_id, session) in seen:
            problems.append(
                RejectedRow(
                    line,
                    col("session_index"),
                    f"duplicate session {session} for user {user_id!r} (first on line {seen[(user_id, session)]})",
                )
            )
        if problems:
            rejected.extend(problems)
            continue
        seen[(user_id, session)] = line
        records.append(SessionRecord(user_id, session, tuple(answers), action, effort))

    if n_rows == 0:
        raise DataError(f"{path}: no data rows")
    if rejected and strict:
        detail = "\n  ".join(map(str, rejected))
        raise DataError(f"{path}: {len(rejected)} problem(s) in session rows:\n  {detail}")
    users = sorted({r.user_id for r in records})
    return Dataset(
        sessions=tuple(records),
        profiles=tuple(UserProfile(u) for u in users),
        rejected=tuple(rejected),
    )


def parse_profiles(path: str | Path, *, strict: bool = True) -> tuple[list[UserProfile], list[RejectedRow]]:
    """Read a profiles file. Only ``involvement`` may be empty."""
    profiles: list[UserProfile] = []
    rejected: list[RejectedRow] = []
    seen: set[str] = set()
    names: list[str] = []
    for line, header, row in _read_rows(Path(path), ("user_id", INVOLVEMENT), {}):
        names = [h for h in header if h not in ("user_id", INVOLVEMENT)]
        problems: list[RejectedRow] = []
        user_id = row.get("user_id", "")
        if not user_id:
            problems.append(RejectedRow(line, "user_id", "missing value"))
        elif user_id in seen:
            problems.append(RejectedRow(line, "user_id", f"duplicate profile for {user_id!r}"))
        values: dict[str, float] = {}
        for name in names + [INVOLVEMENT]:
            raw = row.get(name, "")
            if raw == "":
                if name != INVOLVEMENT:
                    problems.append(RejectedRow(line, name, "missing value"))
                continue
            try:
                value = float(raw)
            except ValueError:
                problems.append(RejectedRow(line, name, f"not a number: {raw!r}"))
                continue
            if not math.isfinite(value):
                problems.append(RejectedRow(line, name, f"not finite: {raw!r}"))
                continue
            values[name] = value
        if problems:
            rejected.extend(problems)
            continue
        seen.add(user_id)
        involvement = values.pop(INVOLVEMENT, None)
        profiles.append(UserProfile(user_id, {n: values[n] for n in names}, involvement))
    if rejected and strict:
        detail = "\n  ".join(map(str, rejected))
        raise DataError(f"{path}: {len(rejected)} problem(s) in profile rows:\n  {detail}")
    return profiles, rejected


def load_dataset(
    sessions_path: str | Path,
    profiles_path: str | Path | None = None,
    schema: Mapping[str, str] | None = None,
    *,
    strict: bool = True,
) -> Dataset:
    """Parse sessions and (optionally) profiles into one Dataset.

    Users that have sessions but no profile row get an empty profile.
    """
    ds = parse_sessions(sessions_path, schema, strict=strict)
    if profiles_path is None:
        return ds
    profiles, rejected = parse_profiles(profiles_path, strict=strict)
    by_user = {p.user_id: p for p in profiles}
    for u in sorted({s.user_id for s in ds.sessions} - by_user.keys()):
        by_user[u] = UserProfile(u)
    return Dataset(
        sessions=ds.sessions,
        profiles=tuple(by_user[u] for u in sorted(by_user)),
        rejected=ds.rejected + tuple(rejected),
    )


def _fmt(value: float) -> str:
    return repr(float(value))


def write_sessions(dataset: Dataset, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SESSION_COLUMNS)
        for s in sorted(dataset.sessions, key=lambda r: (r.user_id, r.session_index)):
            writer.writerow(
                [
                    s.user_id,
                    s.session_index,
                    "" if s.action is None else s.action,
                    "" if s.effort is None else s.effort,
                    *s.answers,
                ]
            )


def write_profiles(dataset: Dataset, path: str | Path) -> None:
    names = list(dataset.characteristic_names)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["user_id", *names, INVOLVEMENT])
        for p in sorted(dataset.profiles, key=lambda p: p.user_id):
            writer.writerow(
                [
                    p.user_id,
                    *(_fmt(p.characteristics[n]) for n in names),
                    "" if p.involvement is None else _fmt(p.involvement),
                ]
            )


# -- pairing -----------------------------------------------------------------


def consecutive_pairs(dataset: Dataset) -> list[tuple[SessionRecord, SessionRecord]]:
    """All (session k, session k+1) pairs of one user where k has an action and k+1 an effort.

    A gap in session indices breaks the chain; no bridging across a missing
    session. Output is sorted by (user_id, session_index).
    """
    pairs = []
    for user, recs in dataset.sessions_by_user().items():
        for prev, nxt in zip(recs, recs[1:]):
            if nxt.session_index != prev.session_index + 1:
                logger.debug("user %s: session gap %d -> %d, pair skipped", user, prev.session_index, nxt.session_index)
                continue
            if prev.action is None or nxt.effort is None:
                continue
            pairs.append((prev, nxt))
    return pairs


def pair_transitions(
    dataset: Dataset,
    feature_set,
    reward_fn: Callable[[int], float],
) -> list[TransitionSample]:
    """Build one TransitionSample per valid consecutive session pair.

    The state comes from session k's answers, the next state from session
    k+1's answers, and the reward from the effort reported in session k+1.
    """
    from .abstraction import project

    return [
        TransitionSample(
            user_id=prev.user_id,
            state=project(prev, feature_set),
            action=int(prev.action),
            reward=float(reward_fn(nxt.effort)),
            next_state=project(nxt, feature_set),
        )
        for prev, nxt in consecutive_pairs(dataset)
    ]


@dataclass(frozen=True)
class PairTable:
    """Column-oriented view of all consecutive pairs, for vectorised folds.

    ``before``/``after`` hold the raw answer vectors (columns ordered as
    ANSWER_COLUMNS) of sessions k and k+1.
    """

    user_ids: np.ndarray
    before: np.ndarray
    after: np.ndarray
    actions: np.ndarray
    efforts: np.ndarray
    session_index: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> PairTable:
        pairs = consecutive_pairs(dataset)
        n = len(ANSWER_COLUMNS)
        return cls(
            user_ids=np.array([p.user_id for p, _ in pairs], dtype=object),
            before=np.array([p.answers for p, _ in pairs], dtype=float).reshape(-1, n),
            after=np.array([q.answers for _, q in pairs], dtype=float).reshape(-1, n),
            actions=np.array([p.action for p, _ in pairs], dtype=int),
            efforts=np.array([q.effort for _, q in pairs], dtype=float),
            session_index=np.array([p.session_index for p, _ in pairs], dtype=int),
        )


# -- validation --------------------------------------------------------------


@dataclass(frozen=True)
class ValidationReport:
    n_users: int
    n_profiles: int
    n_sessions: int
    n_transitions: int
    n_rejected: int
    n_missing_involvement: int
    n_with_involvement: int
    mean_effort: float | None
    feature_means: dict[str, float | None]

    def to_text(self) -> str:
        lines = [
            f"n_users={self.n_users}",
            f"n_profiles={self.n_profiles}",
            f"n_sessions={self.n_sessions}",
            f"n_transitions={self.n_transitions}",
            f"n_rejected={self.n_rejected}",
            f"n_with_involvement={self.n_with_involvement}",
            f"n_missing_involvement={self.n_missing_involvement}",
            f"mean_effort={'' if self.mean_effort is None else repr(self.mean_effort)}",
        ]
        for name, value in self.feature_means.items():
            lines.append(f"mean_{name}={'' if value is None else repr(value)}")
        return "\n".join(lines) + "\n"


def validate(dataset: Dataset) -> ValidationReport:
    """Summarise a dataset; never raises."""
    answers = np.array([s.answers for s in dataset.sessions], dtype=float).reshape(-1, len(ANSWER_COLUMNS))
    means = {
        q: (float(answers[:, j].mean()) if len(answers) else None) for j, q in enumerate(ANSWER_COLUMNS)
    }
    efforts = dataset.effort_reports()
    with_inv = sum(p.involvement is not None for p in dataset.profiles)
    return ValidationReport(
        n_users=len({s.user_id for s in dataset.sessions}),
        n_profiles=len(dataset.profiles),
        n_sessions=len(dataset.sessions),
        n_transitions=len(consecutive_pairs(dataset)),
        n_rejected=len(dataset.rejected),
        n_missing_involvement=len(dataset.profiles) - with_inv,
        n_with_involvement=with_inv,
        mean_effort=float(efforts.mean()) if efforts.size else None,
        feature_means=means,
    )
