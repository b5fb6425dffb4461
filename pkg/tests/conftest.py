from __future__ import annotations

import csv
from pathlib import Path

import pytest

from persuasion_rl.dataset import SESSION_COLUMNS, Dataset, SessionRecord, UserProfile


def write_csv(path: Path, header, rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def session_row(user, k, action=0, effort=5, answers=(3,) * 8):
    return [user, k, "" if action is None else action, "" if effort is None else effort, *answers]


def make_user(user, n_sessions=5, answers=(3,) * 8, efforts=None, actions=None, start=1):
    """Session records for one user; session 1 has no effort, the last no action."""
    recs = []
    for i, k in enumerate(range(start, start + n_sessions)):
        last = i == n_sessions - 1
        effort = None if k == 1 else (efforts[i] if efforts else 5)
        action = None if last else (actions[i] if actions else 0)
        ans = answers[i] if answers and isinstance(answers[0], tuple) else answers
        recs.append(SessionRecord(user, k, tuple(ans), action, effort))
    return recs


def dataset_of(*users: list[SessionRecord], profiles=None) -> Dataset:
    sessions = tuple(r for recs in users for r in recs)
    ids = sorted({r.user_id for r in sessions})
    return Dataset(sessions=sessions, profiles=tuple(profiles or (UserProfile(u) for u in ids)))


@pytest.fixture
def sessions_header():
    return list(SESSION_COLUMNS)
