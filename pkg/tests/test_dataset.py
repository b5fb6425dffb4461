from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from persuasion_rl.abstraction import FeatureSet
from persuasion_rl.dataset import (
    DataError,
    Dataset,
    SessionRecord,
    UserProfile,
    consecutive_pairs,
    load_dataset,
    pair_transitions,
    parse_profiles,
    parse_sessions,
    validate,
    write_profiles,
    write_sessions,
)
from persuasion_rl.synth import StructureSpec, generate_mdp, sample_dataset

from .conftest import dataset_of, make_user, session_row, write_csv

ONE_BIT = FeatureSet("state_answers", ("q1",), (3.0,))


def test_two_users_five_sessions(tmp_path, sessions_header):
    rows = [session_row(u, k, None if k == 5 else 1, None if k == 1 else 4) for u in ("a", "b") for k in range(1, 6)]
    ds = parse_sessions(write_csv(tmp_path / "s.csv", sessions_header, rows))
    assert len(ds.sessions) == 10
    assert [p.user_id for p in ds.profiles] == ["a", "b"]


def test_out_of_range_answer_names_column_and_line(tmp_path, sessions_header):
    rows = [session_row("a", 1), session_row("a", 2, answers=(3, 3, 6, 3, 3, 3, 3, 3))]
    path = write_csv(tmp_path / "s.csv", sessions_header, rows)
    with pytest.raises(DataError, match=r"line 3, column 'q3'"):
        parse_sessions(path)
    ds = parse_sessions(path, strict=False)
    assert len(ds.sessions) == 1
    assert [(r.line, r.column) for r in ds.rejected] == [(3, "q3")]


def test_duplicate_session_rejected(tmp_path, sessions_header):
    rows = [session_row("a", 1), session_row("a", 1)]
    ds = parse_sessions(write_csv(tmp_path / "s.csv", sessions_header, rows), strict=False)
    assert len(ds.sessions) == 1
    assert "duplicate" in ds.rejected[0].message and ds.rejected[0].line == 3


@pytest.mark.parametrize("action", ["7", "flattery", "-1"])
def test_unknown_action_rejected(tmp_path, sessions_header, action):
    rows = [session_row("a", 1, action=action)]
    with pytest.raises(DataError, match="action"):
        parse_sessions(write_csv(tmp_path / "s.csv", sessions_header, rows))


def test_action_names_accepted(tmp_path, sessions_header):
    rows = [session_row("a", 1, action="authority"), session_row("a", 2, action="action planning")]
    ds = parse_sessions(write_csv(tmp_path / "s.csv", sessions_header, rows))
    assert [s.action for s in ds.sessions] == [2, 3]


def test_missing_answer_rejected(tmp_path, sessions_header):
    row = session_row("a", 1)
    row[6] = ""
    ds = parse_sessions(write_csv(tmp_path / "s.csv", sessions_header, [row, session_row("a", 2)]), strict=False)
    assert ds.rejected[0].column == "q3"


def test_empty_and_headerless_files(tmp_path, sessions_header):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(DataError):
        parse_sessions(empty)
    only_header = write_csv(tmp_path / "h.csv", sessions_header, [])
    with pytest.raises(DataError, match="no data rows"):
        parse_sessions(only_header)
    bad = write_csv(tmp_path / "b.csv", ["user_id", "session_index"], [["a", 1]])
    with pytest.raises(DataError, match="header lacks"):
        parse_sessions(bad)


def test_schema_column_map(tmp_path, sessions_header):
    header = ["pid" if c == "user_id" else c for c in sessions_header]
    ds = parse_sessions(write_csv(tmp_path / "s.csv", header, [session_row("x", 1)]), {"user_id": "pid"})
    assert ds.sessions[0].user_id == "x"


def test_profiles_allow_missing_involvement_only(tmp_path):
    header = ["user_id", "age", "involvement"]
    path = write_csv(tmp_path / "p.csv", header, [["a", 30, 4.5], ["b", 41, ""], ["c", "", 2]])
    profiles, rejected = parse_profiles(path, strict=False)
    assert [p.user_id for p in profiles] == ["a", "b"]
    assert profiles[1].involvement is None
    assert rejected[0].column == "age"


def test_pairing_counts():
    full = make_user("a", 5)
    only_first = make_user("b", 1)
    gap = [SessionRecord("c", k, (3,) * 8, 0, None if k == 1 else 5) for k in (1, 2, 4)]
    ds = dataset_of(full, only_first, gap)
    per_user = {}
    for t in pair_transitions(ds, ONE_BIT, lambda e: 0.0):
        per_user[t.user_id] = per_user.get(t.user_id, 0) + 1
    assert per_user == {"a": 4, "c": 1}


def test_transition_fields_come_from_the_right_sessions():
    answers = [(1,) * 8, (5,) * 8, (1,) * 8]
    ds = dataset_of(make_user("a", 3, answers=answers, efforts=[None, 8, 2], actions=[3, 1, None]))
    t1, t2 = pair_transitions(ds, ONE_BIT, lambda e: e / 10)
    assert (t1.state, t1.action, t1.reward, t1.next_state) == (0, 3, 0.8, 1)
    assert (t2.state, t2.action, t2.reward, t2.next_state) == (1, 1, 0.2, 0)


def _brute_force_pairs(sessions):
    have = {(s.user_id, s.session_index): s for s in sessions}
    count = 0
    for (u, k), s in have.items():
        nxt = have.get((u, k + 1))
        if nxt is not None and s.action is not None and nxt.effort is not None:
            count += 1
    return count


session_strategy = st.lists(
    st.tuples(
        st.sampled_from(["u1", "u2", "u3"]),
        st.integers(1, 5),
        st.one_of(st.none(), st.integers(0, 4)),
        st.one_of(st.none(), st.integers(0, 10)),
        st.tuples(*[st.integers(1, 5)] * 8),
    ),
    max_size=15,
    unique_by=lambda t: (t[0], t[1]),
)


@settings(max_examples=60, deadline=None)
@given(session_strategy, st.randoms())
def test_pairing_matches_enumeration_and_ignores_row_order(rows, rnd):
    sessions = [SessionRecord(u, k, ans, a, e) for u, k, a, e, ans in rows]
    ds = dataset_of(sessions)
    got = pair_transitions(ds, ONE_BIT, lambda e: e / 10)
    assert len(got) == _brute_force_pairs(sessions)
    shuffled = list(sessions)
    rnd.shuffle(shuffled)
    again = pair_transitions(dataset_of(shuffled), ONE_BIT, lambda e: e / 10)
    assert sorted(map(repr, got)) == sorted(map(repr, again))
    assert len(got) <= max(0, len(sessions) - len({s.user_id for s in sessions}))


def test_round_trip(tmp_path):
    gt = generate_mdp(3, seed=4)
    ds = sample_dataset(gt, 20, 5, seed=5)
    profiles = tuple(
        UserProfile(p.user_id, p.characteristics, None if i % 3 == 0 else p.involvement)
        for i, p in enumerate(ds.profiles)
    )
    ds = Dataset(sessions=ds.sessions, profiles=profiles)
    write_sessions(ds, tmp_path / "s.csv")
    write_profiles(ds, tmp_path / "p.csv")
    back = load_dataset(tmp_path / "s.csv", tmp_path / "p.csv")
    assert sorted(back.sessions, key=repr) == sorted(ds.sessions, key=repr)
    assert back.profiles == tuple(sorted(ds.profiles, key=lambda p: p.user_id))


def test_validate_counts():
    empty = validate(Dataset())
    assert (empty.n_users, empty.n_sessions, empty.n_transitions, empty.n_missing_involvement) == (0, 0, 0, 0)
    one = validate(dataset_of(make_user("a", 5)))
    assert one.n_users == 1 and one.n_transitions == 4
    text = one.to_text()
    assert text.splitlines()[0] == "n_users=1" and "mean_q8=3.0" in text


def test_validate_involvement_counts():
    gt = generate_mdp(3, structure_spec=StructureSpec(involvement_missing=0.3), seed=1)
    ds = sample_dataset(gt, 100, 5, seed=2)
    rep = validate(ds)
    assert rep.n_with_involvement + rep.n_missing_involvement == 100
    assert 0 < rep.n_missing_involvement < 100


def test_study_scale_synthetic_corpus():
    ds = sample_dataset(generate_mdp(3, seed=0), 671, 5, seed=1)
    rep = validate(ds)
    assert rep.n_profiles == 671
    assert rep.n_transitions == len(consecutive_pairs(ds)) == 671 * 4
    assert rep.n_transitions >= 2366


def test_transition_for_unknown_user_rejected():
    from persuasion_rl.dataset import TransitionSample

    with pytest.raises(ValueError, match="unknown user"):
        Dataset(transitions=(TransitionSample("ghost", 0, 0, 0.0, 0),))
    with pytest.raises(ValueError):
        TransitionSample("a", 0, 0, 1.5, 0)


def test_session_record_invariants():
    with pytest.raises(ValueError):
        SessionRecord("a", 1, (3,) * 7)
    with pytest.raises(ValueError):
        SessionRecord("a", 1, (3,) * 8, effort=11)
    rnd = random.Random(0)
    rec = SessionRecord("a", 2, tuple(rnd.randint(1, 5) for _ in range(8)), 4, 0)
    assert rec.features["q1"] == float(rec.answers[0])
