from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from persuasion_rl.cli import OUTPUT_ENV, main
from persuasion_rl.dataset import ACTIONS, write_sessions
from persuasion_rl.synth import StructureSpec, generate_mdp, sample_dataset

from .conftest import session_row, write_csv


@pytest.fixture(scope="module")
def corpus(tmp_path_factory) -> Path:
    d = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--out", str(d), "--users", "120", "--seed", "3", "--involvement-missing", "0.2"]) == 0
    return d


@pytest.fixture(scope="module")
def fitted(corpus, tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("fit")
    assert main(["fit", "--sessions", str(corpus / "sessions.csv"), "--out", str(out)]) == 0
    return out


def _rows(path: Path) -> list[dict[str, str]]:
    with path.open() as fh:
        return list(csv.DictReader(fh))


# -- validate ----------------------------------------------------------------


def test_validate_ok(corpus, capsys):
    code = main(["validate", "--sessions", str(corpus / "sessions.csv"), "--profiles", str(corpus / "profiles.csv")])
    assert code == 0
    assert "n_users=120" in capsys.readouterr().out


def test_validate_bad_likert(tmp_path, sessions_header, capsys):
    rows = [session_row("a", 1), session_row("a", 2, answers=(3, 3, 3, 3, 7, 3, 3, 3))]
    path = write_csv(tmp_path / "s.csv", sessions_header, rows)
    assert main(["validate", "--sessions", str(path)]) == 1
    assert "line 3" in capsys.readouterr().err
    assert main(["validate", "--sessions", str(path), "--lenient"]) == 0


def test_validate_empty_and_missing_file(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert main(["validate", "--sessions", str(empty)]) == 1
    assert main(["validate", "--sessions", str(tmp_path / "nope.csv")]) == 1


def test_usage_errors(corpus, fitted, capsys):
    with pytest.raises(SystemExit) as info:
        main(["fit"])
    assert info.value.code == 2
    sessions = str(corpus / "sessions.csv")
    assert main(["evaluate", "--sessions", sessions, "--predictors", "oracle", "--out", str(fitted / "x")]) == 2
    assert main(["fit", "--sessions", sessions, "--gamma", "1.0", "--out", str(fitted / "x")]) == 2
    args = ["simulate", "--model", str(fitted / "model.json"), "--feature-set", str(fitted / "feature_set.json")]
    assert main(args + ["--horizon", "0", "--out", str(fitted / "x")]) == 2


def test_non_convergence_exit_code(corpus, tmp_path, capsys):
    code = main(["fit", "--sessions", str(corpus / "sessions.csv"), "--max-iters", "2", "--out", str(tmp_path)])
    assert code == 3
    assert "residual" in capsys.readouterr().err


# -- fit ---------------------------------------------------------------------


def test_fit_artifacts(fitted):
    fs = json.loads((fitted / "feature_set.json").read_text())
    model = json.loads((fitted / "model.json").read_text())
    policy = _rows(fitted / "policy.csv")
    assert fs["k"] == 3
    assert len(policy) == 8 and all(r["optimal_action"] in ACTIONS for r in policy)
    assert np.array(model["transitions"]).shape == (8, 5, 8)
    manifest = json.loads((fitted / "manifest.json").read_text())
    assert manifest["command"] == "fit" and len(manifest["inputs"]) == 1
    assert sorted(manifest["outputs"]) == ["feature_set.json", "model.json", "policy.csv"]


def test_fit_k1_gives_two_states(corpus, tmp_path):
    assert main(["fit", "--sessions", str(corpus / "sessions.csv"), "--k", "1", "--out", str(tmp_path)]) == 0
    assert [r["state"] for r in _rows(tmp_path / "policy.csv")] == ["0", "1"]


def test_fit_recovers_known_policy(tmp_path):
    spec = StructureSpec(reward_gaps={0: 1.0}, state_noise=0.5, min_q_gap=0.1, reward_noise=0.1)
    gt = generate_mdp(3, structure_spec=spec, seed=11)
    ds = sample_dataset(gt, 6000, 5, seed=12)
    write_sessions(ds, tmp_path / "s.csv")
    out = tmp_path / "out"
    assert main(["fit", "--sessions", str(tmp_path / "s.csv"), "--candidates", "q1,q2,q3", "--out", str(out)]) == 0
    selected = json.loads((out / "feature_set.json").read_text())["selected"]
    policy = {r["state"]: r["optimal_action"] for r in _rows(out / "policy.csv")}
    for true_state, action in enumerate(gt.optimal_actions):
        bits = dict(zip(gt.bit_columns, format(true_state, "03b")))
        label = "".join(bits[c] for c in selected)
        assert policy[label] == ACTIONS[action]


# -- evaluate ----------------------------------------------------------------


def test_evaluate_blocks(corpus, fitted, tmp_path):
    args = [
        "evaluate",
        "--sessions", str(corpus / "sessions.csv"),
        "--profiles", str(corpus / "profiles.csv"),
        "--feature-set", str(fitted / "feature_set.json"),
        "--out", str(tmp_path),
    ]
    assert main(args) == 0
    rewards = _rows(tmp_path / "reward_errors.csv")
    assert [a for a in dict.fromkeys(r["approach"] for r in rewards)] == [
        "overall_mean", "per_action", "per_action_state"
    ]
    next_state = _rows(tmp_path / "next_state.csv")
    per_state = [r for r in next_state if r["group"] != "overall"]
    assert len(per_state) == 3 * 8 and len(next_state) == 3 * 9
    assert all(float(r["mean"]) == 0.125 for r in next_state if r["approach"] == "uniform")


def test_evaluate_characteristics_and_similarity(corpus, fitted, tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"configs": [
        {"characteristics": ["c01"], "kernel": "linear", "sharpness": 2},
        {"characteristics": ["c01", "c02"], "kernel": "exponential", "sharpness": 1},
    ]}))
    args = [
        "evaluate",
        "--sessions", str(corpus / "sessions.csv"),
        "--profiles", str(corpus / "profiles.csv"),
        "--feature-set", str(fitted / "feature_set.json"),
        "--predictors", "per_action_charstate,similarity_weighted",
        "--characteristics", "pre,all",
        "--similarity-grid", str(grid),
        "--next-state", "none",
        "--out", str(tmp_path / "out"),
    ]
    assert main(args) == 0
    out = tmp_path / "out"
    ranking = _rows(out / "similarity_ranking.csv")
    assert [r["rank"] for r in ranking] == ["1", "2"]
    assert float(ranking[0]["mean_l1"]) <= float(ranking[1]["mean_l1"])
    approaches = {r["approach"] for r in _rows(out / "reward_errors.csv")}
    assert {"per_action_charstate[pre]", "per_action_charstate[all]"} <= approaches
    assert json.loads((out / "characteristics_all.json").read_text())["source"] == "user_characteristics"
    assert not (out / "next_state.csv").exists()


# -- simulate ----------------------------------------------------------------


def _simulate(fitted, corpus, out, *extra):
    return main([
        "simulate",
        "--model", str(fitted / "model.json"),
        "--feature-set", str(fitted / "feature_set.json"),
        "--sessions", str(corpus / "sessions.csv"),
        "--out", str(out),
        *extra,
    ])


def test_simulate_reports(fitted, corpus, tmp_path):
    assert _simulate(fitted, corpus, tmp_path, "--populations", "uniform,session1_all,session1_low_reward") == 0
    dist = _rows(tmp_path / "distributions.csv")
    assert sum(r["population"] == "uniform" for r in dist) == 20
    rewards = _rows(tmp_path / "rewards.csv")
    assert list(rewards[0]) == ["population", "t", "optimal", "uniform", "worst"]
    assert sum(r["population"] == "uniform" for r in rewards) == 100
    for r in rewards:
        assert float(r["optimal"]) >= float(r["worst"])
    graph = _rows(tmp_path / "graph.csv")
    assert graph and all(float(e["probability"]) >= 0.125 for e in graph)


def test_simulate_monte_carlo(fitted, corpus, tmp_path):
    assert _simulate(fitted, corpus, tmp_path, "--monte-carlo", "20000", "--horizon", "5") == 0
    mc = _rows(tmp_path / "monte_carlo.csv")
    exact = _rows(tmp_path / "distributions.csv")
    labels = [k for k in exact[0] if k not in ("policy", "population", "t")]
    for a, b in zip(mc, exact):
        assert max(abs(float(a[s]) - float(b[s])) for s in labels) <= 2 / np.sqrt(20000)


def test_simulate_missing_artifact(fitted, tmp_path, capsys):
    code = main(["simulate", "--model", str(tmp_path / "gone.json"), "--feature-set",
                 str(fitted / "feature_set.json"), "--out", str(tmp_path)])
    assert code == 1
    assert "gone.json" in capsys.readouterr().err


# -- reproducibility -----------------------------------------------------------


def test_identical_runs_are_byte_identical(corpus, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["fit", "--sessions", str(corpus / "sessions.csv"), "--out", str(out)]) == 0
        assert _simulate(out, corpus, out) == 0
        outs.append(out)
    for f in ("feature_set.json", "model.json", "policy.csv", "graph.csv", "distributions.csv", "rewards.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()


def test_output_dir_from_environment(corpus, tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert main(["fit", "--sessions", str(corpus / "sessions.csv"), "--k", "1"]) == 0
    assert (tmp_path / "env" / "model.json").is_file()
    assert main(["fit", "--sessions", str(corpus / "sessions.csv"), "--k", "1", "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "model.json").is_file()


def test_synth_writes_ground_truth(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--users", "10", "--response", "c02=1.0"]) == 0
    gt = json.loads((tmp_path / "ground_truth.json").read_text())
    assert gt["characteristic_response"] == {"c02": 1.0}
    assert len(gt["optimal_actions"]) == 8
    assert main(["synth", "--out", str(tmp_path), "--gap", "3"]) == 2
    assert main(["synth", "--out", str(tmp_path), "--response", "c02"]) == 2
