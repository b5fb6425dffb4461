from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from persuasion_rl.abstraction import FeatureSet
from persuasion_rl.dataset import TransitionSample, UserProfile
from persuasion_rl.evaluation import LoocvOptions, loocv_reward
from persuasion_rl.similarity import (
    SimilarityConfig,
    config_search,
    default_grid,
    fold_weights,
    format_ranking,
    load_grid,
    save_grid,
    similarity_weight,
    weighted_reward_predict,
)
from persuasion_rl.synth import StructureSpec, generate_mdp, sample_dataset

THREE = FeatureSet("state_answers", ("q1", "q2", "q3"), (3.0, 3.0, 3.0))
UNIT = ((0.0, 1.0),)


def _p(user, x, **extra):
    return UserProfile(user, {"x": x, **extra})


def test_identical_profiles_weight_one():
    for kernel in ("linear", "exponential"):
        cfg = SimilarityConfig(("x",), kernel, 3.0, UNIT)
        assert similarity_weight(_p("a", 0.4), _p("b", 0.4), cfg) == 1.0


def test_maximally_different_linear_is_zero():
    cfg = SimilarityConfig(("x",), "linear", 2.0, UNIT)
    assert similarity_weight(_p("a", 0.0), _p("b", 1.0), cfg) == 0.0


def test_exponential_half_distance():
    cfg = SimilarityConfig(("x",), "exponential", 2.0, UNIT)
    assert similarity_weight(_p("a", 0.0), _p("b", 0.5), cfg) == pytest.approx(math.exp(-1))


def test_missing_characteristic_is_exclusion_signal():
    cfg = SimilarityConfig(("involvement",), "linear", 1.0, UNIT)
    assert similarity_weight(_p("a", 0.0), UserProfile("b", {"x": 0.0}, 0.5), cfg) is None


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(0, 10), min_size=2, max_size=2),
    st.lists(st.floats(0, 10), min_size=2, max_size=2),
    st.sampled_from(["linear", "exponential"]),
    st.floats(0.1, 10),
)
def test_weights_bounded_and_symmetric(u, v, kernel, sharp):
    cfg = SimilarityConfig(("x", "y"), kernel, sharp, ((0.0, 10.0), (0.0, 10.0)))
    a, b = UserProfile("a", {"x": u[0], "y": u[1]}), UserProfile("b", {"x": v[0], "y": v[1]})
    w = similarity_weight(a, b, cfg)
    assert 0.0 <= w <= 1.0
    assert w == similarity_weight(b, a, cfg)
    assert similarity_weight(a, a, cfg) == 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        SimilarityConfig((), "linear", 1.0)
    with pytest.raises(ValueError):
        SimilarityConfig(("x",), "linear", 0.0)
    with pytest.raises(ValueError):
        SimilarityConfig(("x",), "gaussian", 1.0)


# -- weighted prediction -----------------------------------------------------


def _samples():
    return [
        (TransitionSample("b", 0, 1, 0.2, 0), _p("b", 0.0)),
        (TransitionSample("c", 0, 1, 0.8, 0), _p("c", 1.0)),
        (TransitionSample("d", 1, 1, -0.5, 0), _p("d", 0.5)),
    ]


def test_weighted_mean_of_matching_samples():
    cfg = SimilarityConfig(("x",), "linear", 1.0, UNIT)
    # target at 0.25: weights 0.75 (b) and 0.25 (c)
    got = weighted_reward_predict(_p("a", 0.25), _samples(), 0, 1, cfg)
    assert got == pytest.approx((0.75 * 0.2 + 0.25 * 0.8) / 1.0)


def test_single_positive_weight_returns_that_reward():
    cfg = SimilarityConfig(("x",), "linear", 1.0, UNIT)
    assert weighted_reward_predict(_p("a", 0.0), _samples(), 0, 1, cfg) == pytest.approx(0.2)


def test_equal_weights_reduce_to_cell_mean():
    cfg = SimilarityConfig(("x",), "linear", 1.0, UNIT)
    same = [(t, _p(t.user_id, 0.3)) for t, _ in _samples()]
    assert weighted_reward_predict(_p("a", 0.3), same, 0, 1, cfg) == pytest.approx(0.5)


def test_zero_weight_duplicate_changes_nothing():
    cfg = SimilarityConfig(("x",), "linear", 1.0, UNIT)
    base = weighted_reward_predict(_p("a", 0.0), _samples(), 0, 1, cfg)
    dup = _samples() + [(TransitionSample("c", 0, 1, 0.8, 0), _p("c", 1.0))]
    assert weighted_reward_predict(_p("a", 0.0), dup, 0, 1, cfg) == base


def test_zero_total_weight_falls_back():
    cfg = SimilarityConfig(("x",), "linear", 1.0, UNIT)
    far = [(TransitionSample("c", 0, 1, 0.8, 0), _p("c", 1.0)), (TransitionSample("d", 1, 2, -0.4, 0), _p("d", 1.0))]
    assert weighted_reward_predict(_p("a", 0.0), far, 0, 1, cfg) == 0.8
    assert weighted_reward_predict(_p("a", 0.0), far, 0, 1, cfg, fallback=0.1) == 0.1
    assert weighted_reward_predict(_p("a", 0.0), far, 3, 4, cfg) == pytest.approx(0.2)


def test_fold_weights_exclude_missing_and_target():
    values = np.array([[1.0], [3.0], [np.nan], [5.0]])
    w = fold_weights(values, 0, SimilarityConfig(("x",), "linear", 1.0))
    assert np.isnan(w[0]) and np.isnan(w[2])
    assert w[1] == pytest.approx(1.0 - 2.0 / 2.0) and w[3] == 0.0
    assert fold_weights(values, 2, SimilarityConfig(("x",), "linear", 1.0)) is None


# -- LOOCV integration ---------------------------------------------------------


def _corpus(n_users=80, seed=0, **spec):
    gt = generate_mdp(3, structure_spec=StructureSpec(**spec), seed=seed)
    return sample_dataset(gt, n_users, 5, seed=seed + 1)


def test_vanishing_sharpness_collapses_to_unweighted():
    ds = _corpus()
    cfg = SimilarityConfig(("c01", "c02", "c03"), "linear", 1e-12)
    weighted = loocv_reward(ds, "similarity_weighted", THREE, LoocvOptions(similarity=cfg))
    plain = loocv_reward(ds, "per_action_state", THREE)
    np.testing.assert_allclose(weighted.predictions, plain.predictions, atol=1e-9)


def test_single_config_grid_ranked_first():
    cfg = SimilarityConfig(("c01",), "exponential", 1.0)
    ranking = config_search(_corpus(30), [cfg], THREE)
    assert len(ranking) == 1 and ranking[0].rank == 1 and ranking[0].config == cfg
    report = format_ranking(ranking).splitlines()
    assert report[0] == "rank,config_id,config,mean_l1,ci_low,ci_high,n"


def test_informative_characteristic_ranks_above_others():
    ds = _corpus(300, seed=4, characteristic_response={"c02": 2.0}, reward_noise=0.1)
    grid = [SimilarityConfig((c,), "linear", 4.0) for c in ("c01", "c02", "c03", "c04")]
    ranking = config_search(ds, grid, THREE)
    # the exhaustive search itself is the oracle: c02 must beat every config that ignores it
    assert ranking[0].config.characteristics == ("c02",)
    best = ranking[0].result.mean
    assert all(r.result.mean > best for r in ranking[1:])


def test_grid_round_trip(tmp_path):
    grid = default_grid(("c01", "c02", "c03"), ("c01", "c02", "involvement"), ["c01", "c02", "c03", "c04"])
    assert len(grid) == 36
    assert len({c.label for c in grid}) == 36
    save_grid(grid, tmp_path / "grid.json")
    assert load_grid(tmp_path / "grid.json") == grid
    (tmp_path / "empty.json").write_text('{"configs": []}')
    with pytest.raises(ValueError):
        load_grid(tmp_path / "empty.json")
