"""Command-line entry point: validate, fit, evaluate, simulate, synth.

Exit codes: 0 success, 1 data error, 2 usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy

from . import __version__
from .abstraction import FeatureSet, select_characteristic_features, select_state_features, state_transitions
from .dataset import ACTIONS, DataError, Dataset, load_dataset, validate, write_profiles, write_sessions
from .evaluation import (
    NEXT_STATE_APPROACHES,
    PREDICTOR_KINDS,
    LoocvOptions,
    format_report,
    loocv_next_state,
    loocv_reward,
    mean_reward_by_state,
)
from .mdp import (
    GAMMA,
    MAX_ITERS,
    TOLERANCE,
    ConvergenceError,
    MdpModel,
    estimate_model,
    fit_policies,
    policy_evaluation,
    uniform_policy,
)
from .similarity import config_search, default_grid, format_ranking, load_grid
from .simulation import (
    POPULATIONS,
    evolve,
    format_distributions,
    format_graph,
    format_rewards,
    initial_distribution,
    monte_carlo_evolve,
    reward_trajectory,
    transition_graph,
)
from .synth import StructureSpec, generate_mdp, sample_dataset

logger = logging.getLogger("persuasion_rl")

OUTPUT_ENV = "PERSUASION_RL_OUTPUT_DIR"
EXIT_OK, EXIT_DATA, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(out: Path, name: str, text: str, written: list[str]) -> None:
    (out / name).write_text(text)
    written.append(name)


def _manifest(args: argparse.Namespace, inputs: Sequence[str | None], outputs: list[str], out: Path) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")}
    manifest = {
        "command": args.command,
        "config": config,
        "inputs": {str(p): _digest(p) for p in inputs if p},
        "outputs": sorted(outputs),
        "versions": {
            "persuasion_rl": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n")


def _load(args: argparse.Namespace, strict: bool = True) -> Dataset:
    return load_dataset(args.sessions, getattr(args, "profiles", None), strict=strict)


def _split(value: str | None, allowed: Sequence[str], what: str) -> list[str]:
    if not value or value == "none":
        return []
    items = [v.strip() for v in value.split(",") if v.strip()]
    bad = [v for v in items if v not in allowed]
    if bad:
        raise UsageError(f"unknown {what}: {', '.join(bad)} (choose from {', '.join(allowed)})")
    return items


# -- subcommands -------------------------------------------------------------


def cmd_validate(args: argparse.Namespace) -> int:
    ds = _load(args, strict=False)
    report = validate(ds)
    text = report.to_text()
    sys.stdout.write(text)
    for row in ds.rejected:
        print(f"rejected: {row}", file=sys.stderr)
    if args.out or os.environ.get(OUTPUT_ENV):
        out = _out_dir(args)
        written: list[str] = []
        _write(out, "validation.txt", text, written)
        _manifest(args, [args.sessions, args.profiles], written, out)
    if ds.rejected and not args.lenient:
        return EXIT_DATA
    return EXIT_OK


def _policy_table(model: MdpModel, fs: FeatureSet, best, pi_best, worst, pi_worst) -> str:
    v_unif = policy_evaluation(model, uniform_policy(model.n_actions))
    header = ["state", "v_optimal", "optimal_action", "v_worst", "worst_action", "v_uniform", "support_optimal"]
    header += [f"q_{a}" for a in ACTIONS[: model.n_actions]]
    lines = [",".join(header)]
    for s, label in enumerate(fs.labels()):
        a, w = pi_best.actions[s], pi_worst.actions[s]
        row = [
            label,
            f"{best.V[s]:.6f}",
            ACTIONS[a],
            f"{worst.V[s]:.6f}",
            ACTIONS[w],
            f"{v_unif[s]:.6f}",
            str(int(model.support[s, a])),
        ] + [f"{q:.6f}" for q in best.Q[s]]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def cmd_fit(args: argparse.Namespace) -> int:
    if not 0.0 <= args.gamma < 1.0:
        raise UsageError("--gamma must lie in [0, 1)")
    ds = _load(args)
    candidates = args.candidates.split(",") if args.candidates else None
    fs = select_state_features(
        ds, args.k, args.gamma, candidates, scoring=args.scoring, aggregate=args.aggregate
    )
    transitions = state_transitions(ds, fs)
    if not transitions:
        raise DataError("no transition samples could be paired from the sessions")
    model = estimate_model(transitions, fs.n_states, len(ACTIONS), args.gamma)
    best, pi_best, worst, pi_worst = fit_policies(model, args.tolerance, args.max_iters)

    out = _out_dir(args)
    written: list[str] = []
    _write(out, "feature_set.json", json.dumps(fs.to_dict(), indent=1) + "\n", written)
    _write(out, "model.json", model.to_json(), written)
    _write(out, "policy.csv", _policy_table(model, fs, best, pi_best, worst, pi_worst), written)
    _manifest(args, [args.sessions, args.profiles], written, out)
    print(f"selected features: {', '.join(fs.selected)}")
    print(f"transitions: {len(transitions)}; value iteration: {best.iterations} iterations")
    for s, label in enumerate(fs.labels()):
        print(f"  {label}: pi*={ACTIONS[pi_best.actions[s]]} V*={best.V[s]:.4f}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    predictors = _split(args.predictors, PREDICTOR_KINDS, "predictor kind")
    approaches = _split(args.next_state, NEXT_STATE_APPROACHES, "next-state approach")
    char_modes = _split(args.characteristics, ("pre", "all"), "characteristic mode")
    if "per_action_charstate" in predictors and not char_modes:
        raise UsageError("per_action_charstate needs --characteristics pre,all (or one of them)")
    ds = _load(args)
    fs = FeatureSet.load(args.feature_set) if args.feature_set else select_state_features(ds, args.k)
    options = LoocvOptions(ci_method=args.ci_method, aggregate=args.aggregate, seed=args.seed)
    out = _out_dir(args)
    written: list[str] = []

    transitions = state_transitions(ds, fs)
    overall, per_state = mean_reward_by_state(transitions, fs, options)
    lines = ["group,mean,ci_low,ci_high,n"]
    for r in per_state + [overall]:
        lines.append(f"{r.group},{r.mean:.6f},{r.ci_low:.6f},{r.ci_high:.6f},{r.n}")
    _write(out, "mean_reward.csv", "\n".join(lines) + "\n", written)

    char_sets: dict[str, FeatureSet] = {}
    for mode in char_modes:
        char_sets[mode] = select_characteristic_features(ds.profiles, transitions, args.k, mode)
        _write(out, f"characteristics_{mode}.json", json.dumps(char_sets[mode].to_dict(), indent=1) + "\n", written)

    results = []
    for kind in predictors:
        if kind == "similarity_weighted":
            continue
        if kind == "per_action_charstate":
            for mode, cfs in char_sets.items():
                res = loocv_reward(ds, kind, fs, replace(options, characteristic_set=cfs))
                res.approach = f"{kind}[{mode}]"
                results.append(res)
        else:
            results.append(loocv_reward(ds, kind, fs, options))

    if "similarity_weighted" in predictors:
        if args.similarity_grid == "default":
            pre = char_sets.get("pre") or select_characteristic_features(ds.profiles, transitions, args.k, "pre")
            alls = char_sets.get("all") or select_characteristic_features(ds.profiles, transitions, args.k, "all")
            grid = default_grid(pre.selected, alls.selected, ds.characteristic_names)
        else:
            grid = load_grid(args.similarity_grid)
        ranking = config_search(ds, grid, fs, options)
        _write(out, "similarity_ranking.csv", format_ranking(ranking), written)
        best = loocv_reward(ds, "similarity_weighted", fs, replace(options, similarity=ranking[0].config))
        best.approach = f"similarity_weighted[{ranking[0].config.label}]"
        results.append(best)

    if results:
        _write(out, "reward_errors.csv", format_report(results), written)
    if approaches:
        ns = [loocv_next_state(ds, a, fs, options) for a in approaches]
        _write(out, "next_state.csv", format_report(ns), written)
    _manifest(args, [args.sessions, args.profiles, args.feature_set], written, out)
    for res in results:
        o = res.overall
        print(f"{res.approach}: mean L1 {o.mean:.4f} [{o.ci_low:.4f}, {o.ci_high:.4f}] n={o.n}")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    for path in (args.model, args.feature_set):
        if not Path(path).is_file():
            raise FileNotFoundError(f"missing artifact: {path}")
    if args.horizon < 1:
        raise UsageError("--horizon must be at least 1")
    populations = _split(args.populations, POPULATIONS, "population")
    model = MdpModel.load(args.model)
    fs = FeatureSet.load(args.feature_set)
    if fs.n_states != model.n_states:
        raise DataError("feature set and model disagree on the number of states")
    ds = _load(args) if args.sessions else None
    if ds is None and any(p != "uniform" for p in populations):
        raise UsageError("empirical populations need --sessions")
    best, pi_best, worst, pi_worst = fit_policies(model, args.tolerance, args.max_iters)
    policies = [pi_best, uniform_policy(model.n_actions), pi_worst]

    out = _out_dir(args)
    written: list[str] = []
    threshold = 1.0 / model.n_states if args.threshold is None else args.threshold
    _write(out, "graph.csv", format_graph(transition_graph(pi_best, model, best, threshold), fs.k), written)

    dist_reports, reward_reports = [], []
    for pop in populations:
        d0 = initial_distribution(ds, pop, fs)
        dist_reports.append(evolve(d0, pi_best, model, args.horizon, population_id=pop))
        for pi in policies:
            reward_reports.append(reward_trajectory(d0, pi, model, args.reward_horizon, population_id=pop))
    _write(out, "distributions.csv", format_distributions(dist_reports, fs.k), written)
    _write(out, "rewards.csv", format_rewards(reward_reports), written)
    if args.monte_carlo:
        rows = [",".join(["population", "t", *fs.labels()])]
        for pop in populations:
            mc = monte_carlo_evolve(initial_distribution(ds, pop, fs), pi_best, model, args.horizon, args.monte_carlo, args.seed)
            rows += [",".join([pop, str(t + 1), *(f"{x:.6f}" for x in r)]) for t, r in enumerate(mc)]
        _write(out, "monte_carlo.csv", "\n".join(rows) + "\n", written)
    _manifest(args, [args.model, args.feature_set, args.sessions, args.profiles], written, out)
    for rep in dist_reports:
        last = rep.distributions[-1]
        print(f"{rep.population_id}: after {rep.horizon} steps " + " ".join(
            f"{lab}={100 * p:.2f}%" for lab, p in zip(fs.labels(), last)))
    return EXIT_OK


def _parse_response(items: Sequence[str]) -> dict[str, float]:
    out = {}
    for item in items:
        name, _, gap = item.partition("=")
        if not gap:
            raise UsageError(f"--response expects NAME=GAP, got {item!r}")
        out[name] = float(gap)
    return out


def cmd_synth(args: argparse.Namespace) -> int:
    spec = StructureSpec(
        reward_gaps={0: args.gap} if args.gap else {},
        stay_bias=args.stay_bias,
        characteristic_response=_parse_response(args.response),
        n_characteristics=args.characteristics,
        involvement_missing=args.involvement_missing,
    )
    try:
        gt = generate_mdp(args.bits, len(ACTIONS), spec, args.seed)
        ds = sample_dataset(gt, args.users, args.sessions_per_user, args.seed + 1)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(args)
    written: list[str] = []
    write_sessions(ds, out / "sessions.csv")
    write_profiles(ds, out / "profiles.csv")
    gt.save(out / "ground_truth.json")
    written += ["sessions.csv", "profiles.csv", "ground_truth.json"]
    _manifest(args, [], written, out)
    print(f"wrote {len(ds.sessions)} sessions for {args.users} users to {out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="persuasion-rl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p: argparse.ArgumentParser, required: bool = True) -> None:
        p.add_argument("--sessions", required=required, help="sessions file (one row per user-session)")
        p.add_argument("--profiles", help="user characteristics file")
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./out)")

    def numeric_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--gamma", type=float, default=GAMMA)
        p.add_argument("--tolerance", type=float, default=TOLERANCE)
        p.add_argument("--max-iters", type=int, default=MAX_ITERS)

    p = sub.add_parser("validate", help="parse and summarise the input files")
    data_args(p)
    p.add_argument("--lenient", action="store_true", help="exit 0 even if rows were rejected")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("fit", help="select state features, estimate the MDP, compute policies")
    data_args(p)
    numeric_args(p)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--candidates", help="comma-separated answer columns to choose from")
    p.add_argument("--scoring", choices=("conditional", "marginal"), default="conditional")
    p.add_argument("--aggregate", choices=("mean", "max"), default="mean")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="leave-one-person-out prediction reports")
    data_args(p)
    p.add_argument("--feature-set", help="feature_set.json from fit (otherwise selected here)")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--predictors", default="overall_mean,per_action,per_action_state")
    p.add_argument("--next-state", default="uniform,stay,transition_fn")
    p.add_argument("--characteristics", default="none", help="characteristic modes: pre, all, or pre,all")
    p.add_argument("--similarity-grid", default="default", help="JSON grid file or 'default'")
    p.add_argument("--ci-method", choices=("t", "bootstrap"), default="t")
    p.add_argument("--aggregate", choices=("pooled", "per_user"), default="pooled")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="transition graph and population trajectories")
    data_args(p, required=False)
    numeric_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--feature-set", required=True)
    p.add_argument("--horizon", type=int, default=20, help="steps of state-distribution evolution")
    p.add_argument("--reward-horizon", type=int, default=100, help="steps of mean-reward trajectories")
    p.add_argument("--populations", default="uniform")
    p.add_argument("--threshold", type=float, help="minimum edge probability (default 1/|S|)")
    p.add_argument("--monte-carlo", type=int, default=0, metavar="N", help="also simulate N agents")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("synth", help="write a synthetic corpus with known ground truth")
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./out)")
    p.add_argument("--users", type=int, default=671)
    p.add_argument("--sessions-per-user", type=int, default=5)
    p.add_argument("--bits", type=int, default=3)
    p.add_argument("--gap", type=float, default=1.0, help="reward gap of state bit 0")
    p.add_argument("--stay-bias", type=float, default=0.0)
    p.add_argument("--characteristics", type=int, default=4)
    p.add_argument("--response", action="append", default=[], metavar="NAME=GAP")
    p.add_argument("--involvement-missing", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
