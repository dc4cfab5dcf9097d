"""Command-line front end: plan, simulate, validate-env, export-tree.

Every option can also be set through an environment variable named
``DUBINS_PCTL_<OPTION>`` (upper case, dashes as underscores), e.g.
``DUBINS_PCTL_TRIALS="1000 5000 10000"``.  Command-line flags win.

Exit codes: 0 success, 2 invalid input (scenario, policy file, hash
mismatch), 3 specification unreachable within the horizon, 4 bound test
failed, 5 state cap exceeded.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from . import montecarlo as mc
from .builder import BuildConfig, StateCapError, UnreachableError, build, find_min_k
from .files import (ScenarioError, Scenario, content_hash, load_scenario, resolve_scenario_path,
                    trajectory_writer, write_dot)
from .pctl import FormulaError, formula_from_text, synthesize
from .strategy import PolicyFileError, read_policy, sha256_text, write_policy

ENV_PREFIX = "DUBINS_PCTL_"

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_UNREACHABLE = 3
EXIT_BOUND = 4
EXIT_STATE_CAP = 5

log = logging.getLogger("dubins_pctl")


class CliError(Exception):
    def __init__(self, code: int, category: str, message: str):
        super().__init__(message)
        self.code, self.category = code, category


def _sig(x) -> str:
    return f"{x:.12g}"


def _num(x):
    return None if x is None else float(f"{x:.12g}")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _horizon(text: str):
    return "auto" if text == "auto" else _positive_int(text)


def _flag(text: str) -> bool:
    return text.strip().lower() in ("1", "true", "yes", "on")


# -- parser ------------------------------------------------------------------

def _scenario_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("scenario")
    g.add_argument("--env", default="env_a",
                   help="scenario JSON file or bundled name env_a/env_b/env_c (default env_a)")
    g.add_argument("--rho", type=float, help="override the turning radius")
    g.add_argument("--dt", type=float, help="override the stage duration")
    g.add_argument("--eps-max", type=float, help="override the noise bound")
    g.add_argument("--n", type=_positive_int, help="override the number of noise bins")
    g.add_argument("--formula", default=None,
                   help="PCTL query text or preset name (default paper-eq3; simulate reads it from the policy)")
    p.add_argument("--out-dir", default="out", help="directory for artifacts (default ./out)")
    p.add_argument("-v", "--verbose", action="store_true")


def _build_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("build")
    g.add_argument("--horizon", type=_horizon, default="auto", help="K, or 'auto' for the smallest K with V(s0) > 0")
    g.add_argument("--k-max", type=_positive_int, default=6, help="largest K tried with --horizon auto")
    g.add_argument("--sweep-samples", type=_positive_int, default=50, help="labelling samples per stage")
    g.add_argument("--no-prune", action="store_true", help="expand states that may be unsafe")
    g.add_argument("--max-states", type=_positive_int, default=2_000_000, help="state-count cap")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dubins-pctl",
        description="Max-probability PCTL strategies for a Dubins vehicle with gyroscope noise.",
        epilog=f"Every option also reads {ENV_PREFIX}<OPTION> from the environment.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="build the MDP, synthesize a policy and write it")
    _scenario_args(p)
    _build_args(p)
    p.add_argument("--dot", action="store_true", help="also write tree.dot")

    p = sub.add_parser("simulate", help="Monte Carlo check of a planned policy")
    _scenario_args(p)
    p.add_argument("--policy", default=None, help="policy file (default OUT_DIR/policy.csv)")
    p.add_argument("--trials", type=_positive_int, nargs="+", default=[1000],
                   help="one or more trial counts; runs are nested prefixes of one seeded stream")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--word-samples", type=_positive_int, default=200, help="trajectory samples per stage")
    p.add_argument("--trajectories", action="store_true", help="write trajectories.csv")
    p.add_argument("--export-trials", type=int, default=20, help="trials written to trajectories.csv")

    p = sub.add_parser("validate-env", help="load and check a scenario file")
    _scenario_args(p)

    p = sub.add_parser("export-tree", help="write the MDP tree as Graphviz DOT")
    _scenario_args(p)
    _build_args(p)
    p.add_argument("--output", default=None, help="DOT path (default OUT_DIR/tree.dot)")

    for sp in sub.choices.values():
        _apply_env_defaults(sp)
    return parser


def _apply_env_defaults(p: argparse.ArgumentParser) -> None:
    for action in p._actions:
        if not action.option_strings or action.dest in ("help", "version"):
            continue
        raw = os.environ.get(ENV_PREFIX + action.dest.upper())
        if raw is None:
            continue
        try:
            if action.nargs == 0:
                value = _flag(raw)
            elif action.nargs == "+":
                conv = action.type or str
                value = [conv(t) for t in raw.replace(",", " ").split()]
            else:
                value = (action.type or str)(raw)
        except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
            p.error(f"{ENV_PREFIX}{action.dest.upper()}={raw!r}: {exc}")
        p.set_defaults(**{action.dest: value})


# -- helpers -----------------------------------------------------------------

def _load(args) -> tuple[Scenario, str]:
    path = resolve_scenario_path(args.env)
    overrides = {"rho": args.rho, "dt": args.dt, "eps_max": args.eps_max, "n": args.n}
    try:
        return load_scenario(path, overrides), str(path)
    except ScenarioError as exc:
        raise CliError(EXIT_INVALID, "invalid_environment", str(exc)) from None


def _formula(text):
    try:
        return formula_from_text(text or "paper-eq3")
    except FormulaError as exc:
        raise CliError(EXIT_INVALID, "invalid_formula", str(exc)) from None


def inputs_hash(scn: Scenario, phi) -> str:
    return content_hash({"scenario": scn.to_dict(), "formula": str(phi)})


def _build_config(args) -> BuildConfig:
    return BuildConfig(k_max=args.k_max, sweep_samples_per_stage=args.sweep_samples,
                       prune_unsafe=not args.no_prune, max_states=args.max_states)


def _solve(scn: Scenario, phi, args):
    config = _build_config(args)
    try:
        if args.horizon == "auto":
            res = find_min_k(scn.env, scn.params, scn.partition, config, phi)
            return res.k, res.mdp, res.synthesis
        mdp = build(scn.env, scn.params, scn.partition, args.horizon, config)
        return args.horizon, mdp, synthesize(mdp, phi)
    except UnreachableError as exc:
        raise CliError(EXIT_UNREACHABLE, "unreachable", str(exc)) from None
    except StateCapError as exc:
        raise CliError(EXIT_STATE_CAP, "state_cap", str(exc)) from None
    except FormulaError as exc:
        raise CliError(EXIT_INVALID, "invalid_formula", str(exc)) from None


def _settings(args) -> dict:
    return {"horizon": args.horizon, "k_max": args.k_max, "sweep_samples_per_stage": args.sweep_samples,
            "prune_unsafe": not args.no_prune, "max_states": args.max_states}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands ----------------------------------------------------------------

def cmd_plan(args) -> int:
    scn, path = _load(args)
    phi = _formula(args.formula)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    k, mdp, syn = _solve(scn, phi, args)
    wall = time.perf_counter() - t0
    digest = inputs_hash(scn, phi)
    meta = {"inputs_sha256": digest, "formula": str(phi), "K": k, "settings": _settings(args),
            "joint_value": _num(syn.joint_value)}
    write_policy(out / "policy.csv", mdp, syn.policy, syn.values, meta)
    summary = {
        "tool_version": __version__,
        "scenario": Path(path).name,
        "inputs_sha256": digest,
        "formula": str(phi),
        "K": k,
        "num_states": mdp.num_states,
        "value": _num(syn.value),
        "joint_value": _num(syn.joint_value),
        "settings": _settings(args),
        "policy_sha256": sha256_text((out / "policy.csv").read_text()),
    }
    _write_json(out / "plan.json", summary)
    stamp = {"tool_version": __version__, "inputs_sha256": digest}
    _write_json(out / "plan_timing.json", dict(stamp, wall_time_s=round(wall, 3)))
    if args.dot:
        with open(out / "tree.dot", "w") as fh:
            write_dot(mdp, fh, syn.values, syn.policy, stamp)
    print(f"K = {k}, |S| = {mdp.num_states}, plan time {wall:.2f} s")
    print(f"V(s0) = {_sig(syn.value)}")
    return EXIT_OK


def _table(summaries: list) -> str:
    head = f"{'trials':<20}" + "".join(f"{s.trials:>16}" for s in summaries)
    rows = [
        ("theoretical V(s0)", [_sig(s.value) for s in summaries]),
        ("simulation rate", [_sig(s.empirical_rate) for s in summaries]),
        ("3-sigma slack", [_sig(s.slack) for s in summaries]),
        ("bound holds", ["yes" if s.bound_holds else "NO" for s in summaries]),
    ]
    return "\n".join([head] + [f"{name:<20}" + "".join(f"{v:>16}" for v in vals) for name, vals in rows])


def cmd_simulate(args) -> int:
    scn, _ = _load(args)
    out = Path(args.out_dir)
    policy_path = Path(args.policy) if args.policy else out / "policy.csv"
    try:
        pf = read_policy(policy_path)
    except FileNotFoundError:
        raise CliError(EXIT_INVALID, "missing_policy", f"{policy_path}: no such file") from None
    except PolicyFileError as exc:
        raise CliError(EXIT_INVALID, "hash_mismatch", str(exc)) from None
    phi = _formula(args.formula or pf.meta.get("formula"))
    digest = inputs_hash(scn, phi)
    if digest != pf.meta.get("inputs_sha256"):
        raise CliError(EXIT_INVALID, "hash_mismatch",
                       f"{policy_path} was planned for different inputs "
                       f"({pf.meta.get('inputs_sha256')} != {digest}); re-run plan")
    out.mkdir(parents=True, exist_ok=True)
    counts = sorted(set(args.trials))
    outcomes = []
    traj_fh = open(out / "trajectories.csv", "w") if args.trajectories else None
    stamp = {"tool_version": __version__, "inputs_sha256": digest, "master_seed": args.seed}
    write_traj = trajectory_writer(traj_fh, stamp) if traj_fh else None

    def on_trial(i, res):
        outcomes.append(res.failure_kind)
        if write_traj is not None and res.samples is not None:
            write_traj(i, res.samples, res.satisfied)

    joint = pf.meta.get("joint_value")
    joint = None if joint is None else float(joint)
    try:
        mc.run(scn.env, scn.params, scn.partition, pf.mdp, pf.policy,
               mc.SimConfig(trials=counts[-1], master_seed=args.seed, word_samples_per_stage=args.word_samples),
               value=pf.value, phi=phi, joint_value=joint, on_trial=on_trial,
               keep_samples=args.export_trials if write_traj else 0)
    finally:
        if traj_fh:
            traj_fh.close()
    summaries = [_prefix_summary(outcomes[:t], args.seed, pf.value, joint) for t in counts]
    doc = {
        "tool_version": __version__,
        "inputs_sha256": digest,
        "policy_sha256": pf.meta.get("body_sha256"),
        "formula": str(phi),
        "word_samples_per_stage": args.word_samples,
        "runs": [s.to_dict() for s in summaries],
    }
    _write_json(out / "simulate.json", doc)
    print(_table(summaries))
    return EXIT_OK if all(s.bound_holds for s in summaries) else EXIT_BOUND


def _prefix_summary(kinds, seed, value, joint) -> mc.Summary:
    failures = {k.value: 0 for k in mc.FailureKind if k is not mc.FailureKind.NONE}
    for k in kinds:
        if k is not mc.FailureKind.NONE:
            failures[k.value] += 1
    satisfied = sum(k is mc.FailureKind.NONE for k in kinds)
    return mc.Summary(len(kinds), seed, value, satisfied, failures, joint)


def cmd_validate_env(args) -> int:
    scn, path = _load(args)
    phi = _formula(args.formula)
    env = scn.env
    by_label = {}
    for r in env.regions:
        by_label.setdefault(r.label, []).append(r.name)
    q = env.initial_pose
    print(f"{path}: ok")
    print(f"  regions: {len(env.regions)} " + ", ".join(f"{k}={len(v)}" for k, v in sorted(by_label.items())))
    print(f"  initial pose: ({_sig(q.x)}, {_sig(q.y)}, {_sig(q.theta)})")
    print(f"  rho={_sig(scn.params.rho)} dt={_sig(scn.params.dt)} "
          f"eps_max={_sig(scn.partition.eps_max)} n={scn.partition.n}")
    print(f"  inputs_sha256: {inputs_hash(scn, phi)}")
    return EXIT_OK


def cmd_export_tree(args) -> int:
    scn, _ = _load(args)
    phi = _formula(args.formula)
    k, mdp, syn = _solve(scn, phi, args)
    target = Path(args.output) if args.output else Path(args.out_dir) / "tree.dot"
    target.parent.mkdir(parents=True, exist_ok=True)
    stamp = {"tool_version": __version__, "inputs_sha256": inputs_hash(scn, phi)}
    with open(target, "w") as fh:
        write_dot(mdp, fh, syn.values, syn.policy, stamp)
    print(f"wrote {target} (K = {k}, {mdp.num_states} states)")
    return EXIT_OK


COMMANDS = {"plan": cmd_plan, "simulate": cmd_simulate, "validate-env": cmd_validate_env,
            "export-tree": cmd_export_tree}


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
