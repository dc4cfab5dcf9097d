"""Acceptance criteria 1-8, each printing one PASS/FAIL line."""
import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from dubins_pctl.builder import BuildConfig, build, find_min_k
from dubins_pctl.cli import main
from dubins_pctl.dynamics import Pose, VehicleParams, make_partition, propagate, sample_positions
from dubins_pctl.files import bundled_path, load_scenario
from dubins_pctl.geometry import Environment, Point2, propositions_at, rectangle
from dubins_pctl.mdp import random_tree_mdp
from dubins_pctl.montecarlo import SimConfig, run, simulate_trial, trial_rng
from dubins_pctl.pctl import DELIVERY, eval_state_set, synthesize
from dubins_pctl.strategy import MeasurementRecord, locate

from oracles import angle_diff, brute_force_until, evaluate_policy, rk4

W_MAX = math.pi / 3 + 0.06


def report(capsys, criterion: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
    assert ok, detail


def test_1_dynamics_exactness(capsys):
    rng = np.random.default_rng(1)
    cases = [(rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(0, 2 * math.pi), rng.uniform(-W_MAX, W_MAX))
             for _ in range(100)]
    refs = [rk4(x, y, th, w, 1.2) for x, y, th, w in cases]
    t0 = time.perf_counter()
    got = [propagate(Pose(x, y, th), w, 1.2) for x, y, th, w in cases]
    elapsed = time.perf_counter() - t0
    err_pos = max(max(abs(q.x - r[0]), abs(q.y - r[1])) for q, r in zip(got, refs))
    err_th = max(angle_diff(q.theta, r[2]) for q, r in zip(got, refs))
    ok = err_pos <= 1e-9 and err_th <= 1e-9 and elapsed < 1.0
    report(capsys, 1, ok, f"max position error {err_pos:.2e}, heading error {err_th:.2e}, {elapsed:.3f} s")


def test_2_quantization(capsys):
    p = make_partition(0.06, 3)
    ok = (p.width == 0.04 and p.reps == (-0.04, 0.0, 0.04) and p.mass == Fraction(1, 3)
          and all(m == Fraction(1, 3) for m in p.masses))
    report(capsys, 2, ok, f"width {p.width}, reps {p.reps}, mass {p.mass}")


def test_3_checker_oracle(capsys):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst_value = worst_policy = 0.0
    count = 0
    while count < 200:
        mdp = random_tree_mdp(rng, int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 4)))
        safe = eval_state_set(mdp, DELIVERY.path.left)
        target = eval_state_set(mdp, DELIVERY.path.right)
        best, _ = brute_force_until(mdp, safe, target)
        syn = synthesize(mdp, DELIVERY)
        table = {s: int(syn.policy[s]) for s in range(mdp.num_states) if not mdp.is_terminal(s)}
        worst_value = max(worst_value, abs(syn.value - best))
        worst_policy = max(worst_policy, abs(evaluate_policy(mdp, safe, target, table) - best))
        count += 1
    elapsed = time.perf_counter() - t0
    ok = worst_value <= 1e-12 and worst_policy <= 1e-12 and elapsed < 10.0
    report(capsys, 3, ok, f"200 trees, value gap {worst_value:.1e}, policy gap {worst_policy:.1e}, {elapsed:.2f} s")


def test_4_structure_bound(capsys):
    env = Environment((rectangle(50, 50, 51, 51, "pickup", "p"), rectangle(60, 60, 61, 61, "dropoff", "d")),
                      Pose(0, 0, 0))
    t0 = time.perf_counter()
    mdp = build(env, VehicleParams(3 / math.pi, 1.2), make_partition(0.06, 3), 3, BuildConfig(prune_unsafe=False))
    elapsed = time.perf_counter() - t0
    n = mdp.num_states - 1
    report(capsys, 4, n == 819 and elapsed < 1.0, f"{n} non-root states, {elapsed:.3f} s")


def test_5_reference_parameter_pipeline(capsys):
    scn = load_scenario(bundled_path("env_a"))
    params_ok = (scn.params.controls[2] == pytest.approx(math.pi / 3) and scn.params.dt == 1.2
                 and scn.partition.eps_max == 0.06 and scn.partition.n == 3)
    t0 = time.perf_counter()
    res = find_min_k(scn.env, scn.params, scn.partition)
    elapsed = time.perf_counter() - t0
    ok = params_ok and res.k <= 6 and res.value > 0 and elapsed < 30.0
    report(capsys, 5, ok, f"K = {res.k}, V(s0) = {res.value:.6f}, |S| = {res.mdp.num_states}, {elapsed:.2f} s")


@pytest.mark.parametrize("name", ["env_a", "env_b", "env_c"])
def test_6_simulation_lower_bound(capsys, name):
    scn = load_scenario(bundled_path(name))
    res = find_min_k(scn.env, scn.params, scn.partition)
    t0 = time.perf_counter()
    s = run(scn.env, scn.params, scn.partition, res.mdp, res.policy, SimConfig(trials=10_000, master_seed=0),
            value=res.value)
    elapsed = time.perf_counter() - t0
    ok = 0 < res.value < 1 and s.bound_holds and elapsed < 60.0
    report(capsys, 6, ok, f"{name}: V(s0) = {res.value:.4f}, rate {s.empirical_rate:.4f}, "
                          f"slack {s.slack:.4f}, {elapsed:.1f} s")


def test_7_invariant_suite(capsys):
    scn = load_scenario(bundled_path("env_a"))
    res = find_min_k(scn.env, scn.params, scn.partition)
    mdp = res.mdp
    problems = []

    rows = [abs(sum(p for _, p in mdp.transitions(s, a)) - 1.0) for s in range(mdp.num_states)
            for a in mdp.enabled(s)]
    if max(rows) > 1e-12:
        problems.append("row sums")

    for s in range(mdp.num_states):
        hist = [MeasurementRecord(mdp.controls[a], b) for a, b in mdp.path_to(s)]
        if locate(mdp, hist).id != s:
            problems.append(f"locate {s}")
            break

    if mdp.xi[0] != 0.0 or np.any(mdp.xi < 0):
        problems.append("xi")

    first = propositions_at(Point2(scn.env.initial_pose.x, scn.env.initial_pose.y), scn.env).mask
    for i in range(1000):
        w = simulate_trial(scn.env, scn.params, scn.partition, mdp, res.policy, trial_rng(77, i)).word
        if not w or w[0] != first or any(a == b for a, b in zip(w, w[1:])):
            problems.append(f"word of trial {i}")
            break

    unsafe = scn.env.with_label("unsafe")
    fine = 10 * BuildConfig().sweep_samples_per_stage
    missed = 0
    for s in np.random.default_rng(7).choice(np.arange(1, mdp.num_states), size=1000, replace=False):
        st = mdp.state(s)
        tr = st.traj
        pts = sample_positions([tr.start.x], [tr.start.y], [tr.start.theta], [tr.w], tr.duration, fine)[0]
        if any(np.any(r.distance(pts) <= st.xi) for r in unsafe) and not st.props.unsafe:
            missed += 1
    if missed:
        problems.append(f"{missed} missed unsafe contacts")

    report(capsys, 7, not problems, "all invariants hold" if not problems else "; ".join(problems))


def test_8_determinism(capsys, tmp_path):
    artifacts = []
    for name in ("first", "second"):
        out = str(tmp_path / name)
        codes = (main(["plan", "--env", "env_b", "--out-dir", out]),
                 main(["simulate", "--env", "env_b", "--out-dir", out, "--trials", "1000", "--seed", "42"]))
        capsys.readouterr()
        artifacts.append((codes, {f: (tmp_path / name / f).read_bytes()
                                  for f in ("plan.json", "policy.csv", "simulate.json")}))
    same = artifacts[0] == artifacts[1]
    ok = same and artifacts[0][0] == (0, 0)
    runs = json.loads(artifacts[0][1]["simulate.json"])["runs"]
    report(capsys, 8, ok, f"plan.json, policy.csv, simulate.json byte-identical: {same} "
                          f"(rate {runs[0]['empirical_rate']})")
