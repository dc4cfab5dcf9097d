import math

import numpy as np
import pytest

from dubins_pctl.builder import (BuildConfig, ReachabilityTree, StateCapError, UnreachableError, build, expand,
                                 find_min_k, root_state, sweep_label, uncertainty)
from dubins_pctl.dynamics import Pose, StageTrajectory, VehicleParams, make_partition, propagate, sample_positions
from dubins_pctl.files import bundled_path, load_scenario
from dubins_pctl.geometry import Environment, PropositionSet, rectangle, regular_polygon
from dubins_pctl.mdp import U_BIT

from oracles import angle_diff, rk4

PARAMS = VehicleParams(3 / math.pi, 1.2)
PART = make_partition(0.06, 3)

# frozen from oracles.rk4: extreme endpoints of one straight stage from the origin
RK4_LO = (1.1998848033177139, -0.014399308813270612)
RK4_HI = (1.1998848033177139, 0.014399308813270612)
RK4_XI = 0.01439976960147427


def far_env(*extra, pose=Pose(0, 0, 0)):
    regions = [rectangle(50, 50, 51, 51, "pickup", "p"), rectangle(60, 60, 61, 61, "dropoff", "d")]
    return Environment(tuple(regions + list(extra)), pose)


@pytest.fixture(scope="module")
def env_a():
    return load_scenario(bundled_path("env_a"))


@pytest.fixture(scope="module")
def mdp_a(env_a):
    return build(env_a.env, env_a.params, env_a.partition, 4)


class TestUncertainty:
    def test_zero_width(self):
        q = Pose(1, 2, 3)
        assert uncertainty(q, q, q) == 0.0

    def test_straight_stage(self):
        lo = propagate(Pose(0, 0, 0), -0.02, 1.2)
        hi = propagate(Pose(0, 0, 0), 0.02, 1.2)
        assert (lo.x, lo.y) == pytest.approx(RK4_LO, abs=1e-9)
        assert (hi.x, hi.y) == pytest.approx(RK4_HI, abs=1e-9)
        assert uncertainty(Pose(1.2, 0, 0), lo, hi) == pytest.approx(RK4_XI, abs=1e-9)

    def test_max_semantics(self):
        assert uncertainty(Pose(0, 0, 0), Pose(3, 4, 0), Pose(0, 1, 0)) == 5.0


class TestExpand:
    def test_middle_bin_from_root(self):
        env = far_env()
        child = expand(root_state(env), 0.0, 2, env, PARAMS, PART)
        assert (child.nominal.x, child.nominal.y, child.nominal.theta) == pytest.approx((1.2, 0, 0), abs=1e-15)
        assert (child.lower_extreme.x, child.lower_extreme.y) == pytest.approx(rk4(0, 0, 0, -0.02, 1.2)[:2], abs=1e-9)
        assert (child.upper_extreme.x, child.upper_extreme.y) == pytest.approx(rk4(0, 0, 0, 0.02, 1.2)[:2], abs=1e-9)
        assert child.xi == pytest.approx(RK4_XI, abs=1e-9)
        assert child.noise_bin == 2 and child.stage == 1
        assert PART.mass == pytest.approx(1 / 3)

    def test_extremes_chain_through_parent_extremes(self):
        env = far_env()
        u = PARAMS.controls[2]
        c1 = expand(root_state(env), u, 3, env, PARAMS, PART)
        c1 = type(c1)(**{**c1.__dict__, "id": 1})
        c2 = expand(c1, 0.0, 1, env, PARAMS, PART)
        assert c2.upper_extreme == pytest.approx(propagate(c1.upper_extreme, 0.0 + PART.upper[0], 1.2))
        assert c2.lower_extreme == pytest.approx(propagate(c1.lower_extreme, 0.0 + PART.lower[0], 1.2))
        assert c2.nominal == pytest.approx(propagate(c1.nominal, PART.reps[0], 1.2))

    def test_errors(self):
        env = far_env()
        r = root_state(env)
        with pytest.raises(ValueError):
            expand(r, 0.5, 1, env, PARAMS, PART)
        with pytest.raises(ValueError):
            expand(r, 0.0, 4, env, PARAMS, PART)

    def test_sibling_labels_follow_noise(self):
        """Three siblings: two guaranteed pickup and dropoff, the left-drifting one possibly unsafe."""
        env = Environment((
            rectangle(-1, -1, 1, 0.19, "pickup", "pick"),
            rectangle(1, -1, 3, 0.15, "dropoff", "drop"),
            rectangle(-2, 0.2, 4, 1, "unsafe", "wall"),
        ), Pose(0, 0, 0))
        part = make_partition(0.3, 3)
        kids = [expand(root_state(env), 0.0, b, env, PARAMS, part) for b in (1, 2, 3)]
        assert [k.props for k in kids] == [PropositionSet(True, True, False), PropositionSet(True, True, False),
                                          PropositionSet(True, False, True)]


class TestSweepLabel:
    def test_pickup_through_middle(self):
        env = far_env(rectangle(-1, -2, 3, 2, "pickup", "big"))
        assert sweep_label(StageTrajectory(Pose(0, 0, 0), 0.0, 1.2), 0.05, env).pickup

    def test_far_from_unsafe(self):
        env = far_env(rectangle(0, 1, 2, 2, "unsafe", "u"))
        assert not sweep_label(StageTrajectory(Pose(0, 0, 0), 0.0, 1.2), 0.2, env).unsafe

    def test_inflation_catches_near_miss(self):
        env = far_env(rectangle(0, 0.21, 2, 2, "unsafe", "u"))
        assert sweep_label(StageTrajectory(Pose(0, 0, 0), 0.0, 1.2), 0.2, env).unsafe

    def test_dropoff_only_at_end(self):
        env = far_env(rectangle(-0.5, -1, 0.5, 1, "dropoff", "start"))
        assert not sweep_label(StageTrajectory(Pose(0, 0, 0), 0.0, 1.2), 0.0, env).dropoff

    def test_negative_xi(self):
        with pytest.raises(ValueError):
            sweep_label(StageTrajectory(Pose(0, 0, 0), 0.0, 1.2), -0.1, far_env())


class TestBuild:
    def test_unpruned_count(self):
        mdp = build(far_env(), PARAMS, PART, 3, BuildConfig(prune_unsafe=False))
        assert mdp.num_states - 1 == 9 + 81 + 729 == 819

    def test_noise_free_single_stage(self):
        mdp = build(far_env(), PARAMS, make_partition(0.06, 1), 1)
        assert mdp.num_states == 4
        assert [mdp.transitions(0, a) for a in range(3)] == [[(1, 1.0)], [(2, 1.0)], [(3, 1.0)]]
        assert all(mdp.transitions(s, -1) == [(s, 1.0)] for s in (1, 2, 3))

    def test_size_bound(self, mdp_a):
        k = mdp_a.horizon
        assert mdp_a.num_states <= 1 + sum(27 ** i for i in range(1, k + 1))

    def test_row_sums(self, mdp_a):
        for s in range(mdp_a.num_states):
            for a in mdp_a.enabled(s):
                assert abs(sum(p for _, p in mdp_a.transitions(s, a)) - 1.0) <= 1e-12

    def test_tree_property(self, mdp_a):
        seen = set()
        for s in range(mdp_a.num_states):
            path = tuple(mdp_a.path_to(s))
            assert path not in seen
            seen.add(path)
            t = 0
            for a, b in path:
                t = mdp_a.child(t, a, b)
            assert t == s

    def test_terminal_structure(self, mdp_a):
        depth_k = mdp_a.depth == mdp_a.horizon
        assert np.all(mdp_a.terminal[depth_k])
        unsafe = (mdp_a.labels & U_BIT) != 0
        assert np.all(mdp_a.terminal[unsafe])
        assert np.all(mdp_a.terminal == (depth_k | unsafe))

    def test_xi_invariants(self, mdp_a):
        assert mdp_a.xi[0] == 0.0
        assert np.all(mdp_a.xi >= 0)
        for s in np.random.default_rng(0).integers(1, mdp_a.num_states, 300):
            st = mdp_a.state(s)
            assert st.xi == pytest.approx(uncertainty(st.nominal, st.lower_extreme, st.upper_extreme), abs=1e-15)

    def test_heading_sandwich(self, mdp_a):
        half = PART.width / 2 * PARAMS.dt
        for s in np.random.default_rng(1).integers(1, mdp_a.num_states, 300):
            k = int(mdp_a.depth[s])
            nom, lo, hi = mdp_a.nominal[s, 2], mdp_a.lower[s, 2], mdp_a.upper[s, 2]
            assert angle_diff(nom - lo, k * half) < 1e-9
            assert angle_diff(hi - nom, k * half) < 1e-9

    def test_deterministic(self, env_a):
        a = build(env_a.env, env_a.params, env_a.partition, 3)
        b = build(env_a.env, env_a.params, env_a.partition, 3)
        for name in ("parent", "action", "bin_idx", "labels", "first_child", "xi", "nominal", "lower", "upper"):
            assert np.array_equal(getattr(a, name), getattr(b, name))

    def test_incremental_tree_matches_direct_build(self, env_a):
        tree = ReachabilityTree(env_a.env, env_a.params, env_a.partition)
        tree.grow_to(4)
        small = tree.mdp(3)
        direct = build(env_a.env, env_a.params, env_a.partition, 3)
        assert np.array_equal(small.labels, direct.labels)
        assert np.array_equal(small.first_child, direct.first_child)

    def test_state_cap(self, env_a):
        with pytest.raises(StateCapError):
            build(env_a.env, env_a.params, env_a.partition, 4, BuildConfig(max_states=100))

    def test_bad_horizon(self):
        with pytest.raises(ValueError):
            build(far_env(), PARAMS, PART, 0)


def test_unsafe_labelling_is_sound_under_dense_resampling(env_a):
    """1000 random states: 10x denser sampling never finds a contact the sweep missed."""
    mdp = build(env_a.env, env_a.params, env_a.partition, 5)
    env = env_a.env
    unsafe = env.with_label("unsafe")
    rng = np.random.default_rng(7)
    picks = rng.choice(np.arange(1, mdp.num_states), size=1000, replace=False)
    fine = 10 * BuildConfig().sweep_samples_per_stage
    missed = 0
    for s in picks:
        st = mdp.state(s)
        tr = st.traj
        pts = sample_positions([tr.start.x], [tr.start.y], [tr.start.theta], [tr.w], tr.duration, fine)[0]
        touches = any(np.any(r.distance(pts) <= st.xi) for r in unsafe)
        if touches and not st.props.unsafe:
            missed += 1
    assert missed == 0


class TestFindMinK:
    def test_one_stage(self):
        env = Environment((
            rectangle(-0.5, -1, 0.8, 1, "pickup", "p"),
            rectangle(0.5, -3, 3, 3, "dropoff", "d"),
        ), Pose(0, 0, 0))
        res = find_min_k(env, PARAMS, PART)
        assert res.k == 1 and res.value == 1.0

    def test_enclosed_start_is_unreachable(self):
        ring = [regular_polygon(0.9 * math.cos(a), 0.9 * math.sin(a), 0.5, 8, "unsafe", f"post{i}")
                for i, a in enumerate(np.linspace(0, 2 * math.pi, 12, endpoint=False))]
        env = far_env(*ring)
        with pytest.raises(UnreachableError):
            find_min_k(env, PARAMS, PART, BuildConfig(k_max=4))

    def test_k_max_too_small(self, env_a):
        with pytest.raises(UnreachableError):
            find_min_k(env_a.env, env_a.params, env_a.partition, BuildConfig(k_max=1))

    @pytest.mark.parametrize("name", ["env_a", "env_b", "env_c"])
    def test_bundled_need_six_stages(self, name):
        scn = load_scenario(bundled_path(name))
        res = find_min_k(scn.env, scn.params, scn.partition)
        assert res.k == 6
        assert 0.0 < res.value < 1.0
        assert 10_000 <= res.mdp.num_states <= 100_000


@pytest.mark.parametrize("name", ["env_a", "env_b", "env_c"])
def test_xi_monotonicity_is_reported(name, capsys):
    """Growth of xi along edges is measured, not assumed; the count is printed."""
    scn = load_scenario(bundled_path(name))
    mdp = build(scn.env, scn.params, scn.partition, 6)
    child = np.arange(1, mdp.num_states)
    drop = mdp.xi[mdp.parent[child]] - mdp.xi[child]
    shrinking = int(np.sum(drop > 1e-12))
    with capsys.disabled():
        print(f"\n{name}: {shrinking} of {len(child)} edges shrink xi (largest drop {max(drop.max(), 0.0):.3g})")
    assert np.all(np.isfinite(mdp.xi))
