"""Reachability tree of the quantized system and its labeled MDP.

Every node carries the nominal stage end pose, the two extreme poses
obtained by pushing the noise to the lower (upper) edge of its bin at
every stage so far, the resulting position uncertainty ``xi``, and the
set of propositions guaranteed (pickup, dropoff) or possible (unsafe)
along the stage.  Levels are expanded in bulk with numpy.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .dynamics import NoisePartition, Pose, StageTrajectory, VehicleParams, propagate_arrays, sample_positions
from .geometry import DROPOFF, FREE, PICKUP, UNSAFE, Environment, Point2, PropositionSet, propositions_at
from .mdp import D_BIT, P_BIT, U_BIT, Mdp, MdpState

log = logging.getLogger(__name__)


class BuildError(RuntimeError):
    pass


class StateCapError(BuildError):
    """The tree would exceed ``BuildConfig.max_states``."""


class UnreachableError(BuildError):
    """No horizon up to ``k_max`` admits a satisfying run."""


@dataclass(frozen=True)
class BuildConfig:
    k_max: int = 6
    sweep_samples_per_stage: int = 50
    prune_unsafe: bool = True
    max_states: int = 2_000_000
    chunk_size: int = 4096

    def __post_init__(self):
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if self.sweep_samples_per_stage < 2:
            raise ValueError("sweep_samples_per_stage must be >= 2")


def uncertainty(nominal_end: Pose, lower: Pose, upper: Pose) -> float:
    return max(math.hypot(lower.x - nominal_end.x, lower.y - nominal_end.y),
               math.hypot(upper.x - nominal_end.x, upper.y - nominal_end.y))


def _label_stages(starts: np.ndarray, w: np.ndarray, dt: float, xi: np.ndarray,
                  env: Environment, samples: int) -> np.ndarray:
    """Packed labels for stages starting at ``starts`` (M, 3) under turn rates ``w``."""
    m = len(starts)
    out = np.zeros(m, dtype=np.uint8)
    if m == 0:
        return out
    delta = dt / samples
    pts = sample_positions(starts[:, 0], starts[:, 1], starts[:, 2], w, dt, samples)
    mx, my, _ = propagate_arrays(starts[:, 0], starts[:, 1], starts[:, 2], w, 0.5 * dt)
    mid = np.column_stack([mx, my])
    # unit speed: the whole stage lies within dt/2 of its midpoint
    reach = 0.5 * dt
    end = pts[:, -1]
    for r in env.regions:
        if r.label == FREE:
            continue
        c, rad = r.bounding_circle
        gap = np.hypot(mid[:, 0] - c[0], mid[:, 1] - c[1])
        if r.label == PICKUP:
            cand = np.flatnonzero((gap <= rad + reach) & ((out & P_BIT) == 0))
            if len(cand):
                hit = np.any(r.inward_distance(pts[cand]) >= xi[cand, None], axis=1)
                out[cand[hit]] |= P_BIT
        elif r.label == DROPOFF:
            cand = np.flatnonzero((out & D_BIT) == 0)
            hit = r.inward_distance(end[cand]) >= xi[cand]
            out[cand[hit]] |= D_BIT
        elif r.label == UNSAFE:
            grow = xi + 0.5 * delta
            cand = np.flatnonzero((gap <= rad + reach + grow) & ((out & U_BIT) == 0))
            if len(cand):
                hit = np.any(r.distance(pts[cand]) <= grow[cand, None], axis=1)
                out[cand[hit]] |= U_BIT
    return out


def sweep_label(traj: StageTrajectory, xi: float, env: Environment, config: BuildConfig = BuildConfig()) -> PropositionSet:
    """Labels of one stage under the stage-constant uncertainty radius ``xi``."""
    if xi < 0:
        raise ValueError("xi must be non-negative")
    s = traj.start
    mask = _label_stages(np.array([[s.x, s.y, s.theta]]), np.array([traj.w]), traj.duration,
                         np.array([float(xi)]), env, config.sweep_samples_per_stage)
    return PropositionSet.from_mask(int(mask[0]))


def _expand_arrays(nom, lo, hi, params: VehicleParams, part: NoisePartition, env: Environment,
                   config: BuildConfig):
    """Children of the given parents, ordered parent-major, then action, then bin."""
    u = np.asarray(params.controls)
    width = len(u) * part.n
    w_nom = (u[:, None] + np.asarray(part.reps)[None, :]).ravel()
    w_lo = (u[:, None] + np.asarray(part.lower)[None, :]).ravel()
    w_hi = (u[:, None] + np.asarray(part.upper)[None, :]).ravel()
    count = len(nom) * width
    c_nom = np.empty((count, 3))
    c_lo = np.empty((count, 3))
    c_hi = np.empty((count, 3))
    c_xi = np.empty(count)
    c_lab = np.empty(count, dtype=np.uint8)
    step = max(1, config.chunk_size // width)
    for a in range(0, len(nom), step):
        b = min(len(nom), a + step)
        sl = slice(a * width, b * width)
        starts = np.repeat(nom[a:b], width, axis=0)
        wn = np.tile(w_nom, b - a)
        ends = np.column_stack(propagate_arrays(starts[:, 0], starts[:, 1], starts[:, 2], wn, params.dt))
        lo_s = np.repeat(lo[a:b], width, axis=0)
        hi_s = np.repeat(hi[a:b], width, axis=0)
        lo_e = np.column_stack(propagate_arrays(lo_s[:, 0], lo_s[:, 1], lo_s[:, 2], np.tile(w_lo, b - a), params.dt))
        hi_e = np.column_stack(propagate_arrays(hi_s[:, 0], hi_s[:, 1], hi_s[:, 2], np.tile(w_hi, b - a), params.dt))
        xi = np.maximum(np.hypot(lo_e[:, 0] - ends[:, 0], lo_e[:, 1] - ends[:, 1]),
                        np.hypot(hi_e[:, 0] - ends[:, 0], hi_e[:, 1] - ends[:, 1]))
        c_nom[sl], c_lo[sl], c_hi[sl], c_xi[sl] = ends, lo_e, hi_e, xi
        c_lab[sl] = _label_stages(starts, wn, params.dt, xi, env, config.sweep_samples_per_stage)
    return c_nom, c_lo, c_hi, c_xi, c_lab


def expand(parent: MdpState, u: float, b: int, env: Environment, params: VehicleParams,
           part: NoisePartition, config: BuildConfig = BuildConfig()) -> MdpState:
    """Single child of ``parent`` under control ``u`` and 1-based noise bin ``b``.

    The transition into the returned state carries probability ``part.mass``.
    """
    if parent.terminal:
        raise ValueError("cannot expand a terminal state")
    if u not in params.controls:
        raise ValueError(f"{u} is not one of the controls {params.controls}")
    if not 1 <= b <= part.n:
        raise ValueError(f"bin {b} outside 1..{part.n}")
    a = params.controls.index(u)
    nom, lo, hi = (np.array([list(p)]) for p in (parent.nominal, parent.lower_extreme, parent.upper_extreme))
    c_nom, c_lo, c_hi, c_xi, c_lab = _expand_arrays(nom, lo, hi, params, part, env, config)
    i = a * part.n + (b - 1)
    return MdpState(
        id=-1, stage=parent.stage + 1, parent=parent.id, action=a, noise_bin=b,
        props=PropositionSet.from_mask(int(c_lab[i])), terminal=False, xi=float(c_xi[i]),
        traj=StageTrajectory(parent.nominal, u + part.reps[b - 1], params.dt),
        nominal=Pose(*map(float, c_nom[i])), lower_extreme=Pose(*map(float, c_lo[i])),
        upper_extreme=Pose(*map(float, c_hi[i])),
    )


def root_state(env: Environment) -> MdpState:
    q = env.initial_pose
    return MdpState(id=0, stage=0, parent=None, action=None, noise_bin=None,
                    props=propositions_at(Point2(q.x, q.y), env), terminal=False,
                    xi=0.0, nominal=q, lower_extreme=q, upper_extreme=q)


class ReachabilityTree:
    """Incrementally grown reachability tree.

    Labels of a node depend only on its path, so the MDP for horizon K is
    the first K levels with the deepest level made terminal.
    """

    def __init__(self, env: Environment, params: VehicleParams, part: NoisePartition,
                 config: BuildConfig = BuildConfig()):
        self.env, self.params, self.part, self.config = env, params, part, config
        q = env.initial_pose
        root = np.array([[q.x, q.y, q.theta]])
        self.width = len(params.controls) * part.n
        self._levels = [dict(
            nominal=root, lower=root.copy(), upper=root.copy(), xi=np.zeros(1),
            labels=np.array([root_state(env).props.mask], dtype=np.uint8),
            parent=np.array([-1]), action=np.array([-1]), bin_idx=np.array([-1]),
        )]
        self._count = 1

    @property
    def depth(self) -> int:
        return len(self._levels) - 1

    @property
    def num_states(self) -> int:
        return self._count

    def expandable(self, level: dict) -> np.ndarray:
        if self.config.prune_unsafe:
            return np.flatnonzero((level["labels"] & U_BIT) == 0)
        return np.arange(len(level["labels"]))

    def grow(self) -> None:
        last = self._levels[-1]
        idx = self.expandable(last)
        new = len(idx) * self.width
        if self._count + new > self.config.max_states:
            raise StateCapError(
                f"depth {self.depth + 1} would need {self._count + new} states "
                f"(cap {self.config.max_states})")
        nom, lo, hi, xi, lab = _expand_arrays(last["nominal"][idx], last["lower"][idx], last["upper"][idx],
                                              self.params, self.part, self.env, self.config)
        offset = self._count - len(last["labels"])  # global id of the first state in ``last``
        slot = np.tile(np.arange(self.width), len(idx))
        self._levels.append(dict(
            nominal=nom, lower=lo, upper=hi, xi=xi, labels=lab,
            parent=np.repeat(idx + offset, self.width),
            action=slot // self.part.n, bin_idx=slot % self.part.n,
        ))
        self._count += new
        log.debug("level %d: %d states (%d total)", self.depth, new, self._count)

    def grow_to(self, k: int) -> None:
        while self.depth < k:
            self.grow()

    def frontier_open(self) -> bool:
        return len(self.expandable(self._levels[-1])) > 0

    def mdp(self, k: int) -> Mdp:
        if k > self.depth:
            self.grow_to(k)
        levels = self._levels[: k + 1]
        cat = {key: np.concatenate([lv[key] for lv in levels]) for key in levels[0]}
        first = np.full(len(cat["labels"]), -1, dtype=np.int64)
        start, nxt = 0, len(levels[0]["labels"])
        for lv in levels[:-1]:
            idx = self.expandable(lv)
            first[start + idx] = nxt + self.width * np.arange(len(idx))
            start += len(lv["labels"])
            nxt += len(idx) * self.width
        return Mdp(
            n_actions=len(self.params.controls), n_bins=self.part.n,
            parent=cat["parent"], action=cat["action"], bin_idx=cat["bin_idx"], labels=cat["labels"],
            first_child=first, controls=self.params.controls, reps=self.part.reps, dt=self.params.dt,
            xi=cat["xi"], nominal=cat["nominal"], lower=cat["lower"], upper=cat["upper"],
        )


def build(env: Environment, params: VehicleParams, part: NoisePartition, k: int,
          config: BuildConfig = BuildConfig()) -> Mdp:
    if k < 1:
        raise ValueError("horizon must be >= 1")
    tree = ReachabilityTree(env, params, part, config)
    tree.grow_to(k)
    return tree.mdp(k)


@dataclass
class MinKResult:
    k: int
    mdp: Mdp
    value: float
    synthesis: "object"  # pctl.Synthesis

    @property
    def policy(self):
        return self.synthesis.policy


def find_min_k(env: Environment, params: VehicleParams, part: NoisePartition,
               config: BuildConfig = BuildConfig(), formula=None) -> MinKResult:
    """Smallest horizon in 1..k_max whose MDP gives a positive value."""
    from .pctl import DELIVERY, synthesize

    phi = DELIVERY if formula is None else formula
    tree = ReachabilityTree(env, params, part, config)
    for k in range(1, config.k_max + 1):
        if not tree.frontier_open():
            break
        tree.grow()
        mdp = tree.mdp(k)
        syn = synthesize(mdp, phi)
        log.info("K=%d: %d states, V(s0)=%.6f", k, mdp.num_states, syn.value)
        if syn.value > 0:
            return MinKResult(k, mdp, syn.value, syn)
    raise UnreachableError(f"specification unreachable within horizon {config.k_max}")
