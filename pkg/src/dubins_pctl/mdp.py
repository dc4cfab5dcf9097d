"""Tree-shaped labeled MDP with uniform transition probabilities.

States are numbered breadth-first.  A non-terminal state enables every
action, and each action leads to ``n_bins`` children with probability
``1/n_bins``.  The children of state ``s`` sit contiguously at
``first_child[s] + a * n_bins + b`` for action index ``a`` and 0-based
bin ``b``.  A terminal state enables only the dummy action, which is a
probability-1 self-loop.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .dynamics import Pose, StageTrajectory
from .geometry import PropositionSet

DUMMY = -1

P_BIT, D_BIT, U_BIT = 1, 2, 4


@dataclass(frozen=True)
class MdpState:
    id: int
    stage: int
    parent: Optional[int]
    action: Optional[int]
    noise_bin: Optional[int]  # 1-based; None at the root
    props: PropositionSet
    terminal: bool
    xi: float = 0.0
    traj: Optional[StageTrajectory] = None
    nominal: Optional[Pose] = None
    lower_extreme: Optional[Pose] = None
    upper_extreme: Optional[Pose] = None


class Mdp:
    """Immutable tree MDP.  Geometry arrays are optional."""

    def __init__(self, *, n_actions: int, n_bins: int, parent, action, bin_idx, labels, first_child,
                 controls: Optional[Sequence[float]] = None, reps: Optional[Sequence[float]] = None,
                 dt: Optional[float] = None, xi=None, nominal=None, lower=None, upper=None):
        self.n_actions = int(n_actions)
        self.n_bins = int(n_bins)
        self.parent = np.asarray(parent, dtype=np.int64)
        self.action = np.asarray(action, dtype=np.int8)
        self.bin_idx = np.asarray(bin_idx, dtype=np.int16)
        self.labels = np.asarray(labels, dtype=np.uint8)
        self.first_child = np.asarray(first_child, dtype=np.int64)
        self.controls = None if controls is None else tuple(float(c) for c in controls)
        self.reps = None if reps is None else tuple(float(e) for e in reps)
        self.dt = dt
        n = len(self.parent)
        self.xi = np.zeros(n) if xi is None else np.asarray(xi, dtype=float)
        self.nominal = None if nominal is None else np.asarray(nominal, dtype=float)
        self.lower = None if lower is None else np.asarray(lower, dtype=float)
        self.upper = None if upper is None else np.asarray(upper, dtype=float)
        for arr in (self.parent, self.action, self.bin_idx, self.labels, self.first_child, self.xi):
            arr.setflags(write=False)
        self._check()
        depth = np.zeros(n, dtype=np.int64)
        while True:
            nxt = np.concatenate([[0], depth[self.parent[1:]] + 1])
            if np.array_equal(nxt, depth):
                break
            depth = nxt
        self.depth = depth
        self.depth.setflags(write=False)
        # breadth-first numbering keeps depth non-decreasing
        edges = np.searchsorted(depth, np.arange(int(depth[-1]) + 2))
        self.levels = [range(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]

    def _check(self):
        n = len(self.parent)
        if n == 0 or self.parent[0] != -1:
            raise ValueError("state 0 must be the root")
        for name in ("action", "bin_idx", "labels", "first_child", "xi"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has wrong length")
        width = self.n_actions * self.n_bins
        expanded = self.first_child[self.first_child >= 0]
        if not np.array_equal(expanded, 1 + width * np.arange(len(expanded))):
            raise ValueError("children are not in breadth-first position")
        if 1 + width * len(expanded) != n:
            raise ValueError("state count does not match the expansions")
        kids = (self.first_child[self.first_child >= 0][:, None] + np.arange(width)).ravel()
        owners = np.repeat(np.flatnonzero(self.first_child >= 0), width)
        if not np.array_equal(self.parent[kids], owners):
            raise ValueError("parent pointers disagree with child layout")
        slot = np.tile(np.arange(width), len(owners) // width if width else 0)
        if not (np.array_equal(self.action[kids], slot // self.n_bins)
                and np.array_equal(self.bin_idx[kids], slot % self.n_bins)):
            raise ValueError("action/bin tags disagree with child layout")

    # -- structure ------------------------------------------------------
    @property
    def num_states(self) -> int:
        return len(self.parent)

    @property
    def horizon(self) -> int:
        return len(self.levels) - 1

    @property
    def terminal(self) -> np.ndarray:
        return self.first_child < 0

    def is_terminal(self, s: int) -> bool:
        return bool(self.first_child[s] < 0)

    def enabled(self, s: int) -> tuple[int, ...]:
        return (DUMMY,) if self.is_terminal(s) else tuple(range(self.n_actions))

    def children(self, s: int) -> np.ndarray:
        """Child ids with shape (n_actions, n_bins); empty for terminals."""
        f = self.first_child[s]
        if f < 0:
            return np.empty((0, self.n_bins), dtype=np.int64)
        return (f + np.arange(self.n_actions * self.n_bins)).reshape(self.n_actions, self.n_bins)

    def child(self, s: int, a: int, b: int) -> int:
        """Successor of ``s`` under action index ``a`` and 1-based bin ``b``."""
        return int(self.first_child[s] + a * self.n_bins + (b - 1))

    @property
    def transition_probability(self) -> Fraction:
        return Fraction(1, self.n_bins)

    def transitions(self, s: int, a: int) -> list[tuple[int, float]]:
        if a == DUMMY:
            return [(s, 1.0)] if self.is_terminal(s) else []
        if self.is_terminal(s) or not 0 <= a < self.n_actions:
            return []
        p = 1.0 / self.n_bins
        return [(int(c), p) for c in self.children(s)[a]]

    def path_to(self, s: int) -> list[tuple[int, int]]:
        """(action index, 1-based bin) pairs leading from the root to ``s``."""
        path = []
        while s > 0:
            path.append((int(self.action[s]), int(self.bin_idx[s]) + 1))
            s = int(self.parent[s])
        return path[::-1]

    def action_index(self, u: float) -> int:
        if self.controls is None:
            return int(u)
        for i, c in enumerate(self.controls):
            if abs(c - u) <= 1e-12:
                return i
        raise KeyError(f"{u} is not one of the controls {self.controls}")

    def props(self, s: int) -> PropositionSet:
        return PropositionSet.from_mask(int(self.labels[s]))

    def state(self, s: int) -> MdpState:
        s = int(s)
        root = s == 0
        traj = nominal = lo = hi = None
        if self.nominal is not None:
            nominal = Pose(*self.nominal[s])
            lo = Pose(*self.lower[s])
            hi = Pose(*self.upper[s])
            if not root and self.controls is not None and self.reps is not None:
                w = self.controls[self.action[s]] + self.reps[self.bin_idx[s]]
                traj = StageTrajectory(Pose(*self.nominal[self.parent[s]]), w, self.dt)
        return MdpState(
            id=s, stage=int(self.depth[s]),
            parent=None if root else int(self.parent[s]),
            action=None if root else int(self.action[s]),
            noise_bin=None if root else int(self.bin_idx[s]) + 1,
            props=self.props(s), terminal=self.is_terminal(s), xi=float(self.xi[s]),
            traj=traj, nominal=nominal, lower_extreme=lo, upper_extreme=hi,
        )

    def __repr__(self):
        return f"Mdp(states={self.num_states}, horizon={self.horizon}, actions={self.n_actions}, bins={self.n_bins})"


def random_tree_mdp(rng: np.random.Generator, n_actions: int, n_bins: int, depth: int,
                    p_stop: float = 0.3, max_states: int = 40, label_p=(0.3, 0.3, 0.2)) -> Mdp:
    """Random tree MDP for checker tests; labels drawn independently per bit."""
    width = n_actions * n_bins
    parent, action, bin_idx, first_child = [-1], [-1], [-1], []
    level = [0]
    for k in range(depth):
        nxt = []
        for s in level:
            grow = rng.random() >= p_stop and len(parent) + width <= max_states
            if not grow:
                continue
            for a in range(n_actions):
                for b in range(n_bins):
                    nxt.append(len(parent))
                    parent.append(s)
                    action.append(a)
                    bin_idx.append(b)
        level = nxt
    n = len(parent)
    first = np.full(n, -1, dtype=np.int64)
    for c in range(1, n, width):
        first[parent[c]] = c
    bits = rng.random((n, 3)) < np.asarray(label_p)
    labels = bits[:, 0] * P_BIT | bits[:, 1] * D_BIT | bits[:, 2] * U_BIT
    return Mdp(n_actions=n_actions, n_bins=n_bins, parent=parent, action=action,
               bin_idx=bin_idx, labels=labels, first_child=first)
