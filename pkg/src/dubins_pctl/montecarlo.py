"""Monte Carlo validation of the MDP lower bound on the continuous system.

Each trial draws one uniform noise value per stage, drives the true
vehicle with the strategy, reads the gyroscope bin, and finally turns
the densely sampled true trajectory into a word that is checked against
the formula.  Trials are seeded from ``(master_seed, trial index)``.
"""
from __future__ import annotations

import enum
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from .dynamics import NoisePartition, Pose, VehicleParams, bin_of, propagate, propagate_arrays, sample_positions
from .geometry import Environment, PropositionSet, proposition_masks
from .mdp import P_BIT, U_BIT, Mdp
from .pctl import DELIVERY, holds_on_word
from .strategy import StrategyError, StrategyState


class FailureKind(str, enum.Enum):
    NONE = "none"
    OFF_TREE = "off_tree"
    UNSAFE_HIT = "unsafe_hit"
    NO_DROPOFF = "no_dropoff"
    NO_PICKUP = "no_pickup"


@dataclass(frozen=True)
class SimConfig:
    trials: int = 1000
    master_seed: int = 0
    word_samples_per_stage: int = 200

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.word_samples_per_stage < 1:
            raise ValueError("word_samples_per_stage must be >= 1")


class Word(tuple):
    """Packed proposition sets; consecutive letters differ, the last one repeats."""

    def letters(self) -> list[PropositionSet]:
        return [PropositionSet.from_mask(int(m)) for m in self]

    def __str__(self):
        return "".join(f"({','.join(p.names())})" for p in self.letters())


@dataclass
class TrialResult:
    inputs: list
    noise: list
    bins: list
    poses: list  # stage end poses, starting with the initial pose
    word: Word
    satisfied: bool
    failure_kind: FailureKind
    states: list = field(default_factory=list)  # MDP states visited, root first
    samples: Optional[np.ndarray] = None  # (stage, t, x, y, theta) rows


def trial_rng(master_seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=(int(trial),)))


def word_of_masks(masks) -> Word:
    m = np.asarray(masks, dtype=np.uint8)
    if m.size == 0:
        raise ValueError("no samples")
    keep = np.concatenate([[True], m[1:] != m[:-1]])
    return Word(int(v) for v in m[keep])


def word_of_trajectory(positions, env: Environment, times=None) -> Word:
    """Word of a sampled trajectory (positions in time order, shape (T, 2)).

    ``times`` is accepted for symmetry with the trajectory export and only
    checked for ordering.
    """
    if times is not None and np.any(np.diff(np.asarray(times)) < 0):
        raise ValueError("samples must be ordered in time")
    return word_of_masks(proposition_masks(np.asarray(positions, dtype=float), env))


def check_word(word, phi=DELIVERY) -> bool:
    return holds_on_word(tuple(word), phi)


def _classify(word: Word, halted: bool) -> FailureKind:
    if any(m & U_BIT for m in word):
        return FailureKind.UNSAFE_HIT
    if halted:
        return FailureKind.OFF_TREE
    if not any(m & P_BIT for m in word):
        return FailureKind.NO_PICKUP
    return FailureKind.NO_DROPOFF


def simulate_trial(env: Environment, params: VehicleParams, part: NoisePartition, mdp: Mdp,
                   policy: np.ndarray, rng: np.random.Generator, phi=DELIVERY,
                   word_samples_per_stage: int = 200, keep_samples: bool = False) -> TrialResult:
    """Run the true system for ``mdp.horizon`` stages under the strategy.

    If the strategy reaches an absorbing state before the horizon it has
    no input to give; the trial stops there and the word of the run so
    far decides it (an until formula already met stays met).
    """
    stepper = StrategyState(mdp, policy)
    q = env.initial_pose
    poses, inputs, noise, bins = [q], [], [], []
    chunks = [np.array([[q.x, q.y]])]
    halted = False
    for _ in range(mdp.horizon):
        try:
            u = stepper.next_input()
        except StrategyError:
            halted = True
            break
        eps = float(rng.uniform(-part.eps_max, part.eps_max))
        w = u + eps
        pts = sample_positions([q.x], [q.y], [q.theta], [w], params.dt, word_samples_per_stage)[0]
        chunks.append(pts[1:])
        q = propagate(q, w, params.dt)
        b = bin_of(eps, part)
        stepper.observe(u, b)
        poses.append(q)
        inputs.append(u)
        noise.append(eps)
        bins.append(b)
    positions = np.concatenate(chunks)
    word = word_of_trajectory(positions, env)
    sat = check_word(word, phi)
    samples = None
    if keep_samples:
        samples = _dense_samples(env.initial_pose, inputs, noise, params.dt, word_samples_per_stage)
    states = [0]
    for rec in stepper.history:
        states.append(mdp.child(states[-1], mdp.action_index(rec.u), rec.bin))
    return TrialResult(inputs, noise, bins, poses, word, sat,
                       FailureKind.NONE if sat else _classify(word, halted), states, samples)


def _dense_samples(q0: Pose, inputs, noise, dt: float, per_stage: int) -> np.ndarray:
    """Rows of (stage, t, x, y, theta); stage 0 is the initial pose."""
    rows = [np.array([[0, 0.0, q0.x, q0.y, q0.theta]])]
    q = q0
    t = np.linspace(0.0, dt, per_stage + 1)[1:]
    for k, (u, e) in enumerate(zip(inputs, noise), start=1):
        x, y, th = propagate_arrays(q.x, q.y, q.theta, u + e, t)
        rows.append(np.column_stack([np.full(len(t), k), (k - 1) * dt + t, x, y, th]))
        q = propagate(q, u + e, dt)
    return np.concatenate(rows)


def _sig(x: float) -> float:
    return float(f"{x:.12g}")


@dataclass
class Summary:
    trials: int
    master_seed: int
    value: float
    satisfied: int
    failures: dict
    joint_value: Optional[float] = None

    @property
    def empirical_rate(self) -> float:
        return self.satisfied / self.trials

    @property
    def slack(self) -> float:
        v = self.value
        return 3.0 * math.sqrt(max(v * (1.0 - v), 0.0) / self.trials)

    @property
    def bound_holds(self) -> bool:
        return self.empirical_rate >= self.value - self.slack

    def to_dict(self) -> dict:
        d = {
            "tool_version": __version__,
            "trials": self.trials,
            "master_seed": self.master_seed,
            "theoretical_value": _sig(self.value),
            "empirical_rate": _sig(self.empirical_rate),
            "satisfied": self.satisfied,
            "slack_3sigma": _sig(self.slack),
            "bound_holds": self.bound_holds,
            "failures": {k.value if isinstance(k, FailureKind) else k: v for k, v in sorted(self.failures.items())},
        }
        if self.joint_value is not None:
            d["joint_value"] = _sig(self.joint_value)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def run(env: Environment, params: VehicleParams, part: NoisePartition, mdp: Mdp, policy: np.ndarray,
        config: SimConfig = SimConfig(), value: Optional[float] = None, phi=DELIVERY,
        joint_value: Optional[float] = None, on_trial=None, keep_samples: int = 0) -> Summary:
    """Run ``config.trials`` independent trials and aggregate them.

    ``value`` is the MDP value at the root.  ``on_trial(i, result)`` is
    called after each trial; the first ``keep_samples`` results carry
    their dense trajectory samples.
    """
    if value is None:
        raise ValueError("the root value of the synthesized policy is required")
    counts = Counter({k.value: 0 for k in FailureKind if k is not FailureKind.NONE})
    satisfied = 0
    for i in range(config.trials):
        res = simulate_trial(env, params, part, mdp, policy, trial_rng(config.master_seed, i), phi,
                             config.word_samples_per_stage, keep_samples=i < keep_samples)
        if res.satisfied:
            satisfied += 1
        else:
            counts[res.failure_kind.value] += 1
        if on_trial is not None:
            on_trial(i, res)
    return Summary(config.trials, config.master_seed, float(value), satisfied, dict(counts), joint_value)
