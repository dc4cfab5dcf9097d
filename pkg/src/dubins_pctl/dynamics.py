"""Stochastic Dubins kinematics and actuator-noise quantization.

The vehicle moves at unit speed with angular velocity ``w = u + eps``,
where ``u`` is the commanded turn rate and ``eps`` the actuator noise,
held constant over each stage.  Stages are integrated in closed form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np

TWO_PI = 2.0 * math.pi
STRAIGHT_EPS = 1e-12


class OutOfRangeError(ValueError):
    """Noise value outside the support of the partition."""


def wrap_angle(theta):
    """Map angles into [0, 2*pi)."""
    t = np.mod(theta, TWO_PI)
    # np.mod can round tiny negatives up to exactly 2*pi
    t = np.where(t >= TWO_PI, 0.0, t)
    return float(t) if np.ndim(t) == 0 else t


class Pose(NamedTuple):
    x: float
    y: float
    theta: float

    @classmethod
    def make(cls, x: float, y: float, theta: float) -> "Pose":
        return cls(float(x), float(y), wrap_angle(theta))

    def position(self) -> tuple[float, float]:
        return self.x, self.y


@dataclass(frozen=True)
class VehicleParams:
    """Turn radius ``rho`` and stage length ``dt``; forward speed is 1."""

    rho: float
    dt: float

    def __post_init__(self):
        if not (self.rho > 0 and math.isfinite(self.rho)):
            raise ValueError(f"rho must be positive, got {self.rho}")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt}")

    @property
    def controls(self) -> tuple[float, float, float]:
        # order fixes argmax tie-breaking downstream
        return (-1.0 / self.rho, 0.0, 1.0 / self.rho)


@dataclass(frozen=True)
class NoisePartition:
    """``n`` equal-width noise bins tiling [-eps_max, eps_max].

    Bin numbers are 1-based.  ``lower``, ``upper`` and ``reps`` are
    indexed 0..n-1 and are the correctly rounded values of the exact
    rational bin edges and midpoints.
    """

    eps_max: float
    n: int
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    reps: tuple[float, ...]

    @property
    def width(self) -> float:
        return float(2 * Fraction(self.eps_max) / self.n)

    @property
    def mass(self) -> Fraction:
        return Fraction(1, self.n)

    @property
    def masses(self) -> tuple[Fraction, ...]:
        # uniform noise; a different bounded density would change only this
        return (Fraction(1, self.n),) * self.n

    def bins(self) -> list[tuple[float, float]]:
        return list(zip(self.lower, self.upper))

    def interval(self, b: int) -> tuple[float, float]:
        return self.lower[b - 1], self.upper[b - 1]


def make_partition(eps_max: float, n: int) -> NoisePartition:
    if not (eps_max > 0 and math.isfinite(eps_max)):
        raise ValueError(f"eps_max must be positive, got {eps_max}")
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n}")
    n = int(n)
    e = Fraction(eps_max)
    edges = [float(e * Fraction(2 * i - n, n)) for i in range(n + 1)]
    reps = tuple(float(e * Fraction(2 * i - 1 - n, n)) for i in range(1, n + 1))
    return NoisePartition(float(eps_max), n, tuple(edges[:-1]), tuple(edges[1:]), reps)


def bin_of(eps: float, part: NoisePartition) -> int:
    """1-based bin holding ``eps``; shared edges go to the lower bin."""
    if not (-part.eps_max <= eps <= part.eps_max):
        raise OutOfRangeError(f"noise {eps} outside [-{part.eps_max}, {part.eps_max}]")
    return int(np.searchsorted(part.upper, eps, side="left")) + 1


def propagate_arrays(x, y, theta, w, tau):
    """Vectorized closed-form stage integration (broadcasts over inputs).

    Uses the half-angle form ``x' = x + tau*cos(theta + w*tau/2)*sinc(w*tau/2)``,
    which equals ``x + (sin(theta + w*tau) - sin(theta))/w`` but stays
    accurate as ``w`` goes to zero.
    """
    x, y, theta, w, tau = (np.asarray(a, dtype=float) for a in (x, y, theta, w, tau))
    half = 0.5 * w * tau
    straight = np.abs(w) < STRAIGHT_EPS
    scale = np.where(straight, tau, tau * np.sinc(half / math.pi))
    mid = np.where(straight, theta, theta + half)
    return (
        x + scale * np.cos(mid),
        y + scale * np.sin(mid),
        wrap_angle(theta + w * tau),
    )


def propagate(q: Pose, w: float, tau: float) -> Pose:
    if tau < 0:
        raise ValueError("tau must be non-negative")
    if abs(w) < STRAIGHT_EPS:
        return Pose(q.x + tau * math.cos(q.theta), q.y + tau * math.sin(q.theta), q.theta)
    half = 0.5 * w * tau
    chord = 2.0 * math.sin(half) / w
    return Pose(
        q.x + chord * math.cos(q.theta + half),
        q.y + chord * math.sin(q.theta + half),
        wrap_angle(q.theta + w * tau),
    )


def sample_positions(x, y, theta, w, tau, samples: int) -> np.ndarray:
    """Positions at ``samples + 1`` equally spaced times over a stage.

    Inputs are 1-d arrays of stage starts; the result has shape
    ``(len(x), samples + 1, 2)`` and includes both endpoints.
    """
    t = np.linspace(0.0, tau, samples + 1)
    px, py, _ = propagate_arrays(
        np.asarray(x)[:, None], np.asarray(y)[:, None], np.asarray(theta)[:, None],
        np.asarray(w)[:, None], t[None, :],
    )
    return np.stack([px, py], axis=-1)


@dataclass(frozen=True)
class StageTrajectory:
    start: Pose
    w: float
    duration: float

    @property
    def end(self) -> Pose:
        return propagate(self.start, self.w, self.duration)

    def at(self, t: float) -> Pose:
        return propagate(self.start, self.w, t)

    def sample(self, samples: int) -> np.ndarray:
        s = self.start
        return sample_positions([s.x], [s.y], [s.theta], [self.w], self.duration, samples)[0]


def quantized_successors(q: Pose, u: float, part: NoisePartition, dt: float) -> list[tuple[StageTrajectory, Fraction]]:
    """One stage of the quantized system: n trajectories, each with mass 1/n."""
    return [(StageTrajectory(q, u + eps, dt), m) for eps, m in zip(part.reps, part.masses)]
