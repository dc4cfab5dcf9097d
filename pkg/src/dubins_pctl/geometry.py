"""Polygonal environments, proposition labels and disc predicates.

All regions and discs are closed sets, so tangency counts both as
containment and as intersection.  Regions are convex polygons with
counterclockwise vertices; anything else has to be decomposed before it
gets here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .dynamics import Pose

PICKUP = "pickup"
DROPOFF = "dropoff"
UNSAFE = "unsafe"
FREE = "free"
LABELS = (PICKUP, DROPOFF, UNSAFE, FREE)

# bit order used for packed proposition sets
PROPOSITIONS = ("pi_p", "pi_d", "pi_u")
_LABEL_BIT = {PICKUP: 0, DROPOFF: 1, UNSAFE: 2}


class GeometryError(ValueError):
    """Raised for malformed regions or environments."""


class Point2(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class PropositionSet:
    """A subset of {pi_p, pi_d, pi_u}."""

    pickup: bool = False
    dropoff: bool = False
    unsafe: bool = False

    @classmethod
    def from_mask(cls, mask: int) -> "PropositionSet":
        return cls(bool(mask & 1), bool(mask & 2), bool(mask & 4))

    @property
    def mask(self) -> int:
        return int(self.pickup) | int(self.dropoff) << 1 | int(self.unsafe) << 2

    def names(self) -> tuple[str, ...]:
        return tuple(n for n, on in zip(PROPOSITIONS, (self.pickup, self.dropoff, self.unsafe)) if on)

    def __contains__(self, name: str) -> bool:
        return name in self.names()

    def __str__(self) -> str:
        return "{" + ",".join(self.names()) + "}"


@dataclass(frozen=True, eq=False)
class ConvexRegion:
    """Convex polygon with counterclockwise vertices and a label."""

    vertices: np.ndarray
    label: str
    name: str = ""
    _normals: np.ndarray = field(init=False, repr=False)
    _offsets: np.ndarray = field(init=False, repr=False)
    _center: np.ndarray = field(init=False, repr=False)
    _radius: float = field(init=False, repr=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        who = f"region {self.name!r}" if self.name else "region"
        if v.ndim != 2 or v.shape[1] != 2:
            raise GeometryError(f"{who}: vertices must be a list of [x, y] pairs")
        if len(v) < 3:
            raise GeometryError(f"{who}: needs at least 3 vertices, got {len(v)}")
        if not np.all(np.isfinite(v)):
            raise GeometryError(f"{who}: non-finite vertex coordinate")
        if self.label not in LABELS:
            raise GeometryError(f"{who}: unknown label {self.label!r}")
        if len({tuple(p) for p in v}) != len(v):
            raise GeometryError(f"{who}: repeated vertex")
        edges = np.roll(v, -1, axis=0) - v
        cross = edges[:, 0] * np.roll(edges, -1, axis=0)[:, 1] - edges[:, 1] * np.roll(edges, -1, axis=0)[:, 0]
        if not np.all(cross > 0):
            raise GeometryError(
                f"{who}: not strictly convex and counterclockwise "
                f"(vertex {int(np.argmin(cross)) + 1} is reflex, collinear or clockwise)"
            )
        length = np.hypot(edges[:, 0], edges[:, 1])
        normals = np.column_stack([-edges[:, 1], edges[:, 0]]) / length[:, None]
        center = v.mean(axis=0)
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "_normals", normals)
        object.__setattr__(self, "_offsets", np.einsum("ij,ij->i", normals, v))
        object.__setattr__(self, "_center", center)
        object.__setattr__(self, "_radius", float(np.max(np.hypot(*(v - center).T))))

    @property
    def bounding_circle(self) -> tuple[np.ndarray, float]:
        return self._center, self._radius

    def inward_distance(self, points) -> np.ndarray:
        """Smallest signed distance from each point to the edge lines.

        Positive inside, zero on the boundary.  A disc of radius r is
        contained in the polygon iff this is >= r at its center.
        """
        p = np.asarray(points, dtype=float)
        return np.min(p @ self._normals.T - self._offsets, axis=-1)

    def distance(self, points) -> np.ndarray:
        """Euclidean distance from each point to the closed polygon."""
        p = np.asarray(points, dtype=float)
        a = self.vertices
        e = np.roll(a, -1, axis=0) - a
        rel = p[..., None, :] - a  # (..., m, 2)
        t = np.clip(np.einsum("...mk,mk->...m", rel, e) / np.einsum("mk,mk->m", e, e), 0.0, 1.0)
        d = rel - t[..., None] * e
        out = np.min(np.hypot(d[..., 0], d[..., 1]), axis=-1)
        return np.where(self.inward_distance(p) >= 0.0, 0.0, out)


@dataclass(frozen=True)
class Environment:
    regions: tuple[ConvexRegion, ...]
    initial_pose: Pose

    def __post_init__(self):
        regions = tuple(self.regions)
        object.__setattr__(self, "regions", regions)
        labels = [r.label for r in regions]
        if PICKUP not in labels:
            raise GeometryError("environment has no pickup region")
        if DROPOFF not in labels:
            raise GeometryError("environment has no dropoff region")
        names = [r.name for r in regions if r.name]
        if len(set(names)) != len(names):
            raise GeometryError("region names must be unique")
        q = self.initial_pose
        if propositions_at(Point2(q.x, q.y), self).unsafe:
            raise GeometryError("initial position lies in an unsafe region")

    def with_label(self, label: str) -> tuple[ConvexRegion, ...]:
        return tuple(r for r in self.regions if r.label == label)


def point_region_distance(p: Point2, r: ConvexRegion) -> float:
    return float(r.distance(np.array([p[0], p[1]])))


def disc_contained(center: Point2, radius: float, r: ConvexRegion) -> bool:
    if radius < 0:
        raise ValueError("radius must be non-negative")
    return bool(r.inward_distance(np.array([center[0], center[1]])) >= radius)


def disc_intersects(center: Point2, radius: float, r: ConvexRegion) -> bool:
    if radius < 0:
        raise ValueError("radius must be non-negative")
    return point_region_distance(center, r) <= radius


def proposition_masks(points, env: Environment) -> np.ndarray:
    """Packed proposition sets (bit 0 pickup, 1 dropoff, 2 unsafe) for many points."""
    p = np.asarray(points, dtype=float)
    out = np.zeros(p.shape[:-1], dtype=np.uint8)
    for r in env.regions:
        bit = _LABEL_BIT.get(r.label)
        if bit is None:
            continue
        inside = r.inward_distance(p) >= 0.0
        out |= inside.astype(np.uint8) << bit
    return out


def propositions_at(p: Point2, env: Environment) -> PropositionSet:
    return PropositionSet.from_mask(int(proposition_masks(np.array([p[0], p[1]]), env)))


def signed_area(vertices: Sequence[Sequence[float]]) -> float:
    v = np.asarray(vertices, dtype=float)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def rectangle(x0: float, y0: float, x1: float, y1: float, label: str, name: str = "") -> ConvexRegion:
    return ConvexRegion(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]), label, name)


def regular_polygon(cx: float, cy: float, radius: float, sides: int, label: str, name: str = "") -> ConvexRegion:
    ang = 2 * math.pi * np.arange(sides) / sides
    return ConvexRegion(np.column_stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang)]), label, name)
