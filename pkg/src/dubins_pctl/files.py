"""Scenario files, content hashes and text exports.

Scenario (environment) files are JSON::

    {"vehicle": {"rho": ..., "dt": ...},
     "noise": {"eps_max": ..., "n": ...},
     "initial": {"x": ..., "y": ..., "theta": ...},
     "regions": [{"name": ..., "label": ..., "vertices": [[x, y], ...]}, ...]}
"""
from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, TextIO

import numpy as np

from .dynamics import NoisePartition, Pose, VehicleParams, make_partition
from .geometry import ConvexRegion, Environment, GeometryError, signed_area
from .mdp import DUMMY, Mdp

BUNDLED = ("env_a", "env_b", "env_c")


class ScenarioError(ValueError):
    """Invalid scenario file; the message names the offending part."""


class OrientationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Scenario:
    env: Environment
    params: VehicleParams
    partition: NoisePartition

    def to_dict(self) -> dict:
        q = self.env.initial_pose
        return {
            "vehicle": {"rho": self.params.rho, "dt": self.params.dt},
            "noise": {"eps_max": self.partition.eps_max, "n": self.partition.n},
            "initial": {"x": q.x, "y": q.y, "theta": q.theta},
            "regions": [{"name": r.name, "label": r.label, "vertices": r.vertices.tolist()}
                        for r in self.env.regions],
        }


def _num(d: dict, key: str, where: str) -> float:
    try:
        v = d[key]
    except (KeyError, TypeError):
        raise ScenarioError(f"{where}: missing field {key!r}") from None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(f"{where}.{key}: expected a number, got {v!r}")
    return float(v)


def parse_scenario(doc: dict, overrides: Optional[dict] = None) -> Scenario:
    """Validate a scenario document.  ``overrides`` may replace rho, dt, eps_max, n."""
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be a JSON object")
    o = {k: v for k, v in (overrides or {}).items() if v is not None}
    try:
        params = VehicleParams(o.get("rho", _num(doc.get("vehicle", {}), "rho", "vehicle")),
                               o.get("dt", _num(doc.get("vehicle", {}), "dt", "vehicle")))
        n = o.get("n", _num(doc.get("noise", {}), "n", "noise"))
        part = make_partition(o.get("eps_max", _num(doc.get("noise", {}), "eps_max", "noise")), n)
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None
    init = doc.get("initial", {})
    pose = Pose.make(_num(init, "x", "initial"), _num(init, "y", "initial"), _num(init, "theta", "initial"))
    raw = doc.get("regions")
    if not isinstance(raw, list) or not raw:
        raise ScenarioError("regions: expected a non-empty list")
    regions = []
    for i, r in enumerate(raw):
        name = str(r.get("name", f"region{i}")) if isinstance(r, dict) else f"region{i}"
        where = f"region {name!r}"
        if not isinstance(r, dict) or "vertices" not in r or "label" not in r:
            raise ScenarioError(f"{where}: needs 'label' and 'vertices'")
        try:
            verts = np.array(r["vertices"], dtype=float)
        except (TypeError, ValueError):
            raise ScenarioError(f"{where}: vertices must be numeric [x, y] pairs") from None
        if verts.ndim != 2 or verts.shape[1] != 2:
            raise ScenarioError(f"{where}: vertices must be a list of [x, y] pairs")
        if len(verts) >= 3 and signed_area(verts) < 0:
            warnings.warn(f"{where}: clockwise vertices reversed", OrientationWarning, stacklevel=2)
            verts = verts[::-1].copy()
        try:
            regions.append(ConvexRegion(verts, str(r["label"]), name))
        except GeometryError as exc:
            raise ScenarioError(str(exc)) from None
    try:
        env = Environment(tuple(regions), pose)
    except GeometryError as exc:
        raise ScenarioError(str(exc)) from None
    return Scenario(env, params, part)


def load_scenario(path, overrides: Optional[dict] = None) -> Scenario:
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except FileNotFoundError:
        raise ScenarioError(f"{p}: no such file") from None
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{p}: JSON parse error at line {exc.lineno}: {exc.msg}") from None
    return parse_scenario(doc, overrides)


def load_environment(path) -> Environment:
    return load_scenario(path).env


def dump_scenario(scn: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scn.to_dict(), indent=2) + "\n")


def bundled_path(name: str) -> Path:
    """Path of a shipped scenario (``env_a``, ``env_b``, ``env_c``)."""
    stem = name[:-5] if name.endswith(".json") else name
    if stem not in BUNDLED:
        raise KeyError(f"no bundled scenario {name!r}; choose from {BUNDLED}")
    return Path(str(resources.files("dubins_pctl") / "environments" / f"{stem}.json"))


def resolve_scenario_path(name_or_path: str) -> Path:
    p = Path(name_or_path)
    if p.exists() or name_or_path.removesuffix(".json") not in BUNDLED:
        return p
    return bundled_path(name_or_path)


def content_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


# -- exports -------------------------------------------------------------------

def write_dot(mdp: Mdp, out: TextIO, values=None, policy=None, meta: Optional[dict] = None) -> None:
    """Graphviz rendering of the tree: one node per state, one edge per transition."""
    if meta:
        out.write(f"// meta: {json.dumps(meta, sort_keys=True)}\n")
    out.write("digraph mdp {\n  node [shape=box, fontsize=9];\n")
    p = f"1/{mdp.n_bins}"
    for s in range(mdp.num_states):
        text = f"s{s}\\nk={int(mdp.depth[s])}\\n{mdp.props(s)}\\nxi={mdp.xi[s]:.4g}"
        if values is not None:
            text += f"\\nV={values[s]:.4g}"
        if policy is not None and policy[s] != DUMMY:
            text += f"\\nmu={int(policy[s])}"
        out.write(f'  s{s} [label="{text}"];\n')
    for s in range(mdp.num_states):
        if mdp.is_terminal(s):
            out.write(f'  s{s} -> s{s} [label="dummy, 1"];\n')
            continue
        for a, row in enumerate(mdp.children(s)):
            name = f"{mdp.controls[a]:.4g}" if mdp.controls is not None else str(a)
            for c in row:
                out.write(f'  s{s} -> s{int(c)} [label="u={name}, {p}"];\n')
    out.write("}\n")


TRAJECTORY_COLUMNS = ("trial", "stage", "t", "x", "y", "theta", "satisfied")


def trajectory_writer(fh: TextIO, meta: Optional[dict] = None):
    """Row writer for sampled trajectories; ``meta`` goes into a leading comment line."""
    if meta:
        fh.write(f"# meta: {json.dumps(meta, sort_keys=True)}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TRAJECTORY_COLUMNS)

    def write(trial: int, samples: np.ndarray, satisfied: bool) -> None:
        for stage, t, x, y, th in samples:
            w.writerow([trial, int(stage), f"{t:.12g}", f"{x:.12g}", f"{y:.12g}", f"{th:.12g}", int(satisfied)])

    return write
