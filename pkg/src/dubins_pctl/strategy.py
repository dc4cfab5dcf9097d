"""Feedback strategy driven by gyroscope interval measurements.

A measurement history (commanded input plus the noise bin recovered
from the measured interval, per stage) identifies exactly one path in
the tree MDP.  The strategy looks that state up and returns its policy
action.  Histories that leave the tree are errors; nothing is re-projected.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .geometry import PROPOSITIONS
from .mdp import DUMMY, Mdp, MdpState

POLICY_FORMAT = "dubins-pctl policy v1"
COLUMNS = ("state", "depth", "parent", "action", "bin", "terminal", "labels", "xi", "mu", "value")


class StrategyError(RuntimeError):
    pass


class OffTreeError(StrategyError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"history leaves the tree at step {step}: {reason}")
        self.step = step


class HorizonExhaustedError(StrategyError):
    pass


class PrunedStateError(StrategyError):
    """The located state is absorbing before the horizon (possibly unsafe)."""


class PolicyFileError(ValueError):
    pass


@dataclass(frozen=True)
class MeasurementRecord:
    u: float
    bin: int


def _locate_id(mdp: Mdp, history: Sequence[MeasurementRecord]) -> int:
    s = 0
    for step, rec in enumerate(history, start=1):
        s = _locate_id_from(mdp, s, rec, step)
    return s


def locate(mdp: Mdp, history: Sequence[MeasurementRecord]) -> MdpState:
    return mdp.state(_locate_id(mdp, history))


def _action_at(mdp: Mdp, policy: np.ndarray, s: int, steps: int) -> float:
    if steps >= mdp.horizon:
        raise HorizonExhaustedError(f"history of length {steps} reaches the horizon {mdp.horizon}")
    if mdp.is_terminal(s):
        raise PrunedStateError(f"state {s} at depth {steps} is absorbing; no continuation exists")
    a = int(policy[s])
    return mdp.controls[a] if mdp.controls is not None else a


def next_input(mdp: Mdp, policy: np.ndarray, history: Sequence[MeasurementRecord]) -> float:
    if len(history) >= mdp.horizon:
        raise HorizonExhaustedError(f"history of length {len(history)} reaches the horizon {mdp.horizon}")
    return _action_at(mdp, policy, _locate_id(mdp, history), len(history))


@dataclass
class StrategyState:
    """Stateful form of the strategy: same answers, one tree step per stage."""

    mdp: Mdp
    policy: np.ndarray
    current: int = 0
    history: list = field(default_factory=list)

    def next_input(self) -> float:
        return _action_at(self.mdp, self.policy, self.current, len(self.history))

    def observe(self, u: float, b: int) -> int:
        rec = MeasurementRecord(u, b)
        self.current = _locate_id_from(self.mdp, self.current, rec, len(self.history) + 1)
        self.history.append(rec)
        return self.current


def _locate_id_from(mdp: Mdp, s: int, rec: MeasurementRecord, step: int) -> int:
    if mdp.is_terminal(s):
        raise OffTreeError(step, f"state {s} has no successors")
    try:
        a = mdp.action_index(rec.u)
    except KeyError:
        raise OffTreeError(step, f"input {rec.u} is not an action of the MDP") from None
    if not 1 <= rec.bin <= mdp.n_bins:
        raise OffTreeError(step, f"noise bin {rec.bin} outside 1..{mdp.n_bins}")
    return mdp.child(s, a, rec.bin)


# -- policy file -------------------------------------------------------------

def _label_text(mask: int) -> str:
    return "|".join(n for i, n in enumerate(PROPOSITIONS) if mask >> i & 1)


def _label_mask(text: str) -> int:
    if not text:
        return 0
    try:
        return sum(1 << PROPOSITIONS.index(t) for t in text.split("|"))
    except ValueError:
        raise PolicyFileError(f"bad label field {text!r}") from None


def policy_table(mdp: Mdp, policy: np.ndarray, values: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for s in range(mdp.num_states):
        root = s == 0
        mu = int(policy[s])
        w.writerow([
            s, int(mdp.depth[s]), int(mdp.parent[s]),
            "" if root else int(mdp.action[s]), "" if root else int(mdp.bin_idx[s]) + 1,
            int(mdp.is_terminal(s)), _label_text(int(mdp.labels[s])),
            f"{mdp.xi[s]:.12g}", "dummy" if mu == DUMMY else mu, f"{values[s]:.12g}",
        ])
    return buf.getvalue()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def write_policy(path, mdp: Mdp, policy: np.ndarray, values: np.ndarray, meta: dict) -> None:
    body = policy_table(mdp, policy, values)
    head = dict(meta, tool_version=__version__, n_actions=mdp.n_actions, n_bins=mdp.n_bins,
                controls=list(mdp.controls) if mdp.controls is not None else None,
                horizon=mdp.horizon, body_sha256=sha256_text(body))
    Path(path).write_text(f"# {POLICY_FORMAT}\n# meta: {json.dumps(head, sort_keys=True)}\n{body}")


@dataclass
class PolicyFile:
    meta: dict
    mdp: Mdp
    policy: np.ndarray
    values: np.ndarray

    @property
    def value(self) -> float:
        return float(self.values[0])


def read_policy(path) -> PolicyFile:
    text = Path(path).read_text()
    lines = text.split("\n", 2)
    if len(lines) < 3 or lines[0] != f"# {POLICY_FORMAT}" or not lines[1].startswith("# meta: "):
        raise PolicyFileError(f"{path}: not a {POLICY_FORMAT} file")
    meta = json.loads(lines[1][len("# meta: "):])
    body = lines[2]
    if sha256_text(body) != meta.get("body_sha256"):
        raise PolicyFileError(f"{path}: policy table does not match its embedded hash")
    rows = list(csv.DictReader(io.StringIO(body)))
    n = len(rows)
    parent = np.empty(n, dtype=np.int64)
    action = np.full(n, -1, dtype=np.int64)
    bin_idx = np.full(n, -1, dtype=np.int64)
    labels = np.zeros(n, dtype=np.uint8)
    xi = np.zeros(n)
    policy = np.full(n, DUMMY, dtype=np.int8)
    values = np.zeros(n)
    terminal = np.zeros(n, dtype=bool)
    try:
        for i, r in enumerate(rows):
            if int(r["state"]) != i:
                raise PolicyFileError(f"{path}: row {i} carries state id {r['state']}")
            parent[i] = int(r["parent"])
            if i:
                action[i] = int(r["action"])
                bin_idx[i] = int(r["bin"]) - 1
            labels[i] = _label_mask(r["labels"])
            xi[i] = float(r["xi"])
            terminal[i] = r["terminal"] == "1"
            policy[i] = DUMMY if r["mu"] == "dummy" else int(r["mu"])
            values[i] = float(r["value"])
    except (KeyError, TypeError, ValueError) as exc:
        raise PolicyFileError(f"{path}: malformed row: {exc}") from None
    first = np.full(n, -1, dtype=np.int64)
    owners, at = np.unique(parent[1:], return_index=True)
    first[owners] = at + 1
    if np.any((first >= 0) & terminal):
        raise PolicyFileError(f"{path}: terminal state with children")
    mdp = Mdp(n_actions=meta["n_actions"], n_bins=meta["n_bins"], parent=parent, action=action,
              bin_idx=bin_idx, labels=labels, first_child=first, controls=meta.get("controls"), xi=xi)
    return PolicyFile(meta, mdp, policy, values)
