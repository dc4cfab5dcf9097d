"""A small PCTL fragment and its model checker for tree MDPs.

Supported syntax (text form accepted by :func:`parse`)::

    query  := "Pmax=?" "[" path "]" | state
    state  := conj ("->" state)?
    conj   := unary ("&" unary)*
    unary  := "!" unary | "(" state ")" | atom | "true" | "false"
            | "P" op prob "[" path "]"          op in  > >= < <=
    path   := "X" state | state "U" state
    atom   := pi_p | pi_d | pi_u   (aliases: pickup, dropoff, unsafe)

Probability bounds are resolved against the maximal probability over
policies.  Because the MDP is a finite tree with absorbing leaves, the
until probabilities are computed exactly by one backward sweep.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .mdp import D_BIT, DUMMY, P_BIT, U_BIT, Mdp

TIE_TOL = 1e-12


class FormulaError(ValueError):
    pass


# -- syntax ----------------------------------------------------------------

@dataclass(frozen=True)
class Atom:
    name: str

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Const:
    value: bool

    def __str__(self):
        return "true" if self.value else "false"


@dataclass(frozen=True)
class Not:
    arg: "StateFormula"

    def __str__(self):
        return f"!{_paren(self.arg)}"


@dataclass(frozen=True)
class And:
    left: "StateFormula"
    right: "StateFormula"

    def __str__(self):
        return f"{_paren(self.left, And)} & {_paren(self.right, And)}"


@dataclass(frozen=True)
class Implies:
    left: "StateFormula"
    right: "StateFormula"

    def __str__(self):
        return f"{_paren(self.left)} -> {_paren(self.right, Implies)}"


@dataclass(frozen=True)
class Next:
    arg: "StateFormula"

    def __str__(self):
        return f"X {_paren(self.arg)}"


@dataclass(frozen=True)
class Until:
    left: "StateFormula"
    right: "StateFormula"

    def __str__(self):
        return f"{_paren(self.left)} U {_paren(self.right)}"


@dataclass(frozen=True)
class ProbBound:
    op: str
    bound: float
    path: "PathFormula"

    def __str__(self):
        return f"P{self.op}{self.bound:g} [ {self.path} ]"


@dataclass(frozen=True)
class ProbMax:
    path: "PathFormula"

    def __str__(self):
        return f"Pmax=? [ {self.path} ]"


StateFormula = Union[Atom, Const, Not, And, Implies, ProbBound]
PathFormula = Union[Next, Until]
Formula = Union[StateFormula, ProbMax]

_ATOMS = {"pi_p": "pi_p", "pickup": "pi_p", "pi_d": "pi_d", "dropoff": "pi_d", "pi_u": "pi_u", "unsafe": "pi_u"}
_ATOM_BIT = {"pi_p": P_BIT, "pi_d": D_BIT, "pi_u": U_BIT}
_OPS = {">": np.greater, ">=": np.greater_equal, "<": np.less, "<=": np.less_equal}


def _paren(f, same=None) -> str:
    simple = isinstance(f, (Atom, Const, Not, ProbBound)) or (same is not None and isinstance(f, same))
    return str(f) if simple else f"({f})"


_TOKEN = re.compile(r"\s*(?:(Pmax\s*=\s*\?)|(P)\s*(>=|<=|>|<)\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)"
                    r"|(->)|([!&()\[\]])|([A-Za-z_][A-Za-z0-9_]*))")


def _tokenize(text: str) -> list[tuple[str, object]]:
    out, pos = [], 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise FormulaError(f"unexpected input at column {pos + 1}: {text[pos:pos + 12]!r}")
        pos = m.end()
        if m.group(1):
            out.append(("PMAX", None))
        elif m.group(2):
            out.append(("PBOUND", (m.group(3), float(m.group(4)))))
        elif m.group(5):
            out.append(("->", None))
        elif m.group(6):
            out.append((m.group(6), None))
        else:
            word = m.group(7)
            out.append((word, None) if word in ("U", "X", "true", "false") else ("ATOM", word))
    return out


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i][0] if self.i < len(self.toks) else None

    def take(self, kind=None):
        if self.i >= len(self.toks):
            raise FormulaError("unexpected end of formula")
        tok = self.toks[self.i]
        if kind is not None and tok[0] != kind:
            raise FormulaError(f"expected {kind!r}, found {tok[0]!r}")
        self.i += 1
        return tok

    def query(self):
        if self.peek() == "PMAX":
            self.take()
            self.take("[")
            p = self.path()
            self.take("]")
            f = ProbMax(p)
        else:
            f = self.state()
        if self.i != len(self.toks):
            raise FormulaError(f"trailing input after formula: {self.toks[self.i][0]!r}")
        return f

    def state(self):
        left = self.conj()
        if self.peek() == "->":
            self.take()
            return Implies(left, self.state())
        return left

    def conj(self):
        f = self.unary()
        while self.peek() == "&":
            self.take()
            f = And(f, self.unary())
        return f

    def unary(self):
        kind = self.peek()
        if kind == "!":
            self.take()
            return Not(self.unary())
        if kind == "(":
            self.take()
            f = self.state()
            self.take(")")
            return f
        if kind in ("true", "false"):
            self.take()
            return Const(kind == "true")
        if kind == "ATOM":
            name = self.take()[1]
            if name not in _ATOMS:
                raise FormulaError(f"unknown proposition {name!r}")
            return Atom(_ATOMS[name])
        if kind == "PBOUND":
            op, bound = self.take()[1]
            if not 0.0 <= bound <= 1.0:
                raise FormulaError(f"probability bound {bound} outside [0, 1]")
            self.take("[")
            p = self.path()
            self.take("]")
            return ProbBound(op, bound, p)
        if kind == "PMAX":
            raise FormulaError("Pmax=? is only allowed at the top level")
        raise FormulaError(f"unexpected token {kind!r}")

    def path(self):
        if self.peek() == "X":
            self.take()
            return Next(self.state())
        left = self.state()
        self.take("U")
        return Until(left, self.state())


def parse(text: str) -> Formula:
    return _Parser(text).query()


DELIVERY_TEXT = "Pmax=? [ !pi_u U (!pi_u & pi_p & P>0 [ !pi_u U (!pi_u & pi_d) ]) ]"
DELIVERY = parse(DELIVERY_TEXT)
PRESETS = {"paper-eq3": DELIVERY_TEXT}


def formula_from_text(text: str) -> Formula:
    return parse(PRESETS.get(text, text))


def _check_state_formula(f) -> None:
    if isinstance(f, (Atom, Const)):
        return
    if isinstance(f, Not):
        return _check_state_formula(f.arg)
    if isinstance(f, (And, Implies)):
        _check_state_formula(f.left)
        return _check_state_formula(f.right)
    if isinstance(f, ProbBound):
        if f.op not in _OPS or not 0.0 <= f.bound <= 1.0:
            raise FormulaError(f"bad probability bound in {f}")
        return _check_path_formula(f.path)
    raise FormulaError(f"not a state formula: {f!r}")


def _check_path_formula(p) -> None:
    if isinstance(p, Next):
        return _check_state_formula(p.arg)
    if isinstance(p, Until):
        _check_state_formula(p.left)
        return _check_state_formula(p.right)
    raise FormulaError(f"not a path formula: {p!r}")


# -- model checking ----------------------------------------------------------

def _expanded_children(mdp: Mdp, level: range):
    idx = np.arange(level.start, level.stop)
    idx = idx[mdp.first_child[idx] >= 0]
    width = mdp.n_actions * mdp.n_bins
    ch = (mdp.first_child[idx][:, None] + np.arange(width)).reshape(len(idx), mdp.n_actions, mdp.n_bins)
    return idx, ch


def max_until(mdp: Mdp, safe: np.ndarray, target: np.ndarray,
              target_values: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Maximal probability of ``safe U target`` and a maximizing policy.

    ``target_values`` optionally replaces the value 1 on target states
    (used to weight arrival by a follow-up objective).  Ties between
    actions go to the lowest action index.
    """
    safe = np.asarray(safe, dtype=bool)
    target = np.asarray(target, dtype=bool)
    values = np.zeros(mdp.num_states)
    values[target] = 1.0 if target_values is None else np.asarray(target_values)[target]
    policy = np.full(mdp.num_states, DUMMY, dtype=np.int8)
    for level in reversed(mdp.levels):
        idx, ch = _expanded_children(mdp, level)
        if len(idx) == 0:
            continue
        backup = values[ch].mean(axis=2)
        best = backup.max(axis=1)
        act = np.argmax(backup >= best[:, None] - TIE_TOL, axis=1)
        policy[idx] = act
        free = safe[idx] & ~target[idx]
        values[idx[free]] = best[free]
    return values, policy


def reach_positive(mdp: Mdp, safe: np.ndarray, target: np.ndarray) -> np.ndarray:
    """States with positive maximal probability of ``safe U target`` (graph search)."""
    safe = np.asarray(safe, dtype=bool)
    out = np.asarray(target, dtype=bool).copy()
    for level in reversed(mdp.levels):
        idx, ch = _expanded_children(mdp, level)
        if len(idx):
            out[idx] |= safe[idx] & out[ch].reshape(len(idx), -1).any(axis=1)
    return out


def max_next(mdp: Mdp, target: np.ndarray) -> np.ndarray:
    target = np.asarray(target, dtype=bool)
    values = target.astype(float)  # terminal self-loop
    for level in mdp.levels:
        idx, ch = _expanded_children(mdp, level)
        if len(idx):
            values[idx] = target[ch].mean(axis=2).max(axis=1)
    return values


def path_values(mdp: Mdp, path) -> np.ndarray:
    """Maximal probability of ``path`` from every state."""
    if isinstance(path, Until):
        return max_until(mdp, eval_state_set(mdp, path.left), eval_state_set(mdp, path.right))[0]
    if isinstance(path, Next):
        return max_next(mdp, eval_state_set(mdp, path.arg))
    raise FormulaError(f"not a path formula: {path!r}")


def eval_state_set(mdp: Mdp, f) -> np.ndarray:
    """Boolean mask of the states satisfying state formula ``f``."""
    if isinstance(f, ProbMax):
        raise FormulaError("Pmax=? has no truth value; use synthesize()")
    _check_state_formula(f)
    return _eval(mdp, f)


def _eval(mdp: Mdp, f) -> np.ndarray:
    if isinstance(f, Atom):
        return (mdp.labels & _ATOM_BIT[f.name]) != 0
    if isinstance(f, Const):
        return np.full(mdp.num_states, f.value)
    if isinstance(f, Not):
        return ~_eval(mdp, f.arg)
    if isinstance(f, And):
        return _eval(mdp, f.left) & _eval(mdp, f.right)
    if isinstance(f, Implies):
        return ~_eval(mdp, f.left) | _eval(mdp, f.right)
    if isinstance(f, ProbBound):
        p = f.path
        if f.op == ">" and f.bound == 0.0:
            if isinstance(p, Until):
                return reach_positive(mdp, _eval(mdp, p.left), _eval(mdp, p.right))
            tgt = _eval(mdp, p.arg)
            out = tgt.copy()
            for level in mdp.levels:
                idx, ch = _expanded_children(mdp, level)
                if len(idx):
                    out[idx] = tgt[ch].reshape(len(idx), -1).any(axis=1)
            return out
        return _OPS[f.op](path_values(mdp, p), f.bound)
    raise FormulaError(f"not a state formula: {f!r}")


def _conjuncts(f) -> list:
    return _conjuncts(f.left) + _conjuncts(f.right) if isinstance(f, And) else [f]


@dataclass
class Synthesis:
    """Result of maximizing a ``Pmax=? [ left U right ]`` query."""

    value: float
    values: np.ndarray
    policy: np.ndarray
    safe: np.ndarray
    target: np.ndarray
    # value of arriving at a target and then completing the nested until,
    # when the target carries one; None otherwise
    joint_value: Optional[float] = None
    continuation: Optional[np.ndarray] = field(default=None, repr=False)


def _reached(mdp: Mdp, target: np.ndarray) -> np.ndarray:
    """States whose path from the root (inclusive) visits ``target``."""
    out = np.asarray(target, dtype=bool).copy()
    for level in mdp.levels[1:]:
        idx = np.arange(level.start, level.stop)
        out[idx] |= out[mdp.parent[idx]]
    return out


def _tie_broken_until(mdp: Mdp, safe: np.ndarray, target: np.ndarray, values: np.ndarray,
                      target_values: np.ndarray) -> tuple[float, np.ndarray]:
    """Among actions optimal for ``values``, pick those maximizing the weighted until."""
    joint = np.zeros(mdp.num_states)
    joint[target] = target_values[target]
    policy = np.full(mdp.num_states, DUMMY, dtype=np.int8)
    for level in reversed(mdp.levels):
        idx, ch = _expanded_children(mdp, level)
        if len(idx) == 0:
            continue
        outer = values[ch].mean(axis=2)
        ok = outer >= outer.max(axis=1)[:, None] - TIE_TOL
        backup = np.where(ok, joint[ch].mean(axis=2), -1.0)
        best = backup.max(axis=1)
        policy[idx] = np.argmax(backup >= best[:, None] - TIE_TOL, axis=1)
        free = safe[idx] & ~target[idx]
        joint[idx[free]] = best[free]
    return float(joint[0]), policy


def synthesize(mdp: Mdp, phi) -> Synthesis:
    """Maximizing policy and values for a top-level ``Pmax=?`` until query.

    When the target carries a nested until (pickup followed by a possible
    dropoff), ties among optimal actions are broken toward the highest
    probability of completing that nested until as well, and every state
    whose path has met the target follows the nested maximizer.
    """
    if not isinstance(phi, ProbMax) or not isinstance(phi.path, Until):
        raise FormulaError("synthesis needs a formula of the form Pmax=? [ a U b ]")
    _check_path_formula(phi.path)
    safe = _eval(mdp, phi.path.left)
    target = _eval(mdp, phi.path.right)
    values, policy = max_until(mdp, safe, target)
    joint = None
    cont = None
    nested = [c for c in _conjuncts(phi.path.right) if isinstance(c, ProbBound) and isinstance(c.path, Until)]
    if nested:
        inner = nested[0].path
        inner_values, cont = max_until(mdp, _eval(mdp, inner.left), _eval(mdp, inner.right))
        joint, policy = _tie_broken_until(mdp, safe, target, values, inner_values)
        policy = np.where(_reached(mdp, target), cont, policy).astype(np.int8)
    policy[mdp.terminal] = DUMMY
    return Synthesis(float(values[0]), values, policy, safe, target, joint, cont)


# -- single-word semantics ---------------------------------------------------

def holds_on_word(word: Sequence[int], f, i: int = 0) -> bool:
    """Truth of ``f`` at position ``i`` of a packed-label word.

    The last letter repeats forever.  On a single path every probability
    operator reduces to whether its path formula holds.
    """
    m = len(word)
    if m == 0:
        raise ValueError("empty word")
    i = min(i, m - 1)
    if isinstance(f, ProbMax):
        return _path_on_word(word, f.path, i)
    if isinstance(f, Atom):
        return bool(word[i] & _ATOM_BIT[f.name])
    if isinstance(f, Const):
        return f.value
    if isinstance(f, Not):
        return not holds_on_word(word, f.arg, i)
    if isinstance(f, And):
        return holds_on_word(word, f.left, i) and holds_on_word(word, f.right, i)
    if isinstance(f, Implies):
        return (not holds_on_word(word, f.left, i)) or holds_on_word(word, f.right, i)
    if isinstance(f, ProbBound):
        sat = _path_on_word(word, f.path, i)
        return bool(_OPS[f.op](1.0 if sat else 0.0, f.bound))
    raise FormulaError(f"unsupported formula {f!r}")


def _path_on_word(word, p, i: int) -> bool:
    m = len(word)
    if isinstance(p, Next):
        return holds_on_word(word, p.arg, min(i + 1, m - 1))
    if isinstance(p, Until):
        for j in range(i, m):
            if holds_on_word(word, p.right, j):
                return True
            if not holds_on_word(word, p.left, j):
                return False
        return False
    raise FormulaError(f"unsupported path formula {p!r}")
