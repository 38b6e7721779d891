"""
Exact Enumeration Semantics

Builds the full joint distribution of a finite-discrete computation and
answers marginal and event queries on it. This is the ground-truth oracle
the rewrite rules are tested against.

Features:
- Joint tables keyed by canonical (sorted-variable) valuations
- Exact rational masses whenever all inputs are rational
- Nested scopes marginalize their local variables away
- Valuation-count guard (EngineConfig.max_valuations)
- Deterministic JSON form for golden tests
"""

import json
import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Optional

from errors import (
    ContinuousDistributionPresent,
    EvaluationError,
    IndependenceViolation,
    SizeLimitExceeded,
    UnknownVariable,
)
from terms import (
    Comp,
    CondDist,
    DistTerm,
    Event,
    FunctionDef,
    Literal,
    Normal,
    Number,
    PointMass,
    Scope,
    Table,
    UniformFinite,
    Update,
    evaluate,
    flatten,
    free_vars,
    independence_conflict,
    literal_key,
    value_sort_key,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_VALUATIONS = 10_000_000

Valuation = dict[str, Literal]


# ============================================================================
# Joint table
# ============================================================================

@dataclass(frozen=True)
class JointTable:
    """Finite joint distribution: valuation key (ordered as `variables`) -> mass.

    Keys hold one literal_key per variable, so True and 1 stay separate rows.
    """
    variables: tuple[str, ...]
    entries: dict[tuple, Number]

    def valuations(self):
        for key, mass in self.entries.items():
            yield dict(zip(self.variables, _key_values(key))), mass

    def mass_of(self, **valuation: Literal) -> Number:
        if set(valuation) != set(self.variables):
            raise UnknownVariable(", ".join(sorted(set(valuation) ^ set(self.variables))))
        return self.entries.get(_values_key(valuation[v] for v in self.variables), Fraction(0))

    def approx_equal(self, other: "JointTable", tol: float = 1e-9) -> bool:
        """Entry-for-entry equality within tol (zero-mass entries ignored)."""
        if self.variables != other.variables:
            return False
        mine = {k: m for k, m in self.entries.items() if m != 0}
        theirs = {k: m for k, m in other.entries.items() if m != 0}
        if mine.keys() != theirs.keys():
            return False
        return all(abs(mine[k] - theirs[k]) <= tol for k in mine)

    def to_json(self) -> str:
        rows = []
        for valuation, mass in self.valuations():
            row = {
                "valuation": {v: literal_to_json(x) for v, x in valuation.items()},
                "mass": float(mass),
            }
            if isinstance(mass, Fraction):
                row["exact"] = str(mass)
            rows.append(row)
        return json.dumps({"variables": list(self.variables), "entries": rows}, sort_keys=True)


def _values_key(values) -> tuple:
    return tuple(literal_key(v) for v in values)


def _key_values(key: tuple) -> tuple:
    return tuple(value for _, value in key)


def literal_to_json(value: Literal):
    if isinstance(value, Fraction):
        return int(value) if value.denominator == 1 else float(value)
    return value


# ============================================================================
# Supports
# ============================================================================

def support(dist: DistTerm, valuation: Mapping[str, Literal], defs: Mapping[str, FunctionDef],
            target: str = "?") -> list[tuple[Literal, Number]]:
    """Finite support of a distribution term under a valuation, as (value, weight) pairs."""
    match dist:
        case PointMass(value):
            return [(evaluate(value, valuation, defs), Fraction(1))]
        case UniformFinite(_, values):
            w = Fraction(1, len(values))
            return [(v, w) for v in values]
        case Table(entries):
            return [(v, w) for v, w in entries if w != 0]
        case CondDist(branches, otherwise):
            for guard, branch in branches:
                chosen = evaluate(guard, valuation, defs)
                if not isinstance(chosen, bool):
                    raise EvaluationError(f"Guard of {target} is not boolean: {chosen!r}")
                if chosen:
                    return support(branch, valuation, defs, target)
            return support(otherwise, valuation, defs, target)
        case Normal():
            raise ContinuousDistributionPresent(target)
    raise TypeError(f"Not a distribution term: {dist!r}")


def weight_at(dist: DistTerm, value: Literal, valuation: Mapping[str, Literal],
              defs: Mapping[str, FunctionDef]) -> Number:
    """D(value): the mass a finite distribution assigns to one value."""
    key = literal_key(value)
    return sum((w for v, w in support(dist, valuation, defs) if literal_key(v) == key), Fraction(0))


# ============================================================================
# Enumeration
# ============================================================================

class _Accumulator:
    """Merges rows with equal valuations and enforces the size limit."""

    def __init__(self, limit: int):
        self.limit = limit
        self.rows: dict[tuple, list] = {}

    def add(self, valuation: Valuation, mass: Number):
        if mass == 0:
            return
        key = tuple((v, literal_key(valuation[v])) for v in sorted(valuation))
        if key in self.rows:
            self.rows[key][1] += mass
            return
        if len(self.rows) >= self.limit:
            raise SizeLimitExceeded(len(self.rows) + 1, self.limit)
        self.rows[key] = [valuation, mass]

    def result(self) -> list[tuple[Valuation, Number]]:
        return [(valuation, mass) for valuation, mass in self.rows.values()]


def update_support(u: Update, valuation: Valuation, defs: Mapping[str, FunctionDef],
                   limit: int = DEFAULT_MAX_VALUATIONS) -> list[tuple[Literal, Number]]:
    """Finite distribution of an update's new value; scopes are run and marginalized."""
    if isinstance(u.body, Scope):
        inner = run_rows(u.body.comp, [(dict(valuation), Fraction(1))], defs, limit)
        acc: dict[tuple, list] = {}
        for row, mass in inner:
            if u.body.result not in row:
                raise UnknownVariable(u.body.result)
            value = row[u.body.result]
            key = literal_key(value)
            if key in acc:
                acc[key][1] += mass
            else:
                acc[key] = [value, mass]
        return [(value, mass) for value, mass in acc.values()]
    return support(u.body, valuation, defs, u.target)


def _product(choices: list[tuple[str, list[tuple[Literal, Number]]]]):
    """All joint picks from independent per-variable supports."""
    combos: list[tuple[dict, Number]] = [({}, Fraction(1))]
    for var, values in choices:
        combos = [
            ({**picked, var: value}, mass * weight)
            for picked, mass in combos
            for value, weight in values
        ]
    return combos


def run_rows(comp: Comp, rows: list[tuple[Valuation, Number]], defs: Mapping[str, FunctionDef],
             limit: int = DEFAULT_MAX_VALUATIONS) -> list[tuple[Valuation, Number]]:
    """Execute a computation on a weighted set of starting valuations."""
    env, steps = flatten(comp)

    if env:
        acc = _Accumulator(limit)
        for valuation, mass in rows:
            choices = [(var, support(dist, valuation, defs, var)) for var, dist in env]
            for picked, weight in _product(choices):
                acc.add({**valuation, **picked}, mass * weight)
        rows = acc.result()
        logger.debug(f"unit: {len(rows)} valuations")

    for index, s in enumerate(steps):
        if s.parallel:
            clash = independence_conflict(s.updates)
            if clash is not None:
                raise IndependenceViolation(clash)
        acc = _Accumulator(limit)
        for valuation, mass in rows:
            choices = [(u.target, update_support(u, valuation, defs, limit)) for u in s.updates]
            for picked, weight in _product(choices):
                acc.add({**valuation, **picked}, mass * weight)
        rows = acc.result()
        logger.debug(f"step {index}: {len(rows)} valuations")

    return rows


def eval_joint(c: Comp, defs: Optional[Mapping[str, FunctionDef]] = None,
               max_valuations: int = DEFAULT_MAX_VALUATIONS) -> JointTable:
    """Joint distribution of all top-level variables after executing c."""
    rows = run_rows(c, [({}, Fraction(1))], defs or {}, max_valuations)
    variables = tuple(sorted({v for valuation, _ in rows for v in valuation}))
    for valuation, _ in rows:
        if len(valuation) != len(variables):
            missing = sorted(set(variables) - set(valuation))
            raise UnknownVariable(missing[0])
    rows.sort(key=lambda row: tuple(value_sort_key(row[0][v]) for v in variables))
    entries = {_values_key(valuation[v] for v in variables): mass for valuation, mass in rows}
    return JointTable(variables, entries)


# ============================================================================
# Queries
# ============================================================================

def marginal(j: JointTable, v: str) -> Table:
    """Distribution of one variable; total mass preserved."""
    if v not in j.variables:
        raise UnknownVariable(v)
    index = j.variables.index(v)
    acc: dict[tuple, list] = {}
    for keys, mass in j.entries.items():
        key = keys[index]
        value = key[1]
        if key in acc:
            acc[key][1] += mass
        else:
            acc[key] = [value, mass]
    entries = sorted(((value, mass) for value, mass in acc.values()), key=lambda e: value_sort_key(e[0]))
    return Table(tuple(entries), name=v)


def prob_event(j: JointTable, e: Event, defs: Optional[Mapping[str, FunctionDef]] = None) -> Number:
    """Pr of the event: sum of masses where the predicate holds."""
    unknown = free_vars(e.predicate) - set(j.variables)
    if unknown:
        raise UnknownVariable(sorted(unknown)[0])
    total: Number = Fraction(0)
    for valuation, mass in j.valuations():
        holds = evaluate(e.predicate, valuation, defs or {})
        if not isinstance(holds, bool):
            raise EvaluationError(f"Event predicate is not boolean: {holds!r}")
        if holds:
            total += mass
    return total


def total_mass(j: JointTable) -> Number:
    return sum(j.entries.values(), Fraction(0))
