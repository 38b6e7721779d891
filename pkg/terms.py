"""
Term Language for Abstract Computations

Expressions, distribution terms, updates and computations as immutable
values, plus the structural utilities the engine is built on.

Features:
- Exact rational constants for literals, floats where given
- unit / bind computations with scoped (nested) updates and parallel blocks
- Free variables, read/write sets, independence check, linearization
- Bounded loop unrolling and sequential composition sugar
- Structural equality up to renaming of scope-local variables
- Scalar evaluation, substitution and light simplification of expressions
- SHA-256 term hashes for proof traces
"""

import hashlib
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Union

from errors import EvaluationError, IndependenceViolation, UndefinedSymbol, UnknownVariable


Literal = Union[Fraction, float, bool, str]
Number = Union[Fraction, float]

ARITH_OPS = ("+", "-", "*", "/")
CMP_OPS = ("=", "!=", "<", "<=", ">", ">=")
RELATIONS = ("<", "<=", "=")


# ============================================================================
# Literals
# ============================================================================

def is_number(value) -> bool:
    return isinstance(value, (Fraction, float, int)) and not isinstance(value, bool)


def literal_key(value: Literal) -> tuple:
    """Equality key that keeps booleans, numbers and enum values apart."""
    if isinstance(value, bool):
        return ("bool", value)
    if is_number(value):
        return ("num", value)
    return ("str", value)


def value_sort_key(value: Literal) -> tuple:
    """Total order over mixed literals: booleans, then numbers, then names."""
    if isinstance(value, bool):
        return (0, int(value), "")
    if is_number(value):
        return (1, value, "")
    return (2, 0, str(value))


def as_number(value) -> Number:
    """Literal number as written: exact rational for int/str/decimal input."""
    if isinstance(value, bool):
        raise EvaluationError(f"Expected a number, got boolean {value}")
    if isinstance(value, (Fraction, float)):
        return value
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, str):
        return Fraction(value)
    raise EvaluationError(f"Expected a number, got {value!r}")


def is_finite_decimal(value: Number) -> bool:
    if isinstance(value, float):
        return True
    d = value.denominator
    for p in (2, 5):
        while d % p == 0:
            d //= p
    return d == 1


# ============================================================================
# Expressions
# ============================================================================

class Expr:
    """Base class for symbolic expressions."""
    __slots__ = ()


@dataclass(frozen=True, eq=False)
class Const(Expr):
    value: Literal

    def __eq__(self, other):
        return isinstance(other, Const) and literal_key(self.value) == literal_key(other.value)

    def __hash__(self):
        return hash(literal_key(self.value))


@dataclass(frozen=True)
class Var(Expr):
    name: str


@dataclass(frozen=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr

    def __post_init__(self):
        if self.op not in ARITH_OPS:
            raise ValueError(f"Unknown arithmetic operator: {self.op}")


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr


@dataclass(frozen=True)
class Cmp(Expr):
    op: str
    left: Expr
    right: Expr

    def __post_init__(self):
        if self.op not in CMP_OPS:
            raise ValueError(f"Unknown comparison operator: {self.op}")


@dataclass(frozen=True)
class And(Expr):
    args: tuple[Expr, ...]


@dataclass(frozen=True)
class Or(Expr):
    args: tuple[Expr, ...]


@dataclass(frozen=True)
class Not(Expr):
    arg: Expr


@dataclass(frozen=True)
class IfExpr(Expr):
    """Guarded conditional: the first guard that holds selects its branch."""
    branches: tuple[tuple[Expr, Expr], ...]
    otherwise: Expr

    def __post_init__(self):
        if not self.branches:
            raise ValueError("Guard chain must contain at least one guarded branch")


@dataclass(frozen=True)
class Call(Expr):
    """Function symbol application; zero arguments for declared constants."""
    name: str
    args: tuple[Expr, ...] = ()


@dataclass(frozen=True)
class FunctionDef:
    """Ground definition registered for a function symbol."""
    params: tuple[str, ...]
    body: Expr


def const(value) -> Const:
    """Constant from a Python value; numbers become exact rationals when possible."""
    if isinstance(value, (bool, str, float, Fraction)):
        return Const(value)
    return Const(as_number(value))


def sum_of(terms: Iterable[Expr]) -> Expr:
    """Left-associated sum t1 + t2 + ... (the shape the parser builds)."""
    terms = list(terms)
    if not terms:
        return Const(Fraction(0))
    result = terms[0]
    for t in terms[1:]:
        result = BinOp("+", result, t)
    return result


def summands(expr: Expr) -> list[Expr]:
    """Operands of a +-chain in left-to-right order."""
    if isinstance(expr, BinOp) and expr.op == "+":
        return summands(expr.left) + summands(expr.right)
    return [expr]


# ============================================================================
# Distribution terms
# ============================================================================

class DistTerm:
    """Base class for distribution expressions."""
    __slots__ = ()


@dataclass(frozen=True)
class PointMass(DistTerm):
    value: Expr


@dataclass(frozen=True)
class UniformFinite(DistTerm):
    carrier: str
    values: tuple[Literal, ...]

    def __post_init__(self):
        if not self.values:
            raise ValueError(f"Carrier {self.carrier} has no values")


@dataclass(frozen=True)
class Normal(DistTerm):
    mean: Expr
    variance: Expr


@dataclass(frozen=True)
class Table(DistTerm):
    """Finite weighted table; total mass may deviate from 1."""
    entries: tuple[tuple[Literal, Number], ...]
    name: Optional[str] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        for value, weight in self.entries:
            if weight < 0:
                raise ValueError(f"Table weight for {value!r} is negative: {weight}")
            if isinstance(weight, float) and weight != weight:
                raise ValueError(f"Table weight for {value!r} is not a number")

    def weight_of(self, value: Literal) -> Number:
        key = literal_key(value)
        return sum((w for v, w in self.entries if literal_key(v) == key), Fraction(0))

    @property
    def total(self) -> Number:
        return sum((w for _, w in self.entries), Fraction(0))


@dataclass(frozen=True)
class CondDist(DistTerm):
    """Guarded conditional distribution with a final else branch."""
    branches: tuple[tuple[Expr, DistTerm], ...]
    otherwise: DistTerm

    def __post_init__(self):
        if not self.branches:
            raise ValueError("Guard chain must contain at least one guarded branch")


def is_finite_dist(dist: DistTerm) -> bool:
    match dist:
        case PointMass() | UniformFinite() | Table():
            return True
        case CondDist(branches, otherwise):
            return all(is_finite_dist(d) for _, d in branches) and is_finite_dist(otherwise)
    return False


# ============================================================================
# Updates and computations
# ============================================================================

@dataclass(frozen=True)
class Scope:
    """Nested computation; only `result` leaves the scope."""
    comp: "Comp"
    result: str


@dataclass(frozen=True)
class Update:
    target: str
    body: Union[DistTerm, Scope]


class Comp:
    """Base class for abstract computations."""
    __slots__ = ()


@dataclass(frozen=True)
class Unit(Comp):
    """Initial, independent per-variable distributions."""
    env: tuple[tuple[str, DistTerm], ...] = ()

    def __post_init__(self):
        names = [v for v, _ in self.env]
        if len(names) != len(set(names)):
            raise ValueError(f"Unit binds a variable twice: {names}")


@dataclass(frozen=True)
class Bind(Comp):
    """One computation step: all updates read the state left by `inner`."""
    inner: Comp
    updates: tuple[Update, ...]

    def __post_init__(self):
        targets = [u.target for u in self.updates]
        if len(targets) != len(set(targets)):
            raise ValueError(f"Update set of a bind must not repeat targets: {targets}")

    @property
    def update_set(self) -> frozenset[str]:
        return frozenset(u.target for u in self.updates)


@dataclass(frozen=True)
class ParBlock(Comp):
    """Updates declared independent of each other; linearizable in any order."""
    inner: Comp
    updates: tuple[Update, ...]

    def __post_init__(self):
        targets = [u.target for u in self.updates]
        if len(targets) != len(set(targets)):
            raise ValueError(f"Parallel block must not repeat targets: {targets}")


@dataclass(frozen=True)
class Step:
    """Flattened view of one Bind or ParBlock layer."""
    updates: tuple[Update, ...]
    parallel: bool = False


@dataclass(frozen=True)
class Event:
    predicate: Expr


@dataclass(frozen=True)
class Goal:
    """Obligation Pr([comp] event) <relation> bound."""
    comp: Comp
    event: Event
    relation: str
    bound: Number

    def __post_init__(self):
        if self.relation not in RELATIONS:
            raise ValueError(f"Relation must be one of {RELATIONS}, got {self.relation}")
        if self.relation != "=" and not 0 <= self.bound <= 1:
            raise ValueError(f"Probability bound must lie in [0, 1], got {self.bound}")

    def holds_for(self, probability: Number, tolerance: float = 0.0) -> bool:
        if self.relation == "<":
            return probability < self.bound
        if self.relation == "<=":
            return probability <= self.bound
        return abs(probability - self.bound) <= tolerance


# ============================================================================
# Composition sugar
# ============================================================================

def assign(target: str, body: Union[DistTerm, Scope]) -> Update:
    return Update(target, body)


def scoped(target: str, comp: Comp, result: Optional[str] = None) -> Update:
    return Update(target, Scope(comp, result or target))


def step(*updates: Update) -> Comp:
    return Bind(Unit(), tuple(updates))


def par(*updates: Update) -> Comp:
    return ParBlock(Unit(), tuple(updates))


def flatten(comp: Comp) -> tuple[tuple[tuple[str, DistTerm], ...], list[Step]]:
    """Split a computation into its unit environment and ordered steps."""
    steps: list[Step] = []
    while not isinstance(comp, Unit):
        match comp:
            case Bind(inner, updates):
                steps.append(Step(updates, parallel=False))
                comp = inner
            case ParBlock(inner, updates):
                steps.append(Step(updates, parallel=True))
                comp = inner
            case _:
                raise TypeError(f"Not a computation: {comp!r}")
    steps.reverse()
    return comp.env, steps


def build(env: Iterable[tuple[str, DistTerm]], steps: Iterable[Step]) -> Comp:
    """Inverse of flatten."""
    comp: Comp = Unit(tuple(env))
    for s in steps:
        comp = ParBlock(comp, s.updates) if s.parallel else Bind(comp, s.updates)
    return comp


def seq(*comps: Comp) -> Comp:
    """Sequential composition A, B, ...; later unit environments become steps."""
    if not comps:
        return Unit()
    env, steps = flatten(comps[0])
    for c in comps[1:]:
        inner_env, inner_steps = flatten(c)
        if inner_env:
            steps.append(Step(tuple(Update(v, d) for v, d in inner_env)))
        steps.extend(inner_steps)
    return build(env, steps)


def unroll_loop(body: Comp, n: int) -> Comp:
    """L := A, L unrolled n times; n = 0 is the identity computation."""
    if n < 0:
        raise ValueError(f"Loop count must be >= 0, got {n}")
    return seq(*([body] * n)) if n else Unit()


# ============================================================================
# Free variables and read/write sets
# ============================================================================

def free_vars(e: Expr) -> frozenset[str]:
    match e:
        case Const():
            return frozenset()
        case Var(name):
            return frozenset({name})
        case BinOp(_, left, right) | Cmp(_, left, right):
            return free_vars(left) | free_vars(right)
        case Neg(arg) | Not(arg):
            return free_vars(arg)
        case And(args) | Or(args) | Call(_, args):
            return frozenset().union(*(free_vars(a) for a in args))
        case IfExpr(branches, otherwise):
            result = free_vars(otherwise)
            for guard, branch in branches:
                result |= free_vars(guard) | free_vars(branch)
            return result
    raise TypeError(f"Not an expression: {e!r}")


def dist_free_vars(d: DistTerm) -> frozenset[str]:
    match d:
        case PointMass(value):
            return free_vars(value)
        case UniformFinite() | Table():
            return frozenset()
        case Normal(mean, variance):
            return free_vars(mean) | free_vars(variance)
        case CondDist(branches, otherwise):
            result = dist_free_vars(otherwise)
            for guard, branch in branches:
                result |= free_vars(guard) | dist_free_vars(branch)
            return result
    raise TypeError(f"Not a distribution term: {d!r}")


def comp_inputs(comp: Comp) -> frozenset[str]:
    """Variables a computation reads before binding them itself."""
    env, steps = flatten(comp)
    inputs: set[str] = set()
    bound: set[str] = set()
    for _, dist in env:
        inputs |= dist_free_vars(dist)
    bound |= {v for v, _ in env}
    for s in steps:
        for u in s.updates:
            inputs |= update_reads(u) - bound
        bound |= {u.target for u in s.updates}
    return frozenset(inputs)


def scope_inputs(scope: Scope) -> frozenset[str]:
    """External inputs of a nested computation, including an unbound result."""
    inputs = set(comp_inputs(scope.comp))
    if scope.result not in comp_writes(scope.comp):
        inputs.add(scope.result)
    return frozenset(inputs)


def comp_writes(comp: Comp) -> frozenset[str]:
    """Variables bound at the top level of a computation."""
    env, steps = flatten(comp)
    return frozenset({v for v, _ in env} | {u.target for s in steps for u in s.updates})


def update_reads(u: Update) -> frozenset[str]:
    if isinstance(u.body, Scope):
        return scope_inputs(u.body)
    return dist_free_vars(u.body)


def reads_writes(u: Update) -> tuple[frozenset[str], frozenset[str]]:
    """(read set, write set) of a single update."""
    return update_reads(u), frozenset({u.target})


def independence_conflict(updates: Iterable[Update]) -> Optional[str]:
    """First variable on which two updates interfere, or None."""
    rw = [reads_writes(u) for u in updates]
    for i, (reads_i, writes_i) in enumerate(rw):
        for j, (reads_j, writes_j) in enumerate(rw):
            if i == j:
                continue
            clash = writes_i & (reads_j | writes_j)
            if clash:
                return sorted(clash)[0]
    return None


def check_parallel_independence(block: ParBlock) -> bool:
    return independence_conflict(block.updates) is None


# ============================================================================
# Linearization
# ============================================================================

def _linearize_update(u: Update) -> Update:
    if isinstance(u.body, Scope):
        return Update(u.target, Scope(linearize(u.body.comp), u.body.result))
    return u


def linearize(c: Comp) -> Comp:
    """Sequence every parallel block in declaration order, nested scopes included."""
    env, steps = flatten(c)
    out: list[Step] = []
    for s in steps:
        updates = tuple(_linearize_update(u) for u in s.updates)
        if s.parallel:
            clash = independence_conflict(s.updates)
            if clash is not None:
                raise IndependenceViolation(clash)
            out.extend(Step((u,)) for u in updates)
        else:
            out.append(Step(updates))
    return build(env, out)


# ============================================================================
# Structural equality
# ============================================================================

def rename_expr(e: Expr, mapping: Mapping[str, str]) -> Expr:
    if not mapping:
        return e
    return substitute(e, {old: Var(new) for old, new in mapping.items()})


def rename_dist(d: DistTerm, mapping: Mapping[str, str]) -> DistTerm:
    match d:
        case PointMass(value):
            return PointMass(rename_expr(value, mapping))
        case Normal(mean, variance):
            return Normal(rename_expr(mean, mapping), rename_expr(variance, mapping))
        case CondDist(branches, otherwise):
            return CondDist(
                tuple((rename_expr(g, mapping), rename_dist(b, mapping)) for g, b in branches),
                rename_dist(otherwise, mapping),
            )
    return d


def _canonical(comp: Comp, outer: Mapping[str, str], rename_locals: bool, depth: int) -> Comp:
    """Rename variables bound inside scopes to positional names, flow-sensitively."""
    env, steps = flatten(comp)
    mapping = dict(outer)
    counter = [0]

    def bind(name: str) -> str:
        if not rename_locals:
            return name
        fresh = f"%{depth}.{counter[0]}"
        counter[0] += 1
        mapping[name] = fresh
        return fresh

    new_env = []
    for var, dist in env:
        new_env.append((var, rename_dist(dist, mapping)))
    new_env = [(bind(var), dist) for var, dist in new_env]

    new_steps = []
    for s in steps:
        snapshot = dict(mapping)
        bodies = []
        for u in s.updates:
            if isinstance(u.body, Scope):
                inner = _canonical(u.body.comp, snapshot, True, depth + 1)
                inner_result = _canonical_result(u.body, snapshot, depth + 1)
                bodies.append(Scope(inner, inner_result))
            else:
                bodies.append(rename_dist(u.body, snapshot))
        targets = [bind(u.target) for u in s.updates]
        new_steps.append(Step(tuple(Update(t, b) for t, b in zip(targets, bodies)), s.parallel))
    return build(new_env, new_steps)


def _canonical_result(scope: Scope, outer: Mapping[str, str], depth: int) -> str:
    """Canonical name of a scope's result, consistent with _canonical's numbering."""
    env, steps = flatten(scope.comp)
    order = [v for v, _ in env] + [u.target for s in steps for u in s.updates]
    last = None
    for i, name in enumerate(order):
        if name == scope.result:
            last = i
    if last is None:
        return outer.get(scope.result, scope.result)
    return f"%{depth}.{last}"


def canonical_form(c: Comp) -> Comp:
    return _canonical(c, {}, False, 0)


def structural_eq(c1: Comp, c2: Comp) -> bool:
    """Equality up to consistent renaming of scope-local variables."""
    return canonical_form(c1) == canonical_form(c2)


# ============================================================================
# Evaluation, substitution, simplification
# ============================================================================

def evaluate(e: Expr, valuation: Mapping[str, Literal], defs: Mapping[str, FunctionDef]) -> Literal:
    """Evaluate an expression under a valuation with exact arithmetic."""
    match e:
        case Const(value):
            return value
        case Var(name):
            if name not in valuation:
                raise UnknownVariable(name)
            return valuation[name]
        case BinOp(op, left, right):
            return arith(op, evaluate(left, valuation, defs), evaluate(right, valuation, defs))
        case Neg(arg):
            return -_require_number(evaluate(arg, valuation, defs))
        case Cmp(op, left, right):
            return compare(op, evaluate(left, valuation, defs), evaluate(right, valuation, defs))
        case And(args):
            return all(_require_bool(evaluate(a, valuation, defs)) for a in args)
        case Or(args):
            return any(_require_bool(evaluate(a, valuation, defs)) for a in args)
        case Not(arg):
            return not _require_bool(evaluate(arg, valuation, defs))
        case IfExpr(branches, otherwise):
            for guard, branch in branches:
                if _require_bool(evaluate(guard, valuation, defs)):
                    return evaluate(branch, valuation, defs)
            return evaluate(otherwise, valuation, defs)
        case Call(name, args):
            definition = defs.get(name)
            if definition is None:
                raise UndefinedSymbol(name)
            if len(definition.params) != len(args):
                raise EvaluationError(
                    f"{name} expects {len(definition.params)} arguments, got {len(args)}"
                )
            actuals = {p: evaluate(a, valuation, defs) for p, a in zip(definition.params, args)}
            return evaluate(definition.body, actuals, defs)
    raise TypeError(f"Not an expression: {e!r}")


def _require_number(value: Literal) -> Number:
    if not is_number(value):
        raise EvaluationError(f"Expected a number, got {value!r}")
    return value


def _require_bool(value: Literal) -> bool:
    if not isinstance(value, bool):
        raise EvaluationError(f"Expected a boolean, got {value!r}")
    return value


def arith(op: str, a: Literal, b: Literal) -> Number:
    a, b = _require_number(a), _require_number(b)
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if b == 0:
        raise EvaluationError(f"Division by zero: {a} / {b}")
    return a / b


def compare(op: str, a: Literal, b: Literal) -> bool:
    if op == "=":
        return literal_key(a) == literal_key(b)
    if op == "!=":
        return literal_key(a) != literal_key(b)
    a, b = _require_number(a), _require_number(b)
    return {"<": a < b, "<=": a <= b, ">": a > b, ">=": a >= b}[op]


def substitute(e: Expr, mapping: Mapping[str, Expr]) -> Expr:
    """Replace variables by expressions (simultaneously)."""
    match e:
        case Const():
            return e
        case Var(name):
            return mapping.get(name, e)
        case BinOp(op, left, right):
            return BinOp(op, substitute(left, mapping), substitute(right, mapping))
        case Cmp(op, left, right):
            return Cmp(op, substitute(left, mapping), substitute(right, mapping))
        case Neg(arg):
            return Neg(substitute(arg, mapping))
        case Not(arg):
            return Not(substitute(arg, mapping))
        case And(args):
            return And(tuple(substitute(a, mapping) for a in args))
        case Or(args):
            return Or(tuple(substitute(a, mapping) for a in args))
        case Call(name, args):
            return Call(name, tuple(substitute(a, mapping) for a in args))
        case IfExpr(branches, otherwise):
            return IfExpr(
                tuple((substitute(g, mapping), substitute(b, mapping)) for g, b in branches),
                substitute(otherwise, mapping),
            )
    raise TypeError(f"Not an expression: {e!r}")


def substitute_dist(d: DistTerm, mapping: Mapping[str, Expr]) -> DistTerm:
    match d:
        case PointMass(value):
            return PointMass(substitute(value, mapping))
        case Normal(mean, variance):
            return Normal(substitute(mean, mapping), substitute(variance, mapping))
        case CondDist(branches, otherwise):
            return CondDist(
                tuple((substitute(g, mapping), substitute_dist(b, mapping)) for g, b in branches),
                substitute_dist(otherwise, mapping),
            )
    return d


def _is_num_const(e: Expr, value=None) -> bool:
    if not (isinstance(e, Const) and is_number(e.value)):
        return False
    return value is None or e.value == value


def simplify(e: Expr) -> Expr:
    """Constant folding (finite decimals only) and unit-element removal."""
    match e:
        case BinOp(op, left, right):
            left, right = simplify(left), simplify(right)
            if _is_num_const(left) and _is_num_const(right):
                if not (op == "/" and right.value == 0):
                    folded = arith(op, left.value, right.value)
                    if is_finite_decimal(folded):
                        return Const(folded)
            if op == "+" and _is_num_const(right, 0):
                return left
            if op == "+" and _is_num_const(left, 0):
                return right
            if op == "-" and _is_num_const(right, 0):
                return left
            if op == "*" and _is_num_const(right, 1):
                return left
            if op == "*" and _is_num_const(left, 1):
                return right
            if op == "/" and _is_num_const(right, 1):
                return left
            return BinOp(op, left, right)
        case Neg(arg):
            arg = simplify(arg)
            if _is_num_const(arg):
                return Const(-arg.value)
            return Neg(arg)
        case Cmp(op, left, right):
            return Cmp(op, simplify(left), simplify(right))
        case Call(name, args):
            return Call(name, tuple(simplify(a) for a in args))
    return e


# ============================================================================
# Hashing
# ============================================================================

def term_hash(term) -> str:
    """SHA-256 of the canonical representation of a term, goal or comp."""
    if isinstance(term, Comp):
        term = canonical_form(term)
    return hashlib.sha256(repr(term).encode()).hexdigest()
