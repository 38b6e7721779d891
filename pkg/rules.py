"""
Rewrite and Inference Rules

Each deductive rule is an explicit, precondition-checked operation: term
rules rewrite a computation at a path, goal rules reduce or close a
probability obligation. A ProofState tracks goals, obligations and the
trace of every applied rule; scripts drive it one invocation per line.

Features:
- Paths addressing steps, updates and nested scopes ("@2", "@0.1/3")
- Term rules: function propagation, omit unused, congruence, permutation,
  normal sum, voting abstraction, linearize
- Goal rules: discrete probability computation, event approximation
  (upper / lower envelope), range split, normal tail monotonicity,
  event weakening, assume
- Closure propagation from sub-goals to parents
- Text scripts (`rule-name @path key=value`), JSON traces, trace replay
"""

import json
import logging
import re
import shlex
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Optional, Union

from config import EngineConfig
from errors import (
    BadPath,
    ContinuousDistributionPresent,
    EventShapeMismatch,
    ObligationFalse,
    PreconditionFailed,
    ReliabilityError,
    ReplayMismatch,
    ScriptError,
    UndefinedSymbol,
    UnknownRule,
)
from exact_semantics import update_support, weight_at
from numeric import (
    NormalParams,
    PiecewiseDensity,
    build_lower_envelope,
    build_upper_envelope,
    certify_envelope,
    cumulative,
)
from terms import (
    BinOp,
    Cmp,
    Comp,
    CondDist,
    Const,
    DistTerm,
    Event,
    Expr,
    FunctionDef,
    Goal,
    Normal,
    Number,
    Or,
    PointMass,
    Scope,
    Step,
    Table,
    Unit,
    Update,
    Var,
    build,
    canonical_form,
    dist_free_vars,
    evaluate,
    flatten,
    free_vars,
    independence_conflict,
    is_number,
    linearize,
    simplify,
    substitute,
    substitute_dist,
    sum_of,
    summands,
    term_hash,
    update_reads,
)

logger = logging.getLogger(__name__)

MASS_TOLERANCE = Fraction(1, 10 ** 12)

CLOSED = ("closed", "assumed")


# ============================================================================
# Paths
# ============================================================================

@dataclass(frozen=True)
class PathSegment:
    step: int
    update: Optional[int] = None

    def __str__(self):
        return str(self.step) if self.update is None else f"{self.step}.{self.update}"


@dataclass(frozen=True)
class Path:
    """Step[.update] segments; each segment but the last descends into a scope."""
    segments: tuple[PathSegment, ...]

    @classmethod
    def parse(cls, text: Union[str, "Path"]) -> "Path":
        if isinstance(text, Path):
            return text
        body = str(text).strip().lstrip("@")
        if not body:
            raise BadPath("Empty path")
        segments = []
        for part in body.split("/"):
            m = re.fullmatch(r"(\d+)(?:\.(\d+))?", part)
            if not m:
                raise BadPath(f"Malformed path segment '{part}' in '{text}'")
            update = int(m.group(2)) if m.group(2) is not None else None
            segments.append(PathSegment(int(m.group(1)), update))
        return cls(tuple(segments))

    def __str__(self):
        return "@" + "/".join(str(s) for s in self.segments)


@dataclass(frozen=True)
class Focus:
    """The step a path addresses, inside the computation that holds it."""
    env: tuple
    steps: tuple[Step, ...]
    index: int
    update: Optional[int]
    observed: Optional[frozenset[str]]
    rebuild: Callable[[Comp], Comp]

    def later(self, offset: int = 1) -> tuple[Step, ...]:
        return self.steps[self.index + offset:]

    def replace_steps(self, start: int, stop: int, new: Iterable[Step]) -> Comp:
        steps = list(self.steps)
        steps[start:stop] = list(new)
        return self.rebuild(build(self.env, steps))

    def replace_update(self, new: Update) -> Comp:
        s = self.steps[self.index]
        j = self.update or 0
        updates = s.updates[:j] + (new,) + s.updates[j + 1:]
        return self.replace_steps(self.index, self.index + 1, [Step(updates, s.parallel)])


def locate(c: Comp, path: Path, observed: Optional[frozenset[str]] = None) -> Focus:
    """Resolve a path; `observed` is what the context reads after c (None: everything)."""
    env, steps = flatten(c)
    head, rest = path.segments[0], path.segments[1:]
    if not 0 <= head.step < len(steps):
        raise BadPath(f"Step {head.step} does not exist (computation has {len(steps)} steps)")
    s = steps[head.step]
    if head.update is not None and not 0 <= head.update < len(s.updates):
        raise BadPath(f"Step {head.step} has no update {head.update}")
    if not rest:
        return Focus(tuple(env), tuple(steps), head.step, head.update, observed, lambda new: new)

    j = head.update or 0
    u = s.updates[j]
    if not isinstance(u.body, Scope):
        raise BadPath(f"Update {u.target} at {head} has no nested scope to descend into")
    inner = locate(u.body.comp, Path(rest), frozenset({u.body.result}))

    def rebuild(new_inner: Comp) -> Comp:
        new_update = Update(u.target, Scope(inner.rebuild(new_inner), u.body.result))
        updates = s.updates[:j] + (new_update,) + s.updates[j + 1:]
        new_steps = list(steps)
        new_steps[head.step] = Step(updates, s.parallel)
        return build(env, new_steps)

    return replace(inner, rebuild=rebuild)


# ============================================================================
# Read/write helpers
# ============================================================================

def step_reads(s: Step) -> frozenset[str]:
    return frozenset().union(*(update_reads(u) for u in s.updates))


def step_writes(s: Step) -> frozenset[str]:
    return frozenset(u.target for u in s.updates)


def fate(var: str, later: Iterable[Step]) -> str:
    """'read' if a later step reads var before rebinding it, 'rebound', or 'end'."""
    for s in later:
        if var in step_reads(s):
            return "read"
        if var in step_writes(s):
            return "rebound"
    return "end"


def live_after(later: tuple[Step, ...], observed: Optional[frozenset[str]],
               written: Iterable[str]) -> frozenset[str]:
    """Variables the context reads after a window that writes `written`."""
    live = set(observed) if observed is not None else set(written)
    for s in reversed(later):
        live -= step_writes(s)
        live |= step_reads(s)
    return frozenset(live)


def _single(focus: Focus, offset: int, rule: str) -> Update:
    i = focus.index + offset
    if i >= len(focus.steps):
        raise PreconditionFailed(rule, f"no update follows step {focus.index}")
    s = focus.steps[i]
    if len(s.updates) != 1:
        raise PreconditionFailed(rule, f"step {i} updates {len(s.updates)} variables at once")
    if offset == 0 and focus.update not in (None, 0):
        raise BadPath(f"Step {i} has a single update")
    return s.updates[0]


def _is_proper(body: Union[DistTerm, Scope]) -> bool:
    match body:
        case Table() as table:
            return abs(table.total - 1) <= MASS_TOLERANCE
        case CondDist(branches, otherwise):
            return all(_is_proper(d) for _, d in branches) and _is_proper(otherwise)
        case Scope(comp, _):
            env, steps = flatten(comp)
            return all(_is_proper(d) for _, d in env) and all(
                _is_proper(u.body) for s in steps for u in s.updates
            )
    return True


# ============================================================================
# Term rules
# ============================================================================

def _bound_before(focus: Focus, var: str) -> bool:
    if var in {v for v, _ in focus.env}:
        return True
    return any(var in step_writes(s) for s in focus.steps[:focus.index])


def rule_function_propagation(c: Comp, path, observed: Optional[frozenset[str]] = None) -> Comp:
    """(x', U(f(..))), (x'', D(x', ..)) -> (x'', D(f(..), ..)) when x' is not used again."""
    name = "function-propagation"
    focus = locate(c, Path.parse(path), observed)
    first, second = _single(focus, 0, name), _single(focus, 1, name)
    if not isinstance(first.body, PointMass):
        raise PreconditionFailed(name, f"update of {first.target} is not a point mass")
    if isinstance(second.body, Scope):
        raise PreconditionFailed(name, f"update of {second.target} is a nested scope")
    if first.target not in dist_free_vars(second.body):
        raise PreconditionFailed(name, f"update of {second.target} does not read {first.target}")
    if first.target != second.target:
        outcome = fate(first.target, focus.later(2))
        if outcome == "read" or (outcome == "end" and focus.observed and first.target in focus.observed):
            raise PreconditionFailed(name, f"{first.target} is used again after {second.target}")
        # top level: an intermediate may vanish, but must not fall back to an older value
        if outcome == "end" and focus.observed is None and _bound_before(focus, first.target):
            raise PreconditionFailed(
                name, f"{first.target} has an earlier binding that would stay observable"
            )
    fused = Update(second.target, substitute_dist(second.body, {first.target: first.body.value}))
    return focus.replace_steps(focus.index, focus.index + 2, [Step((fused,))])


def rule_omit_unused(c: Comp, path, observed: Optional[frozenset[str]] = None) -> Comp:
    """Drop an update whose value is overwritten (or never observed) before any read."""
    name = "omit-unused"
    focus = locate(c, Path.parse(path), observed)
    s = focus.steps[focus.index]
    if focus.update is None and len(s.updates) != 1:
        raise BadPath(f"Step {focus.index} updates several variables; address one as {focus.index}.k")
    u = s.updates[focus.update or 0]
    x = u.target
    for k, later in enumerate(focus.later(), start=focus.index + 1):
        if x in step_reads(later):
            raise PreconditionFailed(name, f"{x} is read at step {k} before it is overwritten")
        if x in step_writes(later):
            break
    else:
        if focus.observed is None or x in focus.observed:
            raise PreconditionFailed(name, f"{x} is never overwritten and stays observable")
    if not _is_proper(u.body):
        raise PreconditionFailed(name, f"update of {x} has total mass != 1")
    remaining = tuple(v for v in s.updates if v is not u)
    new_steps = [Step(remaining, s.parallel)] if remaining else []
    return focus.replace_steps(focus.index, focus.index + 1, new_steps)


def rule_permutation(c: Comp, path) -> Comp:
    """Swap two adjacent updates that do not depend on each other."""
    name = "permutation"
    focus = locate(c, Path.parse(path))
    a, b = _single(focus, 0, name), _single(focus, 1, name)
    reads_a, reads_b = update_reads(a), update_reads(b)
    if a.target in reads_b | {b.target}:
        raise PreconditionFailed(name, f"update of {b.target} depends on {a.target}")
    if b.target in reads_a:
        raise PreconditionFailed(name, f"update of {a.target} depends on {b.target}")
    s, t = focus.steps[focus.index], focus.steps[focus.index + 1]
    return focus.replace_steps(focus.index, focus.index + 2, [t, s])


def rule_linearize(c: Comp, path=None) -> Comp:
    return linearize(c)


def rule_identity(c: Comp, path=None) -> Comp:
    return c


def _scope_update(focus: Focus, rule: str) -> Update:
    s = focus.steps[focus.index]
    if focus.update is None and len(s.updates) != 1:
        raise BadPath(f"Step {focus.index} updates several variables; address one as {focus.index}.k")
    u = s.updates[focus.update or 0]
    if not isinstance(u.body, Scope):
        raise PreconditionFailed(rule, f"update of {u.target} is not a nested scope")
    return u


def _bindings(comp: Comp) -> list[tuple[int, Update]]:
    """(layer, update) pairs; the unit environment is layer 0."""
    env, steps = flatten(comp)
    result = [(0, Update(v, d)) for v, d in env]
    for k, s in enumerate(steps, start=1):
        result.extend((k, u) for u in s.updates)
    return result


def _final_binding(bindings: list[tuple[int, Update]], scope: Scope, rule: str) -> Update:
    if not bindings:
        raise PreconditionFailed(rule, "nested scope is empty")
    layer, last = bindings[-1]
    if sum(1 for k, _ in bindings if k == layer) != 1 or layer == 0:
        raise PreconditionFailed(rule, "the result must be computed by a final single update")
    if last.target != scope.result or not isinstance(last.body, PointMass):
        raise PreconditionFailed(rule, f"scope must end with ({scope.result}, U(...))")
    return last


def _local_free(exprs: Iterable[Expr], local: set[str]) -> bool:
    return all(not (free_vars(e) & local) for e in exprs)


def rule_normal_sum(c: Comp, path) -> Comp:
    """(x', (x_i, N(m_i, s_i))..., (x', U(x_1 + ... + x_n))) -> (x', N(sum m_i, sum s_i))."""
    name = "normal-sum"
    focus = locate(c, Path.parse(path))
    u = _scope_update(focus, name)
    scope = u.body
    bindings = _bindings(scope.comp)
    last = _final_binding(bindings, scope, name)
    local = {b.target for _, b in bindings}

    normals: dict[str, Normal] = {}
    for _, b in bindings[:-1]:
        if not isinstance(b.body, Normal):
            raise PreconditionFailed(name, f"{b.target} is not normally distributed")
        if b.target in normals:
            raise PreconditionFailed(name, f"{b.target} is bound twice")
        if not _local_free((b.body.mean, b.body.variance), local):
            raise PreconditionFailed(name, f"parameters of {b.target} depend on scope-local variables")
        normals[b.target] = b.body

    means, variances, used = [], [], set()
    for term in summands(last.body.value):
        if isinstance(term, Var) and term.name in normals:
            if term.name in used:
                raise PreconditionFailed(name, f"{term.name} occurs twice in the sum")
            used.add(term.name)
            means.append(normals[term.name].mean)
            variances.append(normals[term.name].variance)
        elif free_vars(term) & local:
            raise PreconditionFailed(name, "summand depends on a scope-local variable that is not a normal")
        else:
            means.append(term)
    if not variances:
        raise PreconditionFailed(name, "sum contains no normally distributed summand")
    if used != set(normals):
        raise PreconditionFailed(name, f"unused normal variables: {sorted(set(normals) - used)}")

    combined = Normal(simplify(sum_of(means)), simplify(sum_of(variances)))
    return focus.replace_update(Update(u.target, combined))


def _fresh(base: str, taken: set[str]) -> str:
    candidate, k = base, 0
    while candidate in taken:
        k += 1
        candidate = f"{base}{k}"
    return candidate


def rule_voting_abstraction(c: Comp, path) -> Comp:
    """Mean voting over n noisy sensors -> one noise e ~ N(mean mu, sum s / n^2) and r = x + e."""
    name = "voting-abstraction"
    focus = locate(c, Path.parse(path))
    u = _scope_update(focus, name)
    scope = u.body
    bindings = _bindings(scope.comp)
    last = _final_binding(bindings, scope, name)
    local = {b.target for _, b in bindings}

    noise: dict[str, tuple[int, Normal]] = {}
    sensors: dict[str, tuple[int, str]] = {}
    reading: Optional[Expr] = None
    for layer, b in bindings[:-1]:
        if b.target in noise or b.target in sensors:
            raise PreconditionFailed(name, f"{b.target} is bound twice")
        if isinstance(b.body, Normal):
            if not _local_free((b.body.mean, b.body.variance), local):
                raise PreconditionFailed(name, f"noise {b.target} depends on scope-local variables")
            noise[b.target] = (layer, b.body)
            continue
        if not isinstance(b.body, PointMass):
            raise PreconditionFailed(name, f"{b.target} is neither a noise nor a sensor reading")
        value = b.body.value
        if not (isinstance(value, BinOp) and value.op == "+" and isinstance(value.right, Var)
                and value.right.name in noise):
            raise PreconditionFailed(name, f"sensor {b.target} is not of the form x + e_i")
        if free_vars(value.left) & local:
            raise PreconditionFailed(name, f"sensor {b.target} reads a variable written inside the scope")
        if reading is not None and value.left != reading:
            raise PreconditionFailed(name, "sensors read different quantities")
        reading = value.left
        sensors[b.target] = (layer, value.right.name)

    if not sensors:
        raise PreconditionFailed(name, "no sensor readings in scope")
    if max(layer for layer, _ in noise.values()) >= min(layer for layer, _ in sensors.values()):
        raise PreconditionFailed(name, "sensor readings must follow all noise draws")
    errors_used = [e for _, e in sensors.values()]
    if len(set(errors_used)) != len(errors_used) or set(errors_used) != set(noise):
        raise PreconditionFailed(name, "each noise must feed exactly one sensor")

    vote = last.body.value
    n = len(sensors)
    if not (isinstance(vote, BinOp) and vote.op == "/" and isinstance(vote.right, Const)
            and is_number(vote.right.value) and vote.right.value == n):
        raise PreconditionFailed(name, f"result is not the mean of {n} sensor values")
    terms = summands(vote.left)
    if sorted(t.name if isinstance(t, Var) else "" for t in terms) != sorted(sensors):
        raise PreconditionFailed(name, "vote must sum every sensor value exactly once")

    ordered = [noise[sensors[t.name][1]][1] for t in terms]
    means = [d.mean for d in ordered]
    variances = [d.variance for d in ordered]
    count = Const(Fraction(n))
    if all(m == means[0] for m in means):
        mean = means[0]
    else:
        mean = simplify(BinOp("/", sum_of(means), count))
    if all(v == variances[0] for v in variances):
        variance = variances[0] if n == 1 else simplify(BinOp("/", variances[0], count))
    elif any(free_vars(v) for v in variances):
        raise PreconditionFailed(name, "variances differ and reference outer variables")
    else:
        variance = simplify(BinOp("/", sum_of(variances), Const(Fraction(n * n))))

    e = _fresh("e", free_vars(reading) | free_vars(mean) | free_vars(variance) | {scope.result})
    inner = build((), [
        Step((Update(e, Normal(mean, variance)),)),
        Step((Update(scope.result, PointMass(BinOp("+", reading, Var(e)))),)),
    ])
    return focus.replace_update(Update(u.target, Scope(inner, scope.result)))


def rule_congruence(c: Comp, path, length: int, sub_rule: str, sub_path=None,
                    params: Optional[Mapping[str, str]] = None,
                    observed: Optional[frozenset[str]] = None) -> Comp:
    """A, B, C -> A, B', C where B -> B' by a registered term rule."""
    focus = locate(c, Path.parse(path), observed)
    start, stop = focus.index, focus.index + length
    if length < 1 or stop > len(focus.steps):
        raise BadPath(f"Window of {length} steps at {focus.index} exceeds the computation")
    if sub_rule not in TERM_RULES:
        raise UnknownRule(sub_rule)
    window = focus.steps[start:stop]
    written = frozenset().union(*(step_writes(s) for s in window))
    window_observed = live_after(focus.later(length), focus.observed, written)
    rewritten = TERM_RULES[sub_rule](
        build((), window), sub_path, dict(params or {}), window_observed
    )
    env, new_steps = flatten(rewritten)
    if env:
        raise PreconditionFailed("congruence", "sub-rewrite introduced a unit environment")
    return focus.replace_steps(start, stop, new_steps)


def _congruence(c, path, params, observed):
    params = dict(params)
    length = int(params.pop("len", "1"))
    sub_rule = params.pop("rule", "identity")
    sub_path = params.pop("at", "0")
    return rule_congruence(c, path, length, sub_rule, sub_path, params, observed)


TERM_RULES: dict[str, Callable] = {
    "function-propagation": lambda c, path, params, obs: rule_function_propagation(c, path, obs),
    "omit-unused": lambda c, path, params, obs: rule_omit_unused(c, path, obs),
    "permutation": lambda c, path, params, obs: rule_permutation(c, path),
    "normal-sum": lambda c, path, params, obs: rule_normal_sum(c, path),
    "voting-abstraction": lambda c, path, params, obs: rule_voting_abstraction(c, path),
    "congruence": _congruence,
    "linearize": lambda c, path, params, obs: rule_linearize(c),
    "identity": lambda c, path, params, obs: rule_identity(c),
}

PATHLESS_RULES = ("linearize", "identity")


# ============================================================================
# Numeric obligations and goal-shape helpers
# ============================================================================

@dataclass(frozen=True)
class NumericObligation:
    """Residual numeric claim left by a goal rule."""
    kind: str
    statement: str
    value: float
    bound: float
    relation: str = "<"

    @property
    def holds(self) -> bool:
        return self.value < self.bound if self.relation == "<" else self.value <= self.bound

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "statement": self.statement,
            "value": float(self.value),
            "bound": float(self.bound),
            "relation": self.relation,
            "holds": self.holds,
        }


def single_binding(comp: Comp, rule: str) -> tuple[str, DistTerm]:
    """(x, D) for a computation that binds exactly one variable."""
    env, steps = flatten(comp)
    bindings = list(env) + [(u.target, u.body) for s in steps for u in s.updates]
    if len(bindings) != 1 or isinstance(bindings[0][1], Scope):
        raise PreconditionFailed(rule, "goal computation must be a single binding (x, D)")
    return bindings[0]


def _rebind(comp: Comp, dist: DistTerm) -> Comp:
    env, steps = flatten(comp)
    if env:
        return Unit(((env[0][0], dist),))
    target = steps[0].updates[0].target
    return build((), [Step((Update(target, dist),))])


def _number(expr: Expr, defs: Mapping[str, FunctionDef], rule: str) -> Number:
    try:
        value = evaluate(expr, {}, defs)
    except ReliabilityError as e:
        raise PreconditionFailed(rule, f"expression is not a closed number: {e.detail}")
    if not is_number(value):
        raise PreconditionFailed(rule, f"expected a number, got {value!r}")
    return value


def _normal_params(dist: DistTerm, defs, rule: str) -> NormalParams:
    if not isinstance(dist, Normal):
        raise PreconditionFailed(rule, "distribution is not normal")
    return NormalParams(float(_number(dist.mean, defs, rule)), float(_number(dist.variance, defs, rule)))


def tail_event(event: Event, var: str) -> Optional[tuple[str, Expr]]:
    """('le', b) for x <= b, ('ge', a) for x >= a (strict forms and flipped sides included)."""
    p = event.predicate
    if not isinstance(p, Cmp):
        return None
    if p.left == Var(var) and var not in free_vars(p.right):
        if p.op in ("<=", "<"):
            return "le", p.right
        if p.op in (">=", ">"):
            return "ge", p.right
    if p.right == Var(var) and var not in free_vars(p.left):
        if p.op in ("<=", "<"):
            return "ge", p.left
        if p.op in (">=", ">"):
            return "le", p.left
    return None


def _strict_relation(goal: Goal, rule: str) -> str:
    if goal.relation == "=":
        raise PreconditionFailed(rule, "goal must be an upper bound (< or <=)")
    return goal.relation


# ============================================================================
# Goal rules
# ============================================================================

def rule_event_approx_upper(g: Goal, env: PiecewiseDensity,
                            defs: Optional[Mapping[str, FunctionDef]] = None) -> NumericObligation:
    """Pr([(x, D)](x <= a)) < eps from a certified upper envelope with P_A(a) < eps."""
    name = "event-approx-upper"
    defs = defs or {}
    relation = _strict_relation(g, name)
    x, dist = single_binding(g.comp, name)
    shape = tail_event(g.event, x)
    if shape is None or shape[0] != "le":
        raise EventShapeMismatch(f"{name} needs an event of the form {x} <= a")
    params = _normal_params(dist, defs, name)
    certify_envelope(env, params, "upper")
    a = float(_number(shape[1], defs, name))
    obligation = NumericObligation("cdf", f"P_A({a}) {relation} {float(g.bound)}",
                                   cumulative(env, a), float(g.bound), relation)
    if not obligation.holds:
        raise ObligationFalse(
            f"Envelope bound {obligation.value:.6g} does not establish {relation} {float(g.bound)}",
            obligation,
        )
    return obligation


def rule_event_approx_lower(g: Goal, env: PiecewiseDensity,
                            defs: Optional[Mapping[str, FunctionDef]] = None) -> NumericObligation:
    """Pr([(x, D)](x >= a)) < eps from a certified lower envelope with 1 - P_A(a) < eps."""
    name = "event-approx-lower"
    defs = defs or {}
    relation = _strict_relation(g, name)
    x, dist = single_binding(g.comp, name)
    shape = tail_event(g.event, x)
    if shape is None or shape[0] != "ge":
        raise EventShapeMismatch(f"{name} needs an event of the form {x} >= a")
    params = _normal_params(dist, defs, name)
    certify_envelope(env, params, "lower")
    a = float(_number(shape[1], defs, name))
    obligation = NumericObligation("tail", f"1 - P_A({a}) {relation} {float(g.bound)}",
                                   1.0 - cumulative(env, a), float(g.bound), relation)
    if not obligation.holds:
        raise ObligationFalse(
            f"Envelope bound {obligation.value:.6g} does not establish {relation} {float(g.bound)}",
            obligation,
        )
    return obligation


def rule_range_split(g: Goal, eps1: Optional[Number] = None,
                     eps2: Optional[Number] = None) -> tuple[Goal, Goal]:
    """Pr(x >= a or x <= b) < e1 + e2 from Pr(x >= a) < e1 and Pr(x <= b) < e2."""
    name = "range-split"
    relation = _strict_relation(g, name)
    p = g.event.predicate
    if not (isinstance(p, Or) and len(p.args) == 2 and all(isinstance(a, Cmp) for a in p.args)):
        raise EventShapeMismatch("range-split needs a disjunction of two comparisons")
    candidates = []
    for arg in p.args:
        found = [v for v in sorted(free_vars(arg)) if tail_event(Event(arg), v) is not None]
        if not found:
            raise EventShapeMismatch(f"{arg} is not a tail comparison on a variable")
        candidates.append(found)
    shapes = []
    for var in (v for v in candidates[0] if v in candidates[1]):
        (dir_a, _), (dir_b, _) = (tail_event(Event(arg), var) for arg in p.args)
        if {dir_a, dir_b} == {"ge", "le"}:
            shapes = [(var, dir_a, p.args[0]), (var, dir_b, p.args[1])]
            break
    if not shapes:
        raise EventShapeMismatch("range-split needs x >= a or x <= b on the same variable")
    (_, dir_a, cmp_a), (_, _, cmp_b) = shapes
    upper_tail, lower_tail = (cmp_a, cmp_b) if dir_a == "ge" else (cmp_b, cmp_a)
    if eps1 is None and eps2 is None:
        eps1 = eps2 = g.bound / 2
    elif eps1 is None:
        eps1 = g.bound - eps2
    elif eps2 is None:
        eps2 = g.bound - eps1
    if eps1 < 0 or eps2 < 0 or abs(eps1 + eps2 - g.bound) > 1e-12:
        raise PreconditionFailed(name, f"eps1 + eps2 must equal {g.bound} with both >= 0")
    return (Goal(g.comp, Event(upper_tail), relation, eps1),
            Goal(g.comp, Event(lower_tail), relation, eps2))


def rule_normal_prob_monotone(g: Goal, premise_variance: Number,
                              defs: Optional[Mapping[str, FunctionDef]] = None) -> Goal:
    """Tail bound at variance s'^2 from the same bound at a variance s^2 >= s'^2 (distance a > 0)."""
    name = "normal-monotone"
    defs = defs or {}
    _strict_relation(g, name)
    x, dist = single_binding(g.comp, name)
    params = _normal_params(dist, defs, name)
    shape = tail_event(g.event, x)
    if shape is None:
        raise EventShapeMismatch(f"{name} needs an event {x} <= mu - a or {x} >= mu + a")
    edge = float(_number(shape[1], defs, name))
    a = params.mean - edge if shape[0] == "le" else edge - params.mean
    if not a > 0:
        raise PreconditionFailed(name, f"distance from the mean must be > 0, got {a}")
    if not premise_variance > 0:
        raise PreconditionFailed(name, f"premise variance must be > 0, got {premise_variance}")
    if params.variance > premise_variance:
        raise PreconditionFailed(
            name, f"conclusion variance {params.variance} exceeds premise variance {premise_variance}"
        )
    premise = Normal(dist.mean, Const(premise_variance))
    return Goal(_rebind(g.comp, premise), g.event, g.relation, g.bound)


def rule_event_weakening(g: Goal, d_prime: DistTerm,
                         defs: Optional[Mapping[str, FunctionDef]] = None) -> Goal:
    """Pr([(x, D)](x = y)) < eps from Pr([(x, D')](x = y)) < eps when D(y) <= D'(y)."""
    name = "event-weakening"
    defs = defs or {}
    _strict_relation(g, name)
    x, dist = single_binding(g.comp, name)
    p = g.event.predicate
    if isinstance(p, Cmp) and p.op == "=" and p.left == Var(x) and x not in free_vars(p.right):
        y_expr = p.right
    elif isinstance(p, Cmp) and p.op == "=" and p.right == Var(x) and x not in free_vars(p.left):
        y_expr = p.left
    else:
        raise EventShapeMismatch(f"{name} needs an event of the form {x} = y")
    y = evaluate(y_expr, {}, defs)
    try:
        d_y, d_prime_y = weight_at(dist, y, {}, defs), weight_at(d_prime, y, {}, defs)
    except ContinuousDistributionPresent:
        raise PreconditionFailed(name, "both distributions must have finite support at y")
    if d_y > d_prime_y:
        raise PreconditionFailed(name, f"D({y}) = {d_y} exceeds D'({y}) = {d_prime_y}")
    return Goal(_rebind(g.comp, d_prime), g.event, g.relation, g.bound)


def _leading(comp: Comp, rule: str) -> Optional[tuple[Update, Comp]]:
    env, steps = flatten(comp)
    if env:
        (var, dist), rest = env[0], env[1:]
        return Update(var, dist), build(rest, steps)
    if not steps:
        return None
    first = steps[0]
    if len(first.updates) == 1:
        return first.updates[0], build((), steps[1:])
    if first.parallel and independence_conflict(first.updates) is None:
        return first.updates[0], build((), [Step(first.updates[1:], True)] + list(steps[1:]))
    raise PreconditionFailed(rule, "leading step updates several dependent variables at once")


def _substitute_body(body, var: str, value: Expr):
    if isinstance(body, Scope):
        inner, still_free = substitute_comp(body.comp, var, value)
        if still_free and body.result == var:
            inner = build(*_append(inner, Update(var, PointMass(value))))
        return Scope(inner, body.result)
    return substitute_dist(body, {var: value})


def _append(comp: Comp, u: Update):
    env, steps = flatten(comp)
    return env, steps + [Step((u,))]


def substitute_comp(comp: Comp, var: str, value: Expr) -> tuple[Comp, bool]:
    """Replace reads of var until it is rebound; second item: var still unbound at the end."""
    env, steps = flatten(comp)
    mapping = {var: value}
    new_env = [(v, substitute_dist(d, mapping)) for v, d in env]
    if var in {v for v, _ in env}:
        return build(new_env, steps), False
    new_steps, free = [], True
    for s in steps:
        if free:
            s = Step(tuple(Update(u.target, _substitute_body(u.body, var, value)) for u in s.updates),
                     s.parallel)
            if var in step_writes(s):
                free = False
        new_steps.append(s)
    return build(new_env, new_steps), free


def discrete_split(g: Goal, defs: Mapping[str, FunctionDef],
                   limit: int = 10_000_000) -> list[tuple[Number, Goal]]:
    """One elimination step: sum over x' in D of D(x') * Pr([F(x')] E)."""
    name = "discrete-computation"
    lead = _leading(g.comp, name)
    if lead is None:
        raise PreconditionFailed(name, "computation has no leading distribution")
    u, rest = lead
    try:
        values = update_support(u, {}, defs, limit)
    except ContinuousDistributionPresent:
        raise PreconditionFailed(name, f"leading distribution of {u.target} is not finite")
    result = []
    for value, weight in values:
        remainder, free = substitute_comp(rest, u.target, Const(value))
        event = Event(substitute(g.event.predicate, {u.target: Const(value)})) if free else g.event
        result.append((weight, Goal(remainder, event, g.relation, g.bound)))
    return result


def ground_value(g: Goal, defs: Mapping[str, FunctionDef]) -> Optional[Number]:
    """Pr of a goal whose computation is empty: 1 if the closed event holds, else 0."""
    env, steps = flatten(g.comp)
    if env or steps:
        return None
    holds = evaluate(g.event.predicate, {}, defs)
    if not isinstance(holds, bool):
        raise EventShapeMismatch(f"Event predicate is not boolean: {holds!r}")
    return Fraction(1) if holds else Fraction(0)


def discrete_value(g: Goal, defs: Mapping[str, FunctionDef], limit: int = 10_000_000) -> Number:
    """Eliminate every binding recursively; exact when all weights are rational."""
    value = ground_value(g, defs)
    if value is not None:
        return value
    return sum((w * discrete_value(sub, defs, limit) for w, sub in discrete_split(g, defs, limit)),
               Fraction(0))


def rule_discrete_prob_computation(g: Goal, path="@0", defs: Optional[Mapping[str, FunctionDef]] = None,
                                   ground: bool = False, limit: int = 10_000_000):
    """Weighted sub-goals for the leading binding, or the exact number when fully ground."""
    defs = defs or {}
    target = Path.parse(path)
    if target.segments != (PathSegment(0),) and target.segments != (PathSegment(0, 0),):
        raise BadPath("discrete-computation eliminates the leading binding (@0)")
    value = ground_value(g, defs)
    if value is not None:
        return value
    if ground:
        return discrete_value(g, defs, limit)
    return discrete_split(g, defs, limit)


# ============================================================================
# Proof state
# ============================================================================

@dataclass(frozen=True)
class GoalRecord:
    id: int
    goal: Goal
    status: str = "open"
    mode: str = "bound"
    justification: str = ""
    parent: Optional[int] = None
    children: tuple[int, ...] = ()
    combine: str = "all"
    weight: Number = Fraction(1)
    value: Optional[Number] = None
    obligations: tuple[NumericObligation, ...] = ()

    def to_dict(self) -> dict:
        data = {
            "id": self.id,
            "status": self.status,
            "mode": self.mode,
            "relation": self.goal.relation,
            "bound": float(self.goal.bound),
            "justification": self.justification,
            "parent": self.parent,
            "children": list(self.children),
            "obligations": [o.to_dict() for o in self.obligations],
        }
        if self.value is not None:
            data["value"] = float(self.value)
            if isinstance(self.value, Fraction):
                data["exact"] = str(self.value)
        if self.mode == "value":
            data["weight"] = float(self.weight)
        return data


@dataclass(frozen=True)
class Invocation:
    rule: str
    path: Optional[str] = None
    params: tuple[tuple[str, str], ...] = ()

    @classmethod
    def parse(cls, line: str) -> Optional["Invocation"]:
        """`rule-name @path key=value ...`; None for blank or comment lines."""
        try:
            tokens = shlex.split(line, comments=True)
        except ValueError as e:
            raise BadPath(f"Cannot tokenize script line '{line.strip()}': {e}")
        if not tokens:
            return None
        rule, path, params = tokens[0], None, []
        for token in tokens[1:]:
            if token.startswith("@"):
                path = token
            elif "=" in token:
                key, value = token.split("=", 1)
                params.append((key, value))
            else:
                raise BadPath(f"Unexpected token '{token}' in script line '{line.strip()}'")
        return cls(rule, path, tuple(params))

    @property
    def param_map(self) -> dict[str, str]:
        return dict(self.params)

    def __str__(self):
        parts = [self.rule] + ([self.path] if self.path else []) + [f"{k}={v}" for k, v in self.params]
        return " ".join(parts)


@dataclass(frozen=True)
class TraceEntry:
    step: int
    invocation: Invocation
    goal: Optional[int]
    before: str
    after: str

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "rule": self.invocation.rule,
            "path": self.invocation.path,
            "params": dict(self.invocation.params),
            "goal": self.goal,
            "before": self.before,
            "after": self.after,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TraceEntry":
        invocation = Invocation(data["rule"], data.get("path"), tuple(sorted(data.get("params", {}).items())))
        return cls(data["step"], invocation, data.get("goal"), data["before"], data["after"])


@dataclass(frozen=True)
class ProofState:
    """Subject computation, goal records and the trace of applied rules."""
    subject: Comp
    goals: tuple[GoalRecord, ...] = ()
    trace: tuple[TraceEntry, ...] = ()
    defs: Mapping[str, FunctionDef] = field(default_factory=dict, compare=False, repr=False)
    dists: Mapping[str, DistTerm] = field(default_factory=dict, compare=False, repr=False)
    config: EngineConfig = field(default_factory=EngineConfig, compare=False, repr=False)

    @classmethod
    def initial(cls, subject: Comp, goals: Iterable[Goal] = (), defs=None, dists=None,
                config: Optional[EngineConfig] = None) -> "ProofState":
        records = tuple(GoalRecord(i, g) for i, g in enumerate(goals))
        return cls(subject, records, (), defs or {}, dists or {}, config or EngineConfig())

    # ------------------------------------------------------------------ queries

    def record(self, goal_id: int) -> GoalRecord:
        if not 0 <= goal_id < len(self.goals):
            raise BadPath(f"No goal with id {goal_id}")
        return self.goals[goal_id]

    @property
    def roots(self) -> list[GoalRecord]:
        return [r for r in self.goals if r.parent is None]

    @property
    def established(self) -> bool:
        return bool(self.goals) and all(r.status in CLOSED for r in self.roots)

    @property
    def open_goals(self) -> list[GoalRecord]:
        return [r for r in self.goals if r.status == "open"]

    def digest(self) -> str:
        goals = tuple(
            (canonical_form(r.goal.comp), r.goal.event, r.goal.relation, r.goal.bound, r.status, r.value)
            for r in self.goals
        )
        return term_hash((canonical_form(self.subject), goals))

    def to_dict(self) -> dict:
        return {
            "subject_hash": term_hash(self.subject),
            "established": self.established,
            "goals": [r.to_dict() for r in self.goals],
            "trace": [t.to_dict() for t in self.trace],
        }

    def trace_json(self) -> str:
        return json.dumps([t.to_dict() for t in self.trace], sort_keys=True, indent=2)

    # ------------------------------------------------------------------ updates

    def _set(self, record: GoalRecord) -> "ProofState":
        goals = list(self.goals)
        goals[record.id] = record
        return replace(self, goals=tuple(goals))

    def _add(self, goal: Goal, parent: int, mode: str = "bound",
             weight: Number = Fraction(1)) -> tuple["ProofState", int]:
        record = GoalRecord(len(self.goals), goal, mode=mode, parent=parent, weight=weight)
        return replace(self, goals=self.goals + (record,)), record.id

    def reduce(self, goal_id: int, subgoals: list[tuple[Number, Goal]], justification: str,
               combine: str = "all", mode: str = "bound") -> "ProofState":
        state, children = self, []
        for weight, goal in subgoals:
            state, child = state._add(goal, goal_id, mode, weight)
            children.append(child)
        record = replace(state.record(goal_id), status="reduced", justification=justification,
                         children=tuple(children), combine=combine)
        state = state._set(record)
        # a reduction without sub-goals (empty support) is already decided
        if not children:
            return state.resolve(goal_id, Fraction(0), justification) if combine == "sum" else state.close(
                goal_id, justification)
        return state

    def close(self, goal_id: int, justification: str,
              obligations: tuple[NumericObligation, ...] = (), status: str = "closed") -> "ProofState":
        record = self.record(goal_id)
        state = self._set(replace(record, status=status, justification=justification,
                                  obligations=record.obligations + obligations))
        return state._propagate(goal_id)

    def resolve(self, goal_id: int, value: Number, justification: str) -> "ProofState":
        """Record an exact probability; bound goals close or fail against it."""
        record = self.record(goal_id)
        if record.mode == "value":
            status = "closed"
        else:
            status = "closed" if record.goal.holds_for(value, self.config.tolerance) else "failed"
        state = self._set(replace(record, status=status, value=value, justification=justification))
        return state._propagate(goal_id)

    def _propagate(self, goal_id: int) -> "ProofState":
        parent_id = self.record(goal_id).parent
        if parent_id is None:
            return self
        parent = self.record(parent_id)
        children = [self.record(k) for k in parent.children]
        if parent.combine == "sum":
            if all(c.value is not None for c in children):
                total = sum((c.weight * c.value for c in children), Fraction(0))
                return self.resolve(parent_id, total, parent.justification)
            return self
        if all(c.status in CLOSED for c in children):
            return self.close(parent_id, parent.justification)
        return self


# ============================================================================
# Rule application on proof states
# ============================================================================

def _goal_id(params: Mapping[str, str], default: Optional[int] = 0) -> Optional[int]:
    if "goal" in params:
        try:
            return int(params["goal"])
        except ValueError:
            raise BadPath(f"Goal id must be an integer, got {params['goal']!r}")
    return default


def _num_param(params: Mapping[str, str], key: str, default=None):
    if key not in params:
        return default
    try:
        return Fraction(params[key])
    except ValueError:
        raise PreconditionFailed(key, f"expected a number, got {params[key]!r}")


def _open_record(state: ProofState, goal_id: int, rule: str) -> GoalRecord:
    record = state.record(goal_id)
    if record.status != "open":
        raise PreconditionFailed(rule, f"goal {goal_id} is {record.status}, not open")
    return record


def _envelope(state: ProofState, record: GoalRecord, params: Mapping[str, str], role: str) -> PiecewiseDensity:
    if "envelope" in params:
        return PiecewiseDensity.from_json(params["envelope"])
    _, dist = single_binding(record.goal.comp, f"event-approx-{role}")
    source = _normal_params(dist, state.defs, f"event-approx-{role}")
    k = float(params.get("k", state.config.envelope_k))
    pieces = int(params["pieces"]) if "pieces" in params else None
    width = float(params.get("width", state.config.envelope_width)) if pieces is None else None
    builder = build_upper_envelope if role == "upper" else build_lower_envelope
    return builder(source, k=k, width=width, pieces=pieces)


def _apply_term_rule(state: ProofState, inv: Invocation) -> tuple[ProofState, Optional[int]]:
    params = inv.param_map
    if inv.rule not in PATHLESS_RULES and inv.path is None:
        raise BadPath(f"{inv.rule} needs a path (@step)")
    goal_id = _goal_id(params, default=None)
    if goal_id is None:
        new = TERM_RULES[inv.rule](state.subject, inv.path, params, None)
        return replace(state, subject=new), None
    record = state.record(goal_id)
    observed = free_vars(record.goal.event.predicate)
    new = TERM_RULES[inv.rule](record.goal.comp, inv.path, params, observed)
    return state._set(replace(record, goal=replace(record.goal, comp=new))), goal_id


def _apply_goal_rule(state: ProofState, inv: Invocation) -> tuple[ProofState, int]:
    params = inv.param_map
    goal_id = _goal_id(params)
    record = _open_record(state, goal_id, inv.rule)
    goal = record.goal
    limit = state.config.max_valuations

    if inv.rule == "discrete-computation":
        ground = params.get("ground", "false").lower() in ("1", "true", "yes")
        path = inv.path or "@0"
        result = rule_discrete_prob_computation(goal, path, state.defs, ground, limit)
        if ground:
            return state.resolve(goal_id, result, "discrete-computation (ground)"), goal_id
        if not isinstance(result, list):
            return state.resolve(goal_id, result, "discrete-computation"), goal_id
        new = state.reduce(goal_id, result, "discrete-computation", combine="sum", mode="value")
        for child_id in new.record(goal_id).children:
            value = ground_value(new.record(child_id).goal, state.defs)
            if value is not None:
                new = new.resolve(child_id, value, "discrete-computation (ground)")
        return new, goal_id

    if record.mode == "value":
        raise PreconditionFailed(inv.rule, f"goal {goal_id} asks for an exact value; use discrete-computation")

    if inv.rule in ("event-approx-upper", "event-approx-lower"):
        role = "upper" if inv.rule.endswith("upper") else "lower"
        envelope = _envelope(state, record, params, role)
        rule = rule_event_approx_upper if role == "upper" else rule_event_approx_lower
        obligation = rule(goal, envelope, state.defs)
        return state.close(goal_id, inv.rule, (obligation,)), goal_id

    if inv.rule == "range-split":
        first, second = rule_range_split(goal, _num_param(params, "eps1"), _num_param(params, "eps2"))
        return state.reduce(goal_id, [(Fraction(1), first), (Fraction(1), second)], "range-split"), goal_id

    if inv.rule == "normal-monotone":
        variance = _num_param(params, "variance")
        if variance is None:
            raise PreconditionFailed(inv.rule, "premise variance (variance=...) is required")
        premise = rule_normal_prob_monotone(goal, variance, state.defs)
        return state.reduce(goal_id, [(Fraction(1), premise)], "normal-monotone"), goal_id

    if inv.rule == "event-weakening":
        name = params.get("with")
        if name is None:
            raise PreconditionFailed(inv.rule, "comparison distribution (with=NAME) is required")
        if name not in state.dists:
            raise UndefinedSymbol(name)
        premise = rule_event_weakening(goal, state.dists[name], state.defs)
        return state.reduce(goal_id, [(Fraction(1), premise)], "event-weakening"), goal_id

    if inv.rule == "assume":
        logger.warning(f"Goal {goal_id} closed by external assumption")
        return state.close(goal_id, "external assumption", status="assumed"), goal_id

    raise UnknownRule(inv.rule)


GOAL_RULES = (
    "discrete-computation",
    "event-approx-upper",
    "event-approx-lower",
    "range-split",
    "normal-monotone",
    "event-weakening",
    "assume",
)


def apply(state: ProofState, inv: Invocation) -> ProofState:
    """Apply one invocation and append it to the trace."""
    before = state.digest()
    if inv.rule in TERM_RULES:
        new, goal_id = _apply_term_rule(state, inv)
    elif inv.rule in GOAL_RULES:
        new, goal_id = _apply_goal_rule(state, inv)
    else:
        raise UnknownRule(inv.rule)
    after = new.digest()
    entry = TraceEntry(len(state.trace) + 1, inv, goal_id, before, after)
    logger.info(f"{inv} -> {after[:12]}")
    return replace(new, trace=state.trace + (entry,))


def parse_script(text: str) -> list[Invocation]:
    invocations = []
    for line in text.splitlines():
        inv = Invocation.parse(line)
        if inv is not None:
            invocations.append(inv)
    return invocations


def run_script(state: ProofState, script: Union[str, Iterable[Invocation]]) -> ProofState:
    """Apply invocations in order; the first failure aborts with the partial state."""
    invocations = parse_script(script) if isinstance(script, str) else list(script)
    for k, inv in enumerate(invocations, start=1):
        try:
            state = apply(state, inv)
        except ScriptError:
            raise
        except ReliabilityError as e:
            logger.info(f"Script aborted at step {k}: {e.detail}")
            raise ScriptError(k, e, state) from e
    return state


def replay(initial: ProofState, trace: Iterable[TraceEntry]) -> ProofState:
    """Re-run a recorded trace, checking every before/after hash."""
    state = initial
    for entry in trace:
        if state.digest() != entry.before:
            raise ReplayMismatch(f"State before step {entry.step} differs from the recorded hash")
        state = apply(state, entry.invocation)
        if state.digest() != entry.after:
            raise ReplayMismatch(f"Step {entry.step} ({entry.invocation}) produced a different term")
    return state
