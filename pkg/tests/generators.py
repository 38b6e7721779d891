"""
Seeded Random Computations for the Soundness Batteries

Features:
- Finite-discrete computations over the variables a..d with small integer values
- Proper weight tables, point masses over bound variables and guarded choices
- Every update reads only variables bound before it, so each term evaluates
- Parallel blocks whose updates read only variables bound before the block
- Projection of a joint table onto a subset of its variables
"""

import random
from fractions import Fraction

from exact_semantics import JointTable
from terms import BinOp, Cmp, CondDist, Comp, Const, Event, Expr, PointMass, Step, Table, Update, Var, build, literal_key

VARIABLES = ("a", "b", "c", "d")
VALUES = (0, 1, 2)


def random_table(rng: random.Random, values=VALUES) -> Table:
    """Proper table on a random subset of values; weights are exact ratios."""
    chosen = rng.sample(list(values), rng.randint(1, len(values)))
    weights = [rng.randint(1, 9) for _ in chosen]
    total = sum(weights)
    return Table(tuple((Fraction(v), Fraction(w, total)) for v, w in zip(chosen, weights)))


def random_expr(rng: random.Random, bound: list[str], depth: int = 2) -> Expr:
    if depth == 0 or rng.random() < 0.4:
        if bound and rng.random() < 0.7:
            return Var(rng.choice(bound))
        return Const(Fraction(rng.choice(VALUES)))
    op = rng.choice(["+", "-"])
    return BinOp(op, random_expr(rng, bound, depth - 1), random_expr(rng, bound, depth - 1))


def random_dist(rng: random.Random, bound: list[str]):
    kind = rng.random()
    if not bound or kind < 0.35:
        return random_table(rng)
    if kind < 0.75:
        return PointMass(random_expr(rng, bound))
    guard = Cmp("=", Var(rng.choice(bound)), Const(Fraction(rng.choice(VALUES))))
    return CondDist(((guard, random_table(rng)),), random_table(rng))


def random_comp(rng: random.Random, max_steps: int = 5) -> Comp:
    """Unit environment of independent tables followed by single-update steps."""
    env_vars = rng.sample(VARIABLES, rng.randint(1, 2))
    env = [(v, random_table(rng)) for v in env_vars]
    bound = list(env_vars)
    steps = []
    for _ in range(rng.randint(2, max_steps)):
        target = rng.choice(VARIABLES)
        steps.append(Step((Update(target, random_dist(rng, bound)),)))
        if target not in bound:
            bound.append(target)
    return build(env, steps)


def random_event(rng: random.Random, variables) -> Event:
    op = rng.choice(["=", "<=", ">="])
    return Event(Cmp(op, Var(rng.choice(sorted(variables))), Const(Fraction(rng.randint(-1, 4)))))


def project(joint: JointTable, variables) -> dict[tuple, Fraction]:
    """Summed masses keyed by the values of the kept variables; zero masses dropped."""
    keep = sorted(variables)
    acc: dict[tuple, Fraction] = {}
    for valuation, mass in joint.valuations():
        key = tuple(literal_key(valuation[v]) for v in keep)
        acc[key] = acc.get(key, Fraction(0)) + mass
    return {key: mass for key, mass in acc.items() if mass != 0}


def random_parallel_comp(rng: random.Random) -> Comp:
    """Like random_comp, but steps may be parallel blocks of independent updates."""
    env_vars = rng.sample(VARIABLES, rng.randint(1, 2))
    env = [(v, random_table(rng)) for v in env_vars]
    bound = list(env_vars)
    steps = []
    for _ in range(rng.randint(1, 3)):
        targets = rng.sample(VARIABLES, rng.randint(1, 3))
        readable = [v for v in bound if v not in targets]
        updates = tuple(Update(t, random_dist(rng, readable)) for t in targets)
        steps.append(Step(updates, parallel=len(updates) > 1))
        bound.extend(t for t in targets if t not in bound)
    return build(env, steps)
