"""
Monte-Carlo Execution of Computations

Runs computations (normal distributions included) on batches of sample
indices and estimates event probabilities and moments. Used as the
validation oracle wherever exact enumeration does not apply.

Features:
- Vectorized batch execution (numpy), one column per variable
- Counter-based Philox substream per block of sample indices, so serial
  and threaded execution give bit-identical results
- Normal draws by inverse CDF through numeric.normal_ppf
- Wilson-score confidence half-widths
- Moment estimates with standard errors
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Mapping, Optional

import numpy as np

from errors import (
    ConfigError,
    EvaluationError,
    ImproperDistribution,
    IndependenceViolation,
    InvalidVariance,
    UndefinedSymbol,
    UnknownVariable,
)
from numeric import normal_ppf
from terms import (
    And,
    BinOp,
    Call,
    Cmp,
    Comp,
    CondDist,
    Const,
    DistTerm,
    Event,
    Expr,
    FunctionDef,
    IfExpr,
    Literal,
    Neg,
    Normal,
    Not,
    Or,
    PointMass,
    Scope,
    Table,
    UniformFinite,
    Update,
    Var,
    flatten,
    independence_conflict,
    is_number,
)

logger = logging.getLogger(__name__)

Columns = dict[str, np.ndarray]

MASS_TOLERANCE = 1e-12
UNIT_STEPS = 2 ** 53

# numeric columns are floats; comparisons treat values this close as equal
COMPARE_RTOL = 1e-9
COMPARE_ATOL = 1e-12


# ============================================================================
# Configuration and results
# ============================================================================

@dataclass(frozen=True)
class SampleConfig:
    n: int = 100_000
    seed: int = 0
    gamma: float = 0.99
    block_size: int = 4096
    workers: int = 1

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"Sample count must be >= 1, got {self.n}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"Confidence level must be in (0, 1), got {self.gamma}")
        if self.block_size < 1 or self.workers < 1:
            raise ConfigError("block_size and workers must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"Seed must be a 64-bit unsigned integer, got {self.seed}")

    @classmethod
    def from_engine(cls, config, n: Optional[int] = None, seed: Optional[int] = None,
                    gamma: Optional[float] = None) -> "SampleConfig":
        return cls(
            n=n if n is not None else config.default_samples,
            seed=seed if seed is not None else config.default_seed,
            gamma=gamma if gamma is not None else config.default_gamma,
            block_size=config.block_size,
            workers=config.workers,
        )


@dataclass(frozen=True)
class Estimate:
    p_hat: float
    half_width: float
    n: int
    seed: int
    gamma: float
    hits: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def agrees_with(self, other: "Estimate") -> bool:
        """Point estimates within the combined confidence half-widths."""
        return abs(self.p_hat - other.p_hat) <= self.half_width + other.half_width


@dataclass(frozen=True)
class Moments:
    mean: float
    variance: float
    se_mean: float
    se_variance: float
    n: int
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def z_from_confidence(gamma: float) -> float:
    """Two-sided normal quantile, e.g. 0.99 -> 2.5758..."""
    return normal_ppf(1.0 - (1.0 - gamma) / 2.0)


def wilson_half_width(hits: int, n: int, gamma: float) -> float:
    z = z_from_confidence(gamma)
    p = hits / n
    return z / (1.0 + z * z / n) * math.sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n))


# ============================================================================
# Batch evaluation of expressions
# ============================================================================

def _constant_column(value: Literal, size: int) -> np.ndarray:
    if isinstance(value, (bool, np.bool_)):
        return np.full(size, bool(value), dtype=bool)
    if is_number(value) or isinstance(value, np.number):
        return np.full(size, float(value), dtype=float)
    column = np.empty(size, dtype=object)
    column[:] = value
    return column


def _kind(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "bool"
    if is_number(value) or isinstance(value, np.number):
        return "num"
    return "str"


def _tidy(column: np.ndarray, what: str = "Column") -> np.ndarray:
    """Narrow an object column to bool or float; every value must be of one kind."""
    if column.dtype != object or column.size == 0:
        return column
    kinds = {_kind(v) for v in column}
    if len(kinds) > 1:
        raise EvaluationError(f"{what} mixes {', '.join(sorted(kinds))} values")
    kind = kinds.pop()
    if kind == "bool":
        return column.astype(bool)
    if kind == "num":
        return column.astype(float)
    return column


def _take(columns: Columns, index: np.ndarray) -> Columns:
    return {v: c[index] for v, c in columns.items()}


def _scatter(out: Optional[np.ndarray], index: np.ndarray, values: np.ndarray, size: int) -> np.ndarray:
    if out is None:
        out = np.empty(size, dtype=object)
    out[index] = values
    return out


def _as_bool(column: np.ndarray, what: str) -> np.ndarray:
    if column.dtype != bool:
        raise EvaluationError(f"{what} is not boolean")
    return column


def _as_float(column: np.ndarray) -> np.ndarray:
    if column.dtype != float:
        raise EvaluationError("Arithmetic on a non-numeric value")
    return column


def evaluate_batch(e: Expr, columns: Columns, size: int, defs: Mapping[str, FunctionDef]) -> np.ndarray:
    """Evaluate an expression for every sample index at once."""
    match e:
        case Const(value):
            return _constant_column(value, size)
        case Var(name):
            if name not in columns:
                raise UnknownVariable(name)
            return columns[name]
        case BinOp(op, left, right):
            a = _as_float(evaluate_batch(left, columns, size, defs))
            b = _as_float(evaluate_batch(right, columns, size, defs))
            if op == "+":
                return a + b
            if op == "-":
                return a - b
            if op == "*":
                return a * b
            if np.any(b == 0):
                raise EvaluationError("Division by zero")
            return a / b
        case Neg(arg):
            return -_as_float(evaluate_batch(arg, columns, size, defs))
        case Cmp(op, left, right):
            a = evaluate_batch(left, columns, size, defs)
            b = evaluate_batch(right, columns, size, defs)
            if op in ("=", "!=") and not (a.dtype == float and b.dtype == float):
                if object not in (a.dtype, b.dtype) and a.dtype != b.dtype:
                    same = np.zeros(size, dtype=bool)
                else:
                    same = np.asarray(a == b, dtype=bool)
                return same if op == "=" else ~same
            a, b = _as_float(a), _as_float(b)
            close = np.isclose(a, b, rtol=COMPARE_RTOL, atol=COMPARE_ATOL)
            match op:
                case "=":
                    return close
                case "!=":
                    return ~close
                case "<":
                    return (a < b) & ~close
                case "<=":
                    return (a <= b) | close
                case ">":
                    return (a > b) & ~close
            return (a >= b) | close
        case And(args):
            result = np.ones(size, dtype=bool)
            for arg in args:
                result &= _as_bool(evaluate_batch(arg, columns, size, defs), "Conjunct")
            return result
        case Or(args):
            result = np.zeros(size, dtype=bool)
            for arg in args:
                result |= _as_bool(evaluate_batch(arg, columns, size, defs), "Disjunct")
            return result
        case Not(arg):
            return ~_as_bool(evaluate_batch(arg, columns, size, defs), "Negated expression")
        case IfExpr(branches, otherwise):
            out = None
            pending = np.arange(size)
            for guard, branch in branches:
                sub = _take(columns, pending)
                chosen = _as_bool(evaluate_batch(guard, sub, len(pending), defs), "Guard")
                hit = pending[chosen]
                if len(hit):
                    out = _scatter(out, hit, evaluate_batch(branch, _take(columns, hit), len(hit), defs), size)
                pending = pending[~chosen]
            if len(pending):
                sub = _take(columns, pending)
                out = _scatter(out, pending, evaluate_batch(otherwise, sub, len(pending), defs), size)
            return _tidy(out) if out is not None else np.empty(0, dtype=float)
        case Call(name, args):
            definition = defs.get(name)
            if definition is None:
                raise UndefinedSymbol(name)
            if len(definition.params) != len(args):
                raise EvaluationError(f"{name} expects {len(definition.params)} arguments, got {len(args)}")
            actuals = {p: evaluate_batch(a, columns, size, defs) for p, a in zip(definition.params, args)}
            return evaluate_batch(definition.body, actuals, size, defs)
    raise TypeError(f"Not an expression: {e!r}")


# ============================================================================
# Batch sampling of distributions and computations
# ============================================================================

def _value_column(values, what: str) -> np.ndarray:
    column = np.empty(len(values), dtype=object)
    for i, v in enumerate(values):
        column[i] = float(v) if isinstance(v, Fraction) else v
    return _tidy(column, what)


def sample_dist(d: DistTerm, columns: Columns, size: int, rng: np.random.Generator,
                defs: Mapping[str, FunctionDef], target: str = "?") -> np.ndarray:
    match d:
        case PointMass(value):
            return evaluate_batch(value, columns, size, defs)
        case UniformFinite(_, values):
            return _value_column(values, f"Distribution of {target}")[rng.integers(0, len(values), size=size)]
        case Table(entries):
            weights = np.array([float(w) for _, w in entries], dtype=float)
            total = weights.sum()
            if abs(total - 1.0) > MASS_TOLERANCE:
                raise ImproperDistribution(
                    f"Distribution of {target} has total mass {total}; sampling needs mass 1",
                    variable=target,
                )
            picks = rng.choice(len(entries), size=size, p=weights / total)
            return _value_column([v for v, _ in entries], f"Distribution of {target}")[picks]
        case Normal(mean, variance):
            mu = _as_float(evaluate_batch(mean, columns, size, defs))
            var = _as_float(evaluate_batch(variance, columns, size, defs))
            if np.any(~(var > 0)):
                raise InvalidVariance(float(var[~(var > 0)][0]))
            k = rng.integers(0, UNIT_STEPS, size=size, dtype=np.int64)
            u = (k + 0.5) / UNIT_STEPS
            return mu + np.sqrt(var) * normal_ppf(u)
        case CondDist(branches, otherwise):
            out = None
            pending = np.arange(size)
            for guard, branch in branches:
                chosen = _as_bool(evaluate_batch(guard, _take(columns, pending), len(pending), defs), "Guard")
                hit = pending[chosen]
                if len(hit):
                    values = sample_dist(branch, _take(columns, hit), len(hit), rng, defs, target)
                    out = _scatter(out, hit, values, size)
                pending = pending[~chosen]
            if len(pending):
                values = sample_dist(otherwise, _take(columns, pending), len(pending), rng, defs, target)
                out = _scatter(out, pending, values, size)
            return _tidy(out) if out is not None else np.empty(0, dtype=float)
    raise TypeError(f"Not a distribution term: {d!r}")


def _sample_update(u: Update, columns: Columns, size: int, rng, defs) -> np.ndarray:
    if isinstance(u.body, Scope):
        inner = run_batch(u.body.comp, dict(columns), size, rng, defs)
        if u.body.result not in inner:
            raise UnknownVariable(u.body.result)
        return inner[u.body.result]
    return sample_dist(u.body, columns, size, rng, defs, u.target)


def run_batch(c: Comp, columns: Columns, size: int, rng: np.random.Generator,
              defs: Mapping[str, FunctionDef]) -> Columns:
    """Execute c for `size` sample indices; returns the variable columns."""
    env, steps = flatten(c)
    for var, dist in env:
        columns[var] = sample_dist(dist, columns, size, rng, defs, var)
    for s in steps:
        if s.parallel:
            clash = independence_conflict(s.updates)
            if clash is not None:
                raise IndependenceViolation(clash)
        fresh = {u.target: _sample_update(u, columns, size, rng, defs) for u in s.updates}
        columns.update(fresh)
    return columns


def block_rng(seed: int, block: int) -> np.random.Generator:
    """Independent counter-based stream for one block of sample indices."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))


def _python_value(value) -> Literal:
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def sample_run(c: Comp, rng: np.random.Generator, defs: Optional[Mapping[str, FunctionDef]] = None) -> dict:
    """One valuation drawn by executing c."""
    columns = run_batch(c, {}, 1, rng, defs or {})
    return {v: _python_value(column[0]) for v, column in sorted(columns.items())}


# ============================================================================
# Estimators
# ============================================================================

def _blocks(cfg: SampleConfig) -> list[tuple[int, int]]:
    count = math.ceil(cfg.n / cfg.block_size)
    return [(b, min(cfg.block_size, cfg.n - b * cfg.block_size)) for b in range(count)]


def _map_blocks(fn, cfg: SampleConfig) -> list:
    blocks = _blocks(cfg)
    logger.info(f"Sampling n={cfg.n} seed={cfg.seed} blocks={len(blocks)} workers={cfg.workers}")
    if cfg.workers == 1:
        return [fn(b, size) for b, size in blocks]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(lambda block: fn(*block), blocks))


def estimate_prob(c: Comp, e: Event, cfg: SampleConfig,
                  defs: Optional[Mapping[str, FunctionDef]] = None) -> Estimate:
    """Hit fraction of the event with a Wilson-score half-width."""
    defs = defs or {}

    def count_hits(block: int, size: int) -> int:
        columns = run_batch(c, {}, size, block_rng(cfg.seed, block), defs)
        holds = _as_bool(evaluate_batch(e.predicate, columns, size, defs), "Event predicate")
        return int(np.count_nonzero(holds))

    hits = sum(_map_blocks(count_hits, cfg))
    return Estimate(
        p_hat=hits / cfg.n,
        half_width=wilson_half_width(hits, cfg.n, cfg.gamma),
        n=cfg.n,
        seed=cfg.seed,
        gamma=cfg.gamma,
        hits=hits,
    )


def estimate_moments(c: Comp, target: Expr, cfg: SampleConfig,
                     defs: Optional[Mapping[str, FunctionDef]] = None) -> Moments:
    """Sample mean and variance of a numeric expression, with standard errors."""
    defs = defs or {}

    def collect(block: int, size: int) -> np.ndarray:
        columns = run_batch(c, {}, size, block_rng(cfg.seed, block), defs)
        return _as_float(evaluate_batch(target, columns, size, defs))

    values = np.concatenate(_map_blocks(collect, cfg))
    n = len(values)
    mean = float(values.mean())
    if n < 2:
        return Moments(mean, 0.0, 0.0, 0.0, n, cfg.seed)
    centered = values - mean
    variance = float(centered @ centered / (n - 1))
    m4 = float(np.mean(centered ** 4))
    se_variance = math.sqrt(max(m4 - variance * variance * (n - 3) / (n - 1), 0.0) / n)
    return Moments(mean, variance, math.sqrt(variance / n), se_variance, n, cfg.seed)
