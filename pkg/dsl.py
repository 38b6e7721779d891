"""
System Description Language

Text format for systems, events and goals, parsed with pyparsing and
printed back in a normal form that reparses to a structurally equal term.

Features:
- Declarations: `type`, `var`, `const`, `fun`, `dist`, one `system` block
- Updates `x ~ dist`, blocks `unit {}`, `par {}`, `bind {}`,
  scoped updates `r ~ scope(r) { ... }` and `repeat n { ... }`
- Distributions: point(e), uniform(T), normal(m, v), {lit: w, ...},
  named tables and if/elif/else conditionals
- Expressions with the usual precedence: or < and < not < comparison < +,- < *,/ < unary minus
- Identifiers may carry primes (c', p', mu_E')
- Events (`s = stack2`) and goals (`Pr(s = stack2) < 0.1`)
- Constant overrides for parameterized systems (`--set val_c=blue`)
- ParseError with line and column
"""

import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Optional, Union

import pyparsing as pp

from errors import ParseError, UnknownVariable
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
    Goal,
    IfExpr,
    Literal,
    Neg,
    Normal,
    Not,
    Or,
    PointMass,
    Scope,
    Step,
    Table,
    UniformFinite,
    Unit,
    Update,
    Var,
    build,
    comp_inputs,
    comp_writes,
    flatten,
    free_vars,
    is_finite_decimal,
    is_number,
    par,
    seq,
    step,
    substitute,
    unroll_loop,
)


logger = logging.getLogger(__name__)

pp.ParserElement.enable_packrat()

BUILTIN_TYPES = {"Bool": (True, False)}
NUMERIC_CARRIERS = ("Int", "Real")

RESERVED = {
    "if", "then", "elif", "else", "and", "or", "not", "true", "false",
    "point", "uniform", "normal", "scope", "par", "bind", "unit", "repeat",
    "system", "type", "var", "const", "fun", "dist",
}


# ============================================================================
# Unresolved references
# ============================================================================

@dataclass(frozen=True)
class _DistRef(DistTerm):
    name: str


@dataclass(frozen=True)
class _UniformRef(DistTerm):
    carrier: str


# ============================================================================
# Grammar
# ============================================================================

def _fold_binary(make):
    def action(t):
        items = t[0]
        result = items[0]
        for op, rhs in zip(items[1::2], items[2::2]):
            result = make(op, result, rhs)
        return result
    return action


def _negate(t):
    arg = t[0][-1]
    for _ in t[0][:-1]:
        arg = Const(-arg.value) if isinstance(arg, Const) and is_number(arg.value) else Neg(arg)
    return arg


def _negate_bool(t):
    arg = t[0][-1]
    for _ in t[0][:-1]:
        arg = Not(arg)
    return arg


def _if_expr(make):
    def action(t):
        items = list(t)
        otherwise = items[-1]
        pairs = items[:-1]
        return make(tuple(zip(pairs[0::2], pairs[1::2])), otherwise)
    return action


def _setup():
    LPAR, RPAR = pp.Suppress("("), pp.Suppress(")")
    LBRACE, RBRACE = pp.Suppress("{"), pp.Suppress("}")
    COMMA, COLON, SEMI = pp.Suppress(","), pp.Suppress(":"), pp.Suppress(";")
    K = {word: pp.Keyword(word).suppress() for word in RESERVED}

    ident = pp.Regex(r"[A-Za-z_][A-Za-z0-9_]*'*").set_name("identifier")
    ident.add_condition(lambda t: t[0] not in RESERVED, message="reserved word")

    # `p/q` without spaces is one rational literal unless it continues a division
    rational = pp.Regex(r"\d+/\d+(?![.\d])").set_name("rational")
    rational.add_condition(lambda s, loc, t: not s[:loc].rstrip().endswith("/"))
    rational.set_parse_action(lambda t: Const(Fraction(t[0])))
    number = pp.Regex(r"\d+(?:\.\d*)?(?:[eE][-+]?\d+)?").set_name("number")
    number.set_parse_action(lambda t: Const(Fraction(t[0])))
    signed = pp.Regex(r"-?\d+/\d+(?![.\d])|-?\d+(?:\.\d*)?(?:[eE][-+]?\d+)?").set_name("number")
    signed.set_parse_action(lambda t: Fraction(t[0]))
    boolean = (pp.Keyword("true") | pp.Keyword("false")).set_parse_action(lambda t: t[0] == "true")

    # literals in tables and type declarations
    literal = signed | boolean | ident.copy()

    expr = pp.Forward().set_name("expression")
    call = (ident + LPAR + pp.Optional(pp.DelimitedList(expr)) + RPAR).set_parse_action(
        lambda t: Call(t[0], tuple(t[1:]))
    )
    var_ref = ident.copy().add_parse_action(lambda t: Var(t[0]))
    const_bool = boolean.copy().add_parse_action(lambda t: Const(t[0]))
    if_expr = (
        K["if"] + expr + K["then"] + expr
        + pp.ZeroOrMore(K["elif"] + expr + K["then"] + expr)
        + K["else"] + expr
    ).set_parse_action(_if_expr(IfExpr))
    operand = rational | number | const_bool | if_expr | call | var_ref

    expr <<= pp.infix_notation(operand, [
        (pp.Literal("-"), 1, pp.OpAssoc.RIGHT, _negate),
        (pp.one_of("* /"), 2, pp.OpAssoc.LEFT, _fold_binary(BinOp)),
        (pp.one_of("+ -"), 2, pp.OpAssoc.LEFT, _fold_binary(BinOp)),
        (pp.one_of("<= >= != < > ="), 2, pp.OpAssoc.LEFT, _fold_binary(Cmp)),
        (pp.Keyword("not"), 1, pp.OpAssoc.RIGHT, _negate_bool),
        (pp.Keyword("and"), 2, pp.OpAssoc.LEFT, lambda t: And(tuple(t[0][0::2]))),
        (pp.Keyword("or"), 2, pp.OpAssoc.LEFT, lambda t: Or(tuple(t[0][0::2]))),
    ])

    dist = pp.Forward().set_name("distribution")
    point = (K["point"] + LPAR + expr + RPAR).set_parse_action(lambda t: PointMass(t[0]))
    uniform = (K["uniform"] + LPAR + ident + RPAR).set_parse_action(lambda t: _UniformRef(t[0]))
    normal = (K["normal"] + LPAR + expr + COMMA + expr + RPAR).set_parse_action(
        lambda t: Normal(t[0], t[1])
    )
    ratio = (LPAR + signed + pp.Suppress("/") + signed + RPAR).set_parse_action(lambda t: t[0] / t[1])
    entry = pp.Group(literal + COLON + (ratio | signed))
    table = (LBRACE + pp.DelimitedList(entry) + RBRACE).set_parse_action(
        lambda t: Table(tuple((e[0], e[1]) for e in t))
    )
    cond = (
        K["if"] + expr + K["then"] + dist
        + pp.ZeroOrMore(K["elif"] + expr + K["then"] + dist)
        + K["else"] + dist
    ).set_parse_action(_if_expr(CondDist))
    named = ident.copy().add_parse_action(lambda t: _DistRef(t[0]))
    dist <<= point | uniform | normal | table | cond | named

    item = pp.Forward()
    block = LBRACE + pp.ZeroOrMore(item) + RBRACE
    scoped = (ident + pp.Suppress("~") + K["scope"] + pp.Optional(LPAR + ident + RPAR, default="")
              + pp.Group(block)).set_parse_action(
        lambda t: Update(t[0], Scope(seq(*t[2]), t[1] or t[0]))
    )
    plain = (ident + pp.Suppress("~") + dist).set_parse_action(lambda t: Update(t[0], t[1]))
    update = scoped | plain
    updates = LBRACE + pp.ZeroOrMore(update + pp.Optional(SEMI)) + RBRACE
    unit = (K["unit"] + LBRACE + pp.ZeroOrMore(plain + pp.Optional(SEMI)) + RBRACE).set_parse_action(
        lambda t: Unit(tuple((u.target, u.body) for u in t))
    )
    par_block = (K["par"] + updates).set_parse_action(lambda t: par(*t))
    bind_block = (K["bind"] + updates).set_parse_action(lambda t: step(*t))
    repeat = (K["repeat"] + pp.Regex(r"\d+") + pp.Group(block)).set_parse_action(
        lambda t: unroll_loop(seq(*t[1]), int(t[0]))
    )
    single = update.copy().add_parse_action(lambda t: step(t[0]))
    item <<= (unit | par_block | bind_block | repeat | single) + pp.Optional(SEMI)

    type_decl = pp.Group(pp.Keyword("type") + ident + pp.Suppress("=") + LBRACE
                         + pp.Group(pp.DelimitedList(literal)) + RBRACE)
    var_decl = pp.Group(pp.Keyword("var") + ident + COLON + ident)
    const_decl = pp.Group(pp.Keyword("const") + ident + pp.Suppress("=") + expr)
    fun_decl = pp.Group(pp.Keyword("fun") + ident + LPAR + pp.Group(pp.Optional(pp.DelimitedList(ident)))
                        + RPAR + pp.Optional(pp.Suppress("=") + expr))
    dist_decl = pp.Group(pp.Keyword("dist") + ident + pp.Suppress("=") + dist)
    system_decl = pp.Group(pp.Keyword("system") + ident + pp.Group(block))
    declaration = type_decl | var_decl | const_decl | fun_decl | dist_decl | system_decl

    relation = pp.one_of("<= < =")
    goal = pp.Keyword("Pr").suppress() + LPAR + expr + RPAR + relation + signed

    program = pp.ZeroOrMore(declaration)
    for element in (program, expr, goal):
        element.ignore(pp.python_style_comment)
    return program, expr, goal


PROGRAM, EXPRESSION, GOAL = _setup()


def _parse(element: pp.ParserElement, text: str) -> pp.ParseResults:
    try:
        return element.parse_string(text, parse_all=True)
    except pp.ParseBaseException as e:
        raise ParseError(e.msg, e.lineno, e.col)
    except (ValueError, ZeroDivisionError) as e:
        raise ParseError(str(e))


# ============================================================================
# System files
# ============================================================================

@dataclass(frozen=True)
class SystemFile:
    """Declarations plus the single computation of a system file."""
    name: str
    comp: Comp
    types: dict[str, tuple[Literal, ...]] = field(default_factory=dict)
    variables: dict[str, str] = field(default_factory=dict)
    consts: dict[str, Expr] = field(default_factory=dict)
    functions: dict[str, tuple[tuple[str, ...], Optional[Expr]]] = field(default_factory=dict)
    dists: dict[str, DistTerm] = field(default_factory=dict)

    @property
    def defs(self) -> dict[str, FunctionDef]:
        """Registered definitions; constants are zero-arity functions."""
        result = {name: FunctionDef((), value) for name, value in self.consts.items()}
        for name, (params, body) in self.functions.items():
            if body is not None:
                result[name] = FunctionDef(params, body)
        return result

    @property
    def enum_values(self) -> dict[str, str]:
        return {str(v): t for t, values in self.types.items() for v in values if isinstance(v, str)}

    def resolver(self) -> "_Resolver":
        return _Resolver(self)

    def with_constants(self, overrides: Mapping[str, str]) -> "SystemFile":
        """Replace constant values (literal text: number, true/false or enum value)."""
        consts = dict(self.consts)
        for name, text in overrides.items():
            if name not in consts:
                raise ParseError(f"Unknown constant '{name}' (declared: {sorted(consts)})")
            consts[name] = self.resolver().expr(parse_expr(text))
            logger.info(f"Constant {name} set to {text}")
        return replace(self, consts=consts)

    def parse_event(self, text: str) -> Event:
        predicate = self.resolver().expr(parse_expr(text))
        self.check_reads(predicate, self.comp)
        return Event(predicate)

    def parse_goal(self, text: str, comp: Optional[Comp] = None) -> Goal:
        """`Pr(event) < eps` over this system's computation (or `comp`)."""
        t = _parse(GOAL, text)
        predicate, relation, bound = self.resolver().expr(t[0]), t[1], t[2]
        self.check_reads(predicate, comp or self.comp)
        try:
            return Goal(comp or self.comp, Event(predicate), relation, bound)
        except ValueError as e:
            raise ParseError(str(e))

    def check_reads(self, e: Expr, comp: Comp):
        """Events may name declared inputs and variables the computation binds."""
        unknown = free_vars(e) - set(self.variables) - comp_writes(comp)
        if unknown:
            raise UnknownVariable(sorted(unknown)[0])


class _Resolver:
    """Turns bare names into enum constants, constant calls, tables and carriers."""

    def __init__(self, system: SystemFile):
        self.system = system
        self.mapping: dict[str, Expr] = {name: Const(name) for name in system.enum_values}
        self.mapping.update({name: Call(name, ()) for name in system.consts})
        self.mapping.update({name: Call(name, ()) for name, (params, _) in system.functions.items() if not params})

    def expr(self, e: Expr, bound: tuple[str, ...] = ()) -> Expr:
        if bound:
            return substitute(e, {k: v for k, v in self.mapping.items() if k not in bound})
        return substitute(e, self.mapping)

    def dist(self, d: DistTerm) -> DistTerm:
        match d:
            case _DistRef(name):
                if name not in self.system.dists:
                    raise ParseError(f"Unknown distribution '{name}'")
                return self.system.dists[name]
            case _UniformRef(carrier):
                values = self.system.types.get(carrier, BUILTIN_TYPES.get(carrier))
                if values is None:
                    raise ParseError(f"Unknown type '{carrier}'")
                return UniformFinite(carrier, tuple(values))
            case PointMass(value):
                return PointMass(self.expr(value))
            case Normal(mean, variance):
                return Normal(self.expr(mean), self.expr(variance))
            case CondDist(branches, otherwise):
                return CondDist(
                    tuple((self.expr(g), self.dist(b)) for g, b in branches), self.dist(otherwise)
                )
        return d

    def update(self, u: Update) -> Update:
        if isinstance(u.body, Scope):
            return Update(u.target, Scope(self.comp(u.body.comp), u.body.result))
        return Update(u.target, self.dist(u.body))

    def comp(self, c: Comp) -> Comp:
        env, steps = flatten(c)
        return build(
            [(v, self.dist(d)) for v, d in env],
            [Step(tuple(self.update(u) for u in s.updates), s.parallel) for s in steps],
        )


def parse_expr(text: str) -> Expr:
    """Unresolved expression (bare names stay variables)."""
    return _parse(EXPRESSION, text)[0]


def parse_system(text: str) -> SystemFile:
    """Parse a system file; exactly one `system` block is required."""
    if not text.strip():
        raise ParseError("Empty system file", 1, 1)
    declarations = _parse(PROGRAM, text)
    types, variables, consts, functions, dist_decls = {}, {}, {}, {}, []
    systems = []
    for decl in declarations:
        kind, name = decl[0], decl[1]
        match kind:
            case "type":
                types[name] = tuple(decl[2])
            case "var":
                variables[name] = decl[2]
            case "const":
                consts[name] = decl[2]
            case "fun":
                functions[name] = (tuple(decl[2]), decl[3] if len(decl) > 3 else None)
            case "dist":
                dist_decls.append((name, decl[2]))
            case "system":
                systems.append((name, seq(*decl[2])))
    if len(systems) != 1:
        raise ParseError(f"Expected exactly one system block, found {len(systems)}")
    name, raw = systems[0]

    system = SystemFile(name, raw, types, variables, consts, functions)
    resolver = system.resolver()
    system = replace(
        system,
        consts={k: resolver.expr(v) for k, v in consts.items()},
        functions={
            k: (params, resolver.expr(body, params) if body is not None else None)
            for k, (params, body) in functions.items()
        },
    )

    dists: dict[str, DistTerm] = {}
    for dist_name, raw_dist in dist_decls:
        resolved = replace(system, dists=dists).resolver().dist(raw_dist)
        if isinstance(resolved, Table):
            resolved = Table(resolved.entries, name=dist_name)
        dists[dist_name] = resolved
    system = replace(system, dists=dists)

    shadowed = (set(consts) | set(system.enum_values)) & comp_writes(raw)
    if shadowed:
        raise ParseError(f"Names declared as constants or enum values are also bound: {sorted(shadowed)}")
    try:
        system = replace(system, comp=system.resolver().comp(raw))
    except ValueError as e:
        raise ParseError(str(e))
    _check_declarations(system)
    logger.debug(f"Parsed system {name}: {len(flatten(system.comp)[1])} steps")
    return system


def load_system(path: Union[str, Path]) -> SystemFile:
    return parse_system(Path(path).read_text(encoding="utf-8"))


def _check_declarations(system: SystemFile):
    """Carriers name known types; every read is a declared input or bound earlier."""
    for name, carrier in system.variables.items():
        if carrier not in system.types and carrier not in BUILTIN_TYPES and carrier not in NUMERIC_CARRIERS:
            raise ParseError(f"Unknown type '{carrier}' for variable {name}")
    for name, value in system.consts.items():
        if free_vars(value):
            raise ParseError(f"Constant {name} reads variable '{sorted(free_vars(value))[0]}'")
    for name, (params, body) in system.functions.items():
        stray = free_vars(body) - set(params) if body is not None else frozenset()
        if stray:
            raise ParseError(f"Function {name} reads '{sorted(stray)[0]}', which is not a parameter")
    undeclared = comp_inputs(system.comp) - set(system.variables)
    if undeclared:
        raise UnknownVariable(sorted(undeclared)[0])


# ============================================================================
# Printer
# ============================================================================

PREC = {"if": 0, "or": 1, "and": 2, "not": 3, "cmp": 4, "+": 5, "-": 5, "*": 6, "/": 6, "neg": 7, "atom": 8}


def format_number(value) -> str:
    """Exact decimal text for finite decimals, the rational literal `p/q` otherwise."""
    if isinstance(value, float):
        return repr(value)
    value = Fraction(value)
    if value.denominator == 1:
        return str(value.numerator)
    if not is_finite_decimal(value):
        return f"{value.numerator}/{value.denominator}"
    k = 0
    while (value * 10 ** k).denominator != 1:
        k += 1
    digits = str(abs(value * 10 ** k).numerator).rjust(k + 1, "0")
    sign = "-" if value < 0 else ""
    return f"{sign}{digits[:-k]}.{digits[-k:]}"


def format_literal(value: Literal) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if is_number(value):
        return format_number(value)
    return str(value)


def _prec(e: Expr) -> int:
    match e:
        case IfExpr():
            return PREC["if"]
        case Or():
            return PREC["or"]
        case And():
            return PREC["and"]
        case Not():
            return PREC["not"]
        case Cmp():
            return PREC["cmp"]
        case BinOp(op, _, _):
            return PREC[op]
        case Neg():
            return PREC["neg"]
        case Const(value) if is_number(value) and value < 0:
            return PREC["neg"]
        case Const(value) if is_number(value) and not is_finite_decimal(Fraction(value)):
            return PREC["*"]
    return PREC["atom"]


def _wrap(e: Expr, needs: bool) -> str:
    text = print_expr(e)
    return f"({text})" if needs else text


def print_expr(e: Expr) -> str:
    match e:
        case Const(value):
            return format_literal(value)
        case Var(name):
            return name
        case Call(name, ()):
            return name
        case Call(name, args):
            return f"{name}({', '.join(print_expr(a) for a in args)})"
        case BinOp(op, left, right) | Cmp(op, left, right):
            p = _prec(e)
            return f"{_wrap(left, _prec(left) < p)} {op} {_wrap(right, _prec(right) <= p)}"
        case Neg(arg):
            return "-" + _wrap(arg, _prec(arg) <= PREC["neg"])
        case Not(arg):
            return "not " + _wrap(arg, _prec(arg) < PREC["not"])
        case And(args) | Or(args):
            p, word = _prec(e), "and" if isinstance(e, And) else "or"
            return f" {word} ".join(_wrap(a, _prec(a) <= p) for a in args)
        case IfExpr(branches, otherwise):
            parts = [f"{'if' if k == 0 else 'elif'} {print_expr(g)} then {print_expr(b)}"
                     for k, (g, b) in enumerate(branches)]
            return " ".join(parts) + f" else {print_expr(otherwise)}"
    raise TypeError(f"Not an expression: {e!r}")


def print_dist(d: DistTerm, named: Optional[Mapping[str, DistTerm]] = None) -> str:
    for name, candidate in (named or {}).items():
        if candidate == d:
            return name
    match d:
        case PointMass(value):
            return f"point({print_expr(value)})"
        case UniformFinite(carrier, _):
            return f"uniform({carrier})"
        case Normal(mean, variance):
            return f"normal({print_expr(mean)}, {print_expr(variance)})"
        case Table(entries):
            return "{" + ", ".join(f"{format_literal(v)}: {format_number(w)}" for v, w in entries) + "}"
        case CondDist(branches, otherwise):
            parts = [f"{'if' if k == 0 else 'elif'} {print_expr(g)} then {print_dist(b, named)}"
                     for k, (g, b) in enumerate(branches)]
            return " ".join(parts) + f" else {print_dist(otherwise, named)}"
    raise TypeError(f"Not a distribution term: {d!r}")


def print_update(u: Update, named=None, indent: int = 1) -> list[str]:
    pad = "  " * indent
    if isinstance(u.body, Scope):
        lines = [f"{pad}{u.target} ~ scope({u.body.result}) {{"]
        lines += print_comp(u.body.comp, named, indent + 1)
        return lines + [f"{pad}}}"]
    return [f"{pad}{u.target} ~ {print_dist(u.body, named)}"]


def _print_block(keyword: str, updates, named, indent: int) -> list[str]:
    pad = "  " * indent
    lines = [f"{pad}{keyword} {{"]
    for u in updates:
        lines += print_update(u, named, indent + 1)
    return lines + [f"{pad}}}"]


def print_comp(c: Comp, named: Optional[Mapping[str, DistTerm]] = None, indent: int = 1) -> list[str]:
    """One line per update; blocks for unit environments, parallel and multi-update steps."""
    env, steps = flatten(c)
    lines = []
    if env:
        lines += _print_block("unit", [Update(v, d) for v, d in env], named, indent)
    for s in steps:
        if s.parallel:
            lines += _print_block("par", s.updates, named, indent)
        elif len(s.updates) > 1:
            lines += _print_block("bind", s.updates, named, indent)
        else:
            lines += print_update(s.updates[0], named, indent)
    return lines


def print_system(system: SystemFile) -> str:
    lines = []
    for name, values in system.types.items():
        lines.append(f"type {name} = {{{', '.join(format_literal(v) for v in values)}}}")
    for name, carrier in system.variables.items():
        lines.append(f"var {name} : {carrier}")
    for name, value in system.consts.items():
        lines.append(f"const {name} = {print_expr(value)}")
    for name, (params, body) in system.functions.items():
        head = f"fun {name}({', '.join(params)})"
        lines.append(head if body is None else f"{head} = {print_expr(body)}")
    for name, d in system.dists.items():
        lines.append(f"dist {name} = {print_dist(d, _before(system.dists, name))}")
    if lines:
        lines.append("")
    lines.append(f"system {system.name} {{")
    lines += print_comp(system.comp, system.dists)
    lines.append("}")
    return "\n".join(lines) + "\n"


def _before(dists: Mapping[str, DistTerm], name: str) -> dict[str, DistTerm]:
    """Named distributions declared before `name`."""
    result = {}
    for k, v in dists.items():
        if k == name:
            break
        result[k] = v
    return result
