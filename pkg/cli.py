"""
Command-Line Interface for the Reliability Calculus

Features:
- eval: exact event probability of a finite-discrete system
- simulate: Monte-Carlo estimate with a Wilson confidence interval
- rewrite: apply a proof script to a system, print the final term and trace
- check: establish a goal Pr(E) < eps with a proof script
- compare: estimate one event on two systems (or a system and its rewrite)
- moments: sample mean and variance of an expression
- print: parse and re-print a system in normal form
- --json output, --set constant overrides, --verbose logging
- Results log (one ResultRecord line per command)

Exit codes: 0 success / established, 1 not established, 2 user error, 3 internal error.
"""

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass
from datetime import datetime
from fractions import Fraction
from pathlib import Path
from typing import Optional

from config import EngineConfig, load_config
from dsl import SystemFile, load_system, parse_expr, print_comp, print_system
from errors import ConfigError, ContinuousDistributionPresent, ObligationFalse, ReliabilityError, ScriptError
from exact_semantics import eval_joint, prob_event
from rules import ProofState, parse_script, run_script
from sampling import SampleConfig, estimate_moments, estimate_prob
from terms import term_hash

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NOT_ESTABLISHED = 1
EXIT_USER_ERROR = 2
EXIT_INTERNAL_ERROR = 3

SCHEMA_VERSION = 1


# ============================================================================
# Result records
# ============================================================================

@dataclass(frozen=True)
class ResultRecord:
    command: str
    system: str
    inputs_digest: str
    outcome: dict
    elapsed: float

    def to_line(self) -> str:
        timestamp = datetime.now().isoformat()
        outcome = json.dumps(self.outcome, sort_keys=True)
        return (
            f"[{timestamp}] {self.command.upper()} | System: {self.system} | "
            f"Inputs: {self.inputs_digest[:16]} | Outcome: {outcome} | {self.elapsed:.3f}s\n"
        )


def inputs_digest(*parts: str) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(part.encode())
        h.update(b"\0")
    return h.hexdigest()


def log_result(record: ResultRecord, path: str) -> bool:
    """Append a record to the results log; a failed write only warns."""
    try:
        with open(path, "a") as f:
            f.write(record.to_line())
        return True
    except OSError as e:
        logger.warning(f"Failed to write results log {path}: {e}")
        return False


def _probability(value) -> dict:
    data = {"probability": float(value)}
    if isinstance(value, Fraction):
        data["exact"] = str(value)
    return data


# ============================================================================
# Commands
# ============================================================================

def cmd_eval(system: SystemFile, event: str, config: EngineConfig) -> dict:
    """Exact Pr([C]E) by enumeration."""
    e = system.parse_event(event)
    try:
        joint = eval_joint(system.comp, system.defs, config.max_valuations)
    except ContinuousDistributionPresent as err:
        err.detail += "; use `simulate` for systems with continuous distributions"
        raise
    p = prob_event(joint, e, system.defs)
    logger.info(f"eval {system.name}: Pr({event}) = {float(p):.6g} over {len(joint.entries)} valuations")
    return {"command": "eval", "system": system.name, "event": event,
            "valuations": len(joint.entries), **_probability(p)}


def cmd_simulate(system: SystemFile, event: str, config: EngineConfig, n: Optional[int] = None,
                 seed: Optional[int] = None, gamma: Optional[float] = None) -> dict:
    cfg = SampleConfig.from_engine(config, n, seed, gamma)
    estimate = estimate_prob(system.comp, system.parse_event(event), cfg, system.defs)
    return {"command": "simulate", "system": system.name, "event": event, **estimate.to_dict()}


def _initial_state(system: SystemFile, config: EngineConfig, goals=()) -> ProofState:
    return ProofState.initial(system.comp, goals, system.defs, system.dists, config)


def cmd_rewrite(system: SystemFile, script: str, config: EngineConfig) -> dict:
    """Apply a script to the system's computation."""
    state = run_script(_initial_state(system, config), parse_script(script))
    return {
        "command": "rewrite",
        "system": system.name,
        "term": "\n".join(print_comp(state.subject, system.dists)),
        "term_hash": term_hash(state.subject),
        "trace": [t.to_dict() for t in state.trace],
    }


def cmd_check(system: SystemFile, goal: str, script: str, config: EngineConfig) -> dict:
    """Verdict `established` or `not-established`; the latter is not a refutation."""
    state = _initial_state(system, config, [system.parse_goal(goal)])
    failure = None
    try:
        state = run_script(state, parse_script(script))
    except ScriptError as e:
        if not isinstance(e.cause, ObligationFalse):
            raise
        state, failure = e.state, e
    obligations = [o.to_dict() for r in state.goals for o in r.obligations]
    if failure is not None and failure.cause.obligation is not None:
        obligations.append(failure.cause.obligation.to_dict())
    verdict = "established" if state.established else "not-established"
    logger.info(f"check {system.name}: {goal} -> {verdict}")
    payload = {
        "command": "check",
        "system": system.name,
        "goal": goal,
        "verdict": verdict,
        "goals": [r.to_dict() for r in state.goals],
        "obligations": obligations,
        "trace": [t.to_dict() for t in state.trace],
    }
    if failure is not None:
        payload["failure"] = failure.to_dict()
    return payload


def cmd_compare(system: SystemFile, event: str, config: EngineConfig, other: Optional[SystemFile] = None,
                script: Optional[str] = None, n: Optional[int] = None, seed: Optional[int] = None,
                gamma: Optional[float] = None) -> dict:
    """Estimate one event on two computations with the same seed and sample count."""
    if other is None and script is None:
        raise ConfigError("compare needs a second system or a script to rewrite the first one")
    if other is None:
        rewritten = run_script(_initial_state(system, config), parse_script(script)).subject
        other = SystemFile(system.name + " (rewritten)", rewritten, system.types, system.variables,
                           system.consts, system.functions, system.dists)
    cfg = SampleConfig.from_engine(config, n, seed, gamma)
    first = estimate_prob(system.comp, system.parse_event(event), cfg, system.defs)
    second = estimate_prob(other.comp, other.parse_event(event), cfg, other.defs)
    agree = first.agrees_with(second)
    logger.info(f"compare {system.name} / {other.name}: {first.p_hat:.6g} vs {second.p_hat:.6g} agree={agree}")
    return {
        "command": "compare",
        "system": system.name,
        "other": other.name,
        "event": event,
        "first": first.to_dict(),
        "second": second.to_dict(),
        "agree": agree,
    }


def cmd_moments(system: SystemFile, target: str, config: EngineConfig, n: Optional[int] = None,
                seed: Optional[int] = None) -> dict:
    cfg = SampleConfig.from_engine(config, n, seed)
    moments = estimate_moments(system.comp, system.resolver().expr(parse_expr(target)), cfg, system.defs)
    return {"command": "moments", "system": system.name, "target": target, **moments.to_dict()}


def cmd_print(system: SystemFile) -> dict:
    return {"command": "print", "system": system.name, "text": print_system(system)}


# ============================================================================
# Argument parsing
# ============================================================================

def _overrides(pairs: list[str]) -> dict[str, str]:
    result = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects NAME=VALUE, got '{pair}'")
        key, value = pair.split("=", 1)
        result[key.strip()] = value.strip()
    return result


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reliability", description="Reliability calculus for abstract computations")
    parser.add_argument("--config", help="engine configuration JSON file")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("system", help="system file (.sys)")
        p.add_argument("--set", action="append", default=[], metavar="NAME=VALUE", help="override a constant")
        p.add_argument("--json", metavar="PATH", help="write the JSON result to PATH")
        return p

    def sampling(p: argparse.ArgumentParser):
        p.add_argument("--n", type=int, help="sample count")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--gamma", type=float, help="confidence level")

    p = command("eval", "exact event probability")
    p.add_argument("--event", required=True)

    p = command("simulate", "Monte-Carlo event probability")
    p.add_argument("--event", required=True)
    sampling(p)

    p = command("rewrite", "apply a proof script")
    p.add_argument("--script", required=True)

    p = command("check", "establish a probability bound")
    p.add_argument("--goal", required=True)
    p.add_argument("--script")

    p = command("compare", "compare an event on two computations")
    p.add_argument("--event", required=True)
    p.add_argument("--other", help="second system file")
    p.add_argument("--script", help="rewrite the system with this script and compare against the result")
    sampling(p)

    p = command("moments", "sample moments of an expression")
    p.add_argument("--target", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)

    command("print", "re-print a system in normal form")
    return parser


def resolve_path(path: str, config: EngineConfig) -> Path:
    """A file path as given, else the bundled asset of that name (`coin` -> assets/coin.sys)."""
    candidate = Path(path)
    if candidate.exists():
        return candidate
    bundled = Path(config.assets_dir) / candidate
    for option in (bundled, bundled.with_suffix(".sys")):
        if option.exists():
            return option
    return candidate


def _read(path: Optional[str], config: Optional[EngineConfig] = None) -> str:
    if not path:
        return ""
    return resolve_path(path, config or EngineConfig()).read_text(encoding="utf-8")


def dispatch(args: argparse.Namespace, config: EngineConfig) -> dict:
    overrides = _overrides(args.set)
    system = load_system(resolve_path(args.system, config))
    if overrides:
        system = system.with_constants(overrides)
    match args.command:
        case "eval":
            return cmd_eval(system, args.event, config)
        case "simulate":
            return cmd_simulate(system, args.event, config, args.n, args.seed, args.gamma)
        case "rewrite":
            return cmd_rewrite(system, _read(args.script, config), config)
        case "check":
            return cmd_check(system, args.goal, _read(args.script, config), config)
        case "compare":
            other = load_system(resolve_path(args.other, config)) if args.other else None
            if other is not None and overrides:
                other = other.with_constants(overrides)
            script = _read(args.script, config) if args.script else None
            return cmd_compare(system, args.event, config, other, script, args.n, args.seed, args.gamma)
        case "moments":
            return cmd_moments(system, args.target, config, args.n, args.seed)
        case "print":
            return cmd_print(system)
    raise ReliabilityError(f"Unknown command {args.command}")


def render(payload: dict) -> str:
    """Human-readable summary of a command result."""
    match payload["command"]:
        case "eval":
            exact = f" (= {payload['exact']})" if "exact" in payload else ""
            return f"Pr({payload['event']}) = {payload['probability']:.10g}{exact}"
        case "simulate":
            return (f"Pr({payload['event']}) ~ {payload['p_hat']:.6g} +/- {payload['half_width']:.3g} "
                    f"(n={payload['n']}, seed={payload['seed']}, gamma={payload['gamma']})")
        case "rewrite":
            return payload["term"]
        case "check":
            lines = [f"{payload['goal']}: {payload['verdict']}"]
            for o in payload["obligations"]:
                lines.append(f"  obligation {o['statement']}: value {o['value']:.6g} holds={o['holds']}")
            if "failure" in payload:
                lines.append(f"  stopped at step {payload['failure']['step']}: {payload['failure']['detail']}")
            return "\n".join(lines)
        case "compare":
            a, b = payload["first"], payload["second"]
            return (f"{payload['system']}: {a['p_hat']:.6g} +/- {a['half_width']:.3g}\n"
                    f"{payload['other']}: {b['p_hat']:.6g} +/- {b['half_width']:.3g}\n"
                    f"agree: {payload['agree']}")
        case "moments":
            return (f"mean {payload['mean']:.6g} (se {payload['se_mean']:.3g}), "
                    f"variance {payload['variance']:.6g} (se {payload['se_variance']:.3g})")
        case "print":
            return payload["text"].rstrip("\n")
    return json.dumps(payload, sort_keys=True, indent=2)


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    started = time.perf_counter()
    config = EngineConfig()
    try:
        config = load_config(args.config)
        payload = dispatch(args, config)
        code = EXIT_NOT_ESTABLISHED if payload.get("verdict") == "not-established" else EXIT_OK
    except ReliabilityError as e:
        logger.error(f"{args.command} failed: {e.detail}")
        payload, code = {"command": args.command, **e.to_dict()}, EXIT_USER_ERROR
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        payload = {"command": args.command, "error_code": "FILE_ERROR", "detail": str(e)}
        code = EXIT_USER_ERROR
    except Exception as e:
        logger.exception(f"Internal error in {args.command}")
        payload = {"command": args.command, "error_code": "INTERNAL_ERROR", "detail": str(e)}
        code = EXIT_INTERNAL_ERROR

    payload["schema_version"] = SCHEMA_VERSION
    if "error_code" in payload:
        print(f"error [{payload['error_code']}]: {payload['detail']}", file=sys.stderr)
    else:
        print(render(payload))
    if getattr(args, "json", None):
        try:
            Path(args.json).write_text(json.dumps(payload, sort_keys=True, indent=2, default=str) + "\n")
        except OSError as e:
            logger.error(f"{args.command}: cannot write {args.json}: {e}")
            print(f"error [FILE_ERROR]: cannot write {args.json}: {e.strerror or e}", file=sys.stderr)
            payload = {**payload, "error_code": "FILE_ERROR", "detail": str(e)}
            code = EXIT_USER_ERROR

    elapsed = time.perf_counter() - started
    system_path = resolve_path(args.system, config)
    system_text = system_path.read_text(encoding="utf-8") if system_path.exists() else args.system
    record = ResultRecord(args.command, system_path.stem,
                          inputs_digest(system_text,
                                        *(f"{k}={v}" for k, v in sorted(vars(args).items()) if k != "system")),
                          {k: v for k, v in payload.items() if k in ("verdict", "probability", "p_hat",
                                                                      "agree", "error_code", "term_hash")},
                          elapsed)
    log_result(record, config.results_log)
    return code


if __name__ == "__main__":
    sys.exit(main())
