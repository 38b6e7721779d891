"""
Soundness Batteries for the Rewrite and Goal Rules

Features:
- Randomized finite-discrete computations (seeded) for every term rule:
  the joint distribution on the variables both sides share is unchanged
- Discrete computation agrees with exact enumeration
- Event weakening never strengthens: the original probability is at most the premise's
- Envelope closures are conservative against an independent high-precision oracle
- Monte-Carlo agreement of the bundled systems with their rewritten forms
"""

import random
from fractions import Fraction

import mpmath
import pytest

from errors import BadPath, ObligationFalse, PreconditionFailed
from exact_semantics import eval_joint, prob_event
from numeric import NormalParams, build_lower_envelope, build_upper_envelope
from rules import (
    rule_congruence,
    rule_discrete_prob_computation,
    rule_event_approx_lower,
    rule_event_approx_upper,
    rule_event_weakening,
    rule_function_propagation,
    rule_omit_unused,
    rule_permutation,
    run_script,
)
from sampling import SampleConfig, estimate_moments, estimate_prob
from terms import Cmp, Const, Event, Goal, Normal, Unit, Var, flatten

from tests.conftest import asset
from tests.generators import project, random_comp, random_event, random_table
from tests.test_rules import CONV_BELT_SIMPLIFIED, initial

APPLICATIONS = 200
TOLERANCE = Fraction(1, 10 ** 9)


def applications(rule, seed: int, count: int = APPLICATIONS):
    """(original, rewritten, step index) for the first `count` successful applications."""
    rng = random.Random(seed)
    found = []
    attempts = 0
    while len(found) < count:
        attempts += 1
        assert attempts < 200 * count, f"only {len(found)} applications in {attempts} computations"
        comp = random_comp(rng)
        _, steps = flatten(comp)
        for k in range(len(steps)):
            try:
                found.append((comp, rule(comp, f"@{k}"), k))
            except (PreconditionFailed, BadPath):
                continue
    return found[:count]


def assert_same_distribution(before, after):
    joint_before, joint_after = eval_joint(before), eval_joint(after)
    common = set(joint_before.variables) & set(joint_after.variables)
    left, right = project(joint_before, common), project(joint_after, common)
    assert left.keys() == right.keys()
    for key, mass in left.items():
        assert abs(mass - right[key]) <= TOLERANCE


# ============================================================================
# Term Rule Batteries
# ============================================================================

class TestTermRuleSoundness:
    """Each application preserves the distribution of the shared variables."""

    def test_function_propagation(self):
        """An eliminated intermediate leaves the joint; every remaining variable keeps its law."""
        for before, after, _ in applications(rule_function_propagation, seed=101):
            assert_same_distribution(before, after)
            assert set(eval_joint(after).variables) <= set(eval_joint(before).variables)

    def test_omit_unused(self):
        for before, after, _ in applications(rule_omit_unused, seed=102):
            assert_same_distribution(before, after)

    def test_permutation(self):
        for before, after, _ in applications(rule_permutation, seed=103):
            assert_same_distribution(before, after)

    @pytest.mark.parametrize("sub_rule", ["permutation", "function-propagation", "omit-unused"])
    def test_congruence(self, sub_rule):
        def rewrite(comp, path):
            return rule_congruence(comp, path, 2, sub_rule, "@0")

        for before, after, _ in applications(rewrite, seed=104):
            assert_same_distribution(before, after)


# ============================================================================
# Goal Rule Batteries
# ============================================================================

class TestDiscreteComputationSoundness:
    """Eliminating bindings one by one gives the enumerated probability."""

    def test_matches_enumeration(self):
        rng = random.Random(201)
        for _ in range(APPLICATIONS):
            comp = random_comp(rng)
            joint = eval_joint(comp)
            event = random_event(rng, joint.variables)
            goal = Goal(comp, event, "<", Fraction(1))
            value = rule_discrete_prob_computation(goal, "@0", {}, ground=True)
            assert value == prob_event(joint, event)

    def test_split_weights_sum_to_one(self):
        rng = random.Random(202)
        for _ in range(APPLICATIONS):
            comp = random_comp(rng)
            event = random_event(rng, eval_joint(comp).variables)
            parts = rule_discrete_prob_computation(Goal(comp, event, "<", Fraction(1)), "@0", {})
            assert sum(w for w, _ in parts) == 1


class TestEventWeakeningSoundness:
    """An accepted weakening only ever raises the probability."""

    def test_premise_dominates(self):
        rng = random.Random(301)
        accepted = 0
        for _ in range(10 * APPLICATIONS):
            dist, heavier = random_table(rng), random_table(rng)
            event = Event(Cmp("=", Var("x"), Const(Fraction(rng.choice((0, 1, 2))))))
            goal = Goal(Unit((("x", dist),)), event, "<", Fraction(1, 2))
            try:
                premise = rule_event_weakening(goal, heavier)
            except PreconditionFailed:
                continue
            accepted += 1
            original = prob_event(eval_joint(goal.comp), event)
            assert original <= prob_event(eval_joint(premise.comp), event)
            if accepted == APPLICATIONS:
                break
        assert accepted == APPLICATIONS


class TestEnvelopeConservatism:
    """Whenever an envelope closes a tail goal, the true tail is below the bound."""

    def random_goal(self, rng: random.Random, direction: str):
        mean = Fraction(rng.randint(-4, 4), 2)
        variance = Fraction(rng.randint(1, 16), 4)
        sigma = float(variance) ** 0.5
        z = rng.uniform(1.0, 4.0)
        edge = Fraction(float(mean) - z * sigma if direction == "le" else float(mean) + z * sigma)
        op = "<=" if direction == "le" else ">="
        bound = Fraction(rng.uniform(0.0005, 0.2))
        goal = Goal(Unit((("x", Normal(Const(mean), Const(variance))),)),
                    Event(Cmp(op, Var("x"), Const(edge))), "<", bound)
        return goal, NormalParams(float(mean), float(variance)), edge

    def test_upper_envelope(self):
        rng = random.Random(401)
        closed = 0
        for _ in range(APPLICATIONS):
            goal, params, edge = self.random_goal(rng, "le")
            envelope = build_upper_envelope(params, k=8.0, pieces=800)
            try:
                obligation = rule_event_approx_upper(goal, envelope)
            except ObligationFalse:
                continue
            closed += 1
            with mpmath.workdps(30):
                oracle = mpmath.ncdf(mpmath.mpf(float(edge)), mu=params.mean, sigma=mpmath.sqrt(params.variance))
            assert oracle <= obligation.value
            assert oracle < float(goal.bound)
        assert closed >= APPLICATIONS // 4

    def test_lower_envelope(self):
        rng = random.Random(402)
        closed = 0
        for _ in range(APPLICATIONS):
            goal, params, edge = self.random_goal(rng, "ge")
            envelope = build_lower_envelope(params, k=8.0, pieces=800)
            try:
                obligation = rule_event_approx_lower(goal, envelope)
            except ObligationFalse:
                continue
            closed += 1
            with mpmath.workdps(30):
                sigma = mpmath.sqrt(params.variance)
                oracle = 1 - mpmath.ncdf(mpmath.mpf(float(edge)), mu=params.mean, sigma=sigma)
            assert oracle <= obligation.value
            assert oracle < float(goal.bound)
        assert closed >= APPLICATIONS // 4


# ============================================================================
# Rewritten Systems Against Their Originals
# ============================================================================

class TestRewrittenSystemsAgree:
    """Monte-Carlo estimates of the original and the rewritten computation agree."""

    @pytest.mark.parametrize("threshold", ["9.5", "10", "10.5"])
    def test_voter_mean(self, voter_mean, threshold):
        rewritten = run_script(initial(voter_mean), asset("voter_mean.script").read_text()).subject
        event = voter_mean.parse_event(f"r <= {threshold}")
        cfg = SampleConfig(n=50_000, seed=21)
        original = estimate_prob(voter_mean.comp, event, cfg, voter_mean.defs)
        simplified = estimate_prob(rewritten, event, SampleConfig(n=50_000, seed=22), voter_mean.defs)
        assert original.agrees_with(simplified)

    def test_conveyor_belt(self, conv_belt):
        from dsl import parse_system

        simplified = parse_system(CONV_BELT_SIMPLIFIED)
        event = conv_belt.parse_event("l <= p - x")
        original = estimate_prob(conv_belt.comp, event, SampleConfig(n=100_000, seed=31), conv_belt.defs)
        rewritten = estimate_prob(simplified.comp, event, SampleConfig(n=100_000, seed=32), conv_belt.defs)
        assert 0.0 < original.p_hat < 1.0
        assert original.agrees_with(rewritten)

    @pytest.mark.slow
    def test_conveyor_belt_large(self, conv_belt):
        from dsl import parse_system

        simplified = parse_system(CONV_BELT_SIMPLIFIED)
        event = conv_belt.parse_event("l <= p - x")
        original = estimate_prob(conv_belt.comp, event, SampleConfig(n=1_000_000, seed=33), conv_belt.defs)
        rewritten = estimate_prob(simplified.comp, event, SampleConfig(n=1_000_000, seed=34), conv_belt.defs)
        assert original.agrees_with(rewritten)

    @pytest.mark.slow
    def test_voter_mean_variance_large(self, voter_mean):
        """Mean of three unit-variance sensors: variance 1/3 at a million samples."""
        moments = estimate_moments(voter_mean.comp, Var("r"), SampleConfig(n=1_000_000, seed=41), voter_mean.defs)
        assert abs(moments.variance - 1 / 3) <= 4 * moments.se_variance
