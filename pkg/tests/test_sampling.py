"""
Tests for Monte-Carlo Execution

Estimates on the bundled systems against their exact values, reproducibility
across worker counts, confidence half-widths and moment estimates.
"""

from fractions import Fraction

import numpy as np
import pytest

from dsl import SystemFile, parse_system
from errors import ConfigError, EvaluationError, ImproperDistribution, InvalidVariance, UnknownVariable
from exact_semantics import eval_joint, prob_event
from sampling import (
    SampleConfig,
    block_rng,
    estimate_moments,
    estimate_prob,
    sample_run,
    wilson_half_width,
    z_from_confidence,
)
from terms import Cmp, CondDist, Const, Event, Normal, PointMass, Table, Update, Var, seq, step


# ============================================================================
# Configuration Tests
# ============================================================================

class TestSampleConfig:
    """Validation of sampling parameters."""

    def test_sample_count_must_be_positive(self):
        with pytest.raises(ConfigError):
            SampleConfig(n=0)

    def test_confidence_level_open_interval(self):
        with pytest.raises(ConfigError):
            SampleConfig(gamma=1.0)
        with pytest.raises(ConfigError):
            SampleConfig(gamma=0.0)

    def test_seed_range(self):
        with pytest.raises(ConfigError):
            SampleConfig(seed=-1)

    def test_from_engine_defaults(self, engine_config):
        cfg = SampleConfig.from_engine(engine_config, n=500)
        assert cfg.n == 500
        assert cfg.seed == engine_config.default_seed
        assert cfg.gamma == engine_config.default_gamma


# ============================================================================
# Single Run Tests
# ============================================================================

class TestSampleRun:
    """sample_run draws one valuation."""

    def test_coin_valuation(self, coin: SystemFile):
        valuation = sample_run(coin.comp, block_rng(0, 0))
        assert set(valuation) == {"b"}
        assert valuation["b"] in (True, False)

    def test_scope_locals_do_not_leak(self, voter_mean: SystemFile):
        valuation = sample_run(voter_mean.comp, block_rng(3, 0), voter_mean.defs)
        assert set(valuation) == {"x", "r"}
        assert isinstance(valuation["r"], float)

    def test_improper_table_rejected(self):
        half = Table((("a", Fraction(1, 4)), ("b", Fraction(1, 4))))
        with pytest.raises(ImproperDistribution):
            sample_run(step(Update("x", half)), block_rng(0, 0))

    def test_nonpositive_variance_rejected(self):
        comp = step(Update("x", Normal(Const(Fraction(0)), Const(Fraction(-1)))))
        with pytest.raises(InvalidVariance):
            sample_run(comp, block_rng(0, 0))

    def test_unbound_variable(self):
        comp = step(Update("x", Normal(Var("m"), Const(Fraction(1)))))
        with pytest.raises(UnknownVariable):
            sample_run(comp, block_rng(0, 0))

    def test_mixed_kind_table_rejected(self):
        """A table mixing numbers and names has no column type."""
        mixed = Table(((Fraction(1), Fraction(1, 2)), ("red", Fraction(1, 2))))
        with pytest.raises(EvaluationError, match="mixes"):
            sample_run(step(Update("x", mixed)), block_rng(0, 0))

    def test_mixed_kind_conditional_rejected(self):
        guard = Cmp("=", Var("b"), Const(True))
        comp = step(Update("b", Table(((True, Fraction(1, 2)), (False, Fraction(1, 2))))))
        comp = seq(comp, step(Update("x", CondDist(((guard, PointMass(Const(Fraction(1)))),),
                                                    PointMass(Const("red"))))))
        with pytest.raises(EvaluationError):
            estimate_prob(comp, Event(Cmp("=", Var("x"), Const("red"))), SampleConfig(n=1000, seed=1))


# ============================================================================
# Probability Estimate Tests
# ============================================================================

class TestEstimateProb:
    """Hit fractions with Wilson-score half-widths."""

    def test_coin_within_interval(self, coin: SystemFile):
        estimate = estimate_prob(coin.comp, coin.parse_event("b = true"), SampleConfig(n=100_000, seed=7))
        assert abs(estimate.p_hat - 0.5) <= estimate.half_width
        assert estimate.n == 100_000 and estimate.seed == 7

    def test_discrete_sort_within_interval(self, discrete_sort: SystemFile):
        estimate = estimate_prob(discrete_sort.comp, discrete_sort.parse_event("s = stack2"),
                                 SampleConfig(n=200_000, seed=11), discrete_sort.defs)
        assert abs(estimate.p_hat - 0.0970) <= estimate.half_width

    @pytest.mark.slow
    def test_discrete_sort_large_run(self, discrete_sort: SystemFile):
        estimate = estimate_prob(discrete_sort.comp, discrete_sort.parse_event("s = stack2"),
                                 SampleConfig(n=1_000_000, seed=1), discrete_sort.defs)
        assert abs(estimate.p_hat - 0.0970) <= estimate.half_width

    def test_same_seed_same_estimate(self, coin: SystemFile):
        event = coin.parse_event("b = true")
        first = estimate_prob(coin.comp, event, SampleConfig(n=20_000, seed=5))
        second = estimate_prob(coin.comp, event, SampleConfig(n=20_000, seed=5))
        assert first == second

    def test_workers_do_not_change_result(self, voter_mean: SystemFile):
        """Blocks own their random streams, so threading is bit-identical to a serial run."""
        event = voter_mean.parse_event("r <= 10")
        serial = estimate_prob(voter_mean.comp, event, SampleConfig(n=30_000, seed=9, block_size=1000),
                               voter_mean.defs)
        threaded = estimate_prob(voter_mean.comp, event,
                                 SampleConfig(n=30_000, seed=9, block_size=1000, workers=4), voter_mean.defs)
        assert serial == threaded

    def test_half_width_shrinks_with_n(self, coin: SystemFile):
        """Quadrupling n at least halves h (within 10%)."""
        event = coin.parse_event("b = true")
        small = estimate_prob(coin.comp, event, SampleConfig(n=10_000, seed=2))
        large = estimate_prob(coin.comp, event, SampleConfig(n=40_000, seed=2))
        assert large.half_width <= 0.55 * small.half_width

    def test_estimate_json(self, coin: SystemFile):
        estimate = estimate_prob(coin.comp, coin.parse_event("b = true"), SampleConfig(n=1000))
        assert {"p_hat", "half_width", "n", "seed", "gamma"} <= set(estimate.to_dict())
        assert '"p_hat"' in estimate.to_json()

    def test_agreement(self, coin: SystemFile):
        event = coin.parse_event("b = true")
        a = estimate_prob(coin.comp, event, SampleConfig(n=50_000, seed=1))
        b = estimate_prob(coin.comp, event, SampleConfig(n=50_000, seed=2))
        assert a.agrees_with(b)

    def test_continuous_event(self, normal_tail: SystemFile):
        estimate = estimate_prob(normal_tail.comp, Event(Cmp("<=", Var("x"), Const(Fraction(-1)))),
                                 SampleConfig(n=100_000, seed=4))
        assert abs(estimate.p_hat - 0.158655) <= estimate.half_width

    def test_decimal_arithmetic_matches_exact(self):
        """0.1 + 0.2 = 0.3 holds for every sample, as it does for exact rationals."""
        system = parse_system("system S { unit { x ~ {0.1: 1} } v ~ point(x + 0.2) }")
        for text in ("v = 0.3", "v <= 0.3", "v >= 0.3", "not (v != 0.3)"):
            event = system.parse_event(text)
            estimate = estimate_prob(system.comp, event, SampleConfig(n=1000, seed=3))
            assert prob_event(eval_joint(system.comp), event) == 1
            assert estimate.p_hat == 1.0

    def test_strict_comparison_at_rounding_distance(self):
        system = parse_system("system S { unit { x ~ {0.1: 1} } v ~ point(x + 0.2) }")
        for text in ("v < 0.3", "v > 0.3"):
            estimate = estimate_prob(system.comp, system.parse_event(text), SampleConfig(n=1000, seed=3))
            assert estimate.p_hat == 0.0

    def test_boolean_never_equals_number(self):
        system = parse_system("system S { unit { b ~ {true: 1} } }")
        estimate = estimate_prob(system.comp, system.parse_event("b = 1"), SampleConfig(n=1000, seed=3))
        assert estimate.p_hat == prob_event(eval_joint(system.comp), system.parse_event("b = 1")) == 0


class TestWilson:
    """Half-width formula."""

    def test_z_from_confidence(self):
        assert z_from_confidence(0.95) == pytest.approx(1.959964, rel=1e-6)
        assert z_from_confidence(0.99) == pytest.approx(2.575829, rel=1e-6)

    def test_half_width_positive_at_extremes(self):
        """Wilson intervals do not collapse when no sample hits."""
        assert wilson_half_width(0, 1000, 0.99) > 0
        assert wilson_half_width(1000, 1000, 0.99) > 0


class TestOracleAgreement:
    """Monte-Carlo intervals cover the exact probability at the stated confidence."""

    def test_interval_covers_exact_value(self, discrete_sort: SystemFile):
        """At 99% confidence, at least 95 of 100 independent seeds cover the exact value."""
        event = discrete_sort.parse_event("s = stack2")
        exact = float(prob_event(eval_joint(discrete_sort.comp, defs=discrete_sort.defs), event))
        covered = 0
        for seed in range(100):
            estimate = estimate_prob(discrete_sort.comp, event, SampleConfig(n=5000, seed=seed, gamma=0.99),
                                     discrete_sort.defs)
            covered += abs(estimate.p_hat - exact) <= estimate.half_width
        assert covered >= 95


# ============================================================================
# Moment Tests
# ============================================================================

class TestEstimateMoments:
    """Sample mean and variance with standard errors."""

    def test_normal_sum_moments(self, normal_pair_sum):
        """N(1, 4) + N(2, 9) has mean 3 and variance 13."""
        moments = estimate_moments(normal_pair_sum, Var("s"), SampleConfig(n=200_000, seed=3))
        assert abs(moments.mean - 3.0) <= 4 * moments.se_mean
        assert abs(moments.variance - 13.0) <= 4 * moments.se_variance

    def test_voter_mean_variance(self, voter_mean: SystemFile):
        """Mean of three N(0, 1) sensor errors has variance 1/3."""
        centred = voter_mean.with_constants({"x0": "0"})
        moments = estimate_moments(centred.comp, Var("r"), SampleConfig(n=200_000, seed=8), centred.defs)
        assert abs(moments.mean) <= 4 * moments.se_mean
        assert abs(moments.variance - 1 / 3) <= 4 * moments.se_variance

    def test_voter_mean_centred_on_position(self, voter_mean: SystemFile):
        moments = estimate_moments(voter_mean.comp, Var("r"), SampleConfig(n=50_000, seed=6), voter_mean.defs)
        assert abs(moments.mean - 10.0) <= 4 * moments.se_mean

    @pytest.mark.slow
    def test_normal_sum_moments_large(self, normal_pair_sum):
        moments = estimate_moments(normal_pair_sum, Var("s"), SampleConfig(n=1_000_000, seed=12))
        assert abs(moments.mean - 3.0) <= 4 * moments.se_mean
        assert abs(moments.variance - 13.0) <= 4 * moments.se_variance

    def test_single_sample(self, normal_tail: SystemFile):
        moments = estimate_moments(normal_tail.comp, Var("x"), SampleConfig(n=1))
        assert moments.n == 1
        assert moments.variance == 0.0
        assert np.isfinite(moments.mean)
