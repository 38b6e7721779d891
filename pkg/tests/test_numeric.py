"""
Tests for the Numeric Kernels

Normal pdf/cdf/ppf against an mpmath high-precision oracle, and the
certified piecewise-constant envelopes used by the event approximation rules.
"""

import json
import math

import mpmath
import numpy as np
import pytest

from errors import BadGrid, EnvelopeNotCertified, InvalidVariance
from numeric import (
    STANDARD,
    NormalParams,
    PiecewiseDensity,
    build_lower_envelope,
    build_upper_envelope,
    certify_envelope,
    cumulative,
    integral,
    normal_cdf,
    normal_pdf,
    normal_ppf,
)

mpmath.mp.dps = 40


def oracle_cdf(x: float, mean: float = 0.0, variance: float = 1.0) -> float:
    z = (mpmath.mpf(x) - mean) / mpmath.sqrt(variance)
    return float(mpmath.ncdf(z))


def oracle_pdf(x: float, mean: float = 0.0, variance: float = 1.0) -> float:
    return float(mpmath.npdf(x, mean, mpmath.sqrt(variance)))


# ============================================================================
# Normal Distribution Tests
# ============================================================================

class TestNormal:
    """pdf / cdf / ppf accuracy."""

    @pytest.mark.parametrize("x", [-8.0, -3.0, -1.0, 0.0, 0.5, 2.0, 6.0])
    def test_cdf_matches_oracle(self, x):
        assert normal_cdf(x, STANDARD) == pytest.approx(oracle_cdf(x), rel=1e-12, abs=1e-300)

    @pytest.mark.parametrize("mean, variance", [(0.0, 1.0), (1.5, 2.25), (-20.0, 0.01)])
    def test_cdf_matches_oracle_on_grid(self, mean, variance):
        """10^4 points across mean +- 8 sigma, absolute error at most 1e-12."""
        p = NormalParams(mean, variance)
        xs = np.linspace(mean - 8 * p.sigma, mean + 8 * p.sigma, 10_000)
        got = normal_cdf(xs, p)
        worst = max(abs(g - oracle_cdf(x, mean, variance)) for g, x in zip(got, xs))
        assert worst <= 1e-12

    def test_cdf_symmetry(self):
        """Phi(mu - d) + Phi(mu + d) = 1 for random offsets."""
        rng = np.random.default_rng(17)
        for mean, variance in ((0.0, 1.0), (3.0, 0.5), (-2.0, 9.0)):
            p = NormalParams(mean, variance)
            d = rng.uniform(0.0, 8.0 * p.sigma, size=10_000)
            total = normal_cdf(mean - d, p) + normal_cdf(mean + d, p)
            assert np.max(np.abs(total - 1.0)) <= 1e-12

    def test_tail_value(self):
        """Phi(-3) ~ 0.00135."""
        assert normal_cdf(-3.0, STANDARD) == pytest.approx(0.0013498980316301, rel=1e-12)

    def test_pdf_matches_oracle(self):
        p = NormalParams(1.0, 4.0)
        for x in (-5.0, 0.0, 1.0, 3.5):
            assert normal_pdf(x, p) == pytest.approx(oracle_pdf(x, 1.0, 4.0), rel=1e-13)

    def test_ppf_inverts_cdf(self):
        qs = np.array([1e-10, 0.001, 0.3, 0.5, 0.9, 1 - 1e-10])
        assert np.allclose(normal_cdf(normal_ppf(qs), STANDARD), qs, rtol=1e-10, atol=0)

    def test_vectorized_pdf(self):
        values = normal_pdf(np.array([-1.0, 0.0, 1.0]), STANDARD)
        assert values.shape == (3,)
        assert values[0] == pytest.approx(values[2])

    def test_invalid_variance(self):
        with pytest.raises(InvalidVariance):
            NormalParams(0.0, 0.0)
        with pytest.raises(InvalidVariance):
            NormalParams(0.0, -1.0)


# ============================================================================
# Envelope Tests
# ============================================================================

def probes(lo: float = -8.0, hi: float = 8.0, count: int = 4001) -> np.ndarray:
    return np.linspace(lo, hi, count)


class TestUpperEnvelope:
    """Upper envelopes bound the density pointwise and integrate to >= 1."""

    def test_pointwise_above_density(self):
        env = build_upper_envelope(STANDARD, k=8.0, width=0.5)
        for v in probes():
            assert env.density_at(v) >= normal_pdf(v, STANDARD)

    def test_integral_at_least_one(self):
        env = build_upper_envelope(STANDARD, k=8.0, width=0.5)
        assert integral(env) >= 1.0

    def test_cumulative_bounds_true_cdf(self):
        env = build_upper_envelope(STANDARD, k=8.0, width=0.05)
        for a in (-6.0, -3.0, -1.0, 0.0):
            assert cumulative(env, a) >= oracle_cdf(a)

    def test_fine_grid_certifies_tail_bound(self):
        """Pr(x <= -3) < 0.002 from a 0.05-width grid."""
        env = build_upper_envelope(STANDARD, k=8.0, width=0.05)
        value = cumulative(env, -3.0)
        assert oracle_cdf(-3.0) <= value < 0.002

    def test_coarse_grid_is_loose(self):
        env = build_upper_envelope(STANDARD, k=8.0, width=1.0)
        assert cumulative(env, -3.0) > 0.001

    def test_refinement_never_increases_integral(self):
        coarse = integral(build_upper_envelope(STANDARD, k=8.0, width=1.0))
        fine = integral(build_upper_envelope(STANDARD, k=8.0, width=0.5))
        assert fine <= coarse

    def test_certified(self):
        env = build_upper_envelope(NormalParams(2.0, 9.0), k=6.0, pieces=50)
        certify_envelope(env, NormalParams(2.0, 9.0), "upper")


class TestLowerEnvelope:
    """Lower envelopes stay under the density and integrate to <= 1."""

    def test_pointwise_below_density(self):
        env = build_lower_envelope(STANDARD, k=8.0, width=0.5)
        for v in probes():
            assert env.density_at(v) <= normal_pdf(v, STANDARD)

    def test_integral_at_most_one(self):
        env = build_lower_envelope(STANDARD, k=8.0, width=0.5)
        assert integral(env) <= 1.0

    def test_upper_tail_bound(self):
        """1 - P_A(3) bounds Pr(x >= 3) from above."""
        env = build_lower_envelope(STANDARD, k=8.0, width=0.01)
        tail = 1.0 - cumulative(env, 3.0)
        assert tail >= 1.0 - oracle_cdf(3.0)
        assert tail < 0.01

    def test_refinement_never_decreases_integral(self):
        coarse = integral(build_lower_envelope(STANDARD, k=8.0, width=1.0))
        fine = integral(build_lower_envelope(STANDARD, k=8.0, width=0.5))
        assert fine >= coarse


class TestCertification:
    """certify_envelope rejects envelopes that do not bound the density."""

    def test_wrong_role(self):
        env = build_lower_envelope(STANDARD, width=0.5)
        with pytest.raises(EnvelopeNotCertified):
            certify_envelope(env, STANDARD, "upper")

    def test_upper_envelope_too_low(self):
        env = build_upper_envelope(STANDARD, width=0.5)
        lowered = PiecewiseDensity(env.breakpoints, tuple(d * 0.5 for d in env.densities),
                                   "upper", "gaussian", STANDARD)
        with pytest.raises(EnvelopeNotCertified):
            certify_envelope(lowered, STANDARD, "upper")

    def test_envelope_for_other_normal(self):
        env = build_upper_envelope(NormalParams(1.0, 1.0), width=0.5)
        with pytest.raises(EnvelopeNotCertified):
            certify_envelope(env, STANDARD, "upper")

    def test_lower_envelope_too_high(self):
        env = build_lower_envelope(STANDARD, width=0.5)
        raised = PiecewiseDensity(env.breakpoints, tuple(d * 2.0 + 0.01 for d in env.densities),
                                  "lower", "zero", STANDARD)
        with pytest.raises(EnvelopeNotCertified):
            certify_envelope(raised, STANDARD, "lower")


class TestPiecewiseDensity:
    """Construction checks and JSON form."""

    def test_breakpoints_must_increase(self):
        with pytest.raises(BadGrid):
            PiecewiseDensity((0.0, 0.0, 1.0), (0.1, 0.1), "upper")

    def test_density_count(self):
        with pytest.raises(BadGrid):
            PiecewiseDensity((0.0, 1.0, 2.0), (0.1,), "lower")

    def test_negative_density(self):
        with pytest.raises(BadGrid):
            PiecewiseDensity((0.0, 1.0), (-0.1,), "lower")

    def test_grid_needs_width_or_pieces(self):
        with pytest.raises(BadGrid):
            build_upper_envelope(STANDARD)

    def test_cumulative_of_box(self):
        box = PiecewiseDensity((0.0, 2.0), (0.5,), "lower")
        assert cumulative(box, -1.0) == 0.0
        assert cumulative(box, 1.0) == pytest.approx(0.5)
        assert integral(box) == pytest.approx(1.0)

    def test_json_file(self, tmp_path):
        env = build_upper_envelope(STANDARD, width=0.5)
        path = tmp_path / "envelope.json"
        path.write_text(env.to_json())
        loaded = PiecewiseDensity.from_json(str(path))
        assert loaded == env
        assert json.loads(path.read_text())["role"] == "upper"

    def test_gaussian_tail_mass(self):
        """Mills-ratio tail beyond -8 sigma bounds the true tail."""
        env = build_upper_envelope(STANDARD, k=8.0, width=0.5)
        assert env.left_tail_mass(-8.0) >= oracle_cdf(-8.0)
        assert math.isfinite(env.left_tail_mass(-8.0))
