"""
Numeric Kernels for Normal Distributions and Density Envelopes

Features:
- normal_pdf / normal_cdf / normal_ppf (scipy.special ndtr / ndtri, vectorized)
- PiecewiseDensity: piecewise-constant density with a declared tail policy
- Upper envelopes (per-interval maximum, Gaussian Mills-ratio tails)
- Lower envelopes (per-interval minimum, zero tails)
- Closed-form cumulative and total integral
- Certificate check of an envelope against its source normal
- JSON (de)serialization for use from proof scripts
"""

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from errors import BadGrid, EnvelopeNotCertified, InvalidVariance

ROLES = ("upper", "lower")
TAILS = ("zero", "gaussian")

# one-sided margin for round-off in exp()
ROUNDING_MARGIN = 1e-14

SQRT_2PI = math.sqrt(2.0 * math.pi)


# ============================================================================
# Normal distribution
# ============================================================================

@dataclass(frozen=True)
class NormalParams:
    mean: float
    variance: float

    def __post_init__(self):
        if not self.variance > 0 or not math.isfinite(self.variance):
            raise InvalidVariance(self.variance)
        object.__setattr__(self, "mean", float(self.mean))
        object.__setattr__(self, "variance", float(self.variance))

    @property
    def sigma(self) -> float:
        return math.sqrt(self.variance)


STANDARD = NormalParams(0.0, 1.0)


def normal_pdf(x, p: NormalParams):
    """Density 1/(sigma sqrt(2 pi)) exp(-((x - mu)/sigma)^2 / 2)."""
    z = (np.asarray(x, dtype=float) - p.mean) / p.sigma
    result = np.exp(-0.5 * z * z) / (p.sigma * SQRT_2PI)
    return float(result) if result.ndim == 0 else result


def normal_cdf(x, p: NormalParams):
    """P(X <= x)."""
    result = ndtr((np.asarray(x, dtype=float) - p.mean) / p.sigma)
    return float(result) if np.ndim(result) == 0 else result


def normal_ppf(q, p: NormalParams = STANDARD):
    """Inverse CDF; q in (0, 1)."""
    result = p.mean + p.sigma * ndtri(np.asarray(q, dtype=float))
    return float(result) if np.ndim(result) == 0 else result


def gaussian_tail_bound(z: float) -> float:
    """Integral of phi(t)(1 + 1/t^2) over [z, inf): phi(z)/z for z > 0."""
    if z <= 0:
        raise BadGrid(f"Gaussian tail bound needs z > 0, got {z}")
    return math.exp(-0.5 * z * z) / SQRT_2PI / z


# ============================================================================
# Piecewise densities
# ============================================================================

@dataclass(frozen=True)
class PiecewiseDensity:
    """Constant density on each [x_i, x_{i+1}); tails per `tail` policy."""
    breakpoints: tuple[float, ...]
    densities: tuple[float, ...]
    role: str
    tail: str = "zero"
    source: Optional[NormalParams] = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise BadGrid(f"Envelope role must be one of {ROLES}, got {self.role}")
        if self.tail not in TAILS:
            raise BadGrid(f"Tail policy must be one of {TAILS}, got {self.tail}")
        if len(self.breakpoints) < 2:
            raise BadGrid("A piecewise density needs at least two breakpoints")
        if len(self.densities) != len(self.breakpoints) - 1:
            raise BadGrid(
                f"{len(self.breakpoints)} breakpoints need {len(self.breakpoints) - 1} densities, "
                f"got {len(self.densities)}"
            )
        if any(not math.isfinite(b) for b in self.breakpoints):
            raise BadGrid("Breakpoints must be finite")
        if any(b >= c for b, c in zip(self.breakpoints, self.breakpoints[1:])):
            raise BadGrid("Breakpoints must be strictly increasing")
        if any(not d >= 0 or not math.isfinite(d) for d in self.densities):
            raise BadGrid("Densities must be finite and >= 0")
        if self.tail == "gaussian":
            if self.source is None:
                raise BadGrid("Gaussian tails need the source normal parameters")
            if not self.breakpoints[0] < self.source.mean < self.breakpoints[-1]:
                raise BadGrid("Gaussian tails need the grid to enclose the mean")

    @property
    def lo(self) -> float:
        return self.breakpoints[0]

    @property
    def hi(self) -> float:
        return self.breakpoints[-1]

    def left_tail_mass(self, a: float) -> float:
        """Tail integral over (-inf, min(a, x_0)]."""
        if self.tail == "zero":
            return 0.0
        a = min(a, self.lo)
        if a == -math.inf:
            return 0.0
        return gaussian_tail_bound((self.source.mean - a) / self.source.sigma)

    def right_tail_mass(self, b: float) -> float:
        """Tail integral over [max(b, x_k), inf)."""
        if self.tail == "zero":
            return 0.0
        b = max(b, self.hi)
        if b == math.inf:
            return 0.0
        return gaussian_tail_bound((b - self.source.mean) / self.source.sigma)

    def density_at(self, v: float) -> float:
        if v < self.lo or v > self.hi:
            if self.tail == "zero":
                return 0.0
            d = v - self.source.mean
            return normal_pdf(v, self.source) * (1.0 + self.source.variance / (d * d))
        index = int(np.searchsorted(self.breakpoints, v, side="right")) - 1
        return self.densities[min(index, len(self.densities) - 1)]

    def to_dict(self) -> dict:
        data = {
            "breakpoints": list(self.breakpoints),
            "densities": list(self.densities),
            "role": self.role,
            "tail": self.tail,
        }
        if self.source is not None:
            data["source"] = asdict(self.source)
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "PiecewiseDensity":
        try:
            source = NormalParams(**data["source"]) if data.get("source") else None
            return cls(
                tuple(float(b) for b in data["breakpoints"]),
                tuple(float(d) for d in data["densities"]),
                data["role"],
                data.get("tail", "zero"),
                source,
            )
        except (KeyError, TypeError) as e:
            raise BadGrid(f"Malformed envelope description: {e}")

    @classmethod
    def from_json(cls, json_path: str) -> "PiecewiseDensity":
        with open(json_path, "r") as f:
            return cls.from_dict(json.load(f))


def cumulative(d: PiecewiseDensity, a: float) -> float:
    """Exact integral of d over (-inf, a]."""
    total = d.left_tail_mass(a)
    if a <= d.lo:
        return total
    for left, right, density in zip(d.breakpoints, d.breakpoints[1:], d.densities):
        if a <= left:
            break
        total += density * (min(a, right) - left)
    if a > d.hi:
        total += d.right_tail_mass(d.hi) - d.right_tail_mass(a)
    return total


def integral(d: PiecewiseDensity) -> float:
    return cumulative(d, math.inf)


# ============================================================================
# Envelope construction
# ============================================================================

def grid(p: NormalParams, k: float = 8.0, width: Optional[float] = None,
         pieces: Optional[int] = None) -> np.ndarray:
    """Uniform breakpoints over [mu - k sigma, mu + k sigma]."""
    if not k > 0:
        raise BadGrid(f"Grid half-width k must be > 0, got {k}")
    span = 2.0 * k * p.sigma
    if pieces is None:
        if width is None:
            raise BadGrid("Give a piece width or a piece count")
        if not width > 0:
            raise BadGrid(f"Piece width must be > 0, got {width}")
        pieces = max(1, math.ceil(span / width - 1e-9))
    if pieces < 1:
        raise BadGrid(f"Piece count must be >= 1, got {pieces}")
    return np.linspace(p.mean - k * p.sigma, p.mean + k * p.sigma, pieces + 1)


def _check_breakpoints(breakpoints: Sequence[float]) -> tuple[float, ...]:
    points = tuple(float(b) for b in breakpoints)
    if len(points) < 2 or any(b >= c for b, c in zip(points, points[1:])):
        raise BadGrid("Breakpoints must be at least two strictly increasing values")
    return points


def _interval_max(p: NormalParams, left: float, right: float) -> float:
    if left <= p.mean <= right:
        return normal_pdf(p.mean, p)
    nearer = right if right < p.mean else left
    return normal_pdf(nearer, p)


def _interval_min(p: NormalParams, left: float, right: float) -> float:
    return min(normal_pdf(left, p), normal_pdf(right, p))


def build_upper_envelope(p: NormalParams, k: float = 8.0, width: Optional[float] = None,
                         pieces: Optional[int] = None,
                         breakpoints: Optional[Sequence[float]] = None) -> PiecewiseDensity:
    """Pointwise upper bound of the normal density; integral >= 1."""
    points = _check_breakpoints(breakpoints if breakpoints is not None else grid(p, k, width, pieces))
    densities = tuple(
        _interval_max(p, a, b) * (1.0 + ROUNDING_MARGIN) for a, b in zip(points, points[1:])
    )
    return PiecewiseDensity(points, densities, "upper", "gaussian", p)


def build_lower_envelope(p: NormalParams, k: float = 8.0, width: Optional[float] = None,
                         pieces: Optional[int] = None,
                         breakpoints: Optional[Sequence[float]] = None) -> PiecewiseDensity:
    """Pointwise lower bound of the normal density with zero tails; integral <= 1."""
    points = _check_breakpoints(breakpoints if breakpoints is not None else grid(p, k, width, pieces))
    densities = tuple(
        _interval_min(p, a, b) * (1.0 - ROUNDING_MARGIN) for a, b in zip(points, points[1:])
    )
    return PiecewiseDensity(points, densities, "lower", "zero", p)


def certify_envelope(d: PiecewiseDensity, p: NormalParams, role: str):
    """Check analytically that d bounds the density of N(p) from the given side."""
    if d.role != role:
        raise EnvelopeNotCertified(f"Rule needs a {role} envelope, got a {d.role} envelope")
    if role == "upper":
        if d.tail != "gaussian" or d.source != p:
            raise EnvelopeNotCertified("Upper envelope tails must be Gaussian bounds of the same normal")
        for a, b, density in zip(d.breakpoints, d.breakpoints[1:], d.densities):
            if density < _interval_max(p, a, b):
                raise EnvelopeNotCertified(f"Upper envelope is below the density on [{a}, {b}]")
    else:
        if d.tail != "zero":
            raise EnvelopeNotCertified("Lower envelopes must have zero tails")
        for a, b, density in zip(d.breakpoints, d.breakpoints[1:], d.densities):
            if density > _interval_min(p, a, b):
                raise EnvelopeNotCertified(f"Lower envelope exceeds the density on [{a}, {b}]")
