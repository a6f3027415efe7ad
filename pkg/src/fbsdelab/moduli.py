"""Concave moduli of continuity with linearized tails.

The workhorse is the two-branch modulus

    m(x) = x * (ln(1/x))^r          for 0 < x <= cutoff,
    m(x) = m(c) + m'(c) * (x - c)   for x > cutoff c,

which is increasing, concave and vanishes at 0, and whose reciprocal has a
divergent improper integral at 0+ (the Osgood/Bihari admissibility property
that drives uniqueness estimates).  The linear tail keeps the function
increasing beyond the point where x*(ln(1/x))^r would turn over.

The module also ships the modulus families matched to the example driver
nonlinearities (power, exponential-decay, their sum, and the entropy-type
u*ln(1/u) nonlinearity) plus numeric probes: a product-inequality check with
an explicit admissible constant, and an adaptive quadrature probe for the
divergence of the integral of 1/m.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .errors import DomainError


def _as_array(x):
    return np.asarray(x, dtype=float)


@dataclass(frozen=True)
class LogPowerModulus:
    """m(x) = x (ln 1/x)^r on (0, cutoff], linear beyond the cutoff.

    Requires 0 < exponent <= 1 and 0 < cutoff < exp(-exponent); the strict
    upper bound keeps the tail slope positive (at cutoff = e^-r the slope
    degenerates to zero and the function stops increasing).
    """

    cutoff: float
    exponent: float = 1.0
    # precomputed branch data
    value_at_cutoff: float = field(init=False)
    slope_at_cutoff: float = field(init=False)

    def __post_init__(self):
        r, c = self.exponent, self.cutoff
        if not 0.0 < r <= 1.0:
            raise DomainError(f"exponent must be in (0, 1], got {r}")
        if not 0.0 < c < math.exp(-r):
            raise DomainError(
                f"cutoff must be in (0, e^-exponent) = (0, {math.exp(-r):.6f}), got {c}"
            )
        lc = math.log(1.0 / c)
        object.__setattr__(self, "value_at_cutoff", c * lc ** r)
        object.__setattr__(self, "slope_at_cutoff", lc ** r * (1.0 - r / lc))

    def __call__(self, x):
        x = _as_array(x)
        if np.any(x < 0.0):
            raise DomainError("modulus argument must be >= 0")
        out = np.zeros_like(x)
        core = (x > 0.0) & (x <= self.cutoff)
        tail = x > self.cutoff
        xc = x[core]
        out[core] = xc * np.log(1.0 / xc) ** self.exponent
        out[tail] = self.value_at_cutoff + self.slope_at_cutoff * (x[tail] - self.cutoff)
        return out if out.ndim else float(out)

    def derivative(self, x):
        """m'(x) = (ln 1/x)^r - r (ln 1/x)^(r-1) below the cutoff, constant beyond."""
        x = _as_array(x)
        if np.any(x <= 0.0):
            raise DomainError("derivative requires x > 0")
        out = np.full_like(x, self.slope_at_cutoff)
        core = x <= self.cutoff
        lx = np.log(1.0 / x[core])
        out[core] = lx ** self.exponent - self.exponent * lx ** (self.exponent - 1.0)
        return out if out.ndim else float(out)

    def product_bound(self) -> float:
        """Admissible constant for the product inequality on (0, 1]^2.

        max{1, (ln c / (2 ln(1-c)))^r}; decreasing in the cutoff, approaching
        ~1.0901 from above as cutoff -> e^-1 with exponent 1.
        """
        c, r = self.cutoff, self.exponent
        return max(1.0, (math.log(c) / (2.0 * math.log(1.0 - c))) ** r)


def dominating_unit_exponent_cutoff(m: LogPowerModulus) -> float:
    """Cutoff c1 <= e^(exponent - 2) such that the unit-exponent modulus with
    cutoff c1 strictly dominates ``m`` on all of (0, 1].

    Uniform dominance needs the unit-exponent tail at least as steep as m's
    tail, i.e. ln(1/c1) - 1 >= m.slope_at_cutoff; picking
    c1 = min(cutoff, exp(-(1 + slope))) guarantees it together with the core
    comparison x (ln 1/x)^r < x ln(1/x) below c1.  (The slope at the cutoff
    exceeds 1 - r whenever the cutoff is below e^-1, so the bare choice
    e^(r-2) is not always steep enough.)
    """
    if m.exponent >= 1.0:
        raise DomainError("dominance construction applies to exponents below 1")
    c1 = min(m.cutoff, math.exp(-(1.0 + m.slope_at_cutoff)))
    return min(c1, math.exp(m.exponent - 2.0))


@dataclass(frozen=True)
class EntropyModulus:
    """m(x) = scale * x ln(1/x) ln(ln(1/x)) with the same linear-tail trick.

    The core is increasing and concave only where (L-1) ln L > 1 for
    L = ln(1/x), so the cutoff must sit below exp(-L*) with L* ~ 2.26; the
    constructor enforces a positive tail slope.
    """

    cutoff: float = 0.05
    scale: float = 1.0
    value_at_cutoff: float = field(init=False)
    slope_at_cutoff: float = field(init=False)

    def __post_init__(self):
        if self.scale <= 0.0:
            raise DomainError("scale must be positive")
        c = self.cutoff
        if not 0.0 < c < math.exp(-1.0):
            raise DomainError(f"cutoff must be in (0, e^-1), got {c}")
        L = math.log(1.0 / c)
        slope = self.scale * (L * math.log(L) - math.log(L) - 1.0)
        if slope <= 0.0:
            raise DomainError(
                f"cutoff {c} gives a non-increasing tail; need (L-1) ln L > 1 at L = ln(1/cutoff)"
            )
        object.__setattr__(self, "value_at_cutoff", self.scale * c * L * math.log(L))
        object.__setattr__(self, "slope_at_cutoff", slope)

    def __call__(self, x):
        x = _as_array(x)
        if np.any(x < 0.0):
            raise DomainError("modulus argument must be >= 0")
        out = np.zeros_like(x)
        core = (x > 0.0) & (x <= self.cutoff)
        tail = x > self.cutoff
        xc = x[core]
        L = np.log(1.0 / xc)
        out[core] = self.scale * xc * L * np.log(L)
        out[tail] = self.value_at_cutoff + self.slope_at_cutoff * (x[tail] - self.cutoff)
        return out if out.ndim else float(out)


def identity_modulus(x):
    """m(x) = x, the modulus matched to Lipschitz-in-u nonlinearities."""
    x = _as_array(x)
    if np.any(x < 0.0):
        raise DomainError("modulus argument must be >= 0")
    return x if x.ndim else float(x)


@dataclass(frozen=True)
class SumModulus:
    """Pointwise sum of two moduli (sum of concave increasing is concave increasing)."""

    first: Callable
    second: Callable

    def __call__(self, x):
        return self.first(x) + self.second(x)


@dataclass(frozen=True)
class ModulusFamily:
    """A named driver nonlinearity u -> lambda(t, u) with its matched modulus.

    variant:
        'power'            alpha(t) * u^r        (concave in u)
        'exponential'      exp(-beta(t) * u)     (convex in u)
        'power_plus_exponential'   alpha(t) u^r + exp(-beta(t) u)
        'entropy'          scale * u * ln(1/u)   (superlinear near 0)

    ``coefficient`` is alpha(t) for the power variants, beta(t) for the
    exponential one and the scalar scale for 'entropy'; ``coefficient2`` is
    beta(t) of the sum variant.  Coefficients may be scalars or functions
    of t and must be nonnegative.
    """

    variant: str
    exponent: float = 1.0          # r of u^r
    coefficient: Callable | float = 1.0
    coefficient2: Callable | float = 1.0
    cutoff: float | None = None    # branch point of the matched modulus

    _VARIANTS = ("power", "exponential", "power_plus_exponential", "entropy")

    def __post_init__(self):
        if self.variant not in self._VARIANTS:
            raise DomainError(f"unknown variant {self.variant!r}; expected one of {self._VARIANTS}")
        if self.variant in ("power", "power_plus_exponential") and not 0.0 < self.exponent <= 1.0:
            raise DomainError("power variant requires exponent in (0, 1]")
        if self.variant == "entropy":
            if callable(self.coefficient):
                raise DomainError("entropy variant takes a scalar scale")
            if self.coefficient <= 0.0:
                raise DomainError("entropy variant requires a positive scale")
        if _coeff_min(self.coefficient) < 0.0 or _coeff_min(self.coefficient2) < 0.0:
            raise DomainError("coefficients must be nonnegative")

    def nonlinearity(self) -> Callable:
        """The (t, u) -> lambda(t, u) callable of this family."""
        c1 = _as_time_coeff(self.coefficient)
        c2 = _as_time_coeff(self.coefficient2)
        if self.variant == "power":
            return lambda t, u: c1(t) * np.maximum(u, 0.0) ** self.exponent
        if self.variant == "exponential":
            return lambda t, u: np.exp(-c1(t) * u)
        if self.variant == "power_plus_exponential":
            return lambda t, u: (
                c1(t) * np.maximum(u, 0.0) ** self.exponent + np.exp(-c2(t) * u)
            )
        scale = float(self.coefficient)
        return lambda t, u: scale * np.where(u > 0.0, u * np.log(1.0 / np.maximum(u, 1e-300)), 0.0)

    def modulus(self) -> Callable:
        """The concave modulus matched to this nonlinearity."""
        return modulus_for_family(self)


def _coeff_min(c) -> float:
    if callable(c):
        return float(np.min(c(np.linspace(0.0, 1.0, 33))))
    return float(c)


def _as_time_coeff(c) -> Callable:
    if callable(c):
        return c
    return lambda t, _c=float(c): _c


def modulus_for_family(family: ModulusFamily) -> Callable:
    """Concave modulus paired with each shipped nonlinearity family."""
    if family.variant == "power":
        cut = family.cutoff if family.cutoff is not None else 0.9 * math.exp(-family.exponent)
        return LogPowerModulus(cutoff=cut, exponent=family.exponent)
    if family.variant == "exponential":
        return identity_modulus
    if family.variant == "power_plus_exponential":
        cut = family.cutoff if family.cutoff is not None else 0.9 * math.exp(-family.exponent)
        return SumModulus(LogPowerModulus(cutoff=cut, exponent=family.exponent), identity_modulus)
    if family.variant == "entropy":
        return EntropyModulus(cutoff=family.cutoff if family.cutoff is not None else 0.05,
                              scale=float(family.coefficient))
    raise DomainError(f"unknown variant {family.variant!r}")


@dataclass(frozen=True)
class ProductInequalityReport:
    """Result of scanning |x-y| |m(x)-m(y)| <= C m(|x-y|^2) over samples."""

    max_ratio: float
    bound: float | None
    argmax: tuple[float, float]
    violations: list[tuple[float, float, float]]

    @property
    def passed(self) -> bool:
        return not self.violations


def product_inequality_check(
    modulus: Callable,
    samples: Sequence[tuple[float, float]],
    bound: float | None = None,
    rtol: float = 1e-12,
) -> ProductInequalityReport:
    """Scan the self-domination inequality of a modulus over (0, 1]^2 samples.

    For each pair (x, y), x != y, computes
        ratio = |x - y| * |m(x) - m(y)| / m(|x - y|^2)
    and reports the empirical maximum (the observed admissible constant).
    When ``bound`` is given (or the modulus exposes ``product_bound``),
    samples whose ratio exceeds it are returned as violation witnesses.
    """
    pairs = np.asarray(list(samples), dtype=float)
    if pairs.size == 0:
        raise DomainError("no samples supplied")
    x, y = pairs[:, 0], pairs[:, 1]
    if np.any((x <= 0.0) | (x > 1.0) | (y <= 0.0) | (y > 1.0)):
        raise DomainError("samples must lie in (0, 1]^2")
    if np.any(x == y):
        raise DomainError("samples must have x != y")
    if bound is None and hasattr(modulus, "product_bound"):
        bound = modulus.product_bound()
    d = np.abs(x - y)
    ratio = d * np.abs(modulus(x) - modulus(y)) / modulus(d * d)
    imax = int(np.argmax(ratio))
    violations = []
    if bound is not None:
        bad = ratio > bound * (1.0 + rtol)
        violations = [(float(x[i]), float(y[i]), float(ratio[i])) for i in np.flatnonzero(bad)]
    return ProductInequalityReport(
        max_ratio=float(ratio[imax]),
        bound=bound,
        argmax=(float(x[imax]), float(y[imax])),
        violations=violations,
    )


def osgood_divergence_probe(modulus: Callable, lower: float, upper: float) -> float:
    """Numerically integrate 1/m(x) over [lower, upper].

    Divergence of the improper integral at 0+ cannot be proven numerically;
    callers verify growth as ``lower`` shrinks (for x (ln 1/x)-type moduli the
    value grows like ln ln(1/lower), so squaring ``lower`` doubles the leading
    term, while an inadmissible modulus like x^2 blows up like 1/lower).

    The quadrature integrates in u = ln(1/x), which flattens the integrand of
    admissible moduli near 0 and keeps adaptive subdivision cheap.
    """
    if not 0.0 < lower < upper:
        raise DomainError(f"need 0 < lower < upper, got ({lower}, {upper})")
    probe_x = np.exp(np.linspace(math.log(lower), math.log(upper), 257))
    vals = modulus(probe_x)
    if np.any(np.asarray(vals) <= 0.0):
        bad = float(probe_x[int(np.argmin(vals))])
        raise DomainError(f"modulus is not positive on [lower, upper] (e.g. at x={bad:.3e})")

    def integrand(u):
        xv = math.exp(-u)
        return xv / float(modulus(xv))

    a, b = math.log(1.0 / upper), math.log(1.0 / lower)
    value, _err = integrate.quad(integrand, a, b, epsrel=1e-9, epsabs=0.0, limit=400)
    return value
