"""Jump-rate catalog and the framing data derived from it.

A rate function g is smooth and non-decreasing on [0, inf) with g(0) = 0.
On the scale-n lattice a site holding k particles fires at n^2 * g_n(k),
where

    g_n(k) = sqrt(n) * g(k / sqrt(n)).

The catalog stores the derivatives of g at the origin analytically. They are
the single source of truth for the fugacity limit g'(0) rho, the traveling
frame

    f_n = b2 n^2 + b1 n^{3/2} + b0 n,

and the coefficients (viscosity, nonlinearity, noise variance) of the
stochastic Burgers limit. Nothing downstream differentiates g numerically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "RateFunction",
    "FramingCoefficients",
    "SbeCoefficients",
    "QTASEP",
    "TANH",
    "LINEAR",
    "RATE_FUNCTIONS",
]


@dataclass(frozen=True)
class FramingCoefficients:
    """Polynomial coefficients of the frame speed f_n in powers of n."""

    b2: float
    b1: float
    b0: float

    def speed(self, n: int) -> float:
        """Frame speed f_n in lattice sites per unit of macroscopic time."""
        return self.b2 * n**2 + self.b1 * n**1.5 + self.b0 * n

    def offset(self, n: int, t: float) -> float:
        """Accumulated frame displacement f_n * t."""
        return self.speed(n) * t


@dataclass(frozen=True)
class SbeCoefficients:
    """Coefficients of the limiting stochastic Burgers equation.

    du = viscosity * dxx u - nonlinearity * dx(u^2) + sqrt(noise_variance) dx dW
    """

    viscosity: float
    nonlinearity: float
    noise_variance: float


@dataclass(frozen=True)
class RateFunction:
    """A catalog entry: the function g plus its analytic data at the origin.

    Parameters
    ----------
    name : str
        Stable identifier used in configs and reports.
    g : callable
        Vectorized evaluation of g on [0, inf).
    d1, d2, d3, d4 : float
        Derivatives of g at 0. d1 must be positive.
    sup : float
        sup of g over [0, inf); ``inf`` marks an unbounded rate.
    d4_sup : float
        sup of |g''''| over [0, inf), used by the Taylor residual bound.
    exactly_linear : bool
        True only for g(x) = d1 * x, where closed forms replace solves.
    """

    name: str
    g: Callable[[np.ndarray], np.ndarray]
    d1: float
    d2: float
    d3: float
    d4: float
    sup: float
    d4_sup: float
    exactly_linear: bool = False

    def __post_init__(self) -> None:
        assert self.d1 > 0.0, "rate must grow at first order near 0"

    def gn(self, k, n: int):
        """Scaled rate g_n(k) = sqrt(n) g(k / sqrt(n)) for occupancy k >= 0."""
        assert n >= 1
        root = math.sqrt(n)
        return root * self.g(np.asarray(k, dtype=float) / root)

    def gn_log_factorial(self, k: int, n: int) -> float:
        """log of g_n(k) g_n(k-1) ... g_n(1), with the empty product log 1 = 0."""
        if k == 0:
            return 0.0
        return float(np.log(self.gn(np.arange(1, k + 1), n)).sum())

    def gn_log_factorial_table(self, kmax: int, n: int) -> np.ndarray:
        """Vector of gn_log_factorial(k, n) for k = 0 .. kmax."""
        out = np.zeros(kmax + 1)
        if kmax >= 1:
            out[1:] = np.cumsum(np.log(self.gn(np.arange(1, kmax + 1), n)))
        return out

    def radius(self, n: int) -> float:
        """Convergence radius of the single-site partition sum, sqrt(n) sup g."""
        return math.sqrt(n) * self.sup

    def framing_coefficients(self, phi: float) -> FramingCoefficients:
        """Frame polynomial coefficients at fugacity value phi.

        b2 drains the first-order transport, b1 and b0 the corrections fed by
        the curvature of g at the origin.
        """
        b2 = self.d1
        b1 = 0.5 * self.d2 * (1.0 + 2.0 * phi)
        b0 = self.d3 / (6.0 * self.d1) * (1.0 + 6.0 * phi + 3.0 * phi * phi) - (
            self.d2 * self.d2 / (4.0 * self.d1 * self.d1)
        ) * (1.0 + 10.0 * phi + 9.0 * phi * phi)
        return FramingCoefficients(b2=b2, b1=b1, b0=b0)

    def sbe_coefficients(self, rho: float) -> SbeCoefficients:
        """Limit equation coefficients at density rho."""
        assert rho > 0.0
        return SbeCoefficients(
            viscosity=0.5 * self.d1,
            nonlinearity=-0.5 * self.d2,
            noise_variance=self.d1 * rho,
        )


def _qtasep_g(x: np.ndarray) -> np.ndarray:
    # -expm1 keeps full precision for small arguments, where 1 - e^{-x} cancels.
    return -np.expm1(-np.asarray(x, dtype=float))


def _linear_g(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=float)


# Fourth derivative of tanh is 8u(1-u^2)(2-3u^2) with u = tanh x. Its modulus
# peaks at u^2 = (15 - sqrt(105))/30; evaluate the quintic 16u - 40u^3 + 24u^5
# there instead of hardcoding a rounded constant.
_u = math.sqrt((15.0 - math.sqrt(105.0)) / 30.0)
_TANH_D4_SUP = 16.0 * _u - 40.0 * _u**3 + 24.0 * _u**5
del _u


QTASEP = RateFunction(
    name="qtasep",
    g=_qtasep_g,
    d1=1.0,
    d2=-1.0,
    d3=1.0,
    d4=-1.0,
    sup=1.0,
    d4_sup=1.0,
)

TANH = RateFunction(
    name="tanh",
    g=np.tanh,
    d1=1.0,
    d2=0.0,
    d3=-2.0,
    d4=0.0,
    sup=1.0,
    d4_sup=_TANH_D4_SUP,
)

# Independent-walker fixture. Unbounded, so it sits outside the bounded-rate
# assumptions; it exists for closed-form (Poisson) cross-checks only.
LINEAR = RateFunction(
    name="linear",
    g=_linear_g,
    d1=1.0,
    d2=0.0,
    d3=0.0,
    d4=0.0,
    sup=math.inf,
    d4_sup=0.0,
    exactly_linear=True,
)

RATE_FUNCTIONS: dict[str, RateFunction] = {
    rf.name: rf for rf in (QTASEP, TANH, LINEAR)
}
