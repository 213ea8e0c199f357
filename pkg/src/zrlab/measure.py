"""Single-site equilibrium marginals and the fugacity solve.

The product equilibrium state ties the occupancy of one site to a fugacity
alpha through the weights

    P(eta = k)  proportional to  alpha^k / g_n!(k),
    g_n!(k) = g_n(k) g_n(k-1) ... g_n(1),   g_n!(0) = 1.

For bounded g the series converges for alpha < sqrt(n) sup g and diverges at
the radius. All weight arithmetic runs in the log domain; the series is
truncated adaptively with a certified geometric tail bound, so pmf vectors
sum to 1 within 1e-12.

``solve_fugacity`` inverts the mean occupation, producing the finite-n
fugacity Phi_n(rho). Two identities anchor the result: E[g_n(eta)] equals the
fugacity itself, and for g(x) = x the marginal is Poisson so the solve is
closed form.

The q-geometric route builds the same pmf for the q-TASEP rate from
q-Pochhammer symbols; the two constructions must agree digit for digit, which
the test suite enforces.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DensityUnreachableError,
    FugacityAtRadiusError,
    InvalidConfigError,
    QParameterError,
)
from .rates import RateFunction

__all__ = [
    "SiteMarginal",
    "FugacitySolution",
    "site_marginal",
    "log_partition",
    "mean_occupation",
    "solve_fugacity",
    "w_variance",
    "q_geometric_pmf",
    "sample_configuration",
    "write_marginal_csv",
]

# Truncation policy for the weight series.
_TERM_CUTOFF = 1e-16   # stop extending once terms are this small vs the sum
_TAIL_TARGET = 1e-14   # certified relative tail mass before normalization
_K_CAP = 10**6
_RADIUS_GUARD = 1.0 - 1e-9


def _log_weight_series(rate: RateFunction, n: int, alpha: float) -> tuple[np.ndarray, float]:
    """Log-weights k log(alpha) - log g_n!(k) for k = 0 .. K, plus tail bound.

    K is grown until the last term is negligible against the running sum and
    the geometric tail estimate term_K * r / (1 - r), r = alpha / g_n(K+1),
    is below the tail target. Raises fugacity-at-radius when alpha sits at or
    beyond sqrt(n) sup g, where no truncation can converge.
    """
    if alpha < 0.0:
        raise InvalidConfigError("fugacity must be nonnegative")
    if not alpha < rate.radius(n) * _RADIUS_GUARD:
        raise FugacityAtRadiusError(
            f"alpha={alpha!r} at or beyond the series radius {rate.radius(n)!r} "
            f"for rate {rate.name!r} at n={n}"
        )
    if alpha == 0.0:
        return np.zeros(1), 0.0

    log_alpha = math.log(alpha)
    kmax = 64
    while True:
        ks = np.arange(kmax + 1)
        logw = ks * log_alpha - rate.gn_log_factorial_table(kmax, n)
        peak = float(logw.max())
        total = float(np.exp(logw - peak).sum())  # sum / e^peak
        ratio = alpha / float(rate.gn(kmax + 1, n))
        if ratio < 1.0:
            # g_n is non-decreasing, so every later term ratio is <= ratio.
            tail = math.exp(logw[-1] - peak) * ratio / (1.0 - ratio)
            term_ok = math.exp(logw[-1] - peak) < _TERM_CUTOFF * total
            if term_ok and tail < _TAIL_TARGET * total:
                return logw, tail / total
        if kmax >= _K_CAP:
            raise FugacityAtRadiusError(
                f"weight series for alpha={alpha!r} did not converge within "
                f"{_K_CAP} terms (rate {rate.name!r}, n={n})"
            )
        kmax *= 2


@dataclass(frozen=True)
class SiteMarginal:
    """Normalized single-site occupancy law at a fixed fugacity."""

    rate: RateFunction
    n: int
    alpha: float
    probs: np.ndarray      # pmf over k = 0 .. kmax, sums to 1 - tail_bound
    log_z: float
    tail_bound: float      # relative mass certified to sit beyond kmax

    @property
    def kmax(self) -> int:
        return len(self.probs) - 1

    def support(self) -> np.ndarray:
        return np.arange(self.kmax + 1)

    def mean(self) -> float:
        return float(self.probs @ self.support())

    def variance(self) -> float:
        k = self.support()
        m = self.mean()
        return float(self.probs @ (k - m) ** 2)

    def central_moment(self, order: int) -> float:
        k = self.support()
        return float(self.probs @ (k - self.mean()) ** order)

    def g_moment(self, power: int = 1) -> float:
        """E[g_n(eta)^power]; power 1 must reproduce the fugacity."""
        g = np.asarray(self.rate.gn(self.support(), self.n))
        return float(self.probs @ g**power)

    def w_variance(self) -> float:
        """Variance of W = g_n(eta) / g'(0) under the marginal."""
        g = np.asarray(self.rate.gn(self.support(), self.n))
        m = float(self.probs @ g)
        return float(self.probs @ (g - m) ** 2) / self.rate.d1**2

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        """Inverse-CDF draws; identical streams give identical occupancies."""
        cdf = np.cumsum(self.probs)
        cdf[-1] = 1.0  # absorb the certified tail in the last bucket
        return np.searchsorted(cdf, rng.random(size), side="right").astype(np.int64)


def site_marginal(rate: RateFunction, n: int, alpha: float) -> SiteMarginal:
    """Build the occupancy marginal at fugacity alpha."""
    logw, tail = _log_weight_series(rate, n, alpha)
    peak = float(logw.max())
    scaled = np.exp(logw - peak)
    log_z = peak + math.log(float(scaled.sum()))
    probs = np.exp(logw - log_z)
    return SiteMarginal(rate=rate, n=n, alpha=alpha, probs=probs,
                        log_z=log_z, tail_bound=tail)


def log_partition(rate: RateFunction, n: int, alpha: float) -> tuple[float, int]:
    """Log of the single-site partition sum and the truncation index used."""
    logw, _ = _log_weight_series(rate, n, alpha)
    peak = float(logw.max())
    return peak + math.log(float(np.exp(logw - peak).sum())), len(logw) - 1


def mean_occupation(rate: RateFunction, n: int, alpha: float) -> float:
    """Mean occupancy at fugacity alpha. Strictly increasing in alpha."""
    return site_marginal(rate, n, alpha).mean()


@dataclass(frozen=True)
class FugacitySolution:
    """Result of inverting the mean occupation at a target density."""

    rho: float
    phi: float
    residual: float
    alpha_star: float      # series radius sqrt(n) sup g; phi must sit below it
    iterations: int
    marginal: SiteMarginal


def solve_fugacity(rate: RateFunction, n: int, rho: float) -> FugacitySolution:
    """Find Phi_n(rho) with mean occupation rho.

    Bisection brackets the root, Newton (using d mean / d alpha =
    Var(eta) / alpha) polishes it. For the exactly linear rate the marginal
    is Poisson(alpha / g'(0)) and the solve collapses to alpha = g'(0) rho.
    """
    if not rho > 0.0:
        raise InvalidConfigError("density must be positive")

    if rate.exactly_linear:
        phi = rate.d1 * rho
        marg = site_marginal(rate, n, phi)
        return FugacitySolution(rho=rho, phi=phi, residual=abs(marg.mean() - rho),
                                alpha_star=rate.radius(n), iterations=0,
                                marginal=marg)

    radius = rate.radius(n)
    lo, flo = 0.0, -rho
    hi = min(rho * rate.d1, radius / 2.0)
    iterations = 0
    while True:
        fhi = mean_occupation(rate, n, hi) - rho
        iterations += 1
        if fhi > 0.0:
            break
        lo, flo = hi, fhi
        gap = radius - hi
        if gap < radius * 1e-12:
            raise DensityUnreachableError(
                f"density {rho!r} not reached below the radius {radius!r} "
                f"(rate {rate.name!r}, n={n})"
            )
        hi = radius - gap / 2.0 if 2.0 * hi >= radius else 2.0 * hi

    # Bisect to a narrow bracket, then let Newton finish.
    while hi - lo > 1e-3 * max(1.0, hi) and iterations < 200:
        mid = 0.5 * (lo + hi)
        fmid = mean_occupation(rate, n, mid) - rho
        iterations += 1
        if fmid < 0.0:
            lo, flo = mid, fmid
        else:
            hi, fhi = mid, fmid

    x = 0.5 * (lo + hi)
    scale = max(1.0, rho)
    for _ in range(60):
        marg = site_marginal(rate, n, x)
        fx = marg.mean() - rho
        iterations += 1
        if abs(fx) <= 5e-15 * scale:
            break
        if fx < 0.0:
            lo = x
        else:
            hi = x
        slope = marg.variance() / x
        step = x - fx / slope
        x = step if lo < step < hi else 0.5 * (lo + hi)
    else:
        marg = site_marginal(rate, n, x)
        fx = marg.mean() - rho

    assert abs(fx) < 1e-12 * scale, "fugacity solve stalled"
    # The fugacity is itself the first g-moment of the marginal it defines.
    assert abs(marg.g_moment(1) - x) < 1e-10 * max(1.0, x)
    return FugacitySolution(rho=rho, phi=x, residual=abs(fx),
                            alpha_star=radius, iterations=iterations,
                            marginal=marg)


def w_variance(rate: RateFunction, n: int, alpha: float) -> float:
    """Var(g_n(eta) / g'(0)) at fugacity alpha."""
    return site_marginal(rate, n, alpha).w_variance()


def q_geometric_pmf(n: int, alpha: float, kmax: int | None = None) -> np.ndarray:
    """q-geometric occupancy law (a; q)_inf a^k / (q; q)_k, a = alpha/sqrt(n).

    This is the gap law of the coupled exclusion picture with
    q = exp(-1/sqrt(n)); it must match ``site_marginal`` for the qtasep rate.
    """
    root = math.sqrt(n)
    q = math.exp(-1.0 / root)
    a = alpha / root
    if not 0.0 < q < 1.0:
        raise QParameterError(f"q={q!r} outside (0, 1)")
    if not 0.0 <= a < 1.0:
        raise QParameterError(f"rescaled fugacity a={a!r} outside [0, 1)")

    # log (a; q)_inf via the truncated log-product. The dropped factors m > M
    # contribute at most a q^{M+1} / ((1 - q)(1 - a)) in absolute log value.
    log_poch = 0.0
    m = 0
    qm = 1.0
    while a * qm / ((1.0 - q) * (1.0 - a)) > 1e-16:
        log_poch += math.log1p(-a * qm)
        qm *= q
        m += 1
        assert m < 10**7, "q-Pochhammer truncation runaway"

    if kmax is None:
        # pmf_k <= a^k / (q; q)_inf; pick kmax so the geometric tail is dust.
        kmax = 64 if a == 0.0 else max(16, int(math.ceil(40.0 / -math.log(a))))
    ks = np.arange(kmax + 1)
    log_qfact = np.zeros(kmax + 1)
    if kmax >= 1:
        log_qfact[1:] = np.cumsum(np.log1p(-np.power(q, np.arange(1, kmax + 1))))
    with np.errstate(divide="ignore"):
        log_a_pow = np.where(ks == 0, 0.0, ks * (math.log(a) if a > 0.0 else -np.inf))
    return np.exp(log_poch + log_a_pow - log_qfact)


def sample_configuration(marginal: SiteMarginal, sites: int, rng: np.random.Generator):
    """Equilibrium lattice state with i.i.d. sites drawn from the marginal."""
    from .lattice import Configuration

    if sites < 2:
        raise InvalidConfigError("need at least 2 sites")
    return Configuration(marginal.sample(rng, sites), marginal.rate, marginal.n)


def write_marginal_csv(marginal: SiteMarginal, path: str | Path) -> None:
    """Dump the pmf table as ``occupancy,probability`` rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["occupancy", "probability"])
        for k, p in enumerate(marginal.probs):
            writer.writerow([k, repr(float(p))])
