"""Exact generator algebra on small tori.

Everything here is machine-precision, no sampling: apply the jump generator
and its time reversal to local functions, enumerate a fixed-particle-number
state space, build the generator matrix, and evaluate the quantities whose
closed forms anchor the statistical suites (stationarity, integration by
parts, Sobolev-type norms, occupation-polynomial identities, the Taylor
control of g_n).

The time reversal of the right-jump dynamics under the product (or
canonical) measure is the left-jump dynamics with the same rates; the
change-of-variables identity pi(eta) g_n(eta_j) = pi(zeta) g_n(zeta_{j+1})
for zeta = eta after a j -> j+1 jump drives every identity in this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from math import comb
from typing import Callable

import numpy as np
from scipy.linalg import expm

from .errors import NotCenteredError, StateSpaceTooLargeError
from .measure import solve_fugacity
from .rates import RateFunction

__all__ = [
    "LocalFunction",
    "apply_generator",
    "apply_adjoint",
    "apply_symmetric",
    "apply_antisymmetric",
    "FiniteStateSpace",
    "tv_distance",
    "ibp_pair",
    "IbpSample",
    "ibp_mc",
    "h1_norm_sq",
    "h1_norm_sq_bonds",
    "h_minus1_norm_sq",
    "kv_second_moment",
    "KV_CONSTANT",
    "expansion_identity_gap",
    "taylor_remainder",
]

_STATE_CAP = 20_000

# Constant in the time-integral bound E[(int_0^T F)^2] <= 14 T |F|_{-1}^2.
KV_CONSTANT = 14.0


@dataclass(frozen=True)
class LocalFunction:
    """Function of finitely many sites, tagged with its support window."""

    sites: tuple[int, ...]
    fn: Callable[[np.ndarray], float]
    description: str = ""

    def __call__(self, occ) -> float:
        occ = np.asarray(occ)
        return float(self.fn(occ[list(self.sites)]))


def _occupancy_of(eta) -> np.ndarray:
    return np.asarray(getattr(eta, "occupancy", eta), dtype=np.int64)


def _window_of(f) -> set | None:
    return set(f.sites) if isinstance(f, LocalFunction) else None


def apply_generator(f, eta, rate: RateFunction, n: int) -> float:
    """n^2 sum_j g_n(eta_j) (f(eta after j -> j+1) - f(eta)).

    For a LocalFunction the sum runs only over the jumps that touch its
    window; the skipped terms vanish identically.
    """
    occ = _occupancy_of(eta)
    sites = len(occ)
    window = _window_of(f)
    base = float(f(occ))
    acc = 0.0
    for j in range(sites):
        k = occ[j]
        if k == 0:
            continue
        j1 = j + 1 if j + 1 < sites else 0
        if window is not None and j not in window and j1 not in window:
            continue
        z = occ.copy()
        z[j] -= 1
        z[j1] += 1
        acc += float(rate.gn(int(k), n)) * (float(f(z)) - base)
    return n * n * acc


def apply_adjoint(f, eta, rate: RateFunction, n: int) -> float:
    """Time reversal: same rates, jumps j -> j-1."""
    occ = _occupancy_of(eta)
    sites = len(occ)
    window = _window_of(f)
    base = float(f(occ))
    acc = 0.0
    for j in range(sites):
        k = occ[j]
        if k == 0:
            continue
        j1 = j - 1 if j > 0 else sites - 1
        if window is not None and j not in window and j1 not in window:
            continue
        z = occ.copy()
        z[j] -= 1
        z[j1] += 1
        acc += float(rate.gn(int(k), n)) * (float(f(z)) - base)
    return n * n * acc


def apply_symmetric(f, eta, rate: RateFunction, n: int) -> float:
    return 0.5 * (apply_generator(f, eta, rate, n) + apply_adjoint(f, eta, rate, n))


def apply_antisymmetric(f, eta, rate: RateFunction, n: int) -> float:
    return 0.5 * (apply_generator(f, eta, rate, n) - apply_adjoint(f, eta, rate, n))


class FiniteStateSpace:
    """All occupancy vectors with a fixed particle total on a small torus.

    The enumeration order is lexicographic-in-head; the index map is a
    bijection. Matrices are dense, which the state cap keeps cheap.
    """

    def __init__(self, sites: int, particles: int, rate: RateFunction, n: int,
                 cap: int = _STATE_CAP) -> None:
        assert sites >= 2 and particles >= 0
        count = comb(particles + sites - 1, sites - 1)
        if count > cap:
            raise StateSpaceTooLargeError(
                f"{count} states for {particles} particles on {sites} sites "
                f"(cap {cap})"
            )
        self.sites = sites
        self.particles = particles
        self.rate = rate
        self.n = int(n)
        self.states = np.array(
            list(_compositions(particles, sites)), dtype=np.int64
        ).reshape(count, sites)
        self.index = {tuple(s): i for i, s in enumerate(self.states.tolist())}
        # Per-occupancy jump rates n^2 g_n(k), k = 0 .. N.
        self._jump_rate = self.n**2 * np.asarray(
            rate.gn(np.arange(particles + 1), self.n), dtype=float
        )
        self._jump_rate[0] = 0.0
        self._gen: np.ndarray | None = None
        self._pi: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.states)

    def jump_index(self, i: int, j: int) -> int:
        """Index of state i after a j -> j+1 jump, or -1 if site j is empty."""
        s = self.states[i]
        if s[j] == 0:
            return -1
        t = s.copy()
        t[j] -= 1
        t[(j + 1) % self.sites] += 1
        return self.index[tuple(t.tolist())]

    def generator_matrix(self) -> np.ndarray:
        """Dense rate matrix; row sums are zero."""
        if self._gen is None:
            m = len(self.states)
            gen = np.zeros((m, m))
            for i, s in enumerate(self.states.tolist()):
                for j, k in enumerate(s):
                    if k == 0:
                        continue
                    t = list(s)
                    t[j] -= 1
                    t[(j + 1) % self.sites] += 1
                    r = self._jump_rate[k]
                    gen[i, self.index[tuple(t)]] += r
                    gen[i, i] -= r
            self._gen = gen
        return self._gen

    def canonical_measure(self, alpha: float | None = None) -> np.ndarray:
        """Conditioned product weights prod_j alpha^{eta_j} / g_n!(eta_j).

        The fugacity enters as alpha^N, constant on the fixed-N space, so the
        normalized vector is alpha-independent; passing alpha exercises that.
        """
        if self._pi is None:
            logfac = self.rate.gn_log_factorial_table(self.particles, self.n)
            logw = -logfac[self.states].sum(axis=1)
            logw -= logw.max()
            w = np.exp(logw)
            self._pi = w / w.sum()
        if alpha is None:
            return self._pi
        logfac = self.rate.gn_log_factorial_table(self.particles, self.n)
        logw = self.states.sum(axis=1) * math.log(alpha) - logfac[self.states].sum(axis=1)
        logw -= logw.max()
        w = np.exp(logw)
        return w / w.sum()

    def stationary_distribution(self) -> np.ndarray:
        """Null vector of the transposed generator, normalized to mass one."""
        gen = self.generator_matrix()
        m = len(gen)
        lhs = np.vstack([gen.T, np.ones((1, m))])
        rhs = np.zeros(m + 1)
        rhs[-1] = 1.0
        pi, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
        return pi

    def adjoint_matrix(self) -> np.ndarray:
        """Adjoint of the generator in L^2 of the canonical measure."""
        pi = self.canonical_measure()
        gen = self.generator_matrix()
        return (gen.T * pi[np.newaxis, :]) / pi[:, np.newaxis]

    def symmetric_matrix(self) -> np.ndarray:
        return 0.5 * (self.generator_matrix() + self.adjoint_matrix())

    def antisymmetric_matrix(self) -> np.ndarray:
        return 0.5 * (self.generator_matrix() - self.adjoint_matrix())

    def function_vector(self, f) -> np.ndarray:
        return np.array([float(f(s)) for s in self.states])

    def gn_site(self, j: int) -> np.ndarray:
        """Vector of g_n(eta_j) over all states."""
        return np.asarray(self.rate.gn(self.states[:, j], self.n), dtype=float)

    def expect(self, values: np.ndarray, weights: np.ndarray | None = None) -> float:
        pi = self.canonical_measure() if weights is None else weights
        return float(pi @ np.asarray(values))


def _compositions(total: int, parts: int):
    if parts == 1:
        yield (total,)
        return
    for head in range(total, -1, -1):
        for tail in _compositions(total - head, parts - 1):
            yield (head, *tail)


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def ibp_pair(space: FiniteStateSpace, f, j: int) -> tuple[float, float]:
    """Both sides of the discrete integration by parts at bond (j, j+1).

    lhs = E[f (W_j - W_{j+1})], rhs = -E[(grad_{j,j+1} f) W_j] with
    W = g_n(eta)/g'(0) and the gradient set to 0 on an empty donor site
    (inert: it is always multiplied by W_j = 0 there).
    """
    j1 = (j + 1) % space.sites
    pi = space.canonical_measure()
    fvec = space.function_vector(f)
    w_j = space.gn_site(j) / space.rate.d1
    w_j1 = space.gn_site(j1) / space.rate.d1
    lhs = float(pi @ (fvec * (w_j - w_j1)))
    grad = np.zeros(len(space))
    for i in range(len(space)):
        target = space.jump_index(i, j)
        if target >= 0:
            grad[i] = fvec[target] - fvec[i]
    rhs = -float(pi @ (grad * w_j))
    return lhs, rhs


@dataclass(frozen=True)
class IbpSample:
    """Monte Carlo estimate of both sides for f = eta_{j+1}."""

    lhs_mean: float
    lhs_se: float
    rhs_mean: float
    rhs_se: float
    closed_form: float     # -Phi_n(rho) / g'(0)
    samples: int


def ibp_mc(rate: RateFunction, n: int, rho: float, samples: int,
           rng: np.random.Generator) -> IbpSample:
    """Sample the f = eta_{j+1} case under the product measure.

    Two i.i.d. marginal draws stand in for the (j, j+1) pair; the gradient of
    eta_{j+1} along the jump is the indicator of an occupied donor, so the
    right side reduces to -W_j pointwise. Both sides estimate
    -Phi_n(rho)/g'(0).
    """
    sol = solve_fugacity(rate, n, rho)
    eta_j = sol.marginal.sample(rng, samples)
    eta_j1 = sol.marginal.sample(rng, samples)
    w_j = np.asarray(rate.gn(eta_j, n)) / rate.d1
    w_j1 = np.asarray(rate.gn(eta_j1, n)) / rate.d1
    lhs = eta_j1 * (w_j - w_j1)
    rhs = -w_j
    return IbpSample(
        lhs_mean=float(lhs.mean()),
        lhs_se=float(lhs.std(ddof=1) / math.sqrt(samples)),
        rhs_mean=float(rhs.mean()),
        rhs_se=float(rhs.std(ddof=1) / math.sqrt(samples)),
        closed_form=-sol.phi / rate.d1,
        samples=samples,
    )


def _check_centered(pi: np.ndarray, fvec: np.ndarray, tol: float = 1e-10) -> None:
    mean = float(pi @ fvec)
    if abs(mean) > tol:
        raise NotCenteredError(f"mean {mean!r} exceeds the centering tolerance")


def h1_norm_sq(space: FiniteStateSpace, fvec: np.ndarray) -> float:
    """<F, -S F> under the canonical measure."""
    pi = space.canonical_measure()
    return -float((pi * fvec) @ (space.symmetric_matrix() @ fvec))


def h1_norm_sq_bonds(space: FiniteStateSpace, fvec: np.ndarray) -> float:
    """Same norm through the explicit bond sum (n^2/2) sum_j E[g_n (grad F)^2]."""
    pi = space.canonical_measure()
    acc = 0.0
    for j in range(space.sites):
        grad_sq = np.zeros(len(space))
        for i in range(len(space)):
            target = space.jump_index(i, j)
            if target >= 0:
                grad_sq[i] = (fvec[target] - fvec[i]) ** 2
        acc += float(pi @ (space.gn_site(j) * grad_sq))
    return 0.5 * space.n**2 * acc


def h_minus1_norm_sq(space: FiniteStateSpace, fvec: np.ndarray) -> float:
    """<F, (-S)^{-1} F> on the centered subspace."""
    pi = space.canonical_measure()
    fvec = np.asarray(fvec, dtype=float)
    _check_centered(pi, fvec)
    u, *_ = np.linalg.lstsq(-space.symmetric_matrix(), fvec, rcond=None)
    return float((pi * fvec) @ u)


def kv_second_moment(space: FiniteStateSpace, fvec: np.ndarray, horizon: float) -> float:
    """Exact E[(int_0^T F(eta_s) ds)^2] for the stationary chain.

    Stationarity turns the double time integral into
    2 <F, [G^{-2}(e^{TG} - I) - T G^{-1}] F>; the inverses live on the
    centered subspace, where the generator is invertible, and the additive
    constants they leave free drop out against centered F.
    """
    gen = space.generator_matrix()
    pi = space.canonical_measure()
    fvec = np.asarray(fvec, dtype=float)
    _check_centered(pi, fvec)
    u1, *_ = np.linalg.lstsq(gen, fvec, rcond=None)
    u1 -= pi @ u1
    u2, *_ = np.linalg.lstsq(gen, u1, rcond=None)
    u2 -= pi @ u2
    flow = expm(horizon * gen)
    return 2.0 * float((pi * fvec) @ ((flow @ u2 - u2) - horizon * u1))


def expansion_identity_gap(rate: RateFunction, n: int, occ, j: int,
                           degree: int) -> float:
    """Residual of the degree-2 or degree-3 occupation-polynomial identity.

    With Ltilde = (n^2 g'(0))^{-1} L and W = g_n(eta)/g'(0):

        Ltilde(eta_j^2 - eta_j)                 = 2 (W_{j-1} - W_j) eta_j + 2 W_j
        Ltilde(eta_j^3 + 1.5 eta_j^2 - 2.5 eta_j) = 3 (W_{j-1} - W_j) eta_j^2
                                                    + 6 W_{j-1} eta_j + 3 W_j

    Both are exact for every configuration; the left side is evaluated
    through apply_generator, the right from the W values directly. The cubic
    needs the -2.5 coefficient: it is the unique value that cancels the
    constant jump-in term, as the empty-site case 0 = 0 already forces.
    """
    occ = _occupancy_of(occ)
    sites = len(occ)
    jm = j - 1 if j > 0 else sites - 1
    w_prev = float(rate.gn(int(occ[jm]), n)) / rate.d1
    w_here = float(rate.gn(int(occ[j]), n)) / rate.d1
    k = float(occ[j])
    if degree == 2:
        poly = LocalFunction((j,), lambda w: float(w[0]) ** 2 - float(w[0]))
        rhs = 2.0 * (w_prev - w_here) * k + 2.0 * w_here
    elif degree == 3:
        poly = LocalFunction(
            (j,), lambda w: float(w[0]) ** 3 + 1.5 * float(w[0]) ** 2 - 2.5 * float(w[0])
        )
        rhs = 3.0 * (w_prev - w_here) * k * k + 6.0 * w_prev * k + 3.0 * w_here
    else:
        raise ValueError(f"no identity of degree {degree}")
    lhs = apply_generator(poly, occ, rate, n) / (n * n * rate.d1)
    return lhs - rhs


def taylor_remainder(rate: RateFunction, n: int, k) -> tuple[np.ndarray, np.ndarray]:
    """Scaled remainder of the cubic expansion of W = g_n(k)/g'(0), plus bound.

    Returns (n^{3/2} |W - k - (g''/2g') k^2/sqrt(n) - (g'''/6g') k^3/n|,
    sup|g''''| k^4 / (24 g'(0))); the first is everywhere at most the second.
    """
    k = np.asarray(k, dtype=float)
    root = math.sqrt(n)
    w = np.asarray(rate.gn(k, n)) / rate.d1
    cubic = k + (rate.d2 / (2.0 * rate.d1)) * k**2 / root \
        + (rate.d3 / (6.0 * rate.d1)) * k**3 / n
    remainder = n**1.5 * np.abs(w - cubic)
    bound = rate.d4_sup * k**4 / (24.0 * rate.d1)
    return remainder, bound
