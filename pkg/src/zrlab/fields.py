"""Fluctuation fields, discrete calculus, and trajectory observers.

The density fluctuation field pairs the centered occupancies with a smooth
compactly supported test function evaluated in a frame moving at f_n sites
per macroscopic time unit:

    X_t(phi) = n^{-1/2} sum_j (eta_j - rho) phi((j - f_n t) / n).

Observables are time integrals of such sums along an event-driven path. The
state is piecewise constant but the frame moves continuously, so each
holding interval contributes a smooth integrand; a 4-node Gauss-Legendre
rule per interval integrates it far below statistical resolution.

``ObserverBank`` is the per-trajectory engine. It merges consecutive holding
intervals into one quadrature span as long as no jump touches a conservative
window around the test-function support (plus block lookahead), which cuts
the work per event to a couple of integer comparisons for the vast majority
of events. Spans are force-split at checkpoint times, so cumulative
integrals and field snapshots at checkpoints are exact span boundaries, and
at a cap of two sites of frame motion, keeping the quadrature error of the
moving frame negligible.

Site windows are kept as unreduced integer ranges; occupancies are gathered
modulo the lattice size while macroscopic coordinates stay unreduced, which
makes frame covariance an identity rather than an approximation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import quad

from .errors import (
    EpsilonTooSmallError,
    InvalidConfigError,
    MissingObserverError,
)
from .rates import FramingCoefficients, RateFunction

__all__ = [
    "TestFunction",
    "bump",
    "gaussian",
    "fluctuation_field",
    "discrete_grad",
    "discrete_lap",
    "WView",
    "make_w_view",
    "block_average",
    "iota_average",
    "q_statistic",
    "TrajectoryRecord",
    "martingale_path",
    "ObserverBank",
    "INTEGRAND_NAMES",
    "block_series_name",
    "grad_square_time_integral",
    "qv_shape_time_integral",
]

# 4-node Gauss-Legendre rule on [-1, 1]; exact through degree 7.
_GL_NODES = np.array([
    -0.8611363115940526, -0.3399810435848563,
    0.3399810435848563, 0.8611363115940526,
])
_GL_WEIGHTS = np.array([
    0.3478548451374538, 0.6521451548625461,
    0.6521451548625461, 0.3478548451374538,
])


@dataclass(frozen=True)
class TestFunction:
    """Smooth compactly supported function with analytic derivatives.

    ``parts`` maps centered coordinates x - center (any array shape) to the
    triple (phi, phi', phi''). Values vanish identically outside
    |x - center| < radius. The squared L2 norms are fixed at construction by
    adaptive quadrature.
    """

    name: str
    center: float
    radius: float
    l2sq: float
    d1_l2sq: float
    d2_l2sq: float
    parts: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray]]

    def values(self, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.parts(np.asarray(x, dtype=float) - self.center)

    def __call__(self, x) -> np.ndarray:
        return self.values(x)[0]

    def shifted(self, shift: float) -> "TestFunction":
        return TestFunction(
            name=self.name, center=self.center + shift, radius=self.radius,
            l2sq=self.l2sq, d1_l2sq=self.d1_l2sq, d2_l2sq=self.d2_l2sq,
            parts=self.parts,
        )


def _norms(parts, radius: float) -> tuple[float, float, float]:
    out = []
    for i in range(3):
        val, _ = quad(lambda x, i=i: float(parts(np.asarray(x))[i]) ** 2,
                      -radius, radius, limit=200, epsabs=1e-13, epsrel=1e-12)
        out.append(val)
    return tuple(out)


def bump(center: float, radius: float = 1.0, name: str = "bump") -> TestFunction:
    """exp(1 - 1/(1 - u^2)) on u = (x - center)/radius, zero outside."""
    assert radius > 0.0

    def parts(dx: np.ndarray):
        u = np.asarray(dx, dtype=float) / radius
        inside = np.abs(u) < 1.0
        s = np.where(inside, 1.0 - u * u, 1.0)
        phi = np.where(inside, np.exp(1.0 - 1.0 / s), 0.0)
        usq = u * u
        d1 = phi * (-2.0 * u / s**2) / radius
        d2 = phi * (4.0 * usq / s**4 - 2.0 / s**2 - 8.0 * usq / s**3) / radius**2
        return phi, d1, d2

    l2, d1l2, d2l2 = _norms(parts, radius)
    return TestFunction(name=name, center=center, radius=radius,
                        l2sq=l2, d1_l2sq=d1l2, d2_l2sq=d2l2, parts=parts)


def gaussian(center: float, width: float = 0.35, name: str = "gaussian") -> TestFunction:
    """Gaussian of the given width, truncated where its value drops below 1e-300."""
    assert width > 0.0
    radius = width * math.sqrt(-2.0 * math.log(1e-300))

    def parts(dx: np.ndarray):
        u = np.asarray(dx, dtype=float)
        inside = np.abs(u) < radius
        z = np.where(inside, u / width, 0.0)
        phi = np.where(inside, np.exp(-0.5 * z * z), 0.0)
        d1 = phi * (-z / width)
        d2 = phi * (z * z - 1.0) / width**2
        return phi, d1, d2

    l2, d1l2, d2l2 = _norms(parts, radius)
    return TestFunction(name=name, center=center, radius=radius,
                        l2sq=l2, d1_l2sq=d1l2, d2_l2sq=d2l2, parts=parts)


def _occupancy_of(eta) -> np.ndarray:
    return np.asarray(getattr(eta, "occupancy", eta), dtype=np.int64)


def _support_window(offset: float, n: int, fn: TestFunction,
                    left: int, right: int) -> np.ndarray:
    """Unreduced site indices covering the support at frame offset, padded."""
    lo = math.floor(offset + n * (fn.center - fn.radius)) - left
    hi = math.ceil(offset + n * (fn.center + fn.radius)) + right
    return np.arange(lo, hi + 1)


def fluctuation_field(eta, t: float, fn: TestFunction,
                      frame: FramingCoefficients, n: int, rho: float) -> float:
    """X_t(phi) = n^{-1/2} sum_j (eta_j - rho) phi((j - f_n t)/n)."""
    occ = _occupancy_of(eta)
    sites = len(occ)
    if 2.0 * fn.radius * n + 2 > sites:
        raise InvalidConfigError("test-function support does not fit on the lattice")
    offset = frame.offset(n, t)
    idx = _support_window(offset, n, fn, 1, 1)
    phi = fn.values((idx - offset) / n)[0]
    return float((occ[idx % sites] - rho) @ phi) / math.sqrt(n)


def discrete_grad(fn: TestFunction, j: int, t: float,
                  frame: FramingCoefficients, n: int) -> float:
    """Central difference (n/2)(phi^n_{j+1} - phi^n_{j-1}) in the moving frame."""
    offset = frame.offset(n, t)
    phi = fn.values((np.array([j - 1, j + 1]) - offset) / n)[0]
    return 0.5 * n * float(phi[1] - phi[0])


def discrete_lap(fn: TestFunction, j: int, t: float,
                 frame: FramingCoefficients, n: int) -> float:
    """n^2 (phi^n_{j+1} + phi^n_{j-1} - 2 phi^n_j) in the moving frame."""
    offset = frame.offset(n, t)
    phi = fn.values((np.array([j - 1, j, j + 1]) - offset) / n)[0]
    return n * n * float(phi[0] + phi[2] - 2.0 * phi[1])


@dataclass(frozen=True)
class WView:
    """Per-site rate observable W = g_n(eta)/g'(0) and its centered version."""

    w: np.ndarray
    w_bar: np.ndarray

    def __len__(self) -> int:
        return len(self.w)


def make_w_view(eta, rate: RateFunction, n: int, phi_fug: float) -> WView:
    occ = _occupancy_of(eta)
    w = np.asarray(rate.gn(occ, n), dtype=float) / rate.d1
    return WView(w=w, w_bar=w - phi_fug / rate.d1)


def block_average(view: WView, ell: int, j: int) -> float:
    """Forward block mean of the centered W over sites j .. j+ell-1 (periodic)."""
    assert ell >= 1
    sites = len(view)
    idx = (j + np.arange(ell)) % sites
    return float(view.w_bar[idx].mean())


def iota_average(view: WView, eps: float, j: int, n: int) -> float:
    """n^{-1/2} sum_k w_bar_k iota_eps((k - j)/n), iota_eps = eps^{-1} 1_[0,eps).

    For eps*n integer this equals sqrt(n) times the forward block mean with
    ell = eps*n, which is the identity the block route relies on.
    """
    count = int(math.ceil(eps * n))
    if math.floor(eps * n) < 1:
        raise EpsilonTooSmallError(f"eps={eps!r} covers no site at n={n}")
    sites = len(view)
    idx = (j + np.arange(count)) % sites
    return float(view.w_bar[idx].sum()) / (eps * math.sqrt(n))


def q_statistic(view: WView, ell: int, j: int, sigma_sq: float,
                rate: RateFunction) -> float:
    """(g''(0)/2) ((block mean)^2 - sigma^2/ell), the centered block square."""
    avg = block_average(view, ell, j)
    return 0.5 * rate.d2 * (avg * avg - sigma_sq / ell)


@dataclass(frozen=True)
class TrajectoryRecord:
    """Checkpointed observables of one trajectory.

    ``integrals[name][i]`` is the time integral of the named integrand over
    [times[0], times[i]]; ``field[i]`` is X_t(phi) at times[i].
    """

    times: np.ndarray
    field: np.ndarray
    integrals: dict[str, np.ndarray]
    events: int
    stream: int

    def series(self, name: str) -> np.ndarray:
        try:
            return self.integrals[name]
        except KeyError:
            raise MissingObserverError(
                f"series {name!r} was not recorded; have {sorted(self.integrals)}"
            ) from None


def martingale_path(record: TrajectoryRecord) -> np.ndarray:
    """M_t = X_t - X_0 - int_0^t (frame drift + generator) X ds at checkpoints."""
    drift = record.series("symmetric") + record.series("antisymmetric")
    return record.field - record.field[0] - drift


INTEGRAND_NAMES = ("qv", "symmetric", "antisymmetric", "modified_pair", "curvature")


def block_series_name(ell: int) -> str:
    return f"block_sq_{ell}"


class ObserverBank:
    """Accumulates time integrals and checkpoint snapshots for one trajectory.

    Protocol (driven by Configuration.run_until): ``begin`` once, ``advance``
    to every event time with the pre-event state, ``before_jump`` right
    before a state change, ``finish`` after the horizon. The bank never
    mutates the occupancy array it is handed.
    """

    def __init__(self, rate: RateFunction, n: int, sites: int, rho: float,
                 phi_fug: float, frame: FramingCoefficients, fn: TestFunction,
                 checkpoint_times: np.ndarray,
                 integrands: tuple[str, ...] = ("qv", "symmetric", "antisymmetric"),
                 block_sizes: tuple[int, ...] = (),
                 sigma_sq: float = 0.0,
                 stream: int = 0) -> None:
        for name in integrands:
            if name not in INTEGRAND_NAMES:
                raise InvalidConfigError(f"unknown integrand {name!r}")
        self.rate = rate
        self.n = int(n)
        self.sites = int(sites)
        self.rho = float(rho)
        self.phi_fug = float(phi_fug)
        self.frame = frame
        self.fn = fn
        self.speed = frame.speed(n)
        self.wanted = frozenset(integrands)
        self.block_sizes = tuple(int(b) for b in block_sizes)
        assert all(b >= 1 for b in self.block_sizes)
        self.sigma_sq = float(sigma_sq)
        self.stream = int(stream)

        self._lmax = max(self.block_sizes, default=0)
        self._left = 2
        self._right = self._lmax + 2
        # Span cap: at most ~2 sites of frame motion per quadrature span.
        self._span_cap = 2.0 / max(abs(self.speed), 1e-12)
        needed = math.ceil(2.0 * fn.radius * n) + self._left + self._right + 8
        if needed > sites:
            raise InvalidConfigError(
                f"lattice of {sites} sites is too small for the observer "
                f"window ({needed} sites)"
            )

        self.times = np.asarray(checkpoint_times, dtype=float)
        assert len(self.times) >= 1 and (np.diff(self.times) > 0.0).all()

        names = list(integrands) + [block_series_name(b) for b in self.block_sizes]
        self._acc = {name: 0.0 for name in names}
        self._rows = {name: np.empty(len(self.times)) for name in names}
        self._field_rows = np.empty(len(self.times))
        self._cp = 0
        self.events = 0
        self.cursor = math.nan
        self._dirty_lo = 0
        self._dirty_width = sites  # until begin(): everything is dirty

    # -- protocol ---------------------------------------------------------

    def begin(self, occ: np.ndarray, t0: float) -> None:
        self.cursor = float(t0)
        while self._cp < len(self.times) and self.times[self._cp] <= t0:
            self._record_checkpoint(occ)
        self._reset_dirty()

    def advance(self, occ: np.ndarray, t_next: float) -> None:
        """Extend the open span to t_next, splitting at checkpoints and caps."""
        while True:
            cp = self.times[self._cp] if self._cp < len(self.times) else math.inf
            limit = min(cp, self.cursor + self._span_cap)
            if limit > t_next:
                break
            self._flush(occ, limit)
            if limit == cp:
                self._record_checkpoint(occ)

    def before_jump(self, occ: np.ndarray, t: float, j: int) -> None:
        """Flush the open span if the jump at j can touch the window."""
        self.events += 1
        if (j - self._dirty_lo + 1) % self.sites <= self._dirty_width + 1:
            self._flush(occ, t)

    def finish(self) -> TrajectoryRecord:
        assert self._cp == len(self.times), "horizon ended before the last checkpoint"
        return TrajectoryRecord(
            times=self.times.copy(),
            field=self._field_rows.copy(),
            integrals={k: v.copy() for k, v in self._rows.items()},
            events=self.events,
            stream=self.stream,
        )

    # -- internals --------------------------------------------------------

    def _reset_dirty(self) -> None:
        lo_off = self.speed * self.cursor
        hi_off = self.speed * (self.cursor + self._span_cap)
        lo = math.floor(min(lo_off, hi_off) + self.n * (self.fn.center - self.fn.radius))
        hi = math.ceil(max(lo_off, hi_off) + self.n * (self.fn.center + self.fn.radius))
        self._dirty_lo = (lo - self._left - 2) % self.sites
        self._dirty_width = (hi + self._right + 2) - (lo - self._left - 2)

    def _record_checkpoint(self, occ: np.ndarray) -> None:
        t = self.times[self._cp]
        offset = self.speed * t
        idx = _support_window(offset, self.n, self.fn, 1, 1)
        phi = self.fn.values((idx - offset) / self.n)[0]
        field = float((occ[idx % self.sites] - self.rho) @ phi) / math.sqrt(self.n)
        self._field_rows[self._cp] = field
        for name, val in self._acc.items():
            self._rows[name][self._cp] = val
        self._cp += 1

    def _flush(self, occ: np.ndarray, t_end: float) -> None:
        t0 = self.cursor
        if t_end <= t0:
            return
        half = 0.5 * (t_end - t0)
        nodes = 0.5 * (t0 + t_end) + half * _GL_NODES

        off0 = self.speed * t0
        off1 = self.speed * t_end
        lo = math.floor(min(off0, off1) + self.n * (self.fn.center - self.fn.radius)) - self._left
        hi = math.ceil(max(off0, off1) + self.n * (self.fn.center + self.fn.radius)) + self._right
        idx = np.arange(lo, hi + 1)
        occ_win = occ[idx % self.sites]

        n = self.n
        gn = np.asarray(self.rate.gn(occ_win, n), dtype=float)
        gn_c = gn - self.phi_fug
        wbar = gn_c / self.rate.d1
        eta_c = occ_win - self.rho

        coords = (idx[np.newaxis, :] - self.speed * nodes[:, np.newaxis]) / n
        phi, dphi, d2phi = self.fn.values(coords)

        acc = self._acc
        wanted = self.wanted
        need_grad = bool(self.block_sizes) or "modified_pair" in wanted \
            or "antisymmetric" in wanted
        grad = 0.5 * n * (phi[:, 2:] - phi[:, :-2]) if need_grad else None

        if "qv" in wanted:
            diff = phi[:, 1:] - phi[:, :-1]
            vals = n * (diff * diff) @ gn[:-1]
            acc["qv"] += half * float(vals @ _GL_WEIGHTS)
        if "symmetric" in wanted:
            lap = n * n * (phi[:, 2:] + phi[:, :-2] - 2.0 * phi[:, 1:-1])
            vals = lap @ gn_c[1:-1]
            acc["symmetric"] += half * float(vals @ _GL_WEIGHTS) / (2.0 * math.sqrt(n))
        if "antisymmetric" in wanted:
            vals = n * (grad @ gn_c[1:-1]) \
                - (self.speed / n) * (dphi[:, 1:-1] @ eta_c[1:-1])
            acc["antisymmetric"] += half * float(vals @ _GL_WEIGHTS) / math.sqrt(n)
        if "modified_pair" in wanted:
            pair = wbar[:-2] * wbar[1:-1]
            vals = 0.5 * self.rate.d2 * (grad @ pair)
            acc["modified_pair"] += half * float(vals @ _GL_WEIGHTS)
        if "curvature" in wanted:
            vals = d2phi[:, 1:-1] @ eta_c[1:-1]
            acc["curvature"] += half * float(vals @ _GL_WEIGHTS) / math.sqrt(n)
        if self.block_sizes:
            width = len(idx)
            cs = np.concatenate(([0.0], np.cumsum(wbar)))
            for ell in self.block_sizes:
                # Forward block means; starts past width-ell fall outside the
                # gradient support by construction, so zero-fill is exact.
                means = np.zeros(width)
                means[: width - ell + 1] = (cs[ell:] - cs[: width - ell + 1]) / ell
                q = 0.5 * self.rate.d2 * (means[1:-1] ** 2 - self.sigma_sq / ell)
                vals = grad @ q
                acc[block_series_name(ell)] += half * float(vals @ _GL_WEIGHTS)

        self.cursor = t_end
        self._reset_dirty()


def _periodic_time_integral(shape: Callable[[np.ndarray], np.ndarray],
                            speed: float, horizon: float) -> float:
    """Integral over [0, horizon] of shape(speed * t), shape having period 1.

    Whole periods use a 64-point rectangle rule (spectrally accurate for
    smooth periodic integrands); the fractional remainder uses Gauss-Legendre.
    """
    if horizon == 0.0:
        return 0.0
    span = abs(speed) * horizon
    if span < 1e-9:
        return horizon * float(shape(np.zeros(1))[0])
    grid = (np.arange(64) + 0.5) / 64.0
    per_period = float(shape(grid).mean())
    whole = math.floor(span)
    frac = span - whole
    tail = 0.0
    if frac > 0.0:
        lo = 0.0 if speed > 0.0 else 1.0 - frac
        xs = lo + 0.5 * frac * (1.0 + _GL_NODES)
        tail = 0.5 * frac * float(shape(xs) @ _GL_WEIGHTS)
    return (whole * per_period + tail) / abs(speed)


def _frame_shape(fn: TestFunction, n: int, kind: str) -> Callable[[np.ndarray], np.ndarray]:
    base = _support_window(0.0, n, fn, 2, 2)

    def shape(offsets: np.ndarray) -> np.ndarray:
        coords = (base[np.newaxis, :] - np.asarray(offsets)[:, np.newaxis]) / n
        phi = fn.values(coords)[0]
        if kind == "grad":
            vals = 0.5 * n * (phi[:, 2:] - phi[:, :-2])
            return (vals * vals).sum(axis=1)
        diff = phi[:, 1:] - phi[:, :-1]
        return n * (diff * diff).sum(axis=1)

    return shape


def grad_square_time_integral(fn: TestFunction, frame: FramingCoefficients,
                              n: int, horizon: float) -> float:
    """int_0^T sum_j (grad^n phi^n_j)^2 dt, exact up to quadrature dust."""
    return _periodic_time_integral(_frame_shape(fn, n, "grad"),
                                   frame.speed(n), horizon)


def qv_shape_time_integral(fn: TestFunction, frame: FramingCoefficients,
                           n: int, horizon: float) -> float:
    """int_0^T (1/n) sum_j [n (phi^n_{j+1} - phi^n_j)]^2 dt.

    Multiplied by the mean of g_n this is the exact equilibrium expectation
    of the integrated quadratic variation.
    """
    return _periodic_time_integral(_frame_shape(fn, n, "bond"),
                                   frame.speed(n), horizon)
