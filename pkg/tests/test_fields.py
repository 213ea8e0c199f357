"""Field evaluation, discrete calculus, W-views, and the observer bank."""

import math

import numpy as np
import pytest

from zrlab.errors import (
    EpsilonTooSmallError,
    InvalidConfigError,
    MissingObserverError,
)
from zrlab.fields import (
    ObserverBank,
    TestFunction,
    block_average,
    block_series_name,
    bump,
    discrete_grad,
    discrete_lap,
    fluctuation_field,
    gaussian,
    grad_square_time_integral,
    iota_average,
    make_w_view,
    martingale_path,
    q_statistic,
    qv_shape_time_integral,
    _support_window,
)
from zrlab.lattice import Configuration
from zrlab.measure import solve_fugacity
from zrlab.rates import QTASEP
from zrlab.experiments import stream_generator

TestFunction.__test__ = False  # not a test class, despite the name


# ---------------------------------------------------------------------------
# test functions


@pytest.mark.parametrize("fn", [bump(0.0), bump(2.0, radius=0.7), gaussian(0.0)],
                         ids=["bump", "bump-scaled", "gaussian"])
def test_derivatives_match_finite_differences(fn):
    rng = np.random.default_rng(0)
    x = fn.center + rng.uniform(-0.9, 0.9, size=1000) * fn.radius
    h = 1e-5 * fn.radius
    phi, d1, d2 = fn.values(x)
    p_hi, p_lo = fn(x + h), fn(x - h)
    num_d1 = (p_hi - p_lo) / (2 * h)
    num_d2 = (p_hi + p_lo - 2 * phi) / (h * h)
    scale_1 = np.abs(d1) + np.abs(phi / fn.radius) + 1e-9
    scale_2 = np.abs(d2) + np.abs(phi / fn.radius**2) + 1e-9
    assert (np.abs(num_d1 - d1) / scale_1 < 1e-6).all()
    assert (np.abs(num_d2 - d2) / scale_2 < 1e-4).all()


def test_compact_support():
    fn = bump(1.0, radius=2.0)
    outside = np.array([-1.0 - 1e-12, 3.0 + 1e-12, -5.0, 9.0])
    for part in fn.values(outside):
        np.testing.assert_array_equal(part, 0.0)
    g = gaussian(0.0)
    assert (g.values(np.array([g.radius + 1e-9, -g.radius - 1e-9]))[0] == 0.0).all()


def test_bump_norms_frozen():
    fn = bump(0.0)
    assert fn.l2sq == pytest.approx(0.9833808129127266, rel=1e-12)
    assert fn.d1_l2sq == pytest.approx(3.0264617692983338, rel=1e-12)
    assert fn.d2_l2sq == pytest.approx(80.05501264926482, rel=1e-12)
    # independent Simpson oracle on a fine grid
    x = np.linspace(-1.0, 1.0, 20001)
    phi, d1, d2 = fn.values(x)
    for stored, vals in [(fn.l2sq, phi), (fn.d1_l2sq, d1), (fn.d2_l2sq, d2)]:
        simpson = float(np.trapezoid(vals * vals, x))
        assert stored == pytest.approx(simpson, rel=1e-6)


def test_gaussian_norms_closed_form():
    w = 0.35
    fn = gaussian(3.0, width=w)
    root_pi = math.sqrt(math.pi)
    assert fn.l2sq == pytest.approx(w * root_pi, rel=1e-10)
    assert fn.d1_l2sq == pytest.approx(root_pi / (2 * w), rel=1e-10)
    assert fn.d2_l2sq == pytest.approx(3 * root_pi / (4 * w**3), rel=1e-10)


def test_shifted_preserves_shape():
    fn = bump(0.0)
    moved = fn.shifted(1.25)
    assert moved.center == 1.25
    assert moved.l2sq == fn.l2sq
    x = np.linspace(0.3, 2.2, 50)
    np.testing.assert_allclose(moved(x), fn(x - 1.25), rtol=0, atol=0)


# ---------------------------------------------------------------------------
# field and discrete calculus


def test_flat_state_gives_zero_field():
    fn = bump(4.0)
    frame = QTASEP.framing_coefficients(0.5)
    occ = np.full(64, 2)
    assert fluctuation_field(occ, 0.0, fn, frame, 8, 2.0) == pytest.approx(0.0, abs=1e-12)


def test_field_window_guard():
    fn = bump(2.0)
    frame = QTASEP.framing_coefficients(0.5)
    with pytest.raises(InvalidConfigError):
        fluctuation_field(np.zeros(10, dtype=np.int64), 0.0, fn, frame, 8, 0.5)


def test_field_hand_value():
    # one extra particle at site 3 over a zero background, rho = 0
    fn = bump(0.5)
    frame = QTASEP.framing_coefficients(0.4)
    occ = np.zeros(32, dtype=np.int64)
    occ[3] = 1
    n = 4
    want = float(fn(3 / 4)) / 2.0  # phi(j/n)/sqrt(n) at t=0
    assert fluctuation_field(occ, 0.0, fn, frame, n, 0.0) == pytest.approx(want, rel=1e-14)


def test_frame_shift_identity():
    # moving the frame equals shifting the test function by f_n t / n
    fn = bump(6.0)
    frame = QTASEP.framing_coefficients(0.42)
    n, t = 8, 0.013
    occ = np.random.default_rng(1).integers(0, 4, size=128)
    a = fluctuation_field(occ, t, fn, frame, n, 0.5)
    b = fluctuation_field(occ, 0.0, fn.shifted(frame.offset(n, t) / n),
                          QTASEP.framing_coefficients(0.0), n, 0.5)
    assert a == pytest.approx(b, abs=1e-12)


def test_discrete_grad_and_lap_on_linear_ramp():
    def parts(dx):
        dx = np.asarray(dx, dtype=float)
        return 2.5 * dx + 1.0, np.full_like(dx, 2.5), np.zeros_like(dx)

    ramp = TestFunction(name="ramp", center=0.0, radius=1e9,
                        l2sq=1.0, d1_l2sq=1.0, d2_l2sq=0.0, parts=parts)
    frame = QTASEP.framing_coefficients(0.0)
    for n in (2, 8, 32):
        assert discrete_grad(ramp, 5, 0.0, frame, n) == pytest.approx(2.5, rel=1e-9)
        assert discrete_lap(ramp, 5, 0.0, frame, n) == pytest.approx(0.0, abs=1e-6)


def test_discrete_grad_second_order_accuracy():
    fn = bump(0.0)
    frame = QTASEP.framing_coefficients(0.0)  # zero offset at t=0 regardless
    x = 0.3
    errs = []
    ns = np.array([8, 16, 32, 64, 128])
    for n in ns:
        j = x * n  # fractional site index is fine: only the coordinate matters
        exact = float(fn.values(np.array([x]))[1][0])
        approx = 0.5 * n * float(fn(np.array([(j + 1) / n, (j - 1) / n])) @ [1.0, -1.0])
        errs.append(abs(approx - exact))
    slope = np.polyfit(np.log(ns), np.log(errs), 1)[0]
    assert slope == pytest.approx(-2.0, abs=0.1)


def test_drift_combination_telescopes():
    # n grad + lap/2 collapses to the one-sided difference n^2 (phi_{j+1}-phi_j)
    fn = bump(3.0)
    frame = QTASEP.framing_coefficients(0.37)
    n, t = 16, 0.021
    offset = frame.offset(n, t)
    for j in range(int(2 * n), int(4 * n)):
        lhs = n * discrete_grad(fn, j, t, frame, n) \
            + 0.5 * discrete_lap(fn, j, t, frame, n)
        phi = fn.values((np.array([j, j + 1]) - offset) / n)[0]
        rhs = n * n * float(phi[1] - phi[0])
        assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9)


def test_telescoping_sums_vanish():
    fn = bump(5.0)
    frame = QTASEP.framing_coefficients(0.5)
    n, t = 32, 0.003
    offset = frame.offset(n, t)
    idx = _support_window(offset, n, fn, 3, 3)
    grads = np.array([discrete_grad(fn, j, t, frame, n) for j in idx])
    laps = np.array([discrete_lap(fn, j, t, frame, n) for j in idx])
    assert abs(grads.sum()) < 1e-10 * max(np.abs(grads).max(), 1.0)
    assert abs(laps.sum()) < 1e-10 * max(np.abs(laps).max(), 1.0)


# ---------------------------------------------------------------------------
# W-views and block statistics


def test_w_view_zero_iff_empty():
    sol = solve_fugacity(QTASEP, 16, 0.5)
    occ = np.array([0, 3, 0, 1, 7, 0])
    view = make_w_view(occ, QTASEP, 16, sol.phi)
    np.testing.assert_array_equal(view.w == 0.0, occ == 0)
    np.testing.assert_allclose(view.w_bar, view.w - sol.phi / QTASEP.d1, rtol=0)


def test_block_average_direct_window_sum():
    rng = np.random.default_rng(2)
    occ = rng.integers(0, 5, size=40)
    view = make_w_view(occ, QTASEP, 16, 0.3)
    for j in (0, 17, 38):
        for ell in (1, 3, 8):
            idx = (j + np.arange(ell)) % 40
            direct = float(view.w_bar[idx].mean())
            assert block_average(view, ell, j) == pytest.approx(direct, abs=1e-12)


def test_iota_average_block_identity():
    # smearing against iota_eps is sqrt(n) times the forward block mean
    rng = np.random.default_rng(3)
    occ = rng.integers(0, 5, size=64)
    n = 16
    view = make_w_view(occ, QTASEP, n, 0.4)
    for eps in (0.125, 0.25, 0.5):
        ell = int(eps * n)
        for j in (0, 30, 60):
            direct = math.sqrt(n) * block_average(view, ell, j)
            assert iota_average(view, eps, j, n) == pytest.approx(direct, rel=1e-12)
    with pytest.raises(EpsilonTooSmallError):
        iota_average(view, 0.01, 0, n)


def test_q_statistic_constant_state():
    # empty lattice: every W_bar is -Phi/g'(0); with sigma^2 = 0 the statistic
    # is the deterministic square
    phi_fug = 0.37
    view = make_w_view(np.zeros(20, dtype=np.int64), QTASEP, 16, phi_fug)
    want = 0.5 * QTASEP.d2 * (phi_fug / QTASEP.d1) ** 2
    assert q_statistic(view, 4, 3, 0.0, QTASEP) == pytest.approx(want, rel=1e-14)


def test_q_statistic_centered_and_squared_decay():
    sol = solve_fugacity(QTASEP, 16, 0.5)
    marg = sol.marginal
    sigma_sq = marg.w_variance()
    rng = np.random.default_rng(4)
    m, ell = 40_000, 8
    draws = marg.sample(rng, (m, ell))
    w_bar = np.asarray(QTASEP.gn(draws, 16)) / QTASEP.d1 - sol.phi / QTASEP.d1
    q = 0.5 * QTASEP.d2 * (w_bar.mean(axis=1) ** 2 - sigma_sq / ell)
    se = q.std(ddof=1) / math.sqrt(m)
    assert abs(q.mean()) < 4.0 * se
    # exact second moment from i.i.d. site moments: E[q^2] ~ ell^{-2}
    w_support = np.asarray(QTASEP.gn(marg.support(), 16)) / QTASEP.d1
    mu = float(marg.probs @ w_support)
    mu4 = float(marg.probs @ (w_support - mu) ** 4)
    ells = np.array([16, 32, 64, 128, 256])
    second = []
    for l in ells:
        m4_block = (l * mu4 + 3.0 * l * (l - 1) * sigma_sq**2) / l**4
        second.append(0.25 * QTASEP.d2**2 * (m4_block - sigma_sq**2 / l**2))
    slope = np.polyfit(np.log(ells), np.log(second), 1)[0]
    assert slope == pytest.approx(-2.0, abs=0.1)


# ---------------------------------------------------------------------------
# periodic time integrals


def test_periodic_time_integral_against_quad():
    import scipy.integrate

    fn = bump(4.0)
    n, horizon = 8, 0.37
    frame = QTASEP.framing_coefficients(0.45)
    speed = frame.speed(n)

    def grad_sq_sum(t):
        # window tracks the frame; the summand vanishes at its edges
        base = _support_window(speed * t, n, fn, 2, 2)
        coords = (base - speed * t) / n
        phi = fn(np.concatenate([coords + 1.0 / n, coords - 1.0 / n]))
        vals = 0.5 * n * (phi[: len(base)] - phi[len(base):])
        return float(vals @ vals)

    want, err = scipy.integrate.quad(grad_sq_sum, 0.0, horizon,
                                     limit=400, epsabs=1e-11, epsrel=1e-11)
    got = grad_square_time_integral(fn, frame, n, horizon)
    assert got == pytest.approx(want, rel=1e-8)
    assert err < 1e-9


def test_time_integrals_zero_speed_and_zero_horizon():
    fn = bump(2.0)
    still = QTASEP.framing_coefficients(0.5)
    frozen = type(still)(b2=0.0, b1=0.0, b0=0.0)
    n = 8
    assert grad_square_time_integral(fn, still, n, 0.0) == 0.0
    val = qv_shape_time_integral(fn, frozen, n, 2.0)
    base = _support_window(0.0, n, fn, 2, 2)
    phi = fn(base / n)
    diff = np.diff(phi)
    assert val == pytest.approx(2.0 * n * float(diff @ diff), rel=1e-12)


# ---------------------------------------------------------------------------
# observer bank against a brute-force replay


def _leggauss_integral(f, a, b, order=8, chunks=6):
    nodes, weights = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(a, b, chunks + 1)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        half = 0.5 * (hi - lo)
        ts = 0.5 * (lo + hi) + half * nodes
        total += half * float(np.array([f(t) for t in ts]) @ weights)
    return total


def _brute_force_integrands(fn, frame, rate, n, sites, rho, phi_fug,
                            sigma_sq, blocks, horizon):
    """Integrand evaluators over the full (padded, unreduced) window."""
    speed = frame.speed(n)
    lo = math.floor(min(0.0, speed * horizon) + n * (fn.center - fn.radius)) - 8
    hi = math.ceil(max(0.0, speed * horizon) + n * (fn.center + fn.radius)) \
        + max(blocks, default=0) + 8
    idx = np.arange(lo, hi + 1)

    def evaluators(occ):
        occ_win = occ[idx % sites]
        gn = np.asarray(rate.gn(occ_win, n), dtype=float)
        gn_c = gn - phi_fug
        wbar = gn_c / rate.d1
        eta_c = occ_win - rho

        def at(t):
            coords = (idx - speed * t) / n
            phi, dphi, _ = fn.values(coords)
            grad = 0.5 * n * (phi[2:] - phi[:-2])
            lap = n * n * (phi[2:] + phi[:-2] - 2.0 * phi[1:-1])
            diff = phi[1:] - phi[:-1]
            out = {
                "qv": n * float((diff * diff) @ gn[:-1]),
                "symmetric": float(lap @ gn_c[1:-1]) / (2.0 * math.sqrt(n)),
                "antisymmetric": (n * float(grad @ gn_c[1:-1])
                                  - (speed / n) * float(dphi[1:-1] @ eta_c[1:-1]))
                / math.sqrt(n),
                "modified_pair": 0.5 * rate.d2
                * float(grad @ (wbar[:-2] * wbar[1:-1])),
            }
            for ell in blocks:
                means = np.array([wbar[k:k + ell].mean()
                                  for k in range(1, len(idx) - 1)])
                q = 0.5 * rate.d2 * (means**2 - sigma_sq / ell)
                out[block_series_name(ell)] = float(grad @ q)
            return out

        return at

    return evaluators


def test_observer_bank_matches_brute_force():
    rate, n, sites, rho = QTASEP, 4, 64, 0.5
    sol = solve_fugacity(rate, n, rho)
    frame = rate.framing_coefficients(sol.phi)
    fn = bump(sites / (2 * n))
    blocks = (2, 3)
    sigma_sq = sol.marginal.w_variance()
    horizon = 0.04
    times = np.array([0.013, 0.027, horizon])
    occ0 = sol.marginal.sample(stream_generator(99, 1, 0), sites)

    bank = ObserverBank(rate, n, sites, rho, sol.phi, frame, fn, times,
                        integrands=("qv", "symmetric", "antisymmetric",
                                    "modified_pair", "curvature"),
                        block_sizes=blocks, sigma_sq=sigma_sq)
    cfg = Configuration(occ0.copy(), rate, n)
    cfg.run_until(horizon, np.random.default_rng(55), bank)
    record = bank.finish()
    assert record.events == cfg.events

    # replay the identical trajectory and integrate every holding interval
    cfg2 = Configuration(occ0.copy(), rate, n)
    rng = np.random.default_rng(55)
    intervals = []
    t = 0.0
    while True:
        dt, j = cfg2.next_event(rng)
        t_next = t + dt
        if t_next >= horizon:
            intervals.append((cfg2.occupancy.copy(), t, horizon))
            break
        intervals.append((cfg2.occupancy.copy(), t, t_next))
        cfg2.apply_jump(j)
        t = t_next
    assert len(intervals) == cfg.events + 1

    make_at = _brute_force_integrands(fn, frame, rate, n, sites, rho, sol.phi,
                                      sigma_sq, blocks, horizon)
    names = list(record.integrals)
    for i, cp in enumerate(times):
        want = {name: 0.0 for name in names}
        for occ, t0, t1 in intervals:
            hi = min(t1, cp)
            if hi <= t0:
                break
            at = make_at(occ)
            for name in names:
                if name == "curvature":
                    def f(t, occ=occ):
                        coords = (np.arange(
                            math.floor(frame.offset(n, t) + n * (fn.center - fn.radius)) - 2,
                            math.ceil(frame.offset(n, t) + n * (fn.center + fn.radius)) + 3,
                        ))
                        d2phi = fn.values((coords - frame.offset(n, t)) / n)[2]
                        return float(d2phi @ (occ[coords % sites] - rho)) / math.sqrt(n)
                    want[name] += _leggauss_integral(f, t0, hi)
                else:
                    want[name] += _leggauss_integral(
                        lambda t, at=at, name=name: at(t)[name], t0, hi)
        for name in names:
            got = record.series(name)[i]
            assert got == pytest.approx(want[name], rel=1e-7, abs=1e-10), name

    # checkpoint fields agree with the standalone evaluator on replayed states
    for i, cp in enumerate(times):
        state = next(occ for occ, t0, t1 in intervals if t0 <= cp <= t1 + 1e-15)
        direct = fluctuation_field(state, cp, fn, frame, n, rho)
        assert record.field[i] == pytest.approx(direct, abs=1e-13)


def test_bank_checkpoint_grids_are_consistent():
    # the same trajectory metered with two checkpoint grids must agree at
    # shared times: flushing at a checkpoint cannot disturb the integrals
    rate, n, sites, rho = QTASEP, 4, 64, 0.5
    sol = solve_fugacity(rate, n, rho)
    frame = rate.framing_coefficients(sol.phi)
    fn = bump(sites / (2 * n))
    occ0 = sol.marginal.sample(stream_generator(98, 1, 0), sites)
    horizon = 0.05

    def run(times):
        bank = ObserverBank(rate, n, sites, rho, sol.phi, frame, fn,
                            np.asarray(times), block_sizes=(2,),
                            sigma_sq=sol.marginal.w_variance())
        cfg = Configuration(occ0.copy(), rate, n)
        cfg.run_until(horizon, np.random.default_rng(77), bank)
        return bank.finish()

    coarse = run([0.025, 0.05])
    fine = run([0.005, 0.0125, 0.025, 0.04, 0.05])
    for name in coarse.integrals:
        # summing the per-interval increments reproduces the cumulative value
        vals = fine.series(name)
        increments = np.diff(np.concatenate([[0.0], vals]))
        scale = max(np.abs(vals).max(), 1.0)
        assert abs(increments.sum() - vals[-1]) < 1e-12 * scale
        # Refining the grid only perturbs the quadrature panels. The bump is
        # not analytic, so panel quadrature over long quiet spans resolves
        # only ~1e-7 relative at this n; measured ~2e-9 absolute here.
        np.testing.assert_allclose(
            [coarse.series(name)[0], coarse.series(name)[1]],
            [vals[2], vals[4]],
            rtol=1e-6, atol=1e-12,
        )
    assert coarse.field[0] == fine.field[2]
    assert coarse.field[1] == fine.field[4]
    assert (np.diff(coarse.times) > 0).all()


def test_bank_empty_lattice_trivials():
    # frozen empty lattice: qv integral vanishes, the martingale stays flat,
    # and the symmetric integrand telescopes away
    rate, n, sites, rho = QTASEP, 8, 256, 0.5
    sol = solve_fugacity(rate, n, rho)
    frame = rate.framing_coefficients(sol.phi)
    fn = bump(sites / (2 * n))
    # the grid must anchor at the start time: integrals accumulate from there
    times = np.linspace(0.0, 0.02, 11)
    bank = ObserverBank(rate, n, sites, rho, sol.phi, frame, fn, times,
                        integrands=("qv", "symmetric", "antisymmetric"))
    cfg = Configuration(np.zeros(sites, dtype=np.int64), rate, n)
    cfg.run_until(0.02, np.random.default_rng(0), bank)
    record = bank.finish()
    assert record.events == 0
    np.testing.assert_array_equal(record.series("qv"), 0.0)
    assert np.abs(record.series("symmetric")).max() < 1e-12
    assert np.abs(martingale_path(record)).max() < 1e-10
    assert martingale_path(record)[0] == 0.0


def test_bank_configuration_errors():
    rate, n = QTASEP, 8
    frame = rate.framing_coefficients(0.4)
    fn = bump(4.0)
    times = np.array([0.01])
    with pytest.raises(InvalidConfigError):
        ObserverBank(rate, n, 256, 0.5, 0.4, frame, fn, times,
                     integrands=("qv", "no-such-integrand"))
    with pytest.raises(InvalidConfigError):
        ObserverBank(rate, n, 16, 0.5, 0.4, frame, fn, times)  # window too wide


def test_missing_observer_series():
    rate, n, sites = QTASEP, 4, 64
    sol = solve_fugacity(rate, n, 0.5)
    frame = rate.framing_coefficients(sol.phi)
    fn = bump(sites / (2 * n))
    bank = ObserverBank(rate, n, sites, 0.5, sol.phi, frame, fn,
                        np.array([0.01]), integrands=("qv",))
    cfg = Configuration(np.ones(sites, dtype=np.int64), rate, n)
    cfg.run_until(0.01, np.random.default_rng(3), bank)
    record = bank.finish()
    with pytest.raises(MissingObserverError):
        record.series("symmetric")
    with pytest.raises(MissingObserverError):
        martingale_path(record)
