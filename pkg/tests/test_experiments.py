"""Ensemble plumbing: streams, statistics, configs, reports, determinism."""

import json
import math

import numpy as np
import pytest

from zrlab.errors import InvalidConfigError
from zrlab.experiments import (
    LANE_SIMULATE,
    ExperimentConfig,
    Moments,
    SummaryReport,
    band_check,
    bound_check,
    default_config,
    estimate_of,
    fit_two_branch,
    loglog_slope,
    make_test_function,
    merge_moments,
    moments_of,
    run_ensemble,
    run_trajectories,
    stream_generator,
    two_branch_log_slope,
    _spec_for,
)


# ---------------------------------------------------------------------------
# counter-based streams


def test_stream_repeatable_and_separated():
    a = stream_generator(7, 3, 11).random(5)
    b = stream_generator(7, 3, 11).random(5)
    np.testing.assert_array_equal(a, b)
    for other in [(8, 3, 11), (7, 4, 11), (7, 3, 12)]:
        assert not np.array_equal(a, stream_generator(*other).random(5))


def test_stream_accepts_64_bit_seeds():
    g = stream_generator(2**64 - 1, 1, 2**48 - 1)
    assert 0.0 <= g.random() < 1.0


# ---------------------------------------------------------------------------
# streaming moments


def test_moments_match_numpy():
    rng = np.random.default_rng(0)
    x = rng.normal(2.0, 3.0, size=1000)
    m = moments_of(x)
    assert m.count == 1000
    assert m.mean == pytest.approx(float(x.mean()), rel=1e-12)
    assert m.variance == pytest.approx(float(x.var(ddof=1)), rel=1e-12)
    assert m.se == pytest.approx(float(x.std(ddof=1)) / math.sqrt(1000), rel=1e-12)


def test_merge_is_associative_and_matches_whole():
    rng = np.random.default_rng(1)
    x = rng.exponential(size=300)
    parts = [moments_of(x[:100]), moments_of(x[100:180]), moments_of(x[180:])]
    left = merge_moments(merge_moments(parts[0], parts[1]), parts[2])
    right = merge_moments(parts[0], merge_moments(parts[1], parts[2]))
    whole = moments_of(x)
    for merged in (left, right):
        assert merged.count == whole.count
        assert merged.mean == pytest.approx(whole.mean, rel=1e-12)
        assert merged.variance == pytest.approx(whole.variance, rel=1e-12)


def test_se_shrinks_like_root_n():
    rng = np.random.default_rng(2)
    x = rng.normal(size=20000)
    ratio = moments_of(x[:5000]).se / moments_of(x).se
    assert ratio == pytest.approx(2.0, rel=0.2)


def test_degenerate_moments():
    m = moments_of([4.0])
    assert m.variance == 0.0 and m.se == 0.0
    assert merge_moments(m, moments_of([4.0])).variance == 0.0


# ---------------------------------------------------------------------------
# scaling fits


def test_loglog_slope_recovers_power_laws():
    x = np.array([1.0, 2.0, 4.0, 8.0, 16.0])
    for c, p in [(3.0, -2.0), (5.0, 1.5)]:
        slope, rms = loglog_slope(x, c * x**p)
        assert slope == pytest.approx(p, abs=1e-12)
        assert rms < 1e-12


def test_fit_two_branch_recovers_coefficients():
    ells = np.array([2.0, 4.0, 8.0, 16.0, 32.0])
    a, b = 0.01, 2.0
    mse = a * ells + b / ells**2
    fa, fb, resid = fit_two_branch(ells, mse, np.ones_like(ells))
    assert fa == pytest.approx(a, rel=1e-8)
    assert fb == pytest.approx(b, rel=1e-8)
    assert resid < 1e-10


def test_fit_two_branch_clamps_nonnegative():
    ells = np.array([2.0, 4.0, 8.0])
    fa, fb, _ = fit_two_branch(ells, 1.0 / ells**2, np.ones_like(ells))
    assert fa == 0.0
    assert fb == pytest.approx(1.0, rel=1e-8)


def test_two_branch_log_slope_limits():
    a, b = 0.01, 2.0
    assert two_branch_log_slope(a, b, 1e6) == pytest.approx(1.0, abs=1e-6)
    assert two_branch_log_slope(a, b, 1e-3) == pytest.approx(-2.0, abs=1e-6)
    flat = (2.0 * b / a) ** (1.0 / 3.0)
    assert two_branch_log_slope(a, b, flat) == pytest.approx(0.0, abs=1e-12)
    assert math.isnan(two_branch_log_slope(0.0, 0.0, 4.0))


# ---------------------------------------------------------------------------
# check rows, estimates, reports


def test_check_row_edges():
    assert band_check("x", 1.25, 1.0, 0.25).passed
    assert not band_check("x", 1.2500001, 1.0, 0.25).passed
    assert bound_check("y", 2.0, 2.0).passed
    assert not bound_check("y", 2.0 + 1e-15, 2.0).passed


def test_estimate_ci95():
    e = estimate_of("z", [1.0, 2.0, 3.0, 4.0])
    lo, hi = e.ci95
    assert lo == pytest.approx(e.mean - 1.96 * e.se)
    assert hi == pytest.approx(e.mean + 1.96 * e.se)
    assert e.count == 4


def test_report_passed_and_serializable():
    rep = SummaryReport(
        name="demo", seed=3, config={"n": np.int64(4), "grid": (1.0, 2.0)},
        checks=(bound_check("ok", 0.0, 1.0), band_check("bad", 9.0, 0.0, 1.0)),
        estimates=(estimate_of("m", [1.0, 2.0]),),
        tables={"t": {"col": [np.float64(0.5), 1.5]}},
    )
    assert not rep.passed
    d = rep.as_dict()
    assert d == rep.as_dict()
    blob = json.dumps(d, sort_keys=True)
    assert json.loads(blob)["config"]["n"] == 4
    text = rep.text()
    assert "FAIL" in text and "[ok ] ok" in text and "bad" in text


# ---------------------------------------------------------------------------
# configuration


def test_default_config_merges_overrides():
    cfg = default_config("qv")
    assert cfg.n == 32 and cfg.trajectories == 200
    assert default_config("qv", n=8).n == 8
    with pytest.raises(InvalidConfigError, match="suite"):
        default_config("no-such-suite")


def test_resolved_dimensions():
    cfg = ExperimentConfig(n=32)
    assert cfg.resolved_sites() == 1024
    assert cfg.resolved_sites(8) == 256
    assert cfg.resolved_blocks() == (4, 8, 16, 32, 64)
    assert ExperimentConfig(sites=96).resolved_sites() == 96
    assert ExperimentConfig(block_grid=(3, 5)).resolved_blocks() == (3, 5)


@pytest.mark.parametrize("field,bad", [
    ("rate_name", "nope"),
    ("n", 0),
    ("rho", 0.0),
    ("rho", math.inf),
    ("horizon", 0.0),
    ("trajectories", 0),
    ("seed", 2**64),
    ("workers", 0),
    ("checkpoints", 0),
    ("eps_grid", ()),
    ("n_grid", ()),
    ("samples", 1),
    ("events", -1),
    ("test_function", "box"),
    ("test_radius", 0.0),
])
def test_validate_names_offending_key(field, bad):
    key = {"rate_name": "rate"}.get(field, field)
    with pytest.raises(InvalidConfigError, match=key):
        ExperimentConfig(**{field: bad}).validate()


def test_validate_geometry_guards():
    with pytest.raises(InvalidConfigError, match="sites"):
        ExperimentConfig(n=16, sites=64).validate()  # window exceeds lattice
    with pytest.raises(InvalidConfigError, match="block_grid"):
        ExperimentConfig(n=4, block_grid=(200,)).validate()
    with pytest.raises(InvalidConfigError, match="eps_grid"):
        ExperimentConfig(n=4, eps_grid=(0.1,)).validate()
    with pytest.raises(InvalidConfigError, match="sites"):
        # widening the test function tightens the minimum lattice
        ExperimentConfig(n=16, sites=512, test_radius=4.1).validate()
    ExperimentConfig(n=16, sites=512, test_radius=4.0).validate()


def test_statistical_floor():
    with pytest.raises(InvalidConfigError, match="trajectories"):
        default_config("qv", trajectories=99).statistical()
    default_config("qv", trajectories=100).statistical()


def test_make_test_function_radius():
    fn = make_test_function("bump", center=3.0, radius=2.5)
    assert fn.radius == 2.5 and fn.center == 3.0
    g = make_test_function("gaussian", center=0.0, radius=2.0)
    assert g.l2sq == pytest.approx(0.7 * math.sqrt(math.pi), rel=1e-10)
    with pytest.raises(InvalidConfigError, match="test_function"):
        make_test_function("box", center=0.0)


# ---------------------------------------------------------------------------
# ensembles


def _tiny_spec():
    cfg = default_config("simulate", rate_name="qtasep", n=4, sites=64,
                         horizon=0.02, checkpoints=5, trajectories=4, seed=11)
    return _spec_for(cfg, LANE_SIMULATE, ("qv", "symmetric", "antisymmetric"),
                     blocks=(2,))


def _records_equal(a, b):
    assert a.events == b.events and a.stream == b.stream
    np.testing.assert_array_equal(a.times, b.times)
    np.testing.assert_array_equal(a.field, b.field)
    assert set(a.integrals) == set(b.integrals)
    for k in a.integrals:
        np.testing.assert_array_equal(a.integrals[k], b.integrals[k])


def test_worker_count_does_not_change_records():
    spec = _tiny_spec()
    serial = run_trajectories(spec, 4, workers=1)
    parallel = run_trajectories(spec, 4, workers=2)
    assert [r.stream for r in serial] == [0, 1, 2, 3]
    for a, b in zip(serial, parallel):
        _records_equal(a, b)


def test_single_trajectory_skips_pool():
    spec = _tiny_spec()
    (only,) = run_trajectories(spec, 1, workers=8)
    (again,) = run_trajectories(spec, 1, workers=1)
    _records_equal(only, again)


def test_run_ensemble_report_shape_and_determinism():
    cfg = default_config("simulate", n=4, sites=64, horizon=0.02,
                         checkpoints=5, trajectories=3, seed=5, eps_grid=(0.5,))
    rep = run_ensemble(cfg)
    assert rep.name == "ensemble" and rep.passed
    names = {e.name for e in rep.estimates}
    assert {"martingale_at_horizon", "qv_integral_at_horizon",
            "field_at_horizon", "events_per_trajectory"} <= names
    assert rep.tables["trajectories"]["index"] == [0, 1, 2]
    assert rep.as_dict() == run_ensemble(cfg).as_dict()
    assert "workers" not in rep.config
    assert rep.config["test_radius"] == 1.0


def test_workers_absent_from_report_config():
    base = default_config("simulate", n=4, sites=64, horizon=0.02,
                          checkpoints=5, trajectories=3, seed=5, eps_grid=(0.5,))
    two = default_config("simulate", n=4, sites=64, horizon=0.02,
                         checkpoints=5, trajectories=3, seed=5, eps_grid=(0.5,),
                         workers=2)
    assert run_ensemble(base).as_dict() == run_ensemble(two).as_dict()
