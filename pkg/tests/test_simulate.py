import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from walshlab import RayPoint, UnsupportedRayError
from walshlab.scale import build_profiles
from walshlab.simulate import (EXPLODED, HORIZON, OVERFLOW, STOPPED, ConfigError, DegenerateLawWarning,
                               ResolutionWarning, SimConfig, StopRule, TestFunction, binomial_interval,
                               fs_residual, mc_exit_law, mc_fs_residuals, mc_local_time, occupation_local_time,
                               path_generator, run_paths, simulate_path)

from conftest import make_spec, walsh_bm

PI = math.pi
ORIGIN = RayPoint.make(0.0)


@pytest.mark.parametrize("kw", [
    dict(step=0.0, horizon=1.0), dict(step=0.1, horizon=0.01), dict(step=1e-3, horizon=1.0, paths=0),
    dict(step=1e-3, horizon=1.0, seed=-1), dict(step=1e-3, horizon=1.0, scheme="milstein"),
])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        SimConfig(**kw)


def test_step_too_large_for_floor():
    with pytest.raises(ConfigError):
        simulate_path(walsh_bm(ell=0.2), ORIGIN, SimConfig(0.01, 1.0))


def test_time_change_needs_driftless(mixed_spec):
    with pytest.raises(ConfigError):
        simulate_path(mixed_spec, ORIGIN, SimConfig(1e-3, 1.0, scheme="time-change"))


def test_unknown_start_ray():
    with pytest.raises(UnsupportedRayError):
        simulate_path(walsh_bm(), RayPoint.make(0.5, 1.0), SimConfig(1e-3, 1.0))
    with pytest.raises(ConfigError):
        simulate_path(walsh_bm(), RayPoint.make(1.5, 0.0), SimConfig(1e-3, 1.0))


def test_philox_streams_are_keyed():
    a = path_generator(7, 3).standard_normal(4)
    np.testing.assert_array_equal(a, path_generator(7, 3).standard_normal(4))
    assert not np.array_equal(a, path_generator(7, 4).standard_normal(4))
    assert not np.array_equal(a, path_generator(8, 3).standard_normal(4))


def record_invariants(rec, nu_thetas):
    U = rec.driver()
    L = rec.local_time
    np.testing.assert_allclose(rec.radial, U + L, atol=1e-12)
    np.testing.assert_allclose(L, np.maximum.accumulate(np.maximum(-U, 0.0)), atol=0)
    assert np.all(rec.radial >= 0) and np.all(np.diff(L) >= 0)
    # the ray only changes at steps that start from the origin
    change = np.nonzero(rec.theta[1:-1] != rec.theta[:-2])[0] + 1
    assert np.all(rec.radial[change] == 0.0)
    # local time is flat away from the origin
    far = rec.radial[:-1] > 0.5
    np.testing.assert_array_equal(np.diff(L)[far & (rec.radial[1:] > 0)], 0.0)
    assert set(np.unique(rec.theta[1:]).tolist()) <= set(nu_thetas) | {rec.theta[0]}


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32), st.floats(0.1, 0.9))
def test_path_invariants(seed, w):
    spec = make_spec([(0.0, w, 1.0, 0.5, 1.0), (PI, 1 - w, 2.0, -0.5, 0.7), (1.0, 0.0, 1.0, 0.0, 1.0)])
    rec = simulate_path(spec, ORIGIN, SimConfig(1e-3, 3.0, seed=seed), stream=1)
    record_invariants(rec, spec.nu.thetas)
    assert 1.0 not in rec.theta
    if rec.status == "exploded":
        assert rec.exploded_at == rec.times[-1]
        assert rec.radial[-1] >= spec.ell(rec.exit_point.theta)
        assert rec.exit_point.r == spec.ell(rec.theta[-1])


def test_determinism_and_thread_independence():
    spec = walsh_bm((0.3, 0.7))
    cfg = SimConfig(1e-3, 2.0, paths=40, seed=11, threads=1)
    a = run_paths(spec, ORIGIN, cfg)
    b = run_paths(spec, ORIGIN, SimConfig(1e-3, 2.0, paths=40, seed=11, threads=3))
    np.testing.assert_array_equal(a.time, b.time)
    np.testing.assert_array_equal(a.final_ray, b.final_ray)
    r1 = simulate_path(spec, ORIGIN, cfg, stream=5)
    r2 = simulate_path(spec, ORIGIN, cfg, stream=5)
    for f in ("times", "radial", "theta", "driver_increments", "local_time"):
        np.testing.assert_array_equal(getattr(r1, f), getattr(r2, f))
    # the summary kernel agrees with the recording kernel path by path
    assert a.time[5] == pytest.approx(r1.times[-1], abs=1e-12)
    assert a.local_time[5] == r1.local_time[-1]


def test_single_ray_theta_constant():
    spec = make_spec([(0.0, 1.0, 1.0, 0.0, 1.0)])
    rec = simulate_path(spec, RayPoint.make(0.3, 0.0), SimConfig(1e-3, 5.0, seed=2))
    assert np.all(rec.theta == 0.0)


def test_start_near_boundary_exits_on_own_ray():
    spec = walsh_bm()
    law = mc_exit_law(spec, RayPoint.make(0.999, 0.0), SimConfig(1e-4, 1.0, paths=1000, seed=3))
    assert law.prob(0.0) >= 0.99


def test_time_fraction_on_each_ray():
    spec = walsh_bm(ell=math.inf)
    fracs = []
    for i in range(100):
        rec = simulate_path(spec, ORIGIN, SimConfig(1e-3, 1.0, seed=4), stream=i)
        pos = rec.radial[:-1] > 0
        fracs.append(np.mean(rec.theta[:-1][pos] == 0.0))
    fracs = np.array(fracs)
    assert abs(fracs.mean() - 0.5) <= 3 * fracs.std(ddof=1) / math.sqrt(fracs.size)


def test_occupation_estimators():
    spec = walsh_bm(ell=math.inf)
    rec = simulate_path(spec, ORIGIN, SimConfig(1e-4, 0.5, seed=5))
    assert occupation_local_time(rec, [], 0.05) == 0.0
    with pytest.warns(ResolutionWarning):
        occupation_local_time(rec, [0.0], 1e-3)
    # the projected chain sits on the origin atom too often, which inflates the occupation estimate
    # by O(sqrt(h)/eps); the bridge chain does not have the atom
    stats = mc_local_time(spec, ORIGIN, SimConfig(1e-4, 1.0, paths=400, seed=6, scheme="euler-bridge"), eps=0.05)
    assert stats.occupation_total == pytest.approx(stats.reflection, rel=0.1)
    # continuum value of E[occupation] for reflected BM: sqrt(2/pi) - eps/2 to first order
    assert stats.occupation_total == pytest.approx(math.sqrt(2 / PI) - 0.025, rel=0.05)
    reflect = mc_local_time(spec, ORIGIN, SimConfig(1e-4, 1.0, paths=400, seed=6), eps=0.1)
    assert reflect.occupation_total == pytest.approx(reflect.reflection, rel=0.1)
    assert stats.share([0.0]) == pytest.approx(0.5, abs=0.05)


def test_single_path_occupation_matches_summary():
    spec = walsh_bm(ell=math.inf)
    cfg = SimConfig(1e-3, 1.0, paths=3, seed=9)
    rec = simulate_path(spec, ORIGIN, cfg, stream=2)
    summ = run_paths(spec, ORIGIN, cfg, eps=0.1)
    occ = summ.occupation[2] / 0.2
    for k, t in enumerate(summ.rays):
        assert occupation_local_time(rec, [t], 0.1) == pytest.approx(occ[k], rel=1e-12)


def test_fs_residual_identity_is_exact():
    spec = walsh_bm((0.2, 0.8))
    rec = simulate_path(spec, ORIGIN, SimConfig(1e-3, 2.0, seed=8))
    res = fs_residual(rec, TestFunction.radius(spec.thetas), spec.nu)
    np.testing.assert_allclose(res, 0.0, atol=1e-12)
    with pytest.raises(UnsupportedRayError):
        fs_residual(rec, TestFunction.radius([0.0]), spec.nu)


def test_fs_residual_square_small_under_bridge():
    spec = walsh_bm(ell=math.inf)
    stats = mc_fs_residuals(spec, ORIGIN, SimConfig(1e-3, 0.5, paths=400, seed=10, scheme="euler-bridge"),
                            [TestFunction.power(2, spec.thetas)])
    assert abs(stats[0].mean) <= 4 * stats[0].se


def test_fs_residual_square_reflect_bias():
    # the projected chain loses sum(dLam^2) at the origin, so E[R_T^2] falls short of T
    spec = walsh_bm(ell=math.inf)
    stats = mc_fs_residuals(spec, ORIGIN, SimConfig(1e-3, 0.5, paths=400, seed=10),
                            [TestFunction.power(2, spec.thetas)])
    assert stats[0].mean < -4 * stats[0].se


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 32), st.floats(0.1, 0.9))
def test_bridge_path_invariants(seed, w):
    spec = make_spec([(0.0, w, 1.0, 0.5, 1.0), (PI, 1 - w, 2.0, -0.5, 0.7), (1.0, 0.0, 1.0, 0.0, 1.0)])
    rec = simulate_path(spec, ORIGIN, SimConfig(1e-3, 3.0, seed=seed, scheme="euler-bridge"), stream=1)
    U, L = rec.driver(), rec.local_time
    np.testing.assert_allclose(rec.radial, U + L, atol=1e-12)
    assert np.all(rec.radial >= 0) and np.all(np.diff(L) >= 0)
    # the ray only changes on steps where the bridge touched the origin
    change = np.nonzero(rec.theta[1:] != rec.theta[:-1])[0]
    assert np.all(np.diff(L)[change] > 0)
    assert 1.0 not in rec.theta
    if rec.status == "exploded":
        assert rec.radial[-1] >= spec.ell(rec.theta[-1])


def test_exit_law_single_ray_and_never():
    one = make_spec([(0.0, 1.0, 1.0, 0.0, 1.0)])
    law = mc_exit_law(one, ORIGIN, SimConfig(1e-3, 20.0, paths=50, seed=1))
    assert law.prob(0.0) == 1.0 and law.exploded == 50
    with pytest.warns(DegenerateLawWarning):
        law = mc_exit_law(walsh_bm(ell=math.inf), ORIGIN, SimConfig(1e-3, 1.0, paths=50, seed=1))
    assert law.explosion_frequency == 0.0


def test_overflow_censoring():
    spec = make_spec([(0.0, 1.0, math.inf, 1e9, 1.0)])
    summ = run_paths(spec, ORIGIN, SimConfig(1e-3, 10.0, paths=5, seed=1))
    assert np.all(summ.status == OVERFLOW)


def test_horizon_status():
    summ = run_paths(walsh_bm(ell=math.inf), ORIGIN, SimConfig(1e-3, 0.1, paths=5, seed=1))
    assert np.all(summ.status == HORIZON)
    np.testing.assert_allclose(summ.time, 0.1, atol=1e-12)


def test_stop_rules():
    spec = walsh_bm()
    rule = StopRule.thresholds({0.0: 0.5, PI: 0.25})
    summ = run_paths(spec, ORIGIN, SimConfig(1e-3, 20.0, paths=200, seed=2), stop=rule)
    assert np.all(summ.status == STOPPED)
    expect = np.where(summ.final_ray == 0, 0.5, 0.25)
    np.testing.assert_array_equal(summ.final_r, expect)
    # gambler's ruin: hit 0.5 on ray 0 with probability (1/0.5)/(1/0.5 + 1/0.25) = 1/3
    assert np.mean(summ.final_ray == 0) == pytest.approx(1 / 3, abs=0.12)
    inside = run_paths(spec, RayPoint.make(0.7, 0.0), SimConfig(1e-3, 1.0, paths=3, seed=2), stop=rule)
    assert np.all(inside.status == STOPPED) and np.all(inside.time == 0.0)
    origin_rule = StopRule({}, origin=True)
    out = run_paths(spec, RayPoint.make(0.1, PI), SimConfig(1e-4, 5.0, paths=20, seed=2), stop=origin_rule)
    assert np.all((out.status == STOPPED) == (out.final_r == 0.0))


@pytest.mark.parametrize("scheme", ["euler-reflect", "time-change", "euler-bridge"])
def test_unequal_dispersion_exit_law(scheme):
    # the exit law depends on nu and p only, not on s
    spec = make_spec([(0.0, 0.5, 1.0, 0.0, 2.0), (PI, 0.5, 1.0, 0.0, 1.0)])
    law = mc_exit_law(spec, ORIGIN, SimConfig(1e-4, 20.0, paths=3000, seed=12, scheme=scheme))
    assert law.prob(0.0) == pytest.approx(0.5, abs=0.04)
    # E[S] from the origin: sum nu v(1)/p(1) / sum nu/p(1) = (1/4 + 1)/2
    assert law.mean_explosion_time == pytest.approx(0.625, abs=0.05)


def test_record_rows():
    rec = simulate_path(walsh_bm(), ORIGIN, SimConfig(1e-2 / 4, 0.05, seed=1))
    rows = rec.to_rows(path_id=3)
    assert len(rows) == rec.times.size and rows[0][0] == 3 and len(rows[0]) == 5


@pytest.mark.parametrize("k, n", [(0, 10), (10, 10), (5, 10), (0, 0)])
def test_binomial_interval(k, n):
    lo, hi = binomial_interval(k, n)
    assert 0.0 <= lo <= hi <= 1.0
    if n:
        assert lo <= k / n <= hi
