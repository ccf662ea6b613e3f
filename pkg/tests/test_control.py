import json
import math

import numpy as np
import pytest
from scipy.optimize import brentq

from walshlab import RayField, RayPoint, SpecError
from walshlab.control import (MAX_THEN_MIN, MIN_EVERYWHERE, PLATEAU, ControlPencil, ControlSpec, candidate_control,
                              ray_extremum, solve_cstar, strategy_report)
from walshlab.fields import AngularMeasure
from walshlab.stopping import Reward, brute_force_majorant, solve_stopping

PI = math.pi
E = math.e
C = RayField.constant


def ctrl_spec(weights, lo=-1.0, hi=1.0, s0=1.0, s1=1.0):
    nu = AngularMeasure.from_weights(weights)
    return ControlSpec(nu, {t: (C(lo), C(s0)) for t in nu.thetas}, {t: (C(hi), C(s1)) for t in nu.thetas})


def reward_two_ray(n=65):
    return Reward.from_functions({0.0: lambda r: r, PI: lambda r: 0 * r}, n=n)


@pytest.mark.parametrize("f, expected", [
    (lambda r: r, (1.0, 1.0, 1.0)),
    (lambda r: r * (1 - r), (0.25, 0.5, 0.5)),
    (lambda r: 0.3 + 0 * r, (0.3, 0.0, 1.0)),
])
def test_ray_extremum(f, expected):
    e = ray_extremum(Reward.from_functions({0.0: f}, n=257), 0.0)
    assert (e.u_star, e.lam, e.rho) == pytest.approx(expected, abs=1e-12)


def test_candidate_control_clauses():
    ctrl = ctrl_spec({0.0: 1.0})
    r = np.linspace(0.05, 0.95, 10)
    up = Reward.from_functions({0.0: lambda x: x})
    ext = {0.0: ray_extremum(up, 0.0)}
    np.testing.assert_allclose(candidate_control(ctrl, ext, 0.5).b[0.0](r), 1.0)
    np.testing.assert_allclose(candidate_control(ctrl, ext, 1.5).b[0.0](r), -1.0)
    down = Reward.from_functions({0.0: lambda x: 1 - x})
    ext = {0.0: ray_extremum(down, 0.0)}
    np.testing.assert_allclose(candidate_control(ctrl, ext, 1.0).b[0.0](r), -1.0)
    hump = Reward.from_functions({0.0: lambda x: x * (1 - x)}, n=257)
    ext = {0.0: ray_extremum(hump, 0.0)}
    np.testing.assert_allclose(candidate_control(ctrl, ext, 0.1).b[0.0](r), np.where(r < 0.5, 1.0, -1.0))
    with pytest.raises(ValueError):
        candidate_control(ctrl, ext, -1.0, at_origin=0.0)


def test_pencil_hull_single_ray_pair1_against_oracle():
    ctrl = ctrl_spec({0.0: 1.0})
    rw = Reward.from_functions({0.0: lambda r: r}, n=1024)
    pen = ControlPencil(ctrl, rw)
    h = pen.hull(0.0, 0.0)
    r, u = rw.grid(0.0)
    x = (1 - np.exp(-2 * r)) / 2
    np.testing.assert_allclose(h.abscissae, x, atol=1e-12)
    np.testing.assert_allclose(h.values, brute_force_majorant(x, u, 0.0), atol=1e-12)
    # above the reward maximum the pair0 scale is used and slopes are nonpositive
    assert pen.hull(0.0, 1.0).initial_slope <= 0.0
    np.testing.assert_allclose(pen.hull(0.0, 1.0).abscissae, (np.exp(2 * r) - 1) / 2, atol=1e-10)


def test_cstar_two_ray_closed_form():
    sol = solve_cstar(ctrl_spec({0.0: 0.5, PI: 0.5}), None, reward_two_ray(), 1e-13)
    pp, pm = (1 - E ** -2) / 2, (E ** 2 - 1) / 2
    # independent oracle: root of the slope balance by brentq
    oracle = brentq(lambda c: 0.5 * (1 - c) / pp - 0.5 * c / pm, 0.0, 1.0, xtol=1e-15)
    assert oracle == pytest.approx((1 / pp) / (1 / pp + 1 / pm), abs=1e-14)
    assert sol.c_star == pytest.approx(oracle, abs=1e-9)
    assert sol.V[0.0][0] == sol.c_star
    labels = {s.theta: s.label for s in sol.strategy}
    assert labels == {0.0: MAX_THEN_MIN, PI: MIN_EVERYWHERE}
    ray0 = next(s for s in sol.strategy if s.theta == 0.0)
    assert (ray0.lam, ray0.rho) == (1.0, 1.0)
    assert sol.to_json()["middle_zone_dynamics"] == "pair0"


def test_cstar_dominates_fixed_pairs():
    ctrl = ctrl_spec({0.0: 0.5, PI: 0.5})
    rw = reward_two_ray()
    sol = solve_cstar(ctrl, None, rw)
    for which in (0, 1):
        fixed = solve_stopping(ctrl.pair_spec(which), rw)
        assert sol.c_star >= fixed.c0 - 1e-10
        for t in ctrl.thetas:
            r = sol.radii[t]
            q = np.array([fixed.value_at(RayPoint.make(x, t)) if x > 0 else fixed.c0 for x in r])
            assert np.all(sol.V[t] >= q - 1e-9)


@pytest.mark.parametrize("funcs", [
    {0.0: lambda r: r, PI: lambda r: 0 * r},
    {0.0: lambda r: np.sin(3 * r), PI: lambda r: r * (1 - r)},
])
def test_degenerate_control_equals_stopping(funcs):
    nu = AngularMeasure.from_weights({0.0: 0.4, PI: 0.6})
    pair = {0.0: (C(-0.5), C(1.2)), PI: (C(0.3), C(0.8))}
    ctrl = ControlSpec(nu, pair, pair)
    rw = Reward.from_functions(funcs, n=129)
    sol = solve_cstar(ctrl, nu, rw, 1e-12)
    ref = solve_stopping(ctrl.pair_spec(0), rw, 1e-12)
    assert abs(sol.c_star - ref.c0) <= 1e-10
    for t in nu.thetas:
        np.testing.assert_allclose(sol.V[t], ref.Q[t], atol=1e-10)
        assert sol.stop_region[t] == ref.stop_region[t]


def test_plateau_label():
    nu = AngularMeasure.from_weights({0.0: 1.0})
    rw = Reward.from_functions({0.0: lambda r: 1 - r})
    sol = solve_cstar(ctrl_spec({0.0: 1.0}), nu, rw)
    assert sol.c_star == 1.0 and sol.origin_in_region
    assert sol.strategy[0].label == PLATEAU


@pytest.mark.parametrize("seed", range(4))
def test_control_slopes_strictly_decreasing(seed):
    rng = np.random.default_rng(seed)
    r = np.linspace(0, 1, 33)
    grids = {t: (r, np.concatenate(([0.0], np.cumsum(rng.normal(0, 0.3, 32))))) for t in (0.0, PI)}
    rw = Reward.from_grids(0.0, grids)
    pen = ControlPencil(ctrl_spec({0.0: 0.5, PI: 0.5}, -float(rng.uniform(0, 2)), float(rng.uniform(0, 2))), rw)
    cs = np.linspace(0.0, rw.max_value + 0.3, 9)[1:]
    for t in (0.0, PI):
        sl = [pen.hull(t, c).initial_slope for c in cs]
        assert np.all(np.diff(sl) < 0)


def test_control_validation(data_dir):
    ctrl = ControlSpec.from_json(json.loads((data_dir / "control.json").read_text()))
    ctrl.validate()
    assert ControlSpec.from_json(ctrl.to_json()) == ctrl
    bad = ctrl_spec({0.0: 1.0}, lo=1.0, hi=-1.0)
    with pytest.raises(SpecError):
        bad.validate()
    with pytest.raises(SpecError):
        ControlSpec(AngularMeasure.from_weights({0.0: 1.0}), {}, {})
