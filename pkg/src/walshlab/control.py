"""Control with discretionary stopping: extremal signal-to-noise pairs on each ray.

On a ray whose reward maximum ``U*`` exceeds the current level ``c`` the
candidate dynamics use the maximizing pair on ``(0, lambda)`` and the
minimizing pair elsewhere; on every other ray the minimizing pair is used
throughout. Between ``lambda`` and ``rho`` any choice gives the same pencil,
and the minimizing pair is kept there.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .conditions import validate_conditions
from .fields import AngularMeasure, ModelSpec, RayField, SpecError, _check_keys
from .geometry import Domain, normalize_angle
from .scale import RayProfile, build_profile
from .stopping import (CONTACT_RTOL, MajorantHull, Reward, StoppingSolution, bisect_root, contact_intervals,
                       least_concave_majorant, scale_abscissae)

MAX_THEN_MIN, PLATEAU, MIN_EVERYWHERE = "max-then-min", "min-after-plateau", "min-everywhere"
LABEL_TOL = 1e-9


@dataclass(frozen=True)
class ControlSpec:
    nu: AngularMeasure
    pair0: Mapping[float, tuple[RayField, RayField]]
    pair1: Mapping[float, tuple[RayField, RayField]]

    def __post_init__(self):
        rays = set(self.nu.thetas)
        if set(self.pair0) != rays or set(self.pair1) != rays:
            raise SpecError("pair0 and pair1 must be given on exactly the charged rays")

    @property
    def thetas(self) -> tuple[float, ...]:
        return self.nu.thetas

    def pair_spec(self, which: int) -> ModelSpec:
        pair = self.pair0 if which == 0 else self.pair1
        return ModelSpec(self.nu, Domain({t: 1.0 for t in self.thetas}),
                         {t: pair[t][0] for t in self.thetas}, {t: pair[t][1] for t in self.thetas})

    def degenerate(self, theta: float) -> bool:
        return self.pair0[theta] == self.pair1[theta]

    def validate(self, n_probe: int = 1025) -> None:
        for which in (0, 1):
            spec = self.pair_spec(which)
            rep = validate_conditions(spec)
            if not rep.ok:
                raise SpecError(f"pair{which} fails the regularity conditions: "
                                + "; ".join(f"{c.clause} on ray {c.theta:.6g}" for c in rep.failures))
        r = np.linspace(0.0, 1.0, n_probe)[1:-1]
        for t in self.thetas:
            (b0, s0), (b1, s1) = self.pair0[t], self.pair1[t]
            lo, hi = b0(r) / s0(r) ** 2, b1(r) / s1(r) ** 2
            if np.any(lo > hi + 1e-12 * (1.0 + np.abs(hi))):
                raise SpecError(f"ray {t!r}: pair0 must have the smaller ratio b/s^2")

    @classmethod
    def from_json(cls, obj) -> "ControlSpec":
        _check_keys(obj, {"rays", "pair0", "pair1"}, {"rays", "pair0", "pair1"}, "control")
        weights = {}
        for i, ray in enumerate(obj["rays"]):
            _check_keys(ray, {"theta", "weight"}, {"theta", "weight"}, f"control.rays[{i}]")
            weights[normalize_angle(ray["theta"])] = float(ray["weight"])
        nu = AngularMeasure.from_weights(weights)
        pairs = []
        for name in ("pair0", "pair1"):
            pair = {}
            for i, ray in enumerate(obj[name]):
                _check_keys(ray, {"theta", "b", "s"}, {"theta", "b", "s"}, f"control.{name}[{i}]")
                t = normalize_angle(ray["theta"])
                pair[t] = (RayField.from_json(ray["b"], f"{name} ray {t}: b"),
                           RayField.from_json(ray["s"], f"{name} ray {t}: s"))
            pairs.append(pair)
        return cls(nu, pairs[0], pairs[1])

    def to_json(self) -> dict:
        return {"rays": [{"theta": t, "weight": w} for t, w in self.nu.atoms],
                "pair0": [{"theta": t, "b": self.pair0[t][0].to_json(), "s": self.pair0[t][1].to_json()}
                          for t in self.thetas],
                "pair1": [{"theta": t, "b": self.pair1[t][0].to_json(), "s": self.pair1[t][1].to_json()}
                          for t in self.thetas]}


@dataclass(frozen=True)
class RayExtremum:
    theta: float
    u_star: float
    lam: float
    rho: float


def ray_extremum(reward: Reward, theta: float) -> RayExtremum:
    r, u = reward.grid(theta)
    top = float(np.max(u))
    hit = np.nonzero(u >= top - 1e-12 * (1.0 + abs(top)))[0]
    return RayExtremum(theta, top, float(r[hit[0]]), float(r[hit[-1]]))


def uses_pair1(ext: RayExtremum, c: float) -> bool:
    # U* = c is pinned to pair0 so the slope map stays continuous in c
    return ext.u_star > c and ext.lam > 0.0


def ray_fields(ctrl: ControlSpec, ext: RayExtremum, c: float) -> tuple[RayField, RayField]:
    t = ext.theta
    if not uses_pair1(ext, c) or ctrl.degenerate(t):
        return ctrl.pair0[t]
    (b0, s0), (b1, s1) = ctrl.pair0[t], ctrl.pair1[t]
    if ext.lam >= 1.0:
        return b1, s1
    return RayField.switch(ext.lam, b1, b0), RayField.switch(ext.lam, s1, s0)


def candidate_control(ctrl: ControlSpec, extrema: Mapping[float, RayExtremum], c: float,
                      at_origin: float | None = None) -> ModelSpec:
    if at_origin is not None and c < at_origin:
        raise ValueError(f"c = {c!r} is below U(0) = {at_origin!r}")
    b, s = {}, {}
    for t in ctrl.thetas:
        b[t], s[t] = ray_fields(ctrl, extrema[t], c)
    return ModelSpec(ctrl.nu, Domain({t: 1.0 for t in ctrl.thetas}), b, s)


class ControlPencil:
    """Hulls ``U^(c, p^(c))``; the scale of each ray is rebuilt only when its pair selection changes."""

    def __init__(self, ctrl: ControlSpec, reward: Reward, n_grid: int = 32):
        self.ctrl, self.reward, self.n_grid = ctrl, reward, n_grid
        self.extrema = {t: ray_extremum(reward, t) for t in ctrl.thetas}
        self._profiles: dict[tuple[float, bool], RayProfile] = {}
        self._absc: dict[tuple[float, bool], np.ndarray] = {}

    def _key(self, theta: float, c: float) -> tuple[float, bool]:
        ext = self.extrema[theta]
        return theta, bool(uses_pair1(ext, c) and not self.ctrl.degenerate(theta))

    def profile(self, theta: float, c: float) -> RayProfile:
        key = self._key(theta, c)
        if key not in self._profiles:
            b, s = ray_fields(self.ctrl, self.extrema[theta], c)
            spec = ModelSpec(AngularMeasure(((theta, 1.0),)), Domain({theta: 1.0}), {theta: b}, {theta: s})
            prof = build_profile(spec, theta, self.n_grid)
            if math.isinf(prof.p_limit):
                raise SpecError(f"ray {theta!r}: candidate scale has p(1-) = inf")
            self._profiles[key] = prof
            self._absc[key] = scale_abscissae(prof, self.reward.grid(theta)[0])
        return self._profiles[key]

    def hull(self, theta: float, c: float) -> MajorantHull:
        self.profile(theta, c)
        return least_concave_majorant(self._absc[self._key(theta, c)], self.reward.grid(theta)[1], c, theta)

    def slopes(self, c: float) -> dict[float, float]:
        return {t: self.hull(t, c).initial_slope for t in self.ctrl.thetas}

    def phi(self, c: float) -> float:
        if c < self.reward.at_origin:
            raise ValueError(f"c = {c!r} is below U(0) = {self.reward.at_origin!r}")
        return math.fsum(w * self.hull(t, c).initial_slope for t, w in self.ctrl.nu.atoms)


def u_cpc(ctrl: ControlSpec, reward: Reward, c: float, pencil: ControlPencil | None = None):
    pencil = ControlPencil(ctrl, reward) if pencil is None else pencil
    hulls = {t: pencil.hull(t, c) for t in ctrl.thetas}
    return hulls, {t: h.initial_slope for t, h in hulls.items()}


@dataclass
class RayStrategy:
    theta: float
    label: str
    u_star: float
    lam: float
    rho: float
    description: str

    def to_json(self) -> dict:
        return {"theta": self.theta, "label": self.label, "u_star": self.u_star, "lambda": self.lam,
                "rho": self.rho, "description": self.description}


@dataclass
class ControlSolution:
    c_star: float
    V: dict[float, np.ndarray]
    radii: dict[float, np.ndarray]
    hulls: dict[float, MajorantHull]
    switched_spec: ModelSpec
    stop_region: dict[float, list[tuple[float, float]]]
    origin_in_region: bool
    extrema: dict[float, RayExtremum]
    profiles: dict[float, RayProfile] = field(repr=False, default_factory=dict)
    strategy: list[RayStrategy] = field(default_factory=list)

    def as_stopping(self) -> StoppingSolution:
        return StoppingSolution(self.c_star, self.hulls, self.radii, self.V, self.stop_region,
                                self.origin_in_region, math.nan, self.profiles)

    def to_json(self) -> dict:
        return {"c_star": self.c_star, "origin_in_region": self.origin_in_region,
                "rays": [{"theta": t, "radii": self.radii[t].tolist(), "V": self.V[t].tolist(),
                          "initial_slope": self.hulls[t].initial_slope,
                          "stop_intervals": [list(iv) for iv in self.stop_region[t]]}
                         for t in sorted(self.hulls)],
                "switched_spec": self.switched_spec.to_json(),
                "strategy": [s.to_json() for s in self.strategy],
                "middle_zone_dynamics": "pair0"}


def strategy_report(solution: ControlSolution) -> list[RayStrategy]:
    out = []
    c = solution.c_star
    for t in sorted(solution.extrema):
        e = solution.extrema[t]
        gap = e.u_star - c
        tol = LABEL_TOL * (1.0 + abs(c))
        if gap > tol:
            label = MAX_THEN_MIN
            parts = [f"maximize b/s^2 on (0, {e.lam:.6g})"]
            if e.rho > e.lam:
                parts.append(f"push to an endpoint of [{e.lam:.6g}, {e.rho:.6g}] (simulated with pair0)")
            if e.rho < 1.0:
                parts.append(f"minimize b/s^2 on ({e.rho:.6g}, 1)")
            desc = "; ".join(parts)
        elif gap >= -tol:
            label = PLATEAU
            desc = f"minimize b/s^2 on ({e.rho:.6g}, 1); the reward maximum equals the value at the origin"
        else:
            label = MIN_EVERYWHERE
            desc = "minimize b/s^2 on the whole ray"
        out.append(RayStrategy(t, label, e.u_star, e.lam, e.rho, desc))
    return out


def solve_cstar(ctrl: ControlSpec, nu: AngularMeasure | None, reward: Reward, tol: float = 1e-10,
                pencil: ControlPencil | None = None) -> ControlSolution:
    if nu is not None and nu != ctrl.nu:
        raise SpecError("angular measure differs from the one in the control file")
    pencil = ControlPencil(ctrl, reward) if pencil is None else pencil
    u0 = reward.at_origin
    c = bisect_root(pencil.phi, u0, max(reward.max_value, u0), tol)
    hulls, V, radii, region, profiles = {}, {}, {}, {}, {}
    for t in ctrl.thetas:
        h = pencil.hull(t, c)
        r, _ = reward.grid(t)
        hulls[t], V[t], radii[t] = h, h.values.copy(), r
        region[t] = contact_intervals(r, h.contact)
        profiles[t] = pencil.profile(t, c)
    sol = ControlSolution(c, V, radii, hulls, candidate_control(ctrl, pencil.extrema, c), region,
                          c - u0 <= CONTACT_RTOL * (1.0 + abs(u0)), dict(pencil.extrema), profiles)
    sol.strategy = strategy_report(sol)
    return sol
