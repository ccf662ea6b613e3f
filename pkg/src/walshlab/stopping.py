"""Optimal stopping on the closed unit disc.

Per ray the reward is moved to the scale coordinate ``s = p_theta(r)`` where
the smallest majorant that is concave in ``p`` becomes an ordinary upper
concave envelope. The pencil ``U^(c)`` adds the apex ``(0, max(U(0), c))``;
``Phi(c)`` averages the initial hull slopes against ``nu`` and its root ``c0``
is the value at the origin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .classify import NotApplicableError
from .fields import AngularMeasure, ModelSpec, SpecError, _check_keys
from .geometry import RayPoint, normalize_angle
from .scale import RayProfile

CONTACT_RTOL = 1e-9
ORIGIN_TOL = 1e-9


@dataclass(frozen=True)
class Reward:
    """A bounded reward: value at the origin and a grid on ``[0, 1]`` per ray."""

    at_origin: float
    rays: Mapping[float, tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        for theta, (r, u) in self.rays.items():
            if r.ndim != 1 or r.shape != u.shape or r.size < 2:
                raise SpecError(f"reward on ray {theta!r}: radii and values must be matching 1-d arrays")
            if r[0] != 0.0 or r[-1] != 1.0 or np.any(np.diff(r) <= 0.0):
                raise SpecError(f"reward on ray {theta!r}: radii must increase from 0 to 1")
            if not np.all(np.isfinite(u)):
                raise SpecError(f"reward on ray {theta!r} is not finite")
            if abs(u[0] - self.at_origin) > ORIGIN_TOL * (1.0 + abs(self.at_origin)):
                raise SpecError(f"reward on ray {theta!r} is discontinuous at the origin "
                                f"({u[0]!r} vs {self.at_origin!r})")

    @classmethod
    def from_grids(cls, at_origin: float, grids: Mapping[float, tuple]) -> "Reward":
        rays = {}
        for theta, (r, u) in grids.items():
            r, u = np.asarray(r, dtype=float), np.asarray(u, dtype=float)
            if r.size and r[0] > 0.0:
                r, u = np.concatenate(([0.0], r)), np.concatenate(([at_origin], u))
            rays[normalize_angle(theta)] = (r, u)
        return cls(float(at_origin), rays)

    @classmethod
    def from_functions(cls, funcs: Mapping[float, Callable], n: int = 257, radii=None) -> "Reward":
        r = np.linspace(0.0, 1.0, n) if radii is None else np.asarray(radii, dtype=float)
        vals = {t: np.asarray(f(r), dtype=float) * np.ones_like(r) for t, f in funcs.items()}
        origin = float(next(iter(vals.values()))[0])
        return cls(origin, {normalize_angle(t): (r.copy(), v) for t, v in vals.items()})

    @classmethod
    def from_json(cls, obj) -> "Reward":
        _check_keys(obj, {"origin", "rays"}, {"origin", "rays"}, "reward")
        grids = {}
        for i, ray in enumerate(obj["rays"]):
            _check_keys(ray, {"theta", "radii", "values"}, {"theta", "radii", "values"}, f"reward.rays[{i}]")
            grids[float(ray["theta"])] = (ray["radii"], ray["values"])
        try:
            return cls.from_grids(float(obj["origin"]), grids)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, SpecError):
                raise
            raise SpecError(f"reward: {exc}") from exc

    def to_json(self) -> dict:
        return {"origin": self.at_origin,
                "rays": [{"theta": t, "radii": r.tolist(), "values": u.tolist()} for t, (r, u) in sorted(self.rays.items())]}

    @property
    def max_value(self) -> float:
        return max(float(np.max(u)) for _, u in self.rays.values())

    def grid(self, theta: float) -> tuple[np.ndarray, np.ndarray]:
        try:
            return self.rays[theta]
        except KeyError:
            raise SpecError(f"reward has no grid on ray {theta!r}") from None

    def value(self, x: RayPoint) -> float:
        if x.is_origin:
            return self.at_origin
        r, u = self.grid(x.theta)
        return float(np.interp(min(x.r, 1.0), r, u))


@dataclass(frozen=True)
class MajorantHull:
    """Upper concave envelope of the apex and the reward points in the p-coordinate."""

    abscissae: np.ndarray
    ordinates: np.ndarray
    apex: float
    knots: np.ndarray
    values: np.ndarray
    initial_slope: float
    contact: np.ndarray
    theta: float = 0.0

    def __call__(self, s):
        return np.interp(s, self.abscissae[self.knots], self.values[self.knots])


def upper_hull(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Indices of the vertices of the upper concave envelope (monotone chain)."""
    stack: list[int] = []
    for j in range(x.size):
        while len(stack) >= 2:
            o, a = stack[-2], stack[-1]
            cross = (x[a] - x[o]) * (y[j] - y[o]) - (y[a] - y[o]) * (x[j] - x[o])
            if cross >= 0.0:
                stack.pop()
            else:
                break
        stack.append(j)
    return np.array(stack, dtype=int)


def least_concave_majorant(abscissae, ordinates, c: float, theta: float = 0.0) -> MajorantHull:
    x = np.asarray(abscissae, dtype=float)
    u = np.asarray(ordinates, dtype=float)
    if x.ndim != 1 or x.shape != u.shape or x.size < 1:
        raise ValueError("abscissae and ordinates must be matching 1-d arrays")
    if np.any(np.diff(x) <= 0.0):
        raise ValueError("abscissae must be strictly increasing")
    if x[0] != 0.0:
        raise ValueError("abscissae must start at 0")
    y = u.copy()
    y[0] = max(u[0], c)
    knots = upper_hull(x, y)
    vals = np.interp(x, x[knots], y[knots])
    vals[knots] = y[knots]
    slope = 0.0 if knots.size < 2 else (y[knots[1]] - y[knots[0]]) / (x[knots[1]] - x[knots[0]])
    contact = vals - u <= CONTACT_RTOL * (1.0 + np.abs(u))
    return MajorantHull(x, u, float(y[0]), knots, vals, float(slope), contact, theta)


def brute_force_majorant(abscissae, ordinates, c: float) -> np.ndarray:
    """Envelope values by minimizing over all support lines through pairs of points."""
    x = np.asarray(abscissae, dtype=float)
    y = np.asarray(ordinates, dtype=float).copy()
    y[0] = max(y[0], c)
    n = x.size
    best = np.full(n, np.inf)
    tol = 1e-13 * (1.0 + np.max(np.abs(y)))
    for i in range(n):
        # horizontal support line through the maximum handles n == 1 and flat tops
        for k in range(i, n):
            if k == i:
                if np.all(y <= y[i] + tol):
                    best = np.minimum(best, np.full(n, y[i]))
                continue
            slope = (y[k] - y[i]) / (x[k] - x[i])
            line = y[i] + slope * (x - x[i])
            if np.all(line >= y - tol):
                best = np.minimum(best, line)
    return best


# -- pencil and root -----------------------------------------------------------

def _check_unit_disc(profiles: Mapping[float, RayProfile], thetas):
    for t in thetas:
        prof = profiles[t]
        if prof.ell != 1.0:
            raise NotApplicableError(f"stopping problems live on the unit disc; ell({t!r}) = {prof.ell!r}")
        if math.isinf(prof.p_limit):
            raise NotApplicableError(f"p(1-) is infinite on ray {t!r}")


def scale_abscissae(profile: RayProfile, radii: np.ndarray) -> np.ndarray:
    return np.array([profile.p_at(float(r)) if r < 1.0 else profile.p_limit for r in radii])


class Pencil:
    """Hulls ``U^(c)`` on every charged ray for a fixed model and reward."""

    def __init__(self, profiles: Mapping[float, RayProfile], nu: AngularMeasure, reward: Reward, thetas=None):
        self.nu, self.reward = nu, reward
        self.thetas = tuple(nu.thetas if thetas is None else thetas)
        _check_unit_disc(profiles, self.thetas)
        self.profiles = profiles
        self.s = {}
        self.u = {}
        for t in self.thetas:
            r, u = reward.grid(t)
            self.s[t] = scale_abscissae(profiles[t], r)
            self.u[t] = u

    def hull(self, theta: float, c: float) -> MajorantHull:
        return least_concave_majorant(self.s[theta], self.u[theta], c, theta)

    def phi(self, c: float) -> float:
        if c < self.reward.at_origin:
            raise ValueError(f"c = {c!r} is below U(0) = {self.reward.at_origin!r}")
        return math.fsum(w * self.hull(t, c).initial_slope for t, w in self.nu.atoms)


def bisect_root(phi: Callable[[float], float], lo: float, hi: float, tol: float) -> float:
    """``inf{c >= lo : phi(c) <= 0}`` for a decreasing ``phi`` with ``phi(hi) <= 0``."""
    if phi(lo) <= 0.0:
        return lo
    for _ in range(200):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if phi(mid) <= 0.0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def phi(profiles, nu: AngularMeasure, reward: Reward, c: float) -> float:
    return Pencil(profiles, nu, reward).phi(c)


def solve_c0(profiles, nu: AngularMeasure, reward: Reward, tol: float = 1e-10) -> float:
    pen = Pencil(profiles, nu, reward)
    return bisect_root(pen.phi, reward.at_origin, max(reward.max_value, reward.at_origin), tol)


def contact_intervals(radii: np.ndarray, contact: np.ndarray) -> list[tuple[float, float]]:
    """Maximal runs of contact nodes as closed radial intervals."""
    out = []
    j, n = 0, contact.size
    while j < n:
        if contact[j]:
            k = j
            while k + 1 < n and contact[k + 1]:
                k += 1
            out.append((float(radii[j]), float(radii[k])))
            j = k + 1
        else:
            j += 1
    return out


@dataclass
class StoppingSolution:
    c0: float
    hulls: dict[float, MajorantHull]
    radii: dict[float, np.ndarray]
    Q: dict[float, np.ndarray]
    stop_region: dict[float, list[tuple[float, float]]]
    origin_in_region: bool
    phi_at_c0: float
    profiles: Mapping[float, RayProfile] = field(repr=False, default_factory=dict)

    def value_at(self, x: RayPoint) -> float:
        if x.is_origin:
            return self.c0
        prof = self.profiles[x.theta]
        s = prof.p_limit if x.r >= 1.0 else prof.p_at(x.r)
        return float(self.hulls[x.theta](s))

    def to_json(self) -> dict:
        return {"c0": self.c0, "origin_in_region": self.origin_in_region, "phi_at_c0": self.phi_at_c0,
                "rays": [{"theta": t, "radii": self.radii[t].tolist(), "Q": self.Q[t].tolist(),
                          "initial_slope": self.hulls[t].initial_slope,
                          "stop_intervals": [list(iv) for iv in self.stop_region[t]]}
                         for t in sorted(self.hulls)]}


def assemble_solution(pencil: Pencil, c0: float, extra_rays=()) -> StoppingSolution:
    hulls, radii, Q, region = {}, {}, {}, {}
    for t in list(pencil.thetas) + [x for x in extra_rays if x not in pencil.thetas]:
        h = pencil.hull(t, c0)
        r, _ = pencil.reward.grid(t)
        hulls[t], radii[t], Q[t] = h, r, h.values.copy()
        region[t] = contact_intervals(r, h.contact)
    u0 = pencil.reward.at_origin
    in_region = c0 - u0 <= CONTACT_RTOL * (1.0 + abs(u0))
    return StoppingSolution(c0, hulls, radii, Q, region, in_region, pencil.phi(c0), pencil.profiles)


def value_function(profiles, nu: AngularMeasure, reward: Reward, tol: float = 1e-10) -> StoppingSolution:
    pen = Pencil(profiles, nu, reward)
    c0 = bisect_root(pen.phi, reward.at_origin, max(reward.max_value, reward.at_origin), tol)
    return assemble_solution(pen, c0)


def solve_stopping(spec: ModelSpec, reward: Reward, tol: float = 1e-10, profiles=None) -> StoppingSolution:
    from .scale import build_profiles
    profiles = build_profiles(spec, spec.nu.thetas) if profiles is None else profiles
    return value_function(profiles, spec.nu, reward, tol)
