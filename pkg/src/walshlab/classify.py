"""Exit-angle laws, limit behaviour at the explosion time and finite-time explosion tests.

All inputs are per-ray profiles (see :mod:`walshlab.scale`) whose limits at
``ell-`` are extended reals stored as floats; ``math.inf`` marks a divergent
limit. Ratios go through :func:`inv` so that ``1/inf = 0`` is explicit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

from .fields import AngularMeasure
from .geometry import RayPoint, UnsupportedRayError
from .scale import RayProfile

NEVER, CERTAIN, MIXED = "never", "certain", "mixed"
LIMIT_EXISTS, LIMIT_FAILS = "limit-exists-on-boundary", "limit-fails"

CASE_TEXT = {
    NEVER: "never (P(S<inf) = 0)",
    CERTAIN: "certain (P(S<inf) = 1)",
    MIXED: "mixed (0 < P(S<inf) < 1)",
}


class NotApplicableError(ValueError):
    """The hypothesis of the requested formula does not hold for this model."""


def inv(x: float) -> float:
    return 0.0 if math.isinf(x) else 1.0 / x


def is_finite(x: float) -> bool:
    return not math.isinf(x)


@dataclass(frozen=True)
class ExitLaw:
    atoms: tuple[tuple[float, float], ...]
    total_exit_mass: float = 1.0

    def prob(self, theta: float) -> float:
        return dict(self.atoms).get(theta, 0.0)

    def to_json(self) -> dict:
        return {"atoms": [{"theta": t, "probability": q} for t, q in self.atoms],
                "total_exit_mass": self.total_exit_mass}


@dataclass(frozen=True)
class LimitReport:
    limit_tag: str
    explosion_time_infinite: bool
    boundary_probability: float
    law: ExitLaw | None = None

    def to_json(self) -> dict:
        return {"limit_tag": self.limit_tag, "explosion_time_infinite_on_failure": self.explosion_time_infinite,
                "boundary_probability": self.boundary_probability,
                "law": None if self.law is None else self.law.to_json()}


@dataclass(frozen=True)
class ExplosionVerdict:
    case_tag: str
    limit_tag: str
    finite_expectation: bool
    m_bound: float | None = None
    masses: Mapping[str, float] = field(default_factory=dict)

    @property
    def text(self) -> str:
        return CASE_TEXT[self.case_tag]

    def to_json(self) -> dict:
        return {"case": self.case_tag, "limit": self.limit_tag, "finite_expectation": self.finite_expectation,
                "m_bound": self.m_bound, "masses": dict(self.masses)}


def _profile(profiles: Mapping[float, RayProfile], theta: float) -> RayProfile:
    try:
        return profiles[theta]
    except KeyError:
        raise UnsupportedRayError(f"no profile for ray {theta!r}") from None


def _check(profiles, nu: AngularMeasure, start: RayPoint):
    for t in nu.thetas:
        _profile(profiles, t)
    if not start.is_origin:
        prof = _profile(profiles, start.theta)
        if not start.r < prof.ell:
            raise ValueError(f"start {start} lies outside the domain")


def finite_p_mass(profiles, nu: AngularMeasure) -> float:
    return math.fsum(w for t, w in nu.atoms if is_finite(profiles[t].p_limit))


def _origin_law(profiles, nu: AngularMeasure) -> dict[float, float]:
    a = {t: w * inv(profiles[t].p_limit) for t, w in nu.atoms}
    total = sum(a.values())
    if total == 0.0:
        raise NotApplicableError("every charged ray has p(ell-) = inf: the exit angle is undefined "
                                 "(no limit at the explosion time, which is infinite)")
    return {t: x / total for t, x in a.items()}


def start_ratio(profiles, start: RayPoint) -> float:
    """``p(r0) / p(ell-)`` on the start ray; 0 for the origin."""
    if start.is_origin:
        return 0.0
    prof = profiles[start.theta]
    return prof.p_at(start.r) * inv(prof.p_limit)


def exit_angle_law(profiles: Mapping[float, RayProfile], nu: AngularMeasure, start: RayPoint) -> ExitLaw:
    _check(profiles, nu, start)
    law = _origin_law(profiles, nu)
    if not start.is_origin:
        q = start_ratio(profiles, start)
        law = {t: x * (1.0 - q) for t, x in law.items()}
        law[start.theta] = law.get(start.theta, 0.0) + q
    atoms = tuple(sorted(law.items()))
    return ExitLaw(atoms, math.fsum(x for _, x in atoms))


def classify_limit(profiles: Mapping[float, RayProfile], nu: AngularMeasure, start: RayPoint) -> LimitReport:
    _check(profiles, nu, start)
    if finite_p_mass(profiles, nu) > 0.0:
        return LimitReport(LIMIT_EXISTS, False, 1.0, exit_angle_law(profiles, nu, start))
    # no charged ray reaches its end in finite p-scale: only the start ray can be escaped along
    q = start_ratio(profiles, start)
    return LimitReport(LIMIT_FAILS, True, q, None)


def classify_explosion(profiles: Mapping[float, RayProfile], nu: AngularMeasure,
                       start: RayPoint) -> ExplosionVerdict:
    _check(profiles, nu, start)
    finite_v = math.fsum(w for t, w in nu.atoms if is_finite(profiles[t].v_limit))
    slow = math.fsum(w for t, w in nu.atoms
               if not is_finite(profiles[t].v_limit) and is_finite(profiles[t].p_limit))
    if finite_v == 0.0:
        origin_case = NEVER
    elif slow == 0.0:
        origin_case = CERTAIN
    else:
        origin_case = MIXED
    case = origin_case
    if not start.is_origin:
        prof = profiles[start.theta]
        v0, p0 = prof.v_limit, prof.p_limit
        if origin_case == NEVER:
            case = NEVER if not is_finite(v0) else MIXED
        elif origin_case == CERTAIN:
            case = CERTAIN if (is_finite(v0) or not is_finite(p0)) else MIXED
        else:
            case = MIXED
    limit = classify_limit(profiles, nu, start).limit_tag
    try:
        m = expected_explosion_bound(profiles, nu, start)
        finite_exp = True
    except NotApplicableError:
        m, finite_exp = None, False
    masses = {"finite_v": finite_v, "infinite_v_finite_p": slow, "finite_p": finite_p_mass(profiles, nu)}
    return ExplosionVerdict(case, limit, finite_exp, m, masses)


@dataclass(frozen=True)
class BoundConstants:
    c1: float
    c2: Mapping[float, float]


def bound_constants(profiles: Mapping[float, RayProfile], nu: AngularMeasure, extra=()) -> BoundConstants:
    rays = list(nu.thetas) + [t for t in extra if t not in nu]
    if finite_p_mass(profiles, nu) == 0.0:
        raise NotApplicableError("needs a charged ray with p(ell-) < inf")
    bad = [t for t in rays if not is_finite(profiles[t].vp_ratio_limit)]
    if bad:
        raise NotApplicableError(f"(v/p)(ell-) is infinite on ray(s) {bad}")
    num = math.fsum(w * profiles[t].vp_ratio_limit for t, w in nu.atoms)
    den = math.fsum(w * inv(profiles[t].p_limit) for t, w in nu.atoms)
    c1 = num / den
    c2 = {t: -c1 * inv(profiles[t].p_limit) + profiles[t].vp_ratio_limit for t in rays}
    return BoundConstants(c1, c2)


def expected_explosion_bound(profiles: Mapping[float, RayProfile], nu: AngularMeasure, x: RayPoint) -> float:
    """``M(x) = -v(x) + C2(theta) p(x) + C1``, an upper bound for the mean explosion time."""
    _check(profiles, nu, x)
    k = bound_constants(profiles, nu, () if x.is_origin else (x.theta,))
    if x.is_origin:
        return k.c1
    prof = profiles[x.theta]
    return -prof.v_at(x.r) + k.c2[x.theta] * prof.p_at(x.r) + k.c1
