"""Regularity checks on (b, s) and the drift-removing change of scale."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fields import ModelSpec, RayField, SpecError
from .quadrature import QuadratureError, integrate
from .scale import build_profile

DIVERGENCE_THRESHOLD = 1e12


class MalformedFieldError(SpecError):
    pass


class ConditionError(ValueError):
    def __init__(self, report: "ConditionReport"):
        super().__init__("model fails the regularity conditions: " + "; ".join(
            f"{c.clause} on ray {c.theta:.6g} ({c.detail})" for c in report.failures))
        self.report = report


@dataclass(frozen=True)
class ClauseResult:
    clause: str
    theta: float
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class ConditionReport:
    eta: float
    clauses: tuple[ClauseResult, ...] = field(default=())

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.clauses)

    @property
    def failures(self) -> list[ClauseResult]:
        return [c for c in self.clauses if not c.passed]

    def to_json(self) -> dict:
        return {"eta": self.eta, "ok": self.ok,
                "clauses": [{"clause": c.clause, "theta": c.theta, "passed": c.passed, "detail": c.detail}
                            for c in self.clauses]}


def _segments(f: RayField, lo: float, hi: float):
    """Linear pieces of ``f`` restricted to the open interval ``(lo, hi)``."""
    starts = list(f.starts) + [math.inf]
    for k in range(len(f.starts)):
        a, c = max(starts[k], lo), min(starts[k + 1], hi)
        if a < c:
            yield a, c, f.intercepts[k] + f.slopes[k] * (a - starts[k]), f.slopes[k]


def _zero_inside(f: RayField, ell: float) -> float | None:
    """A radius in ``(0, ell)`` where the piecewise-linear ``f`` vanishes, if any."""
    for a, c, ya, slope in _segments(f, 0.0, ell):
        if ya == 0.0 and a > 0.0:
            return a
        if slope != 0.0:
            root = a - ya / slope
            if a < root < c or (root == a and a > 0.0):
                return root
        elif ya == 0.0:
            return 0.5 * (a + min(c, a + 1.0))
    return None


def _probe(f: RayField, r: np.ndarray, name: str, theta: float) -> np.ndarray:
    try:
        vals = np.asarray(f(r), dtype=float)
    except Exception as exc:  # noqa: BLE001 -- any evaluation failure is a malformed field
        raise MalformedFieldError(f"{name} on ray {theta!r} cannot be evaluated: {exc}") from exc
    if not np.all(np.isfinite(vals)):
        raise MalformedFieldError(f"{name} on ray {theta!r} returns non-finite values")
    return vals


def ring_grid(eta: float, levels: int = 60, n_uniform: int = 257) -> np.ndarray:
    return np.unique(np.concatenate([eta * 2.0 ** -np.arange(levels + 1), np.linspace(0.0, eta, n_uniform)[1:]]))


def validate_conditions(spec: ModelSpec, threshold: float = DIVERGENCE_THRESHOLD) -> ConditionReport:
    eta = min(spec.domain.floor, 1.0) / 2.0
    ring = ring_grid(eta)
    out = []
    for theta in spec.thetas:
        b, s, ell = spec.b[theta], spec.s[theta], spec.ell(theta)
        reach = ell if math.isfinite(ell) else max(8.0, 2.0 * max((*b.breakpoints, *s.breakpoints), default=0.0))
        probe = np.linspace(0.0, reach, 1025)[1:-1]
        _probe(b, probe, "b", theta)
        sv = _probe(s, probe, "s", theta)
        root = _zero_inside(s, ell)
        if root is None and np.any(sv == 0.0):
            root = float(probe[np.argmax(sv == 0.0)])
        out.append(ClauseResult("s-nonvanishing", theta, root is None,
                                "" if root is None else f"s vanishes at r = {root:.6g}"))

        # compact subintervals of (0, ell): [a, c] with a = eta/4, c short of ell
        a = eta / 4.0
        c = ell - min(ell - a, eta) / 4.0 if math.isfinite(ell) else reach
        bps = (*b.breakpoints, *s.breakpoints)
        detail, ok = "", root is None
        if ok:
            for name, fn in (("b/s^2", lambda x: b(x) / s(x) ** 2), ("1/s^2", lambda x: 1.0 / s(x) ** 2)):
                try:
                    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                        val = integrate(lambda x: np.abs(fn(x)), a, c, tol=1e-8, breaks=bps)
                except QuadratureError as exc:
                    ok, detail = False, f"{name}: {exc}"
                    break
                if not math.isfinite(val) or val > threshold:
                    ok, detail = False, f"{name} integral on [{a:.3g}, {c:.3g}] diverges"
                    break
        else:
            detail = "s vanishes inside the ray"
        out.append(ClauseResult("local-integrability", theta, ok, detail))

        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            bound = (1.0 + np.abs(_probe(b, ring, "b", theta))) / _probe(s, ring, "s", theta) ** 2
        sup = float(np.max(bound)) if np.all(np.isfinite(bound)) else math.inf
        ok = sup <= threshold
        out.append(ClauseResult("near-origin-bound", theta, ok,
                                f"sup (1+|b|)/s^2 on (0, {eta:.6g}] = {sup:.6g}"))
    return ConditionReport(eta, tuple(out))


def remove_drift(spec: ModelSpec, n_points: int = 513) -> ModelSpec:
    """Driftless image ``P(X)``: radii ``p(ell-)`` and dispersion ``p'(q(y)) s(q(y))``."""
    report = validate_conditions(spec)
    if not report.ok:
        raise ConditionError(report)
    new_b, new_s, new_ell = {}, {}, {}
    for theta in spec.thetas:
        s = spec.s[theta]
        if spec.b[theta].is_zero():
            new_b[theta], new_s[theta], new_ell[theta] = spec.b[theta], s, spec.ell(theta)
            continue
        prof = build_profile(spec, theta)
        P = prof.p_limit
        top = P if math.isfinite(P) else prof.p[-1]
        # uniform in y, clustered at both ends, plus the images of field breakpoints
        u = np.linspace(0.0, 1.0, n_points)
        ys = top * np.concatenate([u, 2.0 ** -np.arange(8.0, 40.0), 1.0 - 2.0 ** -np.arange(8.0, 40.0)])
        bps = [x for x in (*spec.b[theta].breakpoints, *s.breakpoints) if x < spec.ell(theta)]
        ys = np.concatenate([ys, [prof.p_at(x) for x in bps]])
        ys = np.unique(ys[(ys >= 0.0) & (ys < top)])
        rs = np.array([prof.q_at(y) for y in ys])
        vals = np.array([prof.p_prime_at(r) if r > 0.0 else 1.0 for r in rs]) * np.asarray(s(np.maximum(rs, 1e-300)))
        new_b[theta] = RayField.constant(0.0)
        new_s[theta] = RayField.grid(ys, vals)
        new_ell[theta] = P
    return spec.replace(b=new_b, s=new_s, ell=new_ell)
