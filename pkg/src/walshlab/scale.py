"""Per-ray scale function, speed measure, Feller function and u-series.

Notation on one ray, with ``g = 2 b / s**2`` and ``w = 1 / s**2``::

    I(r)  = int_0^r g                      p'(r) = exp(-I(r))
    p(r)  = int_0^r p'                     M(r)  = m([0, r]) = int_0^r 2 w exp(I)
    K(r)  = p'(r) M(r)                     v(r)  = int_0^r K

``K`` is never formed as a product. It solves ``K' = 2w - g K`` and is
propagated panel by panel as ``K = exp(-dI) (K_a + int 2 w exp(dI))`` with
``dI`` the exponent increment inside the panel, which stays bounded even when
``p'`` and ``M`` separately under- or overflow. The u-series terms are built
the same way with ``u_{n-1}`` inserted in the inner integrand.

Values on the body ``[0, r_b]`` come from adaptive Gauss-Legendre panels.
Limits at ``ell-`` are decided by integrating the same quantities as an ODE
(Radau) across a geometric tail and inspecting the increments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .fields import ModelSpec, RayField
from .geometry import UnsupportedRayError
from .quadrature import Panels, QuadratureError, refine, rule

N_MAX_TERMS = 64
U_VCAP = 25.0
BODY_RADIUS = 8.0
FINITE_BODY_LEVEL = 20


class OutOfDomainError(ValueError):
    pass


class RangeError(ValueError):
    pass


class SeriesError(RuntimeError):
    pass


@dataclass(frozen=True)
class TailPolicy:
    """Thresholds of the finite/infinite test at ``ell-``."""

    blowup: float = 1e12
    cauchy_rtol: float = 1e-6
    ratio_max: float = 0.9
    ratio_count: int = 3
    r_max: float = 2.0 ** 20
    finite_levels: int = 25
    rtol: float = 1e-10


DEFAULT_POLICY = TailPolicy()


def _ray_fields(spec: ModelSpec, theta: float) -> tuple[RayField, RayField, float]:
    if theta not in spec.b:
        raise UnsupportedRayError(f"no ray with angle {theta!r} in the model")
    return spec.b[theta], spec.s[theta], spec.ell(theta)


def _coefficients(b: RayField, s: RayField, x):
    sv = np.asarray(s(x), dtype=float)
    w = 1.0 / (sv * sv)
    return 2.0 * np.asarray(b(x), dtype=float) * w, w


def _damped_cumsum(decay: np.ndarray, add: np.ndarray) -> np.ndarray:
    """``out[0] = 0`` and ``out[i+1] = decay[i] * (out[i] + add[i])``."""
    out = np.empty(decay.size + 1)
    out[0] = 0.0
    acc = 0.0
    for i in range(decay.size):
        acc = decay[i] * (acc + add[i])
        out[i + 1] = acc
    return out


def body_edges(b: RayField, s: RayField, r_end: float, ell: float, n_base: int = 32,
               rtol: float = 1e-12, max_panels: int = 20000) -> np.ndarray:
    """Adaptive panel edges on ``[0, r_end]`` resolving the integrands of p, M, K."""
    R = rule()
    base = set(np.linspace(0.0, r_end, n_base + 1))
    head = min(1.0, r_end)
    base.update(head * 2.0 ** -k for k in range(1, 7))
    if math.isfinite(ell):
        base.update(ell - ell * 2.0 ** -k for k in range(1, FINITE_BODY_LEVEL + 1) if ell * (1 - 2.0 ** -k) < r_end)
    base.update(x for x in (*b.breakpoints, *s.breakpoints) if 0.0 < x < r_end)
    base.add(r_end)

    def accept(lo, hi):
        h = 0.5 * (hi - lo)
        x = 0.5 * (lo + hi) + h * R.t
        g, w = _coefficients(b, s, x)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(w))):
            return False
        dI = h * (R.S @ g)
        if np.max(np.abs(dI)) > 20.0:
            return False
        F = np.stack([g, w, np.exp(-dI), w * np.exp(dI)])
        scale = np.max(np.abs(F), axis=1)
        return bool(np.all(R.tail(F) <= rtol * scale + 1e-300))

    return refine(sorted(base), accept, max_panels=max_panels)


class RayTable:
    """Tabulation of I, p, M, K, v (and optionally u) on panels over ``[0, r_end]``."""

    def __init__(self, b: RayField, s: RayField, r_end: float, ell: float = math.inf,
                 n_base: int = 32, u_terms: bool = False, u_tol: float = 1e-12,
                 u_vcap: float | None = None, max_panels: int = 20000):
        if not r_end > 0.0:
            raise ValueError("table needs r_end > 0")
        self.b, self.s, self.ell = b, s, ell
        self.panels = P = Panels(body_edges(b, s, r_end, ell, n_base, max_panels=max_panels))
        g, w = _coefficients(b, s, P.x)
        self.g = g
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            dI = P.local(g)
            dI_tot = P.totals(g)
            self.I_edges = np.concatenate(([0.0], np.cumsum(dI_tot)))
            Ia = self.I_edges[:-1]
            self.em = np.exp(-dI)
            ep = np.exp(dI)
            self.fM = 2.0 * w * ep
            pa_scale = np.exp(-Ia)
            Ma_scale = np.exp(Ia)
            self.p_edges = np.concatenate(([0.0], np.cumsum(pa_scale * P.totals(self.em))))
            self.M_edges = np.concatenate(([0.0], np.cumsum(Ma_scale * P.totals(self.fM))))
            decay = np.exp(-dI_tot)
            self.K_edges = _damped_cumsum(decay, P.totals(self.fM))
            self.K = self.em * (self.K_edges[:-1, None] + P.local(self.fM))
            v_nodes, self.v_edges = P.cumulative(self.K)
        self.decay = decay
        self.v_nodes = v_nodes
        self.u_edges = None
        self.u_terms_used = 0
        if u_terms:
            self._u_series(u_tol, u_vcap)

    def _u_series(self, tol: float, vcap: float | None):
        P = self.panels
        mask_nodes = np.ones(self.v_nodes.shape, bool) if vcap is None else self.v_nodes <= vcap
        mask_edges = np.ones(self.v_edges.shape, bool) if vcap is None else self.v_edges <= vcap
        prev_nodes = np.ones_like(self.v_nodes)
        u_nodes = prev_nodes.copy()
        u_edges = np.ones_like(self.v_edges)
        J_sum = np.zeros_like(self.v_nodes)
        with np.errstate(over="ignore", invalid="ignore"):
            for n in range(1, N_MAX_TERMS + 1):
                f = np.where(mask_nodes, prev_nodes, 0.0) * self.fM
                Ja = _damped_cumsum(self.decay, P.totals(f))
                J = self.em * (Ja[:-1, None] + P.local(f))
                term_nodes, term_edges = P.cumulative(J)
                u_nodes = u_nodes + term_nodes
                u_edges = u_edges + term_edges
                J_sum += J
                prev_nodes = term_nodes
                rel_n = np.where(mask_nodes, term_nodes / u_nodes, 0.0)
                rel_e = np.where(mask_edges, term_edges / u_edges, 0.0)
                if max(np.max(rel_n), np.max(rel_e)) <= tol:
                    break
            else:
                worst = float(max(np.max(np.where(mask_nodes, prev_nodes / u_nodes, 0.0)), 0.0))
                raise SeriesError(
                    f"u-series did not settle within {N_MAX_TERMS} terms "
                    f"(last relative term {worst:.3e}, tol {tol:.1e}, max v {np.max(self.v_edges):.4g})")
        self.u_terms_used = n
        self.u_edges = np.where(mask_edges, u_edges, np.nan)
        self.u_nodes = np.where(mask_nodes, u_nodes, np.nan)
        self.J_sum = J_sum
        self.u_vcap = vcap

    # -- pointwise evaluation ----------------------------------------------
    @property
    def r_end(self) -> float:
        return float(self.panels.edges[-1])

    def _where(self, r: float):
        if r < 0.0 or r > self.r_end * (1 + 1e-15):
            raise OutOfDomainError(f"radius {r!r} outside the tabulated range [0, {self.r_end!r}]")
        return self.panels.locate(r)

    def I(self, r: float) -> float:
        i, t = self._where(r)
        return float(self.I_edges[i] + self.panels.partial(i, self.g[i], t))

    def p(self, r: float) -> float:
        if r == 0.0:
            return 0.0
        i, t = self._where(r)
        return float(self.p_edges[i] + math.exp(-self.I_edges[i]) * self.panels.partial(i, self.em[i], t))

    def p_prime(self, r: float) -> float:
        return math.exp(-self.I(r))

    def M(self, r: float) -> float:
        if r == 0.0:
            return 0.0
        i, t = self._where(r)
        return float(self.M_edges[i] + math.exp(self.I_edges[i]) * self.panels.partial(i, self.fM[i], t))

    def K_at(self, r: float) -> float:
        i, t = self._where(r)
        dI = self.panels.partial(i, self.g[i], t)
        return math.exp(-dI) * (self.K_edges[i] + self.panels.partial(i, self.fM[i], t))

    def v(self, r: float) -> float:
        if r == 0.0:
            return 0.0
        i, t = self._where(r)
        return float(self.v_edges[i] + self.panels.partial(i, self.K[i], t))

    def u(self, r: float) -> float:
        if self.u_edges is None:
            raise SeriesError("table was built without the u-series")
        if r == 0.0:
            return 1.0
        i, t = self._where(r)
        if not (np.isfinite(self.u_edges[i]) and np.all(np.isfinite(self.u_nodes[i]))):
            return math.nan
        return float(self.u_edges[i] + self.panels.partial(i, self.J_sum[i], t))

    def invert_p(self, y: float) -> float:
        if y == 0.0:
            return 0.0
        j = int(np.searchsorted(self.p_edges, y, side="left"))
        if j == 0 or j >= self.p_edges.size:
            if j >= self.p_edges.size and abs(y - self.p_edges[-1]) <= 1e-15 * max(1.0, y):
                return self.r_end
            raise RangeError(f"value {y!r} outside the tabulated scale range")
        lo, hi = self.panels.edges[j - 1], self.panels.edges[j]
        if self.p_edges[j] == y:
            return float(hi)
        return brentq(lambda r: self.p(r) - y, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)


# -- tail limits ------------------------------------------------------------

IDX_I, IDX_P, IDX_K, IDX_V, IDX_M = range(5)
WATCHED = (IDX_P, IDX_V, IDX_M)


@dataclass(frozen=True)
class TailResult:
    p_limit: float
    v_limit: float
    m_limit: float
    checkpoints: tuple = field(default=(), compare=False)
    values: tuple = field(default=(), compare=False)


def tail_checkpoints(r_start: float, ell: float, policy: TailPolicy = DEFAULT_POLICY) -> np.ndarray:
    if math.isinf(ell):
        r0 = max(r_start, 1.0)
        ks = np.arange(1, int(math.floor(math.log2(policy.r_max / r0))) + 1)
        pts = r0 * 2.0 ** ks
        if pts.size < 4:
            pts = r0 * 2.0 ** np.arange(1, 5)
        return pts
    return ell - (ell - r_start) * 2.0 ** -np.arange(1, policy.finite_levels + 1)


def classify_sequence(seq: Sequence[float], policy: TailPolicy = DEFAULT_POLICY) -> float:
    """Limit of a nondecreasing checkpoint sequence, ``inf`` when it diverges."""
    F = np.asarray(seq, dtype=float)
    if F.size == 0 or not np.all(np.isfinite(F)) or np.max(np.abs(F)) > policy.blowup:
        return math.inf
    if F.size < 2:
        return float(F[-1])
    d = np.diff(F)
    last = F[-1]
    ratios = []
    for a, c in zip(d[:-1], d[1:]):
        ratios.append(0.0 if a <= 0.0 else c / a)
    rho = ratios[-1] if ratios else 0.0
    if d[-1] <= policy.cauchy_rtol * max(1.0, abs(last)):
        pass
    elif len(ratios) >= policy.ratio_count and all(0.0 <= q <= policy.ratio_max for q in ratios[-policy.ratio_count:]):
        pass
    else:
        return math.inf
    if not (0.0 <= rho < 1.0):
        rho = 0.0
    return float(last + d[-1] * rho / (1.0 - rho))


def tail_limits(b: RayField, s: RayField, r_start: float, ell: float, state: Sequence[float],
                policy: TailPolicy = DEFAULT_POLICY) -> TailResult:
    """Integrate ``[I, p, K, v, M]`` from ``r_start`` towards ``ell`` and classify limits."""
    y = np.array(state, dtype=float)
    dead = np.zeros(5, bool)
    for k in WATCHED:
        if not np.isfinite(y[k]) or abs(y[k]) > policy.blowup:
            dead[k] = True
    if dead[IDX_V]:
        dead[IDX_K] = True
    y = np.where(dead, 0.0, y)

    def rhs(r, z):
        g, w = _coefficients(b, s, r)
        g, w = float(g), float(w)
        out = np.zeros(5)
        out[IDX_I] = g
        if not dead[IDX_P]:
            out[IDX_P] = math.exp(-max(min(z[IDX_I], 700.0), -700.0))
        if not dead[IDX_K]:
            out[IDX_K] = 2.0 * w - g * z[IDX_K]
        if not dead[IDX_V]:
            out[IDX_V] = z[IDX_K]
        if not dead[IDX_M]:
            out[IDX_M] = 2.0 * w * math.exp(min(z[IDX_I], 700.0))
        return out

    def jac(r, z):
        g, w = _coefficients(b, s, r)
        J = np.zeros((5, 5))
        if not dead[IDX_P]:
            J[IDX_P, IDX_I] = -math.exp(-max(min(z[IDX_I], 700.0), -700.0))
        if not dead[IDX_K]:
            J[IDX_K, IDX_K] = -float(g)
        if not dead[IDX_V]:
            J[IDX_V, IDX_K] = 1.0
        if not dead[IDX_M]:
            J[IDX_M, IDX_I] = 2.0 * float(w) * math.exp(min(z[IDX_I], 700.0))
        return J

    checkpoints = tail_checkpoints(r_start, ell, policy)
    splits = sorted({*checkpoints, *[x for x in (*b.breakpoints, *s.breakpoints)
                                      if r_start < x < checkpoints[-1]]})
    check_set = set(checkpoints.tolist())
    atol = np.array([1e-12, 1e-14, 1e-14, 1e-14, 1e-14])
    values = []
    r0 = r_start
    for r1 in splits:
        while r0 < r1:
            events = []
            for k in WATCHED:
                if dead[k]:
                    continue
                ev = (lambda kk: (lambda r, z: z[kk] - policy.blowup))(k)
                ev.terminal, ev.direction = True, 1.0
                events.append((k, ev))
            sol = solve_ivp(rhs, (r0, r1), y, method="Radau", jac=jac, rtol=policy.rtol, atol=atol,
                            events=[e for _, e in events] or None)
            if sol.status == -1:
                raise QuadratureError(f"tail integration failed near r = {r0:.6g}: {sol.message}")
            y = sol.y[:, -1].copy()
            r0 = float(sol.t[-1])
            if sol.status == 1:
                for (k, _), hits in zip(events, sol.t_events):
                    if hits.size:
                        dead[k] = True
                        y[k] = 0.0
                if dead[IDX_V] and not dead[IDX_K]:
                    dead[IDX_K] = True
                    y[IDX_K] = 0.0
            if np.all(dead[list(WATCHED)]):
                break
        if r1 in check_set:
            values.append(np.where(dead, math.inf, y))
        if np.all(dead[list(WATCHED)]):
            break
    vals = np.array(values) if values else np.full((1, 5), math.inf)
    lim = {}
    for k in WATCHED:
        lim[k] = math.inf if dead[k] else classify_sequence(vals[:, k], policy)
    return TailResult(lim[IDX_P], lim[IDX_V], lim[IDX_M], tuple(checkpoints[:len(values)]), tuple(map(tuple, vals)))


# -- profiles ---------------------------------------------------------------

def vp_limit_of(p_limit: float, v_limit: float, m_limit: float) -> float:
    """``(v/p)(ell-)``; when ``p(ell-) = inf`` the ratio increases to ``m([0, ell))``."""
    if math.isinf(p_limit):
        return m_limit
    return v_limit / p_limit


@dataclass
class RayProfile:
    """Tabulation of one ray on panel edges plus the extended-real limits at ``ell-``.

    ``grid`` holds the panel edges ``0 = r_0 < ... < r_N`` of the body; the
    remaining arrays are values at those radii. ``u`` is NaN where the
    Feller function exceeds ``u_vcap`` (the series is not evaluated there).
    """

    theta: float
    ell: float
    grid: np.ndarray
    p: np.ndarray
    p_prime: np.ndarray
    m_cdf: np.ndarray
    v: np.ndarray
    u: np.ndarray
    p_limit: float
    v_limit: float
    m_limit: float
    vp_ratio_limit: float
    table: RayTable = field(repr=False)
    _extensions: dict = field(default_factory=dict, repr=False)

    @property
    def body_end(self) -> float:
        return float(self.grid[-1])

    def _table_for(self, r: float) -> RayTable:
        if r <= self.body_end:
            return self.table
        if r >= self.ell:
            raise OutOfDomainError(f"radius {r!r} not below ell = {self.ell!r}")
        if math.isinf(self.ell):
            R = self.body_end
            while R < r:
                R *= 2.0
        else:
            gap, R = self.ell - self.body_end, self.body_end
            k = 0
            while R < r and k < 60:
                k += 1
                R = self.ell - gap * 2.0 ** -k
            R = max(R, r)
        if R not in self._extensions:
            self._extensions[R] = RayTable(self.table.b, self.table.s, R, self.ell)
        return self._extensions[R]

    def p_at(self, r: float) -> float:
        if r >= self.ell:
            return self.p_limit
        return self._table_for(r).p(r)

    def v_at(self, r: float) -> float:
        if r >= self.ell:
            return self.v_limit
        return self._table_for(r).v(r)

    def m_at(self, r: float) -> float:
        if r >= self.ell:
            return self.m_limit
        return self._table_for(r).M(r)

    def p_prime_at(self, r: float) -> float:
        return self._table_for(r).p_prime(r)

    def q_at(self, y: float) -> float:
        """Inverse of the scale function on ``[0, p_limit)``."""
        if y == 0.0:
            return 0.0
        if not (0.0 < y < self.p_limit):
            raise RangeError(f"value {y!r} outside [0, p_limit = {self.p_limit!r})")
        if y <= self.p[-1]:
            return self.table.invert_p(y)
        if math.isinf(self.ell):
            R = self.body_end
            for _ in range(64):
                R *= 2.0
                if self._table_for(R).p(R) >= y:
                    return self._table_for(R).invert_p(y)
        else:
            gap = self.ell - self.body_end
            for k in range(1, 50):
                R = self.ell - gap * 2.0 ** -k
                if R >= self.ell:
                    break
                if self._table_for(R).p(R) >= y:
                    return self._table_for(R).invert_p(y)
        raise RangeError(f"value {y!r} is within rounding of p_limit; cannot invert")


def default_body_end(b: RayField, s: RayField, ell: float, body_radius: float = BODY_RADIUS) -> float:
    if math.isfinite(ell):
        return ell * (1.0 - 2.0 ** -FINITE_BODY_LEVEL)
    bps = [x for x in (*b.breakpoints, *s.breakpoints)]
    return min(max(body_radius, 1.25 * max(bps, default=0.0)), 1024.0)


def build_profile(spec: ModelSpec, theta: float, n_grid: int = 32, *, body_radius: float = BODY_RADIUS,
                  policy: TailPolicy = DEFAULT_POLICY, u_tol: float = 1e-12, u_vcap: float = U_VCAP,
                  max_panels: int = 20000) -> RayProfile:
    if n_grid < 16:
        raise ValueError("n_grid must be at least 16")
    b, s, ell = _ray_fields(spec, theta)
    r_b = default_body_end(b, s, ell, body_radius)
    T = RayTable(b, s, r_b, ell, n_base=n_grid, u_terms=True, u_tol=u_tol, u_vcap=u_vcap,
                 max_panels=max_panels)
    state = [T.I_edges[-1], T.p_edges[-1], T.K_edges[-1], T.v_edges[-1], T.M_edges[-1]]
    tail = tail_limits(b, s, r_b, ell, state, policy)
    with np.errstate(over="ignore"):
        p_prime = np.exp(-T.I_edges)
    return RayProfile(theta, ell, T.panels.edges.copy(), T.p_edges.copy(), p_prime, T.M_edges.copy(),
                      T.v_edges.copy(), T.u_edges.copy(), tail.p_limit, tail.v_limit, tail.m_limit,
                      vp_limit_of(tail.p_limit, tail.v_limit, tail.m_limit), T)


def build_profiles(spec: ModelSpec, thetas=None, n_grid: int = 32, **kw) -> dict[float, RayProfile]:
    thetas = spec.thetas if thetas is None else thetas
    return {t: build_profile(spec, t, n_grid, **kw) for t in thetas}


# -- pointwise operations ----------------------------------------------------

def _check_radius(r: float, ell: float):
    if not (0.0 <= r < ell):
        raise OutOfDomainError(f"radius {r!r} outside [0, ell = {ell!r})")


def scale_function(spec: ModelSpec, theta: float, r: float) -> float:
    b, s, ell = _ray_fields(spec, theta)
    _check_radius(r, ell)
    if r == 0.0:
        return 0.0
    return float(RayTable(b, s, r, ell).p_edges[-1])


def scale_inverse(spec: ModelSpec, theta: float, y: float) -> float:
    prof = build_profile(spec, theta)
    if not (0.0 <= y < prof.p_limit):
        raise RangeError(f"value {y!r} outside [0, p_limit = {prof.p_limit!r})")
    return prof.q_at(y)


def speed_cdf(spec: ModelSpec, theta: float, a: float, r: float) -> float:
    b, s, ell = _ray_fields(spec, theta)
    _check_radius(r, ell)
    if not 0.0 <= a <= r:
        raise OutOfDomainError(f"need 0 <= a <= r, got a = {a!r}, r = {r!r}")
    if a == r:
        return 0.0
    T = RayTable(b, s, r, ell)
    return float(T.M_edges[-1] - (T.M(a) if a > 0.0 else 0.0))


def feller_v(spec: ModelSpec, theta: float, r: float) -> float:
    b, s, ell = _ray_fields(spec, theta)
    _check_radius(r, ell)
    if r == 0.0:
        return 0.0
    return float(RayTable(b, s, r, ell).v_edges[-1])


def feller_u(spec: ModelSpec, theta: float, r: float, tol: float = 1e-10) -> float:
    b, s, ell = _ray_fields(spec, theta)
    _check_radius(r, ell)
    if r == 0.0:
        return 1.0
    return float(RayTable(b, s, r, ell, u_terms=True, u_tol=tol).u_edges[-1])
