"""Monte Carlo paths of Walsh diffusions with discrete Skorokhod reflection.

Scheme ``euler-reflect``: an Euler step of the driver ``U`` with the current
ray's coefficients, followed by the discrete Skorokhod map
``Lam_k = max_{j<=k} (-U_j)^+`` and ``R_k = U_k + Lam_k``. Whenever ``R``
is exactly 0 a fresh ray is drawn for the next step, with weights
``nu(theta) / |s_theta(0+)|``.

Scheme ``euler-bridge``: the same Euler driver, but the minimum of the
Brownian bridge over each step is sampled. A step whose bridge touches 0 adds
the overshoot to ``Lam``, draws a new ray and carries the rest of the move
onto it; a bridge crossing of ``ell`` ends the path inside the step. This
removes the O(sqrt(h)) loss of quadratic variation at the origin that the
projected chain has.

Scheme ``time-change`` (driftless models only): a unit-dispersion Walsh
Brownian motion ``Z`` is run in its own clock and the model clock advances by
``h / s(Z)**2`` per step, so that ``X(t) = Z(A(t))``.

Random numbers: each path owns a counter-based Philox stream keyed by
``(seed, path index)``; normals and uniforms are drawn in fixed-size blocks, so
a path is reproducible regardless of worker count or scheduling order.
"""
from __future__ import annotations

import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numba import njit

from .fields import ModelSpec, RayField
from .geometry import RayPoint, UnsupportedRayError

log = logging.getLogger(__name__)

EULER, TIME_CHANGE, BRIDGE = "euler-reflect", "time-change", "euler-bridge"
SCHEMES = {EULER: 0, TIME_CHANGE: 1, BRIDGE: 2}
RUNNING, EXPLODED, OVERFLOW, HORIZON, STOPPED = 0, 1, 2, 3, 4
STATUS_NAMES = {EXPLODED: "exploded", OVERFLOW: "overflow", HORIZON: "horizon", STOPPED: "stopped"}
NEED_Z, NEED_U = 1, 2
CENSOR_RADIUS = 1e9
R_FLOOR = 1e-12
Z_BLOCK = 4096
U_BLOCK = 1024


class ConfigError(ValueError):
    pass


class ResolutionWarning(UserWarning):
    pass


class DegenerateLawWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SimConfig:
    step: float
    horizon: float
    paths: int = 1
    seed: int = 0
    scheme: str = EULER
    threads: int | None = None

    def __post_init__(self):
        if not self.step > 0.0:
            raise ConfigError("step must be positive")
        if not self.horizon >= self.step:
            raise ConfigError("horizon must be at least one step")
        if self.paths < 1:
            raise ConfigError("paths must be at least 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; choose from {sorted(SCHEMES)}")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.step))


def path_generator(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=(int(seed) << 64) | int(stream)))


# -- compiled model --------------------------------------------------------------

def _pack(fields: Sequence[RayField]):
    off, cnt, st, ic, sl = [], [], [], [], []
    for f in fields:
        off.append(len(st))
        cnt.append(len(f.starts))
        st.extend(f.starts)
        ic.extend(f.intercepts)
        sl.extend(f.slopes)
    return (np.array(off, np.int64), np.array(cnt, np.int64), np.array(st, float),
            np.array(ic, float), np.array(sl, float))


@dataclass
class StopRule:
    """Closed radial intervals per ray where the path is stopped, plus the origin flag."""

    intervals: Mapping[float, Sequence[tuple[float, float]]] = field(default_factory=dict)
    origin: bool = False

    @classmethod
    def from_solution(cls, sol) -> "StopRule":
        return cls({t: list(iv) for t, iv in sol.stop_region.items()}, bool(sol.origin_in_region))

    @classmethod
    def thresholds(cls, levels: Mapping[float, float]) -> "StopRule":
        return cls({t: [(a, 1.0)] for t, a in levels.items()}, False)


class CompiledModel:
    def __init__(self, spec: ModelSpec, stop: StopRule | None = None, plain_weights: bool = False):
        self.spec = spec
        self.thetas = spec.thetas
        self.index = {t: k for k, t in enumerate(self.thetas)}
        self.ell = np.array([spec.ell(t) for t in self.thetas])
        # zero-step draws use nu(dtheta)/|s_theta(0+)|: a draw on ray theta pushes the path out by
        # about |s_theta(0+)| sqrt(h) z^+ while Lam grows by the same scale, so this weighting makes
        # the local-time partition converge to nu rather than to nu * s(0+)
        s0 = np.array([abs(float(spec.s[t](np.array([R_FLOOR]))[0])) for t in self.thetas])
        w = np.array([spec.nu.weight(t) for t in self.thetas])
        self.s0 = np.where(s0 > 0.0, s0, 1.0)
        if not plain_weights:
            w = np.where(w > 0.0, w / np.where(s0 > 0.0, s0, 1.0), 0.0)
        self.draw_weights = w / w.sum()
        self.cumw = np.cumsum(self.draw_weights)
        self.cumw[-1] = max(self.cumw[-1], 1.0)
        self.b = _pack([spec.b[t] for t in self.thetas])
        self.s = _pack([spec.s[t] for t in self.thetas])
        self.driftless = all(spec.b[t].is_zero() for t in self.thetas)
        off, cnt, lo, hi = [], [], [], []
        stop = stop or StopRule()
        for t in self.thetas:
            ivs = sorted(stop.intervals.get(t, ()))
            off.append(len(lo))
            cnt.append(len(ivs))
            for a, c in ivs:
                lo.append(a)
                hi.append(c)
        self.stop = (np.array(off, np.int64), np.array(cnt, np.int64), np.array(lo, float), np.array(hi, float))
        self.origin_stop = bool(stop.origin)
        for t in stop.intervals:
            if t not in self.index:
                raise UnsupportedRayError(f"stop rule names unknown ray {t!r}")

    def ray_index(self, theta: float) -> int:
        try:
            return self.index[theta]
        except KeyError:
            raise UnsupportedRayError(f"no ray with angle {theta!r} in the model") from None

    def max_s2(self) -> float:
        _, _, _, ic, sl = self.s
        vals = []
        for t in self.thetas:
            f = self.spec.s[t]
            ell = self.spec.ell(t)
            top = ell if math.isfinite(ell) else max((*f.starts, 1.0)) * 2
            vals.append(float(np.max(np.abs(f(np.linspace(0.0, top, 1025))))))
        return max(vals) ** 2


@njit(cache=True, nogil=True)
def _seg(off, cnt, st, ic, sl, k, r):
    lo = off[k]
    hi = off[k] + cnt[k] - 1
    if hi > lo and r >= st[lo + 1]:
        # binary search for the last start <= r
        a, c = lo + 1, hi
        while a < c:
            m = (a + c + 1) // 2
            if st[m] <= r:
                a = m
            else:
                c = m - 1
        lo = a
    return ic[lo] + sl[lo] * (r - st[lo])


@njit(cache=True, nogil=True)
def _contact(stoff, stcnt, stlo, sthi, k, r_from, r_to):
    """First point of the stop set met when moving from r_from to r_to on ray k, or -1."""
    best = -1.0
    for j in range(stoff[k], stoff[k] + stcnt[k]):
        lo, hi = stlo[j], sthi[j]
        if r_to >= r_from:
            if hi >= r_from and lo <= r_to:
                x = max(lo, r_from)
                if best < 0.0 or x < best:
                    best = x
        else:
            if lo <= r_from and hi >= r_to:
                x = min(hi, r_from)
                if best < 0.0 or x > best:
                    best = x
    return best


@njit(cache=True, nogil=True)
def _draw(u, cumw):
    K = cumw.shape[0]
    x = u * cumw[K - 1]
    j = 0
    while j < K - 1 and cumw[j] <= x:
        j += 1
    return j


@njit(cache=True, nogil=True)
def _advance(fs, ist, z, u, ell, cumw, s0,
             boff, bcnt, bst, bic, bsl, soff, scnt, sst, sic, ssl,
             stoff, stcnt, stlo, sthi, origin_stop,
             h, n_max, horizon, eps, censor, scheme, record,
             rec_t, rec_r, rec_ray, rec_du, rec_lam, rec_qv, occ):
    # fs: R, U, Lam, t ; ist: k, ray, status, zi, ui, need
    R, U, Lam, t = fs[0], fs[1], fs[2], fs[3]
    k, ray, status, zi, ui = ist[0], ist[1], ist[2], ist[3], ist[4]
    sqh = math.sqrt(h)
    nz, nu_ = z.shape[0], u.shape[0]
    need = 0
    while status == 0:
        if zi >= nz:
            need = 1
            break
        if ui + 3 > nu_ and (R == 0.0 or scheme == 2):
            need = 2
            break
        if R == 0.0:
            ray = _draw(u[ui], cumw)
            ui += 1
        r_eval = R if R > 1e-12 else 1e-12
        sv = _seg(soff, scnt, sst, sic, ssl, ray, r_eval)
        if scheme == 1:
            dU = sqh * z[zi]
            qv = h
            dt = h / (sv * sv) if sv != 0.0 else math.inf
        else:
            bv = _seg(boff, bcnt, bst, bic, bsl, ray, r_eval)
            dU = bv * h + sv * sqh * z[zi]
            qv = sv * sv * h
            dt = h
        zi += 1
        if R < eps:
            occ[ray] += qv
        if record:
            rec_ray[k] = ray
            rec_qv[k] = qv
        R_old = R
        Lam_old = Lam
        ray_old = ray
        bridge_exit = False
        if scheme == 2:
            # minimum of the Brownian bridge over the step
            m = 0.5 * (dU - math.sqrt(dU * dU - 2.0 * qv * math.log(u[ui])))
            ui += 1
            if R + m <= 0.0:
                Lam += -(R + m)
                ray = _draw(u[ui], cumw)
                ui += 1
                post = (dU - m) * (s0[ray] / s0[ray_old])
                dU = m + post
                U += dU
                R = post
            else:
                U += dU
                R = R + dU
                if R < ell[ray] and ell[ray] < math.inf:
                    gap = (ell[ray] - R_old) * (ell[ray] - R)
                    if gap < 40.0 * qv:
                        if u[ui] < math.exp(-2.0 * gap / qv):
                            bridge_exit = True
                        ui += 1
        else:
            U += dU
            if -U > Lam:
                Lam = -U
            R = U + Lam
        if record:
            rec_du[k] = dU
        k += 1
        t += dt
        if record:
            rec_t[k] = t
            rec_r[k] = R
            rec_lam[k] = Lam
            rec_ray[k] = ray
        # stopping: first contact along the move, including a pass through the origin
        if stcnt[ray] > 0 or origin_stop:
            if ray == ray_old:
                x = _contact(stoff, stcnt, stlo, sthi, ray, R_old, R)
            else:
                x = _contact(stoff, stcnt, stlo, sthi, ray_old, R_old, 0.0)
            if x >= 0.0 and x < ell[ray_old]:
                R = x
                ray = ray_old
                status = 4
                if record:
                    rec_r[k] = R
                    rec_ray[k] = ray
                break
            if origin_stop and (R == 0.0 or ray != ray_old or Lam > Lam_old):
                R = 0.0
                status = 4
                if record:
                    rec_r[k] = R
                break
            if ray != ray_old:
                x = _contact(stoff, stcnt, stlo, sthi, ray, 0.0, R)
                if x >= 0.0 and x < ell[ray]:
                    R = x
                    status = 4
                    if record:
                        rec_r[k] = R
                    break
        if R >= ell[ray] or bridge_exit:
            if bridge_exit:
                # the crossing happened inside the step: end the path on the boundary
                U += ell[ray] - R
                if record:
                    rec_du[k - 1] += ell[ray] - R
                    rec_r[k] = ell[ray]
                R = ell[ray]
            status = 1
            break
        if R > censor:
            status = 2
            break
        if scheme == 1:
            if t >= horizon or k >= n_max:
                status = 3
                break
        elif k >= n_max:
            status = 3
            break
    fs[0], fs[1], fs[2], fs[3] = R, U, Lam, t
    ist[0], ist[1], ist[2], ist[3], ist[4], ist[5] = k, ray, status, zi, ui, need


@dataclass
class _Outcome:
    status: int
    r: float
    ray: int
    time: float
    local_time: float
    steps: int
    occ: np.ndarray


class _Runner:
    def __init__(self, spec: ModelSpec, cfg: SimConfig, stop: StopRule | None = None):
        floor = spec.domain.floor
        if cfg.step > floor ** 2 / 16.0:
            raise ConfigError(f"step {cfg.step!r} too large for the domain floor {floor!r} (need h <= floor^2/16)")
        self.scheme = SCHEMES[cfg.scheme]
        self.model = m = CompiledModel(spec, stop, plain_weights=self.scheme == 1)
        self.cfg = cfg
        if self.scheme == 1 and not m.driftless:
            raise ConfigError("the time-change scheme needs a driftless model (use remove_drift first)")
        if self.scheme != 1:
            self.n_max = cfg.n_steps
        else:
            self.n_max = int(math.ceil(2.0 * cfg.horizon / cfg.step * max(m.max_s2(), 1.0))) + 1000

    def start_state(self, start: RayPoint):
        m = self.model
        if start.is_origin:
            ray = 0
        else:
            ray = m.ray_index(start.theta)
            if not start.r < m.ell[ray]:
                raise ConfigError(f"start {start} lies outside the domain")
        fs = np.array([start.r, start.r, 0.0, 0.0])
        ist = np.zeros(6, np.int64)
        ist[1] = ray
        status = RUNNING
        if start.is_origin and m.origin_stop:
            status = STOPPED
        elif not start.is_origin:
            off, cnt, lo, hi = m.stop
            for j in range(off[ray], off[ray] + cnt[ray]):
                if lo[j] <= start.r <= hi[j]:
                    status = STOPPED
        ist[2] = status
        return fs, ist

    def run(self, start: RayPoint, stream: int, eps: float = -1.0, record: bool = False):
        m, cfg = self.model, self.cfg
        gen = path_generator(cfg.seed, stream)
        z = np.empty(Z_BLOCK)
        u = np.empty(U_BLOCK)
        fs, ist = self.start_state(start)
        gen.standard_normal(out=z)
        gen.random(out=u)
        K = len(m.thetas)
        occ = np.zeros(K)
        n_rec = self.n_max + 1 if record else 1
        rec = [np.zeros(n_rec), np.zeros(n_rec), np.zeros(n_rec, np.int64), np.zeros(n_rec), np.zeros(n_rec),
               np.zeros(n_rec), occ]
        if record:
            rec[1][0] = start.r
            rec[2][0] = ist[1]
        while ist[2] == RUNNING:
            if ist[5] == NEED_Z:
                gen.standard_normal(out=z)
                ist[3] = 0
            elif ist[5] == NEED_U:
                gen.random(out=u)
                ist[4] = 0
            _advance(fs, ist, z, u, m.ell, m.cumw, m.s0, *m.b, *m.s, *m.stop, m.origin_stop,
                     cfg.step, self.n_max, cfg.horizon, eps, CENSOR_RADIUS, self.scheme, record, *rec)
        out = _Outcome(int(ist[2]), float(fs[0]), int(ist[1]), float(fs[3]), float(fs[2]), int(ist[0]), occ)
        return out, rec

    def record(self, start: RayPoint, stream: int) -> "PathRecord":
        out, rec = self.run(start, stream, record=True)
        n = out.steps
        t, r, ray, du, lam, qv, _ = rec
        thetas = np.array(self.model.thetas)
        exploded = out.time if out.status == EXPLODED else None
        exit_point = RayPoint.make(self.model.ell[out.ray], self.model.thetas[out.ray]) if out.status == EXPLODED else None
        return PathRecord(t[:n + 1].copy(), r[:n + 1].copy(), thetas[ray[:n + 1]], du[:n].copy(), lam[:n + 1].copy(),
                          qv[:n].copy(), exploded, exit_point, STATUS_NAMES.get(out.status, "running"),
                          out.status == OVERFLOW, self.model.thetas)


@dataclass
class PathRecord:
    """A simulated trajectory on the step grid.

    ``theta[k]`` is the ray in use during step ``k`` (at a zero of ``radial``
    this is the ray drawn for the next excursion). ``qv_increments[k]`` is
    ``s^2 h`` for that step, the increment of the quadratic variation.
    """

    times: np.ndarray
    radial: np.ndarray
    theta: np.ndarray
    driver_increments: np.ndarray
    local_time: np.ndarray
    qv_increments: np.ndarray
    exploded_at: float | None
    exit_point: RayPoint | None
    status: str
    overflow: bool
    rays: tuple = ()

    def driver(self) -> np.ndarray:
        """Partial sums of the driver, started at the initial radius."""
        return self.radial[0] + np.concatenate(([0.0], np.cumsum(self.driver_increments)))

    def to_rows(self, path_id: int | None = None) -> list[list]:
        rows = []
        for k in range(self.times.size):
            row = [self.times[k], self.radial[k], self.theta[k], self.local_time[k]]
            rows.append(row if path_id is None else [path_id] + row)
        return rows


def _check_start_ray(spec: ModelSpec, start: RayPoint):
    if not start.is_origin and start.theta not in spec.b:
        raise UnsupportedRayError(f"no ray with angle {start.theta!r} in the model")


def simulate_path(spec: ModelSpec, start: RayPoint, cfg: SimConfig, stream: int = 0,
                  stop: StopRule | None = None) -> PathRecord:
    _check_start_ray(spec, start)
    return _Runner(spec, cfg, stop).record(start, stream)


def _workers(cfg: SimConfig) -> int:
    n = cfg.threads or os.cpu_count() or 1
    return max(1, min(n, cfg.paths))


def _map_paths(fn: Callable[[int], object], cfg: SimConfig) -> list:
    n = _workers(cfg)
    if n == 1:
        return [fn(i) for i in range(cfg.paths)]
    chunks = np.array_split(np.arange(cfg.paths), n)
    with ThreadPoolExecutor(max_workers=n) as pool:
        parts = list(pool.map(lambda idx: [fn(int(i)) for i in idx], chunks))
    return [x for part in parts for x in part]


@dataclass
class PathSummaries:
    """Per-path end states of a Monte Carlo run."""

    rays: tuple
    status: np.ndarray
    final_r: np.ndarray
    final_ray: np.ndarray
    time: np.ndarray
    local_time: np.ndarray
    occupation: np.ndarray

    @property
    def exploded(self) -> np.ndarray:
        return self.status == EXPLODED

    @property
    def overflow(self) -> np.ndarray:
        return self.status == OVERFLOW


def run_paths(spec: ModelSpec, start: RayPoint, cfg: SimConfig, eps: float = -1.0,
              stop: StopRule | None = None) -> PathSummaries:
    _check_start_ray(spec, start)
    runner = _Runner(spec, cfg, stop)
    outs = _map_paths(lambda i: runner.run(start, i, eps)[0], cfg)
    return PathSummaries(runner.model.thetas,
                         np.array([o.status for o in outs]), np.array([o.r for o in outs]),
                         np.array([o.ray for o in outs]), np.array([o.time for o in outs]),
                         np.array([o.local_time for o in outs]), np.array([o.occ for o in outs]))


# -- estimators -------------------------------------------------------------------

def binomial_interval(k: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    """Wilson score interval."""
    if n == 0:
        return 0.0, 1.0
    p = k / n
    den = 1.0 + z * z / n
    mid = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    lo = 0.0 if k == 0 else max(0.0, mid - half)
    hi = 1.0 if k == n else min(1.0, mid + half)
    return lo, hi


@dataclass
class EmpiricalExitLaw:
    paths: int
    exploded: int
    overflow: int
    atoms: tuple[tuple[float, float, float, float], ...]
    explosion_frequency: float
    explosion_interval: tuple[float, float]
    mean_explosion_time: float
    explosion_time_se: float

    def prob(self, theta: float) -> float:
        for t, q, _, _ in self.atoms:
            if t == theta:
                return q
        return 0.0

    def to_json(self) -> dict:
        return {"paths": self.paths, "exploded": self.exploded, "overflow": self.overflow,
                "atoms": [{"theta": t, "frequency": q, "ci95": [lo, hi]} for t, q, lo, hi in self.atoms],
                "explosion_frequency": self.explosion_frequency, "explosion_ci95": list(self.explosion_interval),
                "mean_explosion_time": self.mean_explosion_time, "explosion_time_se": self.explosion_time_se}


def exit_law_from(summ: PathSummaries) -> EmpiricalExitLaw:
    n = summ.status.size
    ex = summ.exploded
    n_ex = int(ex.sum())
    if n_ex == 0:
        warnings.warn("no path exploded; the empirical exit law is degenerate", DegenerateLawWarning, stacklevel=2)
    atoms = []
    for k, t in enumerate(summ.rays):
        c = int(np.sum(ex & (summ.final_ray == k)))
        lo, hi = binomial_interval(c, n_ex)
        atoms.append((t, c / n_ex if n_ex else 0.0, lo, hi))
    times = summ.time[ex]
    mean = float(times.mean()) if n_ex else math.nan
    se = float(times.std(ddof=1) / math.sqrt(n_ex)) if n_ex > 1 else math.nan
    return EmpiricalExitLaw(n, n_ex, int(summ.overflow.sum()), tuple(atoms), n_ex / n,
                            binomial_interval(n_ex, n), mean, se)


def mc_exit_law(spec: ModelSpec, start: RayPoint, cfg: SimConfig) -> EmpiricalExitLaw:
    return exit_law_from(run_paths(spec, start, cfg))


def _resolution_check(eps: float, h: float):
    if eps < 2.0 * math.sqrt(h):
        warnings.warn(f"eps = {eps:.3g} is below the resolution 2 sqrt(h) = {2 * math.sqrt(h):.3g}",
                      ResolutionWarning, stacklevel=3)


def occupation_local_time(path: PathRecord, A: Iterable[float], eps: float) -> float:
    """``(1/2 eps) sum_k 1{R_k < eps, theta_k in A} s^2 h`` over the recorded steps."""
    if path.qv_increments.size:
        _resolution_check(eps, float(np.median(np.diff(path.times))))
    A = set(A)
    if not A:
        return 0.0
    n = path.driver_increments.size
    mask = (path.radial[:n] < eps) & np.isin(path.theta[:n], list(A))
    return float(np.sum(path.qv_increments[mask]) / (2.0 * eps))


@dataclass
class LocalTimeStats:
    eps: float
    reflection: float
    reflection_se: float
    occupation: dict[float, float]
    occupation_total: float

    def share(self, A: Iterable[float]) -> float:
        return sum(self.occupation[t] for t in set(A)) / self.occupation_total


def mc_local_time(spec: ModelSpec, start: RayPoint, cfg: SimConfig, eps: float) -> LocalTimeStats:
    _resolution_check(eps, cfg.step)
    summ = run_paths(spec, start, cfg, eps)
    occ = summ.occupation.mean(axis=0) / (2.0 * eps)
    lam = summ.local_time
    return LocalTimeStats(eps, float(lam.mean()), float(lam.std(ddof=1) / math.sqrt(lam.size)) if lam.size > 1 else math.nan,
                          {t: float(occ[k]) for k, t in enumerate(summ.rays)}, float(occ.sum()))


# -- change-of-variable residual ------------------------------------------------------

@dataclass
class TestFunction:
    """``g(r, theta)`` with radial derivatives; ``slope0[theta] = g'_theta(0+)``.

    The callables take arrays ``r`` and ``theta`` of equal shape.
    """

    g: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dg: Callable[[np.ndarray, np.ndarray], np.ndarray]
    d2g: Callable[[np.ndarray, np.ndarray], np.ndarray]
    slope0: Mapping[float, float]
    name: str = "g"

    __test__ = False

    @classmethod
    def radius(cls, rays) -> "TestFunction":
        return cls(lambda r, t: r, lambda r, t: np.ones_like(r), lambda r, t: np.zeros_like(r),
                   {t: 1.0 for t in rays}, "r")

    @classmethod
    def power(cls, n: int, rays) -> "TestFunction":
        return cls(lambda r, t: r ** n, lambda r, t: n * r ** (n - 1), lambda r, t: n * (n - 1) * r ** (n - 2),
                   {t: (1.0 if n == 1 else 0.0) for t in rays}, f"r^{n}")

    @classmethod
    def ray_indicator(cls, A, rays) -> "TestFunction":
        A = np.array(sorted(set(A)))
        ind = lambda t: np.isin(t, A).astype(float)
        return cls(lambda r, t: r * ind(t), lambda r, t: ind(t), lambda r, t: np.zeros_like(r),
                   {t: float(t in set(A.tolist())) for t in rays}, "r*1_A")

    @classmethod
    def scale(cls, profiles: Mapping, n: int = 4097) -> "TestFunction":
        """The radial scale function, from dense tables of the exponent."""
        tables = {}
        for t, prof in profiles.items():
            top = prof.body_end
            rr = np.linspace(0.0, top, n)
            tab = prof.table
            I = np.array([tab.I(x) for x in rr])
            p = np.array([tab.p(x) for x in rr])
            b, s = tab.b, tab.s
            tables[t] = (rr, I, p, b, s)

        def pick(r, t, which):
            out = np.empty_like(r, dtype=float)
            for key, (rr, I, p, b, s) in tables.items():
                m = t == key
                if not np.any(m):
                    continue
                x = r[m]
                pp = np.exp(-np.interp(x, rr, I))
                if which == 0:
                    out[m] = np.interp(x, rr, p)
                elif which == 1:
                    out[m] = pp
                else:
                    xs = np.maximum(x, R_FLOOR)
                    out[m] = -2.0 * b(xs) / s(xs) ** 2 * pp
            return out

        return cls(lambda r, t: pick(r, t, 0), lambda r, t: pick(r, t, 1), lambda r, t: pick(r, t, 2),
                   {t: 1.0 for t in profiles}, "p")


def fs_residual(path: PathRecord, g: TestFunction, nu) -> np.ndarray:
    """``g(X) - g(X0) - sum(g' dU + g''/2 d<U>) - (int g'(0+) dnu) Lam`` along the path.

    Steps that start at the origin use the one-sided derivatives of the ray
    drawn for that step.
    """
    missing = [t for t in set(np.unique(path.theta).tolist()) | set(nu.thetas) if t not in g.slope0]
    if missing:
        raise UnsupportedRayError(f"test function is missing ray(s) {sorted(missing)}")
    n = path.driver_increments.size
    r, th = path.radial, path.theta
    vals = g.g(r, th)
    vals = np.where(r == 0.0, g.g(np.zeros(1), np.array([th[0]]))[0] if r.size else 0.0, vals)
    rk, tk = r[:n], th[:n]
    integrand = g.dg(rk, tk) * path.driver_increments + 0.5 * g.d2g(rk, tk) * path.qv_increments
    drift = np.concatenate(([0.0], np.cumsum(integrand)))
    coeff = math.fsum(w * g.slope0[t] for t, w in nu.atoms)
    return vals - vals[0] - drift - coeff * path.local_time


@dataclass
class ResidualStats:
    name: str
    mean: float
    se: float
    paths: int

    @property
    def z(self) -> float:
        return self.mean / self.se if self.se > 0 else (0.0 if self.mean == 0 else math.inf)


def mc_fs_residuals(spec: ModelSpec, start: RayPoint, cfg: SimConfig,
                    tests: Sequence[TestFunction]) -> list[ResidualStats]:
    """Terminal residual of each test function over ``cfg.paths`` recorded paths."""
    _check_start_ray(spec, start)
    runner = _Runner(spec, cfg)

    def one(i):
        rec = runner.record(start, i)
        return [fs_residual(rec, g, spec.nu)[-1] for g in tests]

    vals = np.array(_map_paths(one, cfg)).reshape(cfg.paths, len(tests))
    out = []
    for j, g in enumerate(tests):
        v = vals[:, j]
        se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan
        out.append(ResidualStats(g.name, float(v.mean()), se, v.size))
    return out


# -- stopping values ------------------------------------------------------------------

@dataclass
class StoppingEstimate:
    mean: float
    se: float
    values: np.ndarray = field(repr=False)


def stopped_values(summ: PathSummaries, reward) -> np.ndarray:
    out = np.empty(summ.status.size)
    for i in range(out.size):
        r = summ.final_r[i]
        theta = summ.rays[summ.final_ray[i]]
        x = RayPoint.make(min(r, 1.0), theta) if r > 0.0 else RayPoint.make(0.0)
        out[i] = reward.value(x)
    return out


def mc_stopping_value(spec: ModelSpec, start: RayPoint, cfg: SimConfig, stop: StopRule, reward) -> StoppingEstimate:
    summ = run_paths(spec, start, cfg, stop=stop)
    v = stopped_values(summ, reward)
    return StoppingEstimate(float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan, v)
