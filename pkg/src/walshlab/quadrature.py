"""Composite Gauss-Legendre panels with cumulative (nested) integration.

Each panel carries ``n`` Gauss-Legendre nodes. Besides the usual weights we
keep the spectral integration matrix ``S`` with
``S @ f(nodes) ~ [int_{-1}^{t_j} f]_j``, so that running integrals are
available at every node and nested integrals cost one matrix product per
level instead of a re-integration.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
from numpy.polynomial import legendre as L

DEFAULT_ORDER = 16


class QuadratureError(RuntimeError):
    pass


def _legendre_table(t: np.ndarray, n: int) -> np.ndarray:
    """Values P_0..P_n at points ``t``, shape (len(t), n + 1)."""
    t = np.asarray(t, dtype=float)
    out = np.empty((t.size, n + 1))
    out[:, 0] = 1.0
    if n >= 1:
        out[:, 1] = t
    for k in range(1, n):
        out[:, k + 1] = ((2 * k + 1) * t * out[:, k] - k * out[:, k - 1]) / (k + 1)
    return out


def _antiderivative_table(t: np.ndarray, n: int) -> np.ndarray:
    """Values of ``int_{-1}^t P_k`` for k < n, shape (len(t), n)."""
    P = _legendre_table(t, n)
    Q = np.empty((P.shape[0], n))
    Q[:, 0] = np.asarray(t) + 1.0
    for k in range(1, n):
        Q[:, k] = (P[:, k + 1] - P[:, k - 1]) / (2 * k + 1)
    return Q


class LegendreRule:
    def __init__(self, n: int = DEFAULT_ORDER):
        self.n = n
        self.t, self.w = L.leggauss(n)
        V = _legendre_table(self.t, n - 1)
        # discrete Legendre transform on the Gauss nodes
        self.to_coef = np.linalg.solve(V, np.eye(n))
        self.S = _antiderivative_table(self.t, n) @ self.to_coef

    def coefficients(self, f: np.ndarray) -> np.ndarray:
        return f @ self.to_coef.T

    def tail(self, f: np.ndarray) -> np.ndarray:
        """Magnitude of the two highest Legendre coefficients along the last axis."""
        c = self.coefficients(f)
        return np.maximum(np.abs(c[..., -1]), np.abs(c[..., -2]))

    def partial(self, f: np.ndarray, t: np.ndarray) -> np.ndarray:
        """``int_{-1}^{t} f`` using the interpolant of the node values ``f`` (per row)."""
        c = self.coefficients(f)
        Q = _antiderivative_table(np.atleast_1d(t), self.n)
        return np.einsum("...k,...k->...", c, Q)


_RULES: dict[int, LegendreRule] = {}


def rule(n: int = DEFAULT_ORDER) -> LegendreRule:
    if n not in _RULES:
        _RULES[n] = LegendreRule(n)
    return _RULES[n]


@dataclass
class Panels:
    """Panels ``[edges[i], edges[i+1]]`` with their Gauss nodes."""

    edges: np.ndarray
    order: int = DEFAULT_ORDER

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float)
        if self.edges.ndim != 1 or self.edges.size < 2 or np.any(np.diff(self.edges) <= 0):
            raise QuadratureError("panel edges must be strictly increasing")
        self.rule = rule(self.order)
        self.half = 0.5 * np.diff(self.edges)
        self.mid = 0.5 * (self.edges[:-1] + self.edges[1:])
        self.x = self.mid[:, None] + self.half[:, None] * self.rule.t[None, :]

    @property
    def count(self) -> int:
        return self.half.size

    def totals(self, f: np.ndarray) -> np.ndarray:
        return self.half * (f @ self.rule.w)

    def local(self, f: np.ndarray) -> np.ndarray:
        """Running integral from each panel's left edge to its nodes."""
        return self.half[:, None] * (f @ self.rule.S.T)

    def cumulative(self, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Running integral from the first edge: (values at nodes, values at edges)."""
        at_edges = np.concatenate(([0.0], np.cumsum(self.totals(f))))
        return at_edges[:-1, None] + self.local(f), at_edges

    def locate(self, r: float) -> tuple[int, float]:
        """Panel index and local coordinate in [-1, 1] of the radius ``r``."""
        i = int(np.searchsorted(self.edges, r, side="right")) - 1
        i = min(max(i, 0), self.count - 1)
        t = (r - self.mid[i]) / self.half[i]
        return i, float(np.clip(t, -1.0, 1.0))

    def partial(self, i: int, f_panel: np.ndarray, t: float) -> float:
        """Integral over ``[edges[i], x(t)]`` of the interpolant through ``f_panel``."""
        return float(self.half[i] * self.rule.partial(f_panel, np.array([t]))[0])


def integrate(f: Callable[[np.ndarray], np.ndarray], a: float, b: float,
              tol: float = 1e-10, breaks: Iterable[float] = (), max_panels: int = 20000) -> float:
    """Adaptive composite Gauss-Legendre integral of a vectorized ``f`` over ``[a, b]``.

    A panel is accepted when halving it changes its contribution by at most ``tol``.
    """
    R = rule()
    pts = sorted({a, b, *[x for x in breaks if a < x < b]})
    stack = list(zip(pts[:-1], pts[1:]))
    total, used = 0.0, 0

    def one(lo, hi):
        h = 0.5 * (hi - lo)
        return h * float(np.dot(R.w, f(0.5 * (lo + hi) + h * R.t)))

    while stack:
        lo, hi = stack.pop()
        mid = 0.5 * (lo + hi)
        whole = one(lo, hi)
        halves = one(lo, mid) + one(mid, hi)
        used += 1
        if abs(whole - halves) <= tol or hi - lo <= 1e-14 * max(1.0, abs(hi)):
            total += halves
        elif used > max_panels:
            raise QuadratureError(f"integral on [{a}, {b}] did not settle within {max_panels} panels")
        else:
            stack.append((lo, mid))
            stack.append((mid, hi))
    return total


def refine(edges: Iterable[float], accept: Callable[[float, float], bool],
           max_panels: int = 20000, min_width: float = 1e-15) -> np.ndarray:
    """Split panels in half until ``accept(lo, hi)`` holds for each of them."""
    edges = sorted(set(float(e) for e in edges))
    work = list(zip(edges[:-1], edges[1:]))[::-1]
    done = []
    while work:
        lo, hi = work.pop()
        if hi - lo <= min_width * max(1.0, abs(hi)) or accept(lo, hi):
            done.append(lo)
            if len(done) > max_panels:
                raise QuadratureError(f"panel budget of {max_panels} exhausted near r = {lo:.6g}")
            continue
        mid = 0.5 * (lo + hi)
        work.append((mid, hi))
        work.append((lo, mid))
    done.append(edges[-1])
    return np.array(done)
