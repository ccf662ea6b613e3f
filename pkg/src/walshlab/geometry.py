"""Points on rays, the tree-metric and tree-open domains.

A point of the plane is kept in polar form ``(r, theta)``. Every point with
``r == 0`` is the origin, shared by all rays; the canonical origin stores
``theta = 0`` so that equality is structural.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

TWO_PI = 2.0 * math.pi


class UnsupportedRayError(ValueError):
    """Raised when a point sits on a ray the model knows nothing about."""


def normalize_angle(theta: float) -> float:
    t = math.fmod(float(theta), TWO_PI)
    if t < 0.0:
        t += TWO_PI
    # fmod can land exactly on 2*pi after the correction
    if t >= TWO_PI:
        t = 0.0
    return t


@dataclass(frozen=True, order=True)
class RayPoint:
    """A point ``(r, theta)``; construct through :meth:`make` to canonicalize."""

    r: float
    theta: float

    def __post_init__(self):
        if not (self.r >= 0.0):
            raise ValueError(f"radius must be nonnegative, got {self.r!r}")
        if not (0.0 <= self.theta < TWO_PI):
            raise ValueError(f"angle must lie in [0, 2pi), got {self.theta!r}")
        if self.r == 0.0 and self.theta != 0.0:
            raise ValueError("the origin must be stored with theta = 0; use RayPoint.make")

    @classmethod
    def make(cls, r: float, theta: float = 0.0) -> "RayPoint":
        r = float(r)
        if r == 0.0:
            return ORIGIN
        return cls(r, normalize_angle(theta))

    @property
    def is_origin(self) -> bool:
        return self.r == 0.0

    def cartesian(self) -> tuple[float, float]:
        return self.r * math.cos(self.theta), self.r * math.sin(self.theta)

    def __str__(self) -> str:
        return "origin" if self.is_origin else f"{self.r!r}@{self.theta!r}"


ORIGIN = RayPoint(0.0, 0.0)


def parse_point(text: str) -> RayPoint:
    """Parse ``origin`` or ``r@theta`` (theta in radians)."""
    text = text.strip()
    if text.lower() == "origin":
        return ORIGIN
    if "@" not in text:
        raise ValueError(f"expected 'origin' or 'r@theta', got {text!r}")
    r, theta = text.split("@", 1)
    return RayPoint.make(float(r), float(theta))


def tree_distance(x1: RayPoint, x2: RayPoint) -> float:
    """Length of the shortest path between two points travelling along rays."""
    if x1.is_origin or x2.is_origin or x1.theta == x2.theta:
        return abs(x1.r - x2.r)
    return x1.r + x2.r


@dataclass(frozen=True)
class Domain:
    """Radii ``ell(theta)`` on a finite set of rays; ``math.inf`` is allowed."""

    ell: Mapping[float, float]

    def __post_init__(self):
        if not self.ell:
            raise ValueError("a domain needs at least one ray")
        for theta, radius in self.ell.items():
            if not (0.0 <= theta < TWO_PI):
                raise ValueError(f"ray angle {theta!r} outside [0, 2pi)")
            if not (radius > 0.0):
                raise ValueError(f"ell({theta!r}) must be positive, got {radius!r}")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[float, float]]) -> "Domain":
        return cls({normalize_angle(t): float(r) for t, r in pairs})

    @property
    def floor(self) -> float:
        return min(self.ell.values())

    @property
    def angles(self) -> tuple[float, ...]:
        return tuple(sorted(self.ell))

    def radius(self, theta: float) -> float:
        try:
            return self.ell[theta]
        except KeyError:
            raise UnsupportedRayError(f"no ray with angle {theta!r} in the domain") from None


def in_domain(x: RayPoint, d: Domain) -> bool:
    if x.is_origin:
        return True
    return 0.0 < x.r < d.radius(x.theta)
