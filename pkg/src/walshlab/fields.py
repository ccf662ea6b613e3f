"""Model specification: angular measure, per-ray coefficient fields, JSON I/O.

Coefficient fields are functions of the radius alone on each ray. Four kinds
are supported, all of which reduce to piecewise-linear segments:

``constant``
    ``{"kind": "constant", "value": v}``
``piecewise``
    ``{"kind": "piecewise", "breakpoints": [x1, ..., xk], "values": [v0, ..., vk]}``;
    the value is ``v_i`` on ``[x_i, x_{i+1})`` with ``x_0 = 0``.
``grid``
    ``{"kind": "grid", "radii": [...], "values": [...]}``; linear interpolation,
    held constant outside the tabulated range.
``switch``
    ``{"kind": "switch", "at": a, "below": field, "above": field}``; used for
    the assembled controls, ``below`` on ``(0, a)`` and ``above`` from ``a`` on.

A model file looks like::

    {"rays": [{"theta": 0.0, "weight": 0.5, "ell": 1.0,
               "b": {"kind": "constant", "value": 0.0},
               "s": {"kind": "constant", "value": 1.0}},
              {"theta": 3.141592653589793, "weight": 0.5, "ell": "inf", ...}]}

``ell`` accepts a positive number or the string ``"inf"``. A ray with weight 0
is allowed; it is not part of the angular measure but can host a start point.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from .geometry import Domain, normalize_angle

WEIGHT_TOL = 1e-12


class SpecError(ValueError):
    """Malformed model, field, reward or control description."""


def _check_keys(obj: Mapping, allowed: set[str], required: set[str], where: str):
    if not isinstance(obj, Mapping):
        raise SpecError(f"{where}: expected an object, got {type(obj).__name__}")
    unknown = set(obj) - allowed
    if unknown:
        raise SpecError(f"{where}: unknown keys {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise SpecError(f"{where}: missing keys {sorted(missing)}")


def parse_radius(value: Any) -> float:
    if isinstance(value, str):
        if value.strip().lower() in ("inf", "+inf", "infinity"):
            return math.inf
        raise SpecError(f"bad radius {value!r}")
    r = float(value)
    if not r > 0.0:
        raise SpecError(f"radius must be positive, got {r!r}")
    return r


def format_radius(r: float):
    return "inf" if math.isinf(r) else r


@dataclass(frozen=True)
class RayField:
    """A coefficient ``r -> f(r)`` on one ray, stored as linear segments.

    ``starts[k] <= r < starts[k+1]`` evaluates ``intercepts[k] + slopes[k] * (r - starts[k])``.
    """

    kind: str
    params: tuple = ()
    starts: tuple = field(default=(0.0,), compare=False)
    intercepts: tuple = field(default=(0.0,), compare=False)
    slopes: tuple = field(default=(0.0,), compare=False)

    @classmethod
    def constant(cls, value: float) -> "RayField":
        value = float(value)
        return cls("constant", (value,), (0.0,), (value,), (0.0,))

    @classmethod
    def piecewise(cls, breakpoints: Iterable[float], values: Iterable[float]) -> "RayField":
        bps = tuple(float(x) for x in breakpoints)
        vals = tuple(float(v) for v in values)
        if len(vals) != len(bps) + 1:
            raise SpecError("piecewise field needs len(values) == len(breakpoints) + 1")
        if any(x <= 0.0 for x in bps) or any(b <= a for a, b in zip(bps, bps[1:])):
            raise SpecError("piecewise breakpoints must be positive and strictly increasing")
        starts = (0.0,) + bps
        return cls("piecewise", (bps, vals), starts, vals, (0.0,) * len(vals))

    @classmethod
    def grid(cls, radii: Iterable[float], values: Iterable[float]) -> "RayField":
        xs = tuple(float(x) for x in radii)
        ys = tuple(float(v) for v in values)
        if len(xs) != len(ys) or len(xs) < 1:
            raise SpecError("grid field needs matching, nonempty radii and values")
        if any(x < 0.0 for x in xs) or any(b <= a for a, b in zip(xs, xs[1:])):
            raise SpecError("grid radii must be nonnegative and strictly increasing")
        starts, intercepts, slopes = [], [], []
        if xs[0] > 0.0:
            starts.append(0.0)
            intercepts.append(ys[0])
            slopes.append(0.0)
        for k in range(len(xs) - 1):
            starts.append(xs[k])
            intercepts.append(ys[k])
            slopes.append((ys[k + 1] - ys[k]) / (xs[k + 1] - xs[k]))
        starts.append(xs[-1])
        intercepts.append(ys[-1])
        slopes.append(0.0)
        return cls("grid", (xs, ys), tuple(starts), tuple(intercepts), tuple(slopes))

    @classmethod
    def switch(cls, at: float, below: "RayField", above: "RayField") -> "RayField":
        at = float(at)
        if at <= 0.0:
            return above
        starts, intercepts, slopes = [], [], []
        for s0, a0, c0 in zip(below.starts, below.intercepts, below.slopes):
            if s0 < at:
                starts.append(s0)
                intercepts.append(a0)
                slopes.append(c0)
        # segment of `above` that contains `at`
        k = int(np.searchsorted(above.starts, at, side="right")) - 1
        starts.append(at)
        intercepts.append(above.intercepts[k] + above.slopes[k] * (at - above.starts[k]))
        slopes.append(above.slopes[k])
        for s0, a0, c0 in zip(above.starts[k + 1:], above.intercepts[k + 1:], above.slopes[k + 1:]):
            starts.append(s0)
            intercepts.append(a0)
            slopes.append(c0)
        return cls("switch", (at, below, above), tuple(starts), tuple(intercepts), tuple(slopes))

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        starts = np.asarray(self.starts)
        k = np.searchsorted(starts, r, side="right") - 1
        k = np.clip(k, 0, len(starts) - 1)
        out = np.asarray(self.intercepts)[k] + np.asarray(self.slopes)[k] * (r - starts[k])
        return out if out.ndim else float(out)

    @property
    def breakpoints(self) -> tuple[float, ...]:
        """Radii where the field may fail to be smooth."""
        return tuple(x for x in self.starts if x > 0.0)

    def is_zero(self) -> bool:
        return all(a == 0.0 for a in self.intercepts) and all(c == 0.0 for c in self.slopes)

    def to_json(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.params[0]}
        if self.kind == "piecewise":
            return {"kind": "piecewise", "breakpoints": list(self.params[0]), "values": list(self.params[1])}
        if self.kind == "grid":
            return {"kind": "grid", "radii": list(self.params[0]), "values": list(self.params[1])}
        at, below, above = self.params
        return {"kind": "switch", "at": at, "below": below.to_json(), "above": above.to_json()}

    @classmethod
    def from_json(cls, obj: Any, where: str = "field") -> "RayField":
        if isinstance(obj, (int, float)) and not isinstance(obj, bool):
            return cls.constant(obj)
        if not isinstance(obj, Mapping) or "kind" not in obj:
            raise SpecError(f"{where}: expected a field object with a 'kind'")
        kind = obj["kind"]
        try:
            if kind == "constant":
                _check_keys(obj, {"kind", "value"}, {"value"}, where)
                return cls.constant(obj["value"])
            if kind == "piecewise":
                _check_keys(obj, {"kind", "breakpoints", "values"}, {"breakpoints", "values"}, where)
                return cls.piecewise(obj["breakpoints"], obj["values"])
            if kind == "grid":
                _check_keys(obj, {"kind", "radii", "values"}, {"radii", "values"}, where)
                return cls.grid(obj["radii"], obj["values"])
            if kind == "switch":
                _check_keys(obj, {"kind", "at", "below", "above"}, {"at", "below", "above"}, where)
                return cls.switch(obj["at"], cls.from_json(obj["below"], where + ".below"),
                                  cls.from_json(obj["above"], where + ".above"))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, SpecError):
                raise
            raise SpecError(f"{where}: {exc}") from exc
        raise SpecError(f"{where}: unknown field kind {kind!r}")


@dataclass(frozen=True)
class AngularMeasure:
    """Finitely supported probability measure on ray angles."""

    atoms: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if not self.atoms:
            raise SpecError("angular measure has no atoms")
        thetas = [t for t, _ in self.atoms]
        if len(set(thetas)) != len(thetas):
            raise SpecError("angular measure atoms must have distinct angles")
        for t, w in self.atoms:
            if not (0.0 <= t < 2 * math.pi):
                raise SpecError(f"atom angle {t!r} outside [0, 2pi)")
            if not w > 0.0:
                raise SpecError(f"atom weight must be positive, got {w!r}")
        total = sum(w for _, w in self.atoms)
        if abs(total - 1.0) > WEIGHT_TOL:
            raise SpecError(f"angular weights sum to {total!r}, not 1")

    @classmethod
    def from_weights(cls, weights: Mapping[float, float], normalize: bool = False) -> "AngularMeasure":
        items = [(normalize_angle(t), float(w)) for t, w in weights.items() if w > 0.0]
        if normalize:
            total = sum(w for _, w in items)
            items = [(t, w / total) for t, w in items]
        return cls(tuple(sorted(items)))

    @property
    def thetas(self) -> tuple[float, ...]:
        return tuple(t for t, _ in self.atoms)

    @property
    def weights(self) -> tuple[float, ...]:
        return tuple(w for _, w in self.atoms)

    def weight(self, theta: float) -> float:
        return dict(self.atoms).get(theta, 0.0)

    def mass(self, thetas: Iterable[float]) -> float:
        table = dict(self.atoms)
        return sum(table.get(t, 0.0) for t in set(thetas))

    def __contains__(self, theta: float) -> bool:
        return theta in dict(self.atoms)


@dataclass(frozen=True)
class ModelSpec:
    """The triple (b, s, nu) together with the domain radii.

    ``b`` and ``s`` map every ray angle in the domain to its coefficient field.
    """

    nu: AngularMeasure
    domain: Domain
    b: Mapping[float, RayField]
    s: Mapping[float, RayField]

    def __post_init__(self):
        rays = set(self.domain.ell)
        if set(self.b) != rays or set(self.s) != rays:
            raise SpecError("b and s must be given on exactly the rays of the domain")
        if not set(self.nu.thetas) <= rays:
            raise SpecError("angular measure charges a ray that has no coefficients")

    @property
    def thetas(self) -> tuple[float, ...]:
        return self.domain.angles

    def ell(self, theta: float) -> float:
        return self.domain.radius(theta)

    @classmethod
    def build(cls, rays: Iterable[Mapping[str, Any]]) -> "ModelSpec":
        """Build from dicts with keys theta, weight, ell, b, s (fields or numbers)."""
        weights, ell, b, s = {}, {}, {}, {}
        for ray in rays:
            theta = normalize_angle(ray["theta"])
            if theta in ell:
                raise SpecError(f"duplicate ray angle {theta!r}")
            w = float(ray.get("weight", 0.0))
            if w < 0.0:
                raise SpecError(f"negative weight on ray {theta!r}")
            weights[theta] = w
            ell[theta] = parse_radius(ray.get("ell", math.inf))
            bf, sf = ray.get("b", 0.0), ray.get("s", 1.0)
            b[theta] = bf if isinstance(bf, RayField) else RayField.from_json(bf, f"ray {theta}: b")
            s[theta] = sf if isinstance(sf, RayField) else RayField.from_json(sf, f"ray {theta}: s")
        return cls(AngularMeasure.from_weights(weights), Domain(ell), b, s)

    @classmethod
    def from_json(cls, obj: Any) -> "ModelSpec":
        _check_keys(obj, {"rays"}, {"rays"}, "model")
        rays = []
        for i, ray in enumerate(obj["rays"]):
            _check_keys(ray, {"theta", "weight", "ell", "b", "s"}, {"theta", "weight", "ell", "b", "s"},
                        f"model.rays[{i}]")
            rays.append(ray)
        try:
            return cls.build(rays)
        except (TypeError, KeyError) as exc:
            raise SpecError(f"model: {exc}") from exc

    def to_json(self) -> dict:
        return {"rays": [
            {"theta": t, "weight": self.nu.weight(t), "ell": format_radius(self.ell(t)),
             "b": self.b[t].to_json(), "s": self.s[t].to_json()}
            for t in self.thetas
        ]}

    def replace(self, *, b=None, s=None, ell=None) -> "ModelSpec":
        domain = self.domain if ell is None else Domain(dict(ell))
        return ModelSpec(self.nu, domain, dict(b or self.b), dict(s or self.s))


def load_json(path) -> Any:
    with open(Path(path), encoding="utf-8") as fh:
        return json.load(fh)


def load_model(path) -> ModelSpec:
    return ModelSpec.from_json(load_json(path))
