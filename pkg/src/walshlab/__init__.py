"""Numerical laboratory for Walsh diffusions on rays."""
from .geometry import ORIGIN, Domain, RayPoint, UnsupportedRayError, in_domain, parse_point, tree_distance
from .fields import AngularMeasure, ModelSpec, RayField, SpecError, load_model

__version__ = "0.1.0"
