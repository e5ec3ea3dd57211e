"""Built-in geometries and the JSON geometry file format.

Geometry files are JSON objects::

    {
      "dimension": 3,
      "degrees": [2, 2, 2],
      "knots": [[0, 0, 0, 1, 1, 1], ...],
      "control_points": [[[[x, y, z], ...], ...], ...],   # shape (n_1, ..., n_D, D)
      "weights": [[[w, ...], ...], ...]                  # optional, shape (n_1, ..., n_D)
    }

with the first parameter index varying slowest in the nested arrays.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .exceptions import ValidationError
from .splines import (GeometryMap, TensorSpace, UnivariateSpline, greville_abscissae,
                      knot_insertion_matrix, make_spline, mode_product)

BUILTINS = ("unit_cube", "quarter_annulus_3d", "twisted_cuboid")

# twisted cuboid: side lengths and total twist angle about the z-axis
CUBOID_SIDES = (1.0, 0.6, 2.0)
CUBOID_TWIST = math.pi / 4


def _greville_net(space: TensorSpace) -> np.ndarray:
    g = [greville_abscissae(f) for f in space.factors]
    return np.stack(np.meshgrid(*g, indexing="ij"), axis=-1)


def unit_cube(p: int = 2, dim: int = 3) -> GeometryMap:
    """Identity map of ``[0,1]^dim`` (control points on the Greville grid)."""
    if p < 1:
        raise ValidationError("unit cube needs degree >= 1")
    space = TensorSpace(tuple(make_spline(p) for _ in range(dim)))
    return GeometryMap(space, _greville_net(space))


def _elevate(space_old: TensorSpace, space_new: TensorSpace, num, w):
    mats = [knot_insertion_matrix(o, n) for o, n in zip(space_old.factors, space_new.factors)]
    num = mode_product(num, mats)
    if w is None:
        return num, None
    return num, mode_product(w, mats)


def quarter_annulus_3d(p: int = 2) -> GeometryMap:
    """Quarter annulus (radii 1 to 2) extruded over ``z`` in [0, 1].

    Parameter order is (radial, angular, height).  The arc is the standard
    rational quadratic with middle weight sqrt(2)/2; degrees above 2 are
    obtained by exact degree elevation of the quadratic patch.
    """
    if p < 2:
        raise ValidationError("quarter annulus needs degree >= 2 (rational quadratic arc)")
    quad = TensorSpace(tuple(make_spline(2) for _ in range(3)))
    arc = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    arc_w = np.array([1.0, math.sqrt(0.5), 1.0])
    radii = np.array([1.0, 1.5, 2.0])
    heights = np.array([0.0, 0.5, 1.0])
    cp = np.zeros((3, 3, 3, 3))
    w = np.zeros((3, 3, 3))
    for i, rad in enumerate(radii):
        for j in range(3):
            for k, z in enumerate(heights):
                cp[i, j, k, :2] = rad * arc[j]
                cp[i, j, k, 2] = z
                w[i, j, k] = arc_w[j]
    if p == 2:
        return GeometryMap(quad, cp, w)
    space = TensorSpace(tuple(make_spline(p) for _ in range(3)))
    num, we = _elevate(quad, space, cp * w[..., None], w)
    return GeometryMap(space, num / we[..., None], we)


def twisted_cuboid(p: int = 2) -> GeometryMap:
    """Cuboid whose cross sections rotate linearly about the vertical axis.

    The control net places rotated copies of the rectangular cross section at
    the Greville abscissae in ``z``; the map is a polynomial B-spline.
    """
    if p < 1:
        raise ValidationError("twisted cuboid needs degree >= 1")
    space = TensorSpace(tuple(make_spline(p) for _ in range(3)))
    net = _greville_net(space)
    a, b, c = CUBOID_SIDES
    x = (net[..., 0] - 0.5) * a
    y = (net[..., 1] - 0.5) * b
    ang = CUBOID_TWIST * net[..., 2]
    cp = np.stack([np.cos(ang) * x - np.sin(ang) * y,
                   np.sin(ang) * x + np.cos(ang) * y,
                   c * net[..., 2]], axis=-1)
    return GeometryMap(space, cp)


def generate_builtin(name: str, p: int = 2) -> GeometryMap:
    """Built-in geometry by name (see :data:`BUILTINS`)."""
    if name == "unit_cube":
        return unit_cube(p)
    if name == "quarter_annulus_3d":
        return quarter_annulus_3d(p)
    if name == "twisted_cuboid":
        return twisted_cuboid(p)
    raise ValidationError("unknown builtin geometry %r (choose from %s)" % (name, ", ".join(BUILTINS)))


def geometry_to_dict(geo: GeometryMap) -> dict:
    out = {
        "dimension": geo.dim,
        "degrees": [f.degree for f in geo.space.factors],
        "knots": [f.knots.tolist() for f in geo.space.factors],
        "control_points": geo.control_points.tolist(),
    }
    if geo.weights is not None:
        out["weights"] = geo.weights.tolist()
    return out


def geometry_from_dict(data: dict) -> GeometryMap:
    """Validate a geometry description and build the map.

    Raises:
        ValidationError: naming the offending field.
    """
    if not isinstance(data, dict):
        raise ValidationError("geometry: top level must be a JSON object")
    for key in ("dimension", "degrees", "knots", "control_points"):
        if key not in data:
            raise ValidationError("geometry: missing field '%s'" % key)
    D = data["dimension"]
    if not isinstance(D, int) or D < 1:
        raise ValidationError("geometry: field 'dimension' must be a positive integer")
    degrees, knots = data["degrees"], data["knots"]
    if not isinstance(degrees, list) or len(degrees) != D:
        raise ValidationError("geometry: field 'degrees' must list %d integers" % D)
    if not isinstance(knots, list) or len(knots) != D:
        raise ValidationError("geometry: field 'knots' must list %d knot vectors" % D)
    factors = []
    for d in range(D):
        if not isinstance(degrees[d], int):
            raise ValidationError("geometry: field 'degrees[%d]' must be an integer" % d)
        try:
            kv = np.asarray(knots[d], dtype=float)
        except (TypeError, ValueError):
            raise ValidationError("geometry: field 'knots[%d]' must be numeric" % d) from None
        try:
            factors.append(UnivariateSpline(kv, degrees[d]))
        except ValidationError as exc:
            raise ValidationError("geometry: field 'knots[%d]': %s" % (d, exc)) from None
    space = TensorSpace(tuple(factors))
    try:
        cp = np.asarray(data["control_points"], dtype=float)
    except (TypeError, ValueError):
        raise ValidationError("geometry: field 'control_points' must be a regular numeric array") from None
    if cp.shape != space.dims + (D,):
        raise ValidationError("geometry: field 'control_points' has shape %s, expected %s"
                              % (cp.shape, space.dims + (D,)))
    w = None
    if data.get("weights") is not None:
        try:
            w = np.asarray(data["weights"], dtype=float)
        except (TypeError, ValueError):
            raise ValidationError("geometry: field 'weights' must be a regular numeric array") from None
        if w.shape != space.dims:
            raise ValidationError("geometry: field 'weights' has shape %s, expected %s"
                                  % (w.shape, space.dims))
        if not np.all(w > 0):
            raise ValidationError("geometry: field 'weights' must be strictly positive")
    return GeometryMap(space, cp, w)


def parse_geometry(path) -> GeometryMap:
    """Read and validate a geometry JSON file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValidationError("geometry: cannot read %s: %s" % (path, exc)) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError("geometry: %s is not valid JSON: %s" % (path, exc)) from None
    return geometry_from_dict(data)


def write_geometry(path, geo: GeometryMap) -> None:
    Path(path).write_text(json.dumps(geometry_to_dict(geo), indent=1))
