"""Workspace, obstacle primitives, binary skewing function and quadrature grid.

Obstacles are closed sets: a point on the boundary counts as occupied.
Signed distances are positive outside an obstacle and negative inside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ConfigError, DomainError

DEFAULT_EXTENT = (0.0, 20.0, 0.0, 20.0)
DEFAULT_SPACING = 0.1

# Ellipse projection settings.
_NEWTON_MAX_ITER = 50
_NEWTON_TOL = 1e-9
_NEWTON_SEEDS = 17


def _as_points(x):
    pts = np.asarray(x, dtype=float)
    if pts.shape[-1] != 2:
        raise ValueError(f"expected points with last dimension 2, got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class Workspace:
    x_min: float = DEFAULT_EXTENT[0]
    x_max: float = DEFAULT_EXTENT[1]
    y_min: float = DEFAULT_EXTENT[2]
    y_max: float = DEFAULT_EXTENT[3]

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ConfigError(f"degenerate workspace bounds {self}")

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return self.width * self.height

    @property
    def diagonal(self):
        return math.hypot(self.width, self.height)

    def contains(self, points):
        pts = _as_points(points)
        return (
            (pts[..., 0] >= self.x_min)
            & (pts[..., 0] <= self.x_max)
            & (pts[..., 1] >= self.y_min)
            & (pts[..., 1] <= self.y_max)
        )

    def clip(self, points):
        pts = np.array(points, dtype=float)
        pts[..., 0] = np.clip(pts[..., 0], self.x_min, self.x_max)
        pts[..., 1] = np.clip(pts[..., 1], self.y_min, self.y_max)
        return pts

    def to_dict(self):
        return {"x_min": self.x_min, "x_max": self.x_max, "y_min": self.y_min, "y_max": self.y_max}


# ---------------------------------------------------------------------------
# Obstacles
#
# Every shape implements ``contains``, ``signed_distance`` (returning the
# distance and the unit gradient of the signed distance), ``area`` and
# ``to_dict``.


@dataclass(frozen=True)
class Circle:
    center: tuple
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if not self.radius > 0:
            raise ConfigError(f"circle radius must be positive, got {self.radius}")

    @property
    def area(self):
        return math.pi * self.radius**2

    def contains(self, points):
        pts = _as_points(points)
        d2 = (pts[..., 0] - self.center[0]) ** 2 + (pts[..., 1] - self.center[1]) ** 2
        return d2 <= self.radius**2

    def signed_distance(self, points):
        pts = _as_points(points)
        diff = pts - np.asarray(self.center)
        r = np.hypot(diff[..., 0], diff[..., 1])
        grad = np.zeros_like(diff)
        grad[..., 0] = 1.0
        nz = r > 0
        grad[nz] = diff[nz] / r[nz][..., None]
        return r - self.radius, grad

    def to_dict(self):
        return {"type": "circle", "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class ConvexPolygon:
    vertices: tuple

    def __post_init__(self):
        verts = tuple(tuple(float(c) for c in v) for v in self.vertices)
        object.__setattr__(self, "vertices", verts)
        if len(verts) < 3:
            raise ConfigError("polygon needs at least 3 vertices")
        v = np.asarray(verts)
        e = np.roll(v, -1, axis=0) - v
        turn = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
        if np.any(turn <= 0):
            raise ConfigError("polygon must be convex with counter-clockwise vertex order")

    @classmethod
    def rectangle(cls, x0, x1, y0, y1):
        return cls(((x0, y0), (x1, y0), (x1, y1), (x0, y1)))

    @property
    def area(self):
        v = np.asarray(self.vertices)
        x, y = v[:, 0], v[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    def _edges(self):
        v = np.asarray(self.vertices)
        return v, np.roll(v, -1, axis=0) - v

    def contains(self, points):
        pts = _as_points(points)
        v, e = self._edges()
        rel = pts[..., None, :] - v
        cross = e[:, 0] * rel[..., 1] - e[:, 1] * rel[..., 0]
        return np.all(cross >= 0, axis=-1)

    def signed_distance(self, points):
        pts = _as_points(points)
        v, e = self._edges()
        rel = pts[..., None, :] - v
        t = np.clip(np.sum(rel * e, axis=-1) / np.sum(e * e, axis=-1), 0.0, 1.0)
        closest = v + t[..., None] * e
        diff = pts[..., None, :] - closest
        dist = np.hypot(diff[..., 0], diff[..., 1])
        k = np.argmin(dist, axis=-1)
        d = np.take_along_axis(dist, k[..., None], axis=-1)[..., 0]
        dvec = np.take_along_axis(diff, k[..., None, None], axis=-2)[..., 0, :]
        inside = self.contains(pts)
        grad = np.empty_like(dvec)
        nz = d > 0
        grad[nz] = dvec[nz] / d[nz][..., None]
        if np.any(~nz):
            # On the boundary: outward edge normal.
            ek = e[k[~nz]]
            grad[~nz] = np.stack([ek[:, 1], -ek[:, 0]], axis=-1) / np.hypot(ek[:, 0], ek[:, 1])[:, None]
        sign = np.where(inside, -1.0, 1.0)
        return sign * d, sign[..., None] * grad

    def to_dict(self):
        return {"type": "polygon", "vertices": [list(v) for v in self.vertices]}


@dataclass(frozen=True)
class Ellipse:
    center: tuple
    semi_axes: tuple
    rotation: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "semi_axes", tuple(float(a) for a in self.semi_axes))
        if len(self.semi_axes) != 2 or min(self.semi_axes) <= 0:
            raise ConfigError(f"ellipse semi-axes must be two positive lengths, got {self.semi_axes}")

    @property
    def area(self):
        return math.pi * self.semi_axes[0] * self.semi_axes[1]

    def _to_local(self, pts):
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        d = pts - np.asarray(self.center)
        return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)

    def _to_world_vec(self, vec):
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return np.stack([c * vec[..., 0] - s * vec[..., 1], s * vec[..., 0] + c * vec[..., 1]], axis=-1)

    def contains(self, points):
        loc = self._to_local(_as_points(points))
        a, b = self.semi_axes
        return (loc[..., 0] / a) ** 2 + (loc[..., 1] / b) ** 2 <= 1.0

    def closest_boundary_angle(self, u, v):
        """Parametric angle of the boundary point nearest to ``(u, v)``.

        ``u`` and ``v`` are non-negative local coordinates (first quadrant),
        so the answer lies in ``[0, pi/2]``. A coarse scan picks the start,
        then damped Newton iterations refine the stationarity condition.
        """
        a, b = self.semi_axes
        shape = np.shape(u)
        u = np.asarray(u, dtype=float).ravel()
        v = np.asarray(v, dtype=float).ravel()

        def dist2(t):
            return (a * np.cos(t) - u) ** 2 + (b * np.sin(t) - v) ** 2

        seeds = np.linspace(0.0, 0.5 * math.pi, _NEWTON_SEEDS)
        scan = dist2(seeds[:, None] + np.zeros_like(u)[None, :])
        t = seeds[np.argmin(scan, axis=0)]
        for _ in range(_NEWTON_MAX_ITER):
            st, ct = np.sin(t), np.cos(t)
            g1 = (b * b - a * a) * st * ct + a * u * st - b * v * ct
            g2 = (b * b - a * a) * (ct * ct - st * st) + a * u * ct + b * v * st
            step = np.where(g2 > 0, -g1 / np.where(g2 > 0, g2, 1.0), -np.sign(g1) * 1e-2)
            f0 = dist2(t)
            for _ in range(30):
                t_new = np.clip(t + step, 0.0, 0.5 * math.pi)
                worse = dist2(t_new) > f0
                if not np.any(worse):
                    break
                step = np.where(worse, 0.5 * step, step)
            t_new = np.clip(t + step, 0.0, 0.5 * math.pi)
            done = np.max(np.abs(t_new - t), initial=0.0) < _NEWTON_TOL
            t = t_new
            if done:
                break
        return t.reshape(shape)

    def signed_distance(self, points):
        pts = _as_points(points)
        loc = self._to_local(pts)
        a, b = self.semi_axes
        u, v = np.abs(loc[..., 0]), np.abs(loc[..., 1])
        t = self.closest_boundary_angle(u, v)
        pu, pv = a * np.cos(t), b * np.sin(t)
        du, dv = u - pu, v - pv
        d = np.hypot(du, dv)
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        gu = np.where(d > 0, du / np.where(d > 0, d, 1.0), pu / a**2)
        gv = np.where(d > 0, dv / np.where(d > 0, d, 1.0), pv / b**2)
        norm = np.hypot(gu, gv)
        gu, gv = gu / norm, gv / norm
        # Outward direction for points inside is opposite to (point - boundary).
        gu = np.where(inside & (d > 0), -gu, gu)
        gv = np.where(inside & (d > 0), -gv, gv)
        grad_local = np.stack([np.copysign(gu, loc[..., 0]), np.copysign(gv, loc[..., 1])], axis=-1)
        sign = np.where(inside, -1.0, 1.0)
        return sign * d, self._to_world_vec(grad_local)

    def boundary_points(self, count):
        t = np.linspace(0.0, 2 * math.pi, count, endpoint=False)
        a, b = self.semi_axes
        local = np.stack([a * np.cos(t), b * np.sin(t)], axis=-1)
        return self._to_world_vec(local) + np.asarray(self.center)

    def to_dict(self):
        return {
            "type": "ellipse",
            "center": list(self.center),
            "semi_axes": list(self.semi_axes),
            "rotation": self.rotation,
        }


def obstacle_from_dict(spec):
    kind = spec.get("type")
    try:
        if kind == "circle":
            return Circle(tuple(spec["center"]), float(spec["radius"]))
        if kind == "polygon":
            return ConvexPolygon(tuple(tuple(v) for v in spec["vertices"]))
        if kind == "rectangle":
            return ConvexPolygon.rectangle(*spec["bounds"])
        if kind == "ellipse":
            return Ellipse(tuple(spec["center"]), tuple(spec["semi_axes"]), float(spec.get("rotation", 0.0)))
    except KeyError as exc:
        raise ConfigError(f"obstacle {spec!r} is missing field {exc}") from None
    raise ConfigError(f"unknown obstacle type {kind!r}")


# ---------------------------------------------------------------------------
# Skewing function


@dataclass(frozen=True)
class SkewField:
    """Binary free-space indicator over a workspace.

    ``Q(x) = 0`` inside (or on the boundary of) any obstacle and 1 elsewhere.
    With obstacles present, points outside the workspace also evaluate to 0,
    so the workspace edge acts as an implicit wall. An obstacle-free field is
    the identity skew (``Q = 1`` everywhere) and densities reduce exactly to
    Gaussians.
    """

    workspace: Workspace = dc_field(default_factory=Workspace)
    obstacles: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))

    @property
    def is_free(self):
        return len(self.obstacles) == 0

    @property
    def obstacle_area(self):
        return sum(ob.area for ob in self.obstacles)

    def _check_domain(self, pts):
        if not np.all(self.workspace.contains(pts)):
            raise DomainError(f"point(s) outside workspace {self.workspace.to_dict()}")

    def occupied(self, points):
        """Vectorised obstacle membership (no domain check)."""
        pts = _as_points(points)
        hit = np.zeros(pts.shape[:-1], dtype=bool)
        for ob in self.obstacles:
            hit |= ob.contains(pts)
        return hit

    def q(self, points):
        """Vectorised ``Q`` as floats; points outside the workspace give 0."""
        pts = _as_points(points)
        if self.is_free:
            return np.ones(pts.shape[:-1])
        ok = self.workspace.contains(pts) & ~self.occupied(pts)
        return ok.astype(float)

    def occupancy(self, x):
        pts = _as_points(x)
        self._check_domain(pts)
        free = ~self.occupied(pts)
        return int(free) if free.ndim == 0 else free.astype(int)

    def signed_distance(self, points):
        """Minimum signed distance to all obstacles and its gradient.

        Returns ``inf`` (and a zero gradient) when there are no obstacles.
        """
        pts = _as_points(points)
        best = np.full(pts.shape[:-1], np.inf)
        grad = np.zeros(pts.shape)
        for ob in self.obstacles:
            d, g = ob.signed_distance(pts)
            better = d < best
            best = np.where(better, d, best)
            grad = np.where(better[..., None], g, grad)
        return best, grad

    def clearance(self, x):
        pts = _as_points(x)
        self._check_domain(pts)
        d, _ = self.signed_distance(pts)
        return float(d) if d.ndim == 0 else d

    def to_dict(self):
        return {
            "workspace": self.workspace.to_dict(),
            "obstacles": [ob.to_dict() for ob in self.obstacles],
        }

    @classmethod
    def from_dict(cls, spec):
        ws = Workspace(**spec.get("workspace", {}))
        return cls(ws, tuple(obstacle_from_dict(o) for o in spec.get("obstacles", [])))


# ---------------------------------------------------------------------------
# Quadrature grid


class QuadratureGrid:
    """Cell-centred lattice used for every workspace integral.

    Values on the grid are stored as ``(ny, nx)`` arrays; flattening them in
    C order gives row-major point order (rows of constant ``y``, lowest ``y``
    first). Treat instances as immutable.
    """

    def __init__(self, field, nx, ny):
        ws = field.workspace
        self.field = field
        self.workspace = ws
        self.nx, self.ny = int(nx), int(ny)
        self.dx = ws.width / self.nx
        self.dy = ws.height / self.ny
        self.xs = ws.x_min + (np.arange(self.nx) + 0.5) * self.dx
        self.ys = ws.y_min + (np.arange(self.ny) + 0.5) * self.dy
        self.X, self.Y = np.meshgrid(self.xs, self.ys)
        self.q = field.q(np.stack([self.X, self.Y], axis=-1))
        self.q.setflags(write=False)
        self.cache = {}

    @property
    def shape(self):
        return (self.ny, self.nx)

    @property
    def size(self):
        return self.nx * self.ny

    @property
    def cell_area(self):
        return self.dx * self.dy

    @property
    def points(self):
        return np.stack([self.X.ravel(), self.Y.ravel()], axis=-1)

    def integrate(self, values):
        return float(np.sum(values)) * self.cell_area

    def inner(self, a, b):
        return float(np.sum(a * b)) * self.cell_area

    def same_as(self, other):
        if self is other:
            return True
        return (
            self.shape == other.shape
            and self.workspace == other.workspace
            and np.array_equal(self.q, other.q)
        )

    def with_field(self, field):
        """Same lattice over another skewing function (e.g. the free field)."""
        if field.workspace != self.workspace:
            raise ConfigError("field workspace differs from grid workspace")
        return QuadratureGrid(field, self.nx, self.ny)

    def free_twin(self):
        """The obstacle-free grid on the same lattice (cached)."""
        twin = self.cache.get("free_twin")
        if twin is None:
            twin = self if self.field.is_free else self.with_field(SkewField(self.workspace))
            self.cache["free_twin"] = twin
        return twin


def build_grid(workspace=None, dx=DEFAULT_SPACING, dy=None, field=None):
    """Lattice of cell centres covering ``workspace``.

    The cell count per axis is ``round(extent / spacing)``; the realised
    spacing is ``extent / count`` so the lattice tiles the workspace exactly.
    """
    if field is None:
        field = SkewField(workspace or Workspace())
    if workspace is not None and field.workspace != workspace:
        raise ConfigError("field workspace differs from requested workspace")
    ws = field.workspace
    dy = dx if dy is None else dy
    if not (dx > 0 and dy > 0):
        raise ConfigError(f"grid spacing must be positive, got dx={dx}, dy={dy}")
    if dx >= ws.width or dy >= ws.height:
        raise ConfigError("grid spacing must be smaller than the workspace extent")
    nx = max(1, int(round(ws.width / dx)))
    ny = max(1, int(round(ws.height / dy)))
    return QuadratureGrid(field, nx, ny)


def environment_from_dict(spec):
    """Parse a scenario environment block into ``(field, dx, dy)``."""
    field = SkewField.from_dict(spec)
    grid = spec.get("grid", {})
    dx = float(grid.get("dx", DEFAULT_SPACING))
    dy = float(grid.get("dy", dx))
    return field, dx, dy
