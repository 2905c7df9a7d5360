"""Structure models: point clouds, the synthetic wind turbine and occlusion queries.

World frame is z-up with the ground at z = 0. The turbine tower stands on the
world z-axis; the rotor plane is perpendicular to x, in front of the nacelle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull

XYZ_FORMAT_VERSION = 1

# Segment/primitive overlaps shorter than this (m) count as grazing contact.
_LOS_TOLERANCE = 1e-6


class StructureError(ValueError):
    """Invalid structure input (bad file, bad turbine dimensions, empty cloud)."""


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise StructureError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class TurbineSpec:
    """Turbine dimensions in meters; defaults are the inspected field turbine."""

    tower_base_diameter: float = 4.5
    tower_top_diameter: float = 1.5
    tower_height: float = 64.0
    blade_length: float = 22.0
    blade_root_chord: float = 2.0
    blade_tip_chord: float = 0.2
    hub_length: float = 4.0
    rotor_azimuth_angles: tuple = (90.0, 210.0, 330.0)
    surface_sample_spacing: float = 0.15
    base_xy: tuple = (0.0, 0.0)  # tower axis position on the ground

    def validate(self):
        lengths = {
            "tower_base_diameter": self.tower_base_diameter,
            "tower_top_diameter": self.tower_top_diameter,
            "tower_height": self.tower_height,
            "blade_length": self.blade_length,
            "blade_root_chord": self.blade_root_chord,
            "blade_tip_chord": self.blade_tip_chord,
            "hub_length": self.hub_length,
            "surface_sample_spacing": self.surface_sample_spacing,
        }
        for name, value in lengths.items():
            if not (math.isfinite(value) and value > 0.0):
                raise StructureError(f"{name} must be > 0, got {value}")
        if self.tower_base_diameter < self.tower_top_diameter:
            raise StructureError("tower_base_diameter must be >= tower_top_diameter")
        angles = tuple(self.rotor_azimuth_angles)
        if len(angles) != 3:
            raise StructureError("exactly 3 rotor_azimuth_angles required")
        for i in range(3):
            for j in range(i + 1, 3):
                gap = (angles[i] - angles[j]) % 360.0
                if min(gap, 360.0 - gap) < 1e-9:
                    raise StructureError("rotor_azimuth_angles must be distinct modulo 360")
        if self.surface_sample_spacing >= self.blade_tip_chord:
            raise StructureError("surface_sample_spacing must be < blade_tip_chord")
        if len(self.base_xy) != 2 or not all(math.isfinite(v) for v in self.base_xy):
            raise StructureError("base_xy must be two finite coordinates")


# ---------------------------------------------------------------- primitives


@dataclass(frozen=True)
class TaperedCylinder:
    """Vertical truncated cone: radius varies linearly from ``z_bottom`` to ``z_top``."""

    center_xy: tuple
    z_bottom: float
    z_top: float
    radius_bottom: float
    radius_top: float
    name: str = "tower"

    def radius_at(self, z):
        frac = (np.asarray(z, dtype=float) - self.z_bottom) / (self.z_top - self.z_bottom)
        return self.radius_bottom + (self.radius_top - self.radius_bottom) * frac

    def bounds(self):
        r = max(self.radius_bottom, self.radius_top)
        cx, cy = self.center_xy
        return np.array([cx - r, cy - r, self.z_bottom]), np.array([cx + r, cy + r, self.z_top])

    def _local(self, p):
        p = np.atleast_2d(p)
        rho = np.hypot(p[:, 0] - self.center_xy[0], p[:, 1] - self.center_xy[1])
        return rho, p[:, 2] - self.z_bottom

    def contains(self, p, margin=0.0):
        rho, zl = self._local(p)
        h = self.z_top - self.z_bottom
        return (zl > margin) & (zl < h - margin) & (rho < self.radius_at(zl + self.z_bottom) - margin)

    def _profile_distance(self, p):
        """Distance from each point to the (rho, z) trapezoid boundary, signed negative inside."""
        rho, zl = self._local(p)
        h = self.z_top - self.z_bottom
        q = np.stack([rho, zl], axis=1)
        edges = [
            ((0.0, 0.0), (self.radius_bottom, 0.0)),
            ((self.radius_bottom, 0.0), (self.radius_top, h)),
            ((self.radius_top, h), (0.0, h)),
        ]
        best = np.full(len(q), np.inf)
        for (x0, y0), (x1, y1) in edges:
            e = np.array([x1 - x0, y1 - y0])
            w = q - np.array([x0, y0])
            t = np.clip(w @ e / (e @ e), 0.0, 1.0)
            best = np.minimum(best, np.linalg.norm(w - t[:, None] * e, axis=1))
        inside = (zl >= 0.0) & (zl <= h) & (rho <= self.radius_at(zl + self.z_bottom))
        return np.where(inside, -best, best)

    def surface_distance(self, p):
        return np.abs(self._profile_distance(p))

    def distance(self, p):
        return np.maximum(self._profile_distance(p), 0.0)

    def overlap(self, a, b):
        """Length (m) of each segment a->b lying inside the solid."""
        d = b - a
        X = a[:, 0] - self.center_xy[0]
        Y = a[:, 1] - self.center_xy[1]
        Z = a[:, 2] - self.z_bottom
        h = self.z_top - self.z_bottom
        k = (self.radius_bottom - self.radius_top) / h
        dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]

        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            flat = np.abs(dz) < 1e-15
            ta = np.where(flat, -np.inf, -Z / dz)
            tb = np.where(flat, np.inf, (h - Z) / dz)
            Zm = Z + 0.5 * dz  # midpoint keeps the flat case symmetric in a, b
            in_slab = (Zm > 1e-12) & (Zm < h - 1e-12)
            lo = np.where(flat, np.where(in_slab, -np.inf, np.inf), np.minimum(ta, tb))
            hi = np.where(flat, np.where(in_slab, np.inf, -np.inf), np.maximum(ta, tb))
        lo = np.maximum(lo, 0.0)
        hi = np.minimum(hi, 1.0)

        w0 = self.radius_bottom - k * Z
        wd = -k * dz
        A = dx * dx + dy * dy - wd * wd
        B = 2.0 * (X * dx + Y * dy - w0 * wd)
        C = X * X + Y * Y - w0 * w0

        def seg(u, v):
            return np.maximum(np.minimum(v, hi) - np.maximum(u, lo), 0.0)

        inf = np.full_like(A, np.inf)
        scale = dx * dx + dy * dy + dz * dz
        linear = np.abs(A) <= 1e-12 * np.maximum(scale, 1e-300)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            # linear case
            root = -C / B
            lin_len = np.where(
                np.abs(B) < 1e-300,
                np.where(C < 0.0, seg(-inf, inf), 0.0),
                np.where(B > 0.0, seg(-inf, root), seg(root, inf)),
            )
            disc = B * B - 4.0 * A * C
            sq = np.sqrt(np.maximum(disc, 0.0))
            t1 = (-B - np.sign(A) * sq) / (2.0 * A)
            t2 = (-B + np.sign(A) * sq) / (2.0 * A)
            r1, r2 = np.minimum(t1, t2), np.maximum(t1, t2)
            quad_len = np.where(
                disc < 0.0,
                np.where(A < 0.0, seg(-inf, inf), 0.0),
                np.where(A > 0.0, seg(r1, r2), seg(-inf, r1) + seg(r2, inf)),
            )
        length = np.where(linear, lin_len, quad_len)
        length = np.where(hi > lo, length, 0.0)
        return length * np.sqrt(scale)

    def to_dict(self):
        return {
            "type": "tapered_cylinder",
            "name": self.name,
            "center_xy": list(self.center_xy),
            "z_bottom": self.z_bottom,
            "z_top": self.z_top,
            "radius_bottom": self.radius_bottom,
            "radius_top": self.radius_top,
        }


@dataclass(frozen=True)
class ConvexPolyhedron:
    """Convex solid given by its vertices; faces come from the hull."""

    vertices: np.ndarray
    name: str = "polyhedron"
    planes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        # rows (nx, ny, nz, c): n.x + c <= 0 inside, n unit length
        object.__setattr__(self, "planes", ConvexHull(v).equations)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def _signed(self, p):
        p = np.atleast_2d(p)
        return p @ self.planes[:, :3].T + self.planes[:, 3]

    def contains(self, p, margin=0.0):
        return np.all(self._signed(p) < -margin, axis=1)

    def surface_distance(self, p):
        return np.abs(np.max(self._signed(p), axis=1))

    def distance(self, p):
        # exact inside/on faces; a lower bound near edges and corners
        return np.maximum(np.max(self._signed(p), axis=1), 0.0)

    def overlap(self, a, b):
        d = b - a
        n = self.planes[:, :3]
        num = -(a @ n.T + self.planes[:, 3])
        den = d @ n.T
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            ratio = num / den
        lower = np.where(den < 0.0, ratio, -np.inf).max(axis=1)
        upper = np.where(den > 0.0, ratio, np.inf).min(axis=1)
        parallel_out = np.any((den == 0.0) & (num <= 0.0), axis=1)
        t_lo = np.maximum(lower, 0.0)
        t_hi = np.minimum(upper, 1.0)
        length = np.maximum(t_hi - t_lo, 0.0) * np.linalg.norm(d, axis=1)
        return np.where(parallel_out, 0.0, length)

    def to_dict(self):
        return {"type": "convex_polyhedron", "name": self.name, "vertices": self.vertices.tolist()}


@dataclass(frozen=True)
class SolidModel:
    primitives: tuple = ()

    def contains(self, p, margin=0.0):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        out = np.zeros(len(p), dtype=bool)
        for prim in self.primitives:
            out |= prim.contains(p, margin)
        return out

    def surface_distance(self, p):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        if not self.primitives:
            return np.full(len(p), np.inf)
        return np.min([prim.surface_distance(p) for prim in self.primitives], axis=0)

    def distance(self, p):
        """Clearance from each point to the solid (0 inside)."""
        p = np.atleast_2d(np.asarray(p, dtype=float))
        if not self.primitives:
            return np.full(len(p), np.inf)
        return np.min([prim.distance(p) for prim in self.primitives], axis=0)

    def segments_clear(self, a, b):
        """Vectorised line of sight for segment pairs ``a[i] -> b[i]``."""
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.atleast_2d(np.asarray(b, dtype=float))
        a, b = np.broadcast_arrays(a, b)
        clear = np.ones(len(a), dtype=bool)
        seg_lo, seg_hi = np.minimum(a, b), np.maximum(a, b)
        for prim in self.primitives:
            lo, hi = prim.bounds()
            near = np.all((seg_hi >= lo) & (seg_lo <= hi), axis=1)
            if not near.any():
                continue
            idx = np.nonzero(near)[0]
            clear[idx] &= prim.overlap(a[idx], b[idx]) <= _LOS_TOLERANCE
        return clear

    def to_dict(self):
        return {"format_version": XYZ_FORMAT_VERSION, "primitives": [p.to_dict() for p in self.primitives]}

    @classmethod
    def from_dict(cls, data):
        prims = []
        for item in data.get("primitives", []):
            kind = item.get("type")
            if kind == "tapered_cylinder":
                prims.append(TaperedCylinder(
                    center_xy=tuple(item["center_xy"]),
                    z_bottom=float(item["z_bottom"]),
                    z_top=float(item["z_top"]),
                    radius_bottom=float(item["radius_bottom"]),
                    radius_top=float(item["radius_top"]),
                    name=item.get("name", "tower"),
                ))
            elif kind == "convex_polyhedron":
                prims.append(ConvexPolyhedron(np.array(item["vertices"], dtype=float), name=item.get("name", "")))
            else:
                raise StructureError(f"unknown primitive type {kind!r}")
        return cls(tuple(prims))


def line_of_sight(model, a, b):
    """True iff the open segment a-b does not pass through any primitive's interior."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return bool(model.segments_clear(a[None, :], b[None, :])[0])


# ---------------------------------------------------------------- I/O


def load_point_cloud(path):
    """Read an ASCII ``x y z`` file. Blank lines and ``#`` comments are skipped."""
    path = Path(path)
    if not path.is_file():
        raise StructureError(f"point cloud file not found: {path}")
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 3:
                raise StructureError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
            try:
                xyz = [float(v) for v in parts]
            except ValueError:
                raise StructureError(f"{path}:{lineno}: non-numeric value in {text!r}") from None
            if not all(math.isfinite(v) for v in xyz):
                raise StructureError(f"{path}:{lineno}: non-finite coordinate")
            rows.append(xyz)
    if not rows:
        raise StructureError(f"{path}: point cloud is empty")
    return PointCloud(np.array(rows))


def save_point_cloud(cloud, path):
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"# format_version={XYZ_FORMAT_VERSION}\n")
        for x, y, z in cloud.points:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def height_bounds(cloud):
    if len(cloud) == 0:
        raise StructureError("height_bounds of an empty cloud")
    z = cloud.points[:, 2]
    return float(z.min()), float(z.max())


# ---------------------------------------------------------------- turbine


def _grid(length, spacing):
    n = max(int(math.ceil(length / spacing - 1e-9)), 1)
    return np.linspace(0.0, length, n + 1)


def _sample_tower(tower, spacing):
    h = tower.z_top - tower.z_bottom
    slant = math.hypot(h, tower.radius_bottom - tower.radius_top)
    pts = []
    for frac in _grid(slant, spacing) / slant:
        z = tower.z_bottom + frac * h
        r = float(tower.radius_at(z))
        n = max(int(math.ceil(2.0 * math.pi * r / spacing)), 3)
        theta = np.arange(n) * (2.0 * math.pi / n)
        pts.append(np.column_stack([
            tower.center_xy[0] + r * np.cos(theta),
            tower.center_xy[1] + r * np.sin(theta),
            np.full(n, z),
        ]))
    return np.vstack(pts)


def _sample_quad(p00, p10, p01, p11, spacing):
    """Sample a planar quadrilateral bilinearly; p00-p10 and p01-p11 are opposite edges."""
    len_u = max(np.linalg.norm(p10 - p00), np.linalg.norm(p11 - p01))
    len_v = max(np.linalg.norm(p01 - p00), np.linalg.norm(p11 - p10))
    u = _grid(len_u, spacing) / len_u if len_u > 0 else np.array([0.0])
    v = _grid(len_v, spacing) / len_v if len_v > 0 else np.array([0.0])
    uu, vv = np.meshgrid(u, v, indexing="ij")
    uu, vv = uu.ravel()[:, None], vv.ravel()[:, None]
    return (1 - uu) * (1 - vv) * p00 + uu * (1 - vv) * p10 + (1 - uu) * vv * p01 + uu * vv * p11


def _box_faces(corners):
    """Faces of a hexahedron given as corners[i][j][k] (i, j, k in {0, 1})."""
    c = corners
    return [
        (c[0][0][0], c[1][0][0], c[0][1][0], c[1][1][0]),
        (c[0][0][1], c[1][0][1], c[0][1][1], c[1][1][1]),
        (c[0][0][0], c[1][0][0], c[0][0][1], c[1][0][1]),
        (c[0][1][0], c[1][1][0], c[0][1][1], c[1][1][1]),
        (c[0][0][0], c[0][1][0], c[0][0][1], c[0][1][1]),
        (c[1][0][0], c[1][1][0], c[1][0][1], c[1][1][1]),
    ]


def _blade_corners(spec, hub_center, azimuth_deg):
    az = math.radians(azimuth_deg)
    axis = np.array([0.0, math.cos(az), math.sin(az)])
    chord_dir = np.array([1.0, 0.0, 0.0])
    thick_dir = np.cross(axis, chord_dir)
    hub_radius = 0.5 * spec.blade_root_chord
    root = hub_center + hub_radius * axis
    tip = root + spec.blade_length * axis
    corners = [[[None, None], [None, None]], [[None, None], [None, None]]]
    for i, (center, chord) in enumerate(((root, spec.blade_root_chord), (tip, spec.blade_tip_chord))):
        thickness = 0.1 * chord
        for j, sc in enumerate((-0.5, 0.5)):
            for k, st in enumerate((-0.5, 0.5)):
                corners[i][j][k] = center + sc * chord * chord_dir + st * thickness * thick_dir
    return corners


def build_turbine_solid(spec):
    spec.validate()
    bx, by = (float(v) for v in spec.base_xy)
    tower = TaperedCylinder(
        center_xy=(bx, by),
        z_bottom=0.0,
        z_top=spec.tower_height,
        radius_bottom=0.5 * spec.tower_base_diameter,
        radius_top=0.5 * spec.tower_top_diameter,
        name="tower",
    )
    size = max(spec.tower_top_diameter, spec.blade_root_chord)
    x0, x1 = -0.25 * spec.hub_length, 0.75 * spec.hub_length
    zc = spec.tower_height
    nacelle_corners = [[[np.array([bx + x, by + y, z]) for z in (zc - size / 2, zc + size / 2)]
                        for y in (-size / 2, size / 2)] for x in (x0, x1)]
    nacelle = ConvexPolyhedron(np.array([c for a in nacelle_corners for b in a for c in b]), name="nacelle")
    hub_center = np.array([bx + x1, by, zc])
    blades = []
    blade_corners = []
    for n, az in enumerate(spec.rotor_azimuth_angles):
        corners = _blade_corners(spec, hub_center, az)
        blade_corners.append(corners)
        blades.append(ConvexPolyhedron(np.array([c for a in corners for b in a for c in b]), name=f"blade{n}"))
    solid = SolidModel((tower, nacelle, *blades))
    return solid, nacelle_corners, blade_corners


def generate_turbine(spec=None):
    """Surface-sample the turbine; returns ``(PointCloud, SolidModel)``."""
    spec = spec or TurbineSpec()
    solid, nacelle_corners, blade_corners = build_turbine_solid(spec)
    sp = spec.surface_sample_spacing
    parts = [(0, _sample_tower(solid.primitives[0], sp))]
    parts.append((1, np.vstack([_sample_quad(*f, sp) for f in _box_faces(nacelle_corners)])))
    for n, corners in enumerate(blade_corners):
        parts.append((2 + n, np.vstack([_sample_quad(*f, sp) for f in _box_faces(corners)])))

    kept = []
    for idx, pts in parts:
        pts = np.unique(np.round(pts, 12), axis=0)
        mask = np.ones(len(pts), dtype=bool)
        for j, prim in enumerate(solid.primitives):
            if j != idx:
                mask &= ~prim.contains(pts, margin=1e-9)
        kept.append(pts[mask])
    points = np.vstack(kept)
    return PointCloud(points), solid
