"""Collaborative coverage path planner.

Pipeline: plane spacing -> horizontal slicing -> branch clustering -> branch
linking across slices -> offset contours -> agent assignment -> yaw references
-> time parameterisation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .rotations import wrap_angle

PLAN_FORMAT_VERSION = 1
PLAN_CSV_HEADER = ["t", "agent", "x", "y", "z", "yaw"]

_TAU = 2.0 * math.pi


class PlanningError(ValueError):
    """Planner failure; ``stage`` names the pipeline step that raised it."""

    def __init__(self, stage, message):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.message = message


@dataclass(frozen=True)
class PlannerParams:
    z_start: float
    z_end: float
    n_agents: int = 1
    omega: float = 7.0
    alpha: float = 90.0
    beta: float = 1.0
    r_max: float = 20.0
    v_d: float = 1.0
    t_s: float = 0.01
    d_s: float = 5.0
    cluster_epsilon: float | None = None  # None: 3x median nearest-neighbour spacing
    contour_spacing: float = 0.25
    min_segment: float = 1.0

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise PlanningError("params", msg)

        need(isinstance(self.n_agents, int) and self.n_agents >= 1, "n_agents must be an integer >= 1")
        need(0.0 < self.omega < self.r_max, "require 0 < omega < r_max")
        need(0.0 < self.alpha < 180.0, "alpha must lie in (0, 180) degrees")
        need(self.beta >= 1.0, "beta must be >= 1")
        need(self.v_d > 0.0 and self.t_s > 0.0, "v_d and t_s must be > 0")
        need(self.z_start < self.z_end, "z_start must be < z_end")
        need(self.d_s > 0.0, "d_s must be > 0")
        need(self.cluster_epsilon is None or self.cluster_epsilon > 0.0, "cluster_epsilon must be > 0")
        need(self.contour_spacing > 0.0 and self.min_segment > 0.0, "contour_spacing and min_segment must be > 0")

    @property
    def plane_spacing(self):
        return plane_spacing(self.omega, self.alpha, self.beta)


@dataclass(frozen=True)
class Slice:
    index: int
    level: float
    points: np.ndarray  # (N, 3)


@dataclass(frozen=True)
class Branch:
    slice_index: int
    slice_level: float
    points: np.ndarray  # (N, 2) horizontal projections
    centroid: np.ndarray
    branch_id: int | None = None


@dataclass
class AgentPath:
    agent_id: int
    t: np.ndarray
    positions: np.ndarray
    yaw: np.ndarray
    slice_index: np.ndarray | None = None

    @property
    def duration(self):
        return float(self.t[-1] - self.t[0]) if len(self.t) else 0.0

    @property
    def length(self):
        return float(np.linalg.norm(np.diff(self.positions, axis=0), axis=1).sum())


@dataclass
class MissionPlan:
    params: PlannerParams
    paths: list
    assignment: list = field(default_factory=list)
    slice_levels: list = field(default_factory=list)

    def summary(self):
        return {
            "format_version": PLAN_FORMAT_VERSION,
            "n_agents": self.params.n_agents,
            "plane_spacing": self.params.plane_spacing,
            "slice_count": len(self.slice_levels),
            "slice_levels": [float(v) for v in self.slice_levels],
            "branch_counts": [len(row["branches"]) for row in self.assignment],
            "agents": [
                {"agent": p.agent_id, "duration": p.duration, "path_length": p.length, "waypoints": len(p.t)}
                for p in self.paths
            ],
        }


# ---------------------------------------------------------------- spacing / slicing


def plane_spacing(omega, alpha, beta):
    """Vertical distance between inspection planes: (omega / beta) * tan(alpha / 2)."""
    if not 0.0 < alpha < 180.0:
        raise PlanningError("plane_spacing", f"alpha must be in (0, 180) degrees, got {alpha}")
    if beta < 1.0:
        raise PlanningError("plane_spacing", f"beta must be >= 1, got {beta}")
    if omega <= 0.0:
        raise PlanningError("plane_spacing", f"omega must be > 0, got {omega}")
    return (omega / beta) * math.tan(math.radians(alpha) / 2.0)


def footprint_overlap(omega, alpha, beta):
    """Fraction of a camera footprint shared with the next plane's footprint.

    Intersects the vertical footprint intervals of two consecutive planes at
    standoff ``omega``; analytically this is ``1 - 1/(2 beta)``.
    """
    half = omega * math.tan(math.radians(alpha) / 2.0)
    step = plane_spacing(omega, alpha, beta)
    lo = max(-half, step - half)
    hi = min(half, step + half)
    return max(hi - lo, 0.0) / (2.0 * half)


def slice_levels(z_start, z_end, spacing):
    count = int(math.floor((z_end - z_start) / spacing + 1e-9)) + 1
    return [z_start + i * spacing for i in range(count)]


def slice_structure(cloud, spacing, z_start, z_end):
    """Cut the cloud into bands of half-thickness ``spacing / 2`` around each level."""
    if spacing <= 0.0:
        raise PlanningError("slice_structure", "plane spacing must be > 0")
    if z_start > z_end:
        raise PlanningError("slice_structure", "z_start must be <= z_end")
    pts = cloud.points
    z = pts[:, 2]
    half = 0.5 * spacing
    slices = []
    for i, level in enumerate(slice_levels(z_start, z_end, spacing)):
        lo, hi = level - half, level + half
        # half-open bands so a point on a shared boundary lands in exactly one slice
        mask = (z >= lo) & (z < hi)
        if i == 0:
            mask |= np.isclose(z, lo)
        slices.append(Slice(i, level, pts[mask]))
    if not any(len(s.points) for s in slices):
        raise PlanningError("slice_structure", f"no structure points between z={z_start} and z={z_end}")
    return slices


def default_cluster_epsilon(cloud):
    dist, _ = cKDTree(cloud.points).query(cloud.points, k=2)
    return 3.0 * float(np.median(dist[:, 1]))


# ---------------------------------------------------------------- branches


def _branch_order(branches, overall):
    def key(b):
        d = b.centroid - overall
        return (math.atan2(d[1], d[0]), math.hypot(d[0], d[1]), float(b.points[0, 0]), float(b.points[0, 1]))

    return sorted(branches, key=key)


def cluster_branches(slc, cluster_epsilon):
    """Single-linkage components of the slice's xy projection under ``cluster_epsilon``."""
    xy = np.ascontiguousarray(slc.points[:, :2])
    if len(xy) == 0:
        return []
    pairs = cKDTree(xy).query_pairs(cluster_epsilon, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(len(xy), len(xy)))
    n_comp, labels = connected_components(graph, directed=False)
    branches = []
    for c in range(n_comp):
        members = xy[labels == c]
        branches.append(Branch(slc.index, slc.level, members, members.mean(axis=0)))
    return _branch_order(branches, xy.mean(axis=0))


def link_branches(slices, gate):
    """Give each branch a persistent id.

    ``slices`` is an ordered list of branch lists (one per slice, possibly
    empty). A branch inherits the id of the nearest-centroid branch in the
    previous slice when that centroid lies within ``gate`` horizontally;
    matching is one-to-one, closest pairs first. Otherwise a fresh id is issued.
    """
    next_id = 0
    linked = []
    prev = []
    for branches in slices:
        ids = [None] * len(branches)
        candidates = []
        for i, b in enumerate(branches):
            for j, p in enumerate(prev):
                d = float(np.linalg.norm(b.centroid - p.centroid))
                if d <= gate:
                    candidates.append((d, i, j))
        used_prev = set()
        for d, i, j in sorted(candidates):
            if ids[i] is None and j not in used_prev:
                ids[i] = prev[j].branch_id
                used_prev.add(j)
        for i in range(len(branches)):
            if ids[i] is None:
                ids[i] = next_id
                next_id += 1
        current = [replace(b, branch_id=bid) for b, bid in zip(branches, ids)]
        linked.append(current)
        prev = current
    return linked


# ---------------------------------------------------------------- contours


def _convex_hull(xy):
    """Andrew's monotone chain; CCW vertices without collinear points."""
    pts = np.unique(xy, axis=0)
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0.0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0.0:
            upper.pop()
        upper.append(p)
    hull = np.array(lower[:-1] + upper[:-1])
    return hull


class Contour:
    """Closed CCW loop at distance ``omega`` around a branch's convex hull.

    Arc length ``s`` runs from 0 at the loop point due +x of the branch
    centroid. Positions are evaluated exactly on the dilated hull (straight
    offset edges joined by arcs of radius ``omega``).
    """

    def __init__(self, branch, omega, spacing):
        self.branch = branch
        self.omega = float(omega)
        self.spacing = float(spacing)
        self.center = np.asarray(branch.centroid, dtype=float)
        hull = _convex_hull(np.asarray(branch.points, dtype=float))
        self.hull = hull
        self._build_pieces(hull)
        self._s0 = self._start_offset()
        n = max(int(math.ceil(self.length / spacing)), 8)
        self.sample_s = np.linspace(0.0, self.length, n + 1)
        self.samples = self.point_at(self.sample_s[:-1])
        tree = cKDTree(np.asarray(branch.points, dtype=float))
        yaw = np.array([_yaw_with_tree(p, tree) for p in self.samples])
        yaw = np.unwrap(np.append(yaw, yaw[0]))
        self.sample_yaw = yaw

    def _build_pieces(self, hull):
        omega = self.omega
        # piece rows: kind (0 arc, 1 edge), start s, length, and geometry
        kinds, lengths, geom = [], [], []
        m = len(hull)
        if m == 1:
            kinds.append(0)
            lengths.append(_TAU * omega)
            geom.append((hull[0][0], hull[0][1], 0.0, _TAU))
        else:
            normals = []
            for i in range(m):
                e = hull[(i + 1) % m] - hull[i]
                e = e / np.linalg.norm(e)
                normals.append(np.array([e[1], -e[0]]))
            for i in range(m):
                n_prev = normals[i - 1]
                n_cur = normals[i]
                a0 = math.atan2(n_prev[1], n_prev[0])
                sweep = (math.atan2(n_cur[1], n_cur[0]) - a0) % _TAU
                if sweep > 1e-12:
                    kinds.append(0)
                    lengths.append(omega * sweep)
                    geom.append((hull[i][0], hull[i][1], a0, sweep))
                p0 = hull[i] + omega * n_cur
                p1 = hull[(i + 1) % m] + omega * n_cur
                kinds.append(1)
                lengths.append(float(np.linalg.norm(p1 - p0)))
                geom.append((p0[0], p0[1], p1[0], p1[1]))
        self._kind = np.array(kinds)
        self._len = np.array(lengths)
        self._start = np.concatenate([[0.0], np.cumsum(self._len)[:-1]])
        self._geom = np.array(geom, dtype=float)
        self.length = float(self._len.sum())

    def _raw_point_at(self, s):
        s = np.mod(np.asarray(s, dtype=float), self.length)
        idx = np.clip(np.searchsorted(self._start, s, side="right") - 1, 0, len(self._len) - 1)
        u = s - self._start[idx]
        g = self._geom[idx]
        kind = self._kind[idx]
        with np.errstate(divide="ignore", invalid="ignore"):
            ang = g[:, 2] + u / self.omega
            arc = np.column_stack([g[:, 0] + self.omega * np.cos(ang), g[:, 1] + self.omega * np.sin(ang)])
            frac = np.where(self._len[idx] > 0, u / self._len[idx], 0.0)
            edge = np.column_stack([g[:, 0] + frac * (g[:, 2] - g[:, 0]), g[:, 1] + frac * (g[:, 3] - g[:, 1])])
        return np.where((kind == 0)[:, None], arc, edge)

    def _start_offset(self):
        s = np.linspace(0.0, self.length, 4096, endpoint=False)
        p = self._raw_point_at(s) - self.center
        ang = np.arctan2(p[:, 1], p[:, 0])
        # first sample at or past angle 0 going CCW
        crossings = np.nonzero((ang >= 0.0) & (np.roll(ang, 1) < 0.0))[0]
        if len(crossings) == 0:
            return 0.0
        i = int(crossings[0])
        a0, a1 = ang[i - 1], ang[i]
        s0 = s[i - 1] if i > 0 else s[-1] - self.length
        frac = -a0 / (a1 - a0) if a1 != a0 else 0.0
        return float(s0 + frac * (s[i] - s0)) % self.length

    def point_at(self, s):
        return self._raw_point_at(np.asarray(s, dtype=float) + self._s0)

    def yaw_at(self, s):
        """Yaw reference interpolated shortest-way between contour samples."""
        s = np.mod(np.asarray(s, dtype=float), self.length)
        return np.interp(s, self.sample_s, self.sample_yaw)


def offset_contour(branch, omega, spacing):
    if len(branch.points) == 0:
        raise PlanningError("offset_contour", "empty branch")
    if omega <= 0.0 or spacing <= 0.0:
        raise PlanningError("offset_contour", "omega and spacing must be > 0")
    return Contour(branch, omega, spacing)


def _yaw_with_tree(p, tree):
    dist, idx = tree.query(p)
    if dist <= 0.0:
        raise PlanningError("yaw_reference", "waypoint coincides with a structure point")
    q = tree.data[idx]
    return wrap_angle(math.atan2(q[1] - p[1], q[0] - p[0]))


def yaw_reference(waypoint, branch):
    """Heading from ``waypoint`` towards the nearest branch point, in (-pi, pi]."""
    pts = np.asarray(branch.points, dtype=float)
    if len(pts) == 0:
        raise PlanningError("yaw_reference", "empty branch")
    d = pts - np.asarray(waypoint, dtype=float)[:2]
    dist = np.hypot(d[:, 0], d[:, 1])
    i = int(np.argmin(dist))
    if dist[i] <= 0.0:
        raise PlanningError("yaw_reference", "waypoint coincides with a structure point")
    return wrap_angle(math.atan2(d[i, 1], d[i, 0]))


# ---------------------------------------------------------------- assignment


@dataclass(frozen=True)
class Segment:
    """Arc of a contour traversed from ``s_start`` for ``length`` metres."""

    contour: Contour
    s_start: float
    length: float
    direction: int = 1
    slice_index: int = 0
    level: float = 0.0
    branch_id: int = 0

    def positions(self, u):
        return self.contour.point_at(self.s_start + self.direction * np.asarray(u))

    def yaw(self, u):
        return self.contour.yaw_at(self.s_start + self.direction * np.asarray(u))


def assign_agents(slice_contours, n_agents, min_segment=1.0):
    """Split every slice's contours among agents.

    ``slice_contours`` is an ordered list of ``(slice_index, level, contours)``
    with contours in branch order. Returns ``(per_agent, table)`` where
    ``per_agent[k]`` lists ``(slice_index, level, [Segment, ...])``.

    With at least as many branches as agents, branches go round-robin (by
    branch id) and each is swept as a full loop. With fewer branches, the
    agents on a branch split its loop into equal arcs with evenly spaced
    starts; on odd-numbered visits the arcs are swept clockwise so every agent
    climbs straight up from where it finished.
    """
    per_agent = [[] for _ in range(n_agents)]
    table = []
    visits = {}
    for slice_index, level, contours in slice_contours:
        if not contours:
            continue
        by_id = sorted(contours, key=lambda c: c.branch.branch_id)
        m = len(by_id)
        owners = {}
        if m >= n_agents:
            for rank, c in enumerate(by_id):
                owners[c.branch.branch_id] = [rank % n_agents]
        else:
            for rank, c in enumerate(by_id):
                owners[c.branch.branch_id] = [k for k in range(n_agents) if k % m == rank]

        segments = [[] for _ in range(n_agents)]
        row = {"slice": slice_index, "level": float(level), "branches": []}
        for c in contours:  # branch (angle) order
            bid = c.branch.branch_id
            agents = owners[bid]
            q = len(agents)
            if c.length < q * min_segment:
                raise PlanningError(
                    "assign_agents",
                    f"contour of branch {bid} at z={level:.3f} is {c.length:.3f} m, too short for {q} agents",
                )
            visit = visits.get(bid, 0)
            visits[bid] = visit + 1
            seg_len = c.length / q
            entries = []
            for j, agent in enumerate(agents):
                if q == 1:
                    seg = Segment(c, 0.0, c.length, 1, slice_index, level, bid)
                    entries.append([agent, 0.0, 1.0])
                elif visit % 2 == 0:
                    seg = Segment(c, j * seg_len, seg_len, 1, slice_index, level, bid)
                    entries.append([agent, j / q, (j + 1) / q])
                else:
                    seg = Segment(c, (j + 1) * seg_len, seg_len, -1, slice_index, level, bid)
                    entries.append([agent, (j + 1) / q, j / q])
                segments[agent].append(seg)
            row["branches"].append({"branch_id": int(bid), "agents": agents, "segments": entries})
        for k in range(n_agents):
            if segments[k]:
                per_agent[k].append((slice_index, level, segments[k]))
        table.append(row)
    return per_agent, table


# ---------------------------------------------------------------- timing


@dataclass(frozen=True)
class _Line:
    p0: np.ndarray
    p1: np.ndarray
    slice_index: int

    @property
    def length(self):
        return float(np.linalg.norm(self.p1 - self.p0))

    def positions(self, u):
        frac = np.asarray(u) / self.length if self.length > 0 else np.zeros_like(u)
        return self.p0 + frac[:, None] * (self.p1 - self.p0)


def _segment_endpoints(seg):
    xy0 = seg.positions(np.array([0.0]))[0]
    xy1 = seg.positions(np.array([seg.length]))[0]
    return np.array([xy0[0], xy0[1], seg.level]), np.array([xy1[0], xy1[1], seg.level])


def time_parameterize(agent_segments, v_d, t_s, agent_id=0):
    """Resample an agent's segments at constant speed ``v_d`` every ``t_s`` seconds.

    Slices are joined by a vertical climb and a straight horizontal move
    (zero length when the contours line up). The climb happens at the end of
    the finished segment when the next start lies closer to the branch centre,
    and at the next start otherwise. Yaw is blended across these connectors.
    """
    pieces = []
    here = None
    for slice_index, level, segs in agent_segments:
        for seg in segs:
            start, end = _segment_endpoints(seg)
            if here is not None:
                # climb on whichever side is farther out so the vertical leg keeps clearance
                center = seg.contour.center
                outward = np.hypot(*(start[:2] - center)) > np.hypot(*(here[:2] - center))
                corner = np.array([start[0], start[1], here[2]]) if outward else np.array([here[0], here[1], start[2]])
                for target in (corner, start):
                    if np.linalg.norm(target - here) > 1e-12:
                        pieces.append(_Line(here, target, seg.slice_index))
                        here = target
            pieces.append(seg)
            here = end

    if not pieces:
        raise PlanningError("time_parameterize", "agent has no segments")
    lengths = np.array([p.length for p in pieces])
    starts = np.concatenate([[0.0], np.cumsum(lengths)[:-1]])
    total = float(lengths.sum())
    step = v_d * t_s
    k_max = int(math.floor(total / step + 1e-9))
    s = np.arange(k_max + 1) * step
    if total - s[-1] > 1e-9:
        s = np.append(s, total)
    t = np.arange(len(s)) * t_s

    positions = np.empty((len(s), 3))
    yaw = np.full(len(s), np.nan)
    slice_idx = np.empty(len(s), dtype=int)
    piece_of = np.clip(np.searchsorted(starts, s, side="right") - 1, 0, len(pieces) - 1)
    # zero-length pieces never own samples except at the very end
    for i, piece in enumerate(pieces):
        mask = piece_of == i
        if not mask.any():
            continue
        u = np.clip(s[mask] - starts[i], 0.0, piece.length)
        if isinstance(piece, Segment):
            xy = piece.positions(u)
            positions[mask] = np.column_stack([xy, np.full(len(u), piece.level)])
            yaw[mask] = piece.yaw(u)
        else:
            positions[mask] = piece.positions(u)
        slice_idx[mask] = piece.slice_index

    known = ~np.isnan(yaw)
    if known.any():
        # blend through connectors in unwrapped space, shortest way between anchors
        ks = np.nonzero(known)[0]
        yaw_u = yaw.copy()
        yaw_u[ks] = _unwrap_sequence(yaw[ks])
        yaw = np.interp(s, s[ks], yaw_u[ks])
    else:
        yaw = np.zeros(len(s))
    yaw = np.array([wrap_angle(a) for a in yaw])
    return AgentPath(agent_id, t, positions, yaw, slice_idx)


def _unwrap_sequence(a):
    out = np.empty_like(a)
    out[0] = a[0]
    for i in range(1, len(a)):
        out[i] = out[i - 1] + wrap_angle(a[i] - out[i - 1])
    return out


# ---------------------------------------------------------------- pipeline


def plan_mission(cloud, solid, params):
    """Run the full coverage pipeline and return a :class:`MissionPlan`."""
    params.validate()
    spacing = params.plane_spacing
    eps = params.cluster_epsilon or default_cluster_epsilon(cloud)
    slices = slice_structure(cloud, spacing, params.z_start, params.z_end)
    clustered = [cluster_branches(s, eps) if len(s.points) else [] for s in slices]
    linked = link_branches(clustered, 2.0 * spacing)
    slice_contours = []
    for slc, branches in zip(slices, linked):
        contours = [offset_contour(b, params.omega, params.contour_spacing) for b in branches]
        slice_contours.append((slc.index, slc.level, contours))
    per_agent, table = assign_agents(slice_contours, params.n_agents, params.min_segment)
    paths = []
    for k, segs in enumerate(per_agent):
        if not segs:
            raise PlanningError("assign_agents", f"agent {k} received no segments")
        paths.append(time_parameterize(segs, params.v_d, params.t_s, agent_id=k))
    return MissionPlan(params, paths, table, [s.level for s in slices])


# ---------------------------------------------------------------- CSV


def write_agent_csv(path_obj, filename):
    with open(filename, "w", newline="") as fh:
        fh.write(f"# format_version={PLAN_FORMAT_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLAN_CSV_HEADER)
        for t, (x, y, z), yaw in zip(path_obj.t, path_obj.positions, path_obj.yaw):
            w.writerow([f"{t:.6f}", path_obj.agent_id, f"{x:.6f}", f"{y:.6f}", f"{z:.6f}", f"{yaw:.6f}"])


def read_agent_csv(filename):
    rows = []
    agent = None
    header_seen = False
    with open(filename, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split(",")
            if not header_seen:
                if fields != PLAN_CSV_HEADER:
                    raise PlanningError("read_plan", f"{filename}:{lineno}: bad header {text!r}")
                header_seen = True
                continue
            if len(fields) != len(PLAN_CSV_HEADER):
                raise PlanningError("read_plan", f"{filename}:{lineno}: expected 6 fields")
            try:
                t, a, x, y, z, yaw = float(fields[0]), int(fields[1]), *map(float, fields[2:])
            except ValueError:
                raise PlanningError("read_plan", f"{filename}:{lineno}: malformed value") from None
            if agent is None:
                agent = a
            elif a != agent:
                raise PlanningError("read_plan", f"{filename}:{lineno}: mixed agent ids")
            rows.append((t, x, y, z, yaw))
    if not rows:
        raise PlanningError("read_plan", f"{filename}: no waypoints")
    arr = np.array(rows)
    return AgentPath(agent, arr[:, 0], arr[:, 1:4], arr[:, 4])
