"""Closed-loop execution of a mission plan and its evaluation.

Every agent runs truth dynamics, IMU/UWB sensing, the error-state estimator and
the position controller at a common tick; agents advance in lockstep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .control import LinearMPC, MpcParams, PDController
from .localization.eskf import Estimator
from .localization.models import HeadingMeasurement, ImuNoise, NavState, UwbNoiseModel, DEFAULT_INITIAL_SIGMAS
from .localization.ranging import RangeScheduler, simulate_ranging
from .localization.trilateration import TrilaterationError, trilaterate
from .rotations import quat_from_euler, quat_to_matrix, quat_yaw, wrap_angle
from .vehicle import (ImuBiases, VehicleParams, VehicleState, WindModel, sample_imu, sample_wind,
                      step_dynamics, walk_biases)


class MissionError(RuntimeError):
    pass


class EstimatorDivergence(MissionError):
    def __init__(self, agent_id, t, error):
        super().__init__(f"agent {agent_id}: estimator diverged at t={t:.2f} s "
                         f"(position error {error:.2f} m)")
        self.agent_id = agent_id
        self.t = t
        self.error = error


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    dt: float = 0.01
    warmup: float = 10.0
    imu_noise: ImuNoise = ImuNoise()
    initial_biases: bool = True       # draw true IMU biases from the filter prior
    heading_updates: bool = True
    heading_rate: float = 10.0
    heading_std_deg: float = 2.0
    filter_range_std: float | None = None  # None: follow the UWB model (floored at 2 cm)
    divergence_limit: float = 20.0
    buffer_horizon: float = 0.5
    controller: str = "mpc"

    @classmethod
    def noise_free(cls, **kw):
        base = dict(imu_noise=ImuNoise(0.0, 0.0, 0.0, 0.0), initial_biases=False, heading_std_deg=0.0)
        base.update(kw)
        return cls(**base)


@dataclass
class SimTrace:
    """Per-agent time series on the shared simulation clock (one row per tick)."""

    agent_id: int
    t: np.ndarray
    slice_index: np.ndarray
    ref_position: np.ndarray
    ref_yaw: np.ndarray
    true_position: np.ndarray
    true_velocity: np.ndarray
    true_orientation: np.ndarray
    est_position: np.ndarray
    est_velocity: np.ndarray
    est_orientation: np.ndarray
    est_position_std: np.ndarray
    cmd_orientation: np.ndarray
    thrust: np.ndarray

    def __len__(self):
        return len(self.t)


# ---------------------------------------------------------------- simulation


def attribute_slices(z, levels):
    """Index of the nearest slice level for each height (plans read back from CSV carry no slice column)."""
    levels = np.asarray(levels, dtype=float)
    if len(levels) == 0:
        return np.full(len(z), -1, dtype=int)
    return np.argmin(np.abs(np.asarray(z, dtype=float)[:, None] - levels[None, :]), axis=1)


def _resample_path(path, dt, levels=()):
    """Reference arrays on the simulation tick (plans may use another T_s)."""
    t_path = np.asarray(path.t, dtype=float) - path.t[0]
    n = int(math.floor(t_path[-1] / dt + 1e-9)) + 1
    t = np.arange(n) * dt
    if len(t_path) == n and np.allclose(t_path, t, atol=1e-9):
        pos = np.asarray(path.positions, dtype=float)
        yaw = np.asarray(path.yaw, dtype=float)
        slc = path.slice_index
    else:
        pos = np.column_stack([np.interp(t, t_path, path.positions[:, i]) for i in range(3)])
        yaw = np.interp(t, t_path, np.unwrap(path.yaw))
        slc = None if path.slice_index is None else \
            np.asarray(path.slice_index)[np.clip(np.searchsorted(t_path, t, side="right") - 1, 0, len(t_path) - 1)]
    if slc is None:
        slc = attribute_slices(pos[:, 2], levels)
    return pos, yaw, np.asarray(slc, dtype=int)


class _AgentSim:
    def __init__(self, agent_id, path, levels, anchors, solid, uwb, wind, vehicle, mpc, sim, seed_seq, n_ticks):
        self.agent_id = agent_id
        self.anchors = anchors
        self.solid = solid
        self.uwb = uwb
        self.wind_model = wind
        self.vehicle = vehicle
        self.sim = sim
        rngs = [np.random.default_rng(s) for s in seed_seq.spawn(5)]
        self.rng_init, self.rng_imu, self.rng_uwb, self.rng_wind, self.rng_heading = rngs

        pos, yaw, slc = _resample_path(path, sim.dt, levels)
        self.ref_pos, self.ref_yaw, self.ref_slice = pos, yaw, slc
        self.ref_vel = np.gradient(pos, sim.dt, axis=0) if len(pos) > 1 else np.zeros_like(pos)
        self.horizon = mpc.steps
        # pad so every preview window is full: hold the final waypoint
        pad = self.horizon + 1
        self.pad_pos = np.vstack([pos, np.repeat(pos[-1:], pad, axis=0)])
        self.pad_vel = np.vstack([self.ref_vel, np.zeros((pad, 3))])
        self.pad_vel[len(pos) - 1] = 0.0

        self.controller = LinearMPC(mpc, vehicle) if sim.controller == "mpc" else PDController(params=mpc, vehicle=vehicle)
        start_yaw = float(yaw[0])
        self.truth = VehicleState.hover(pos[0], quat_from_euler(0.0, 0.0, start_yaw), -sim.warmup)
        sig = DEFAULT_INITIAL_SIGMAS
        if sim.initial_biases:
            self.biases = ImuBiases(sig["accel_bias"] * self.rng_init.standard_normal(3),
                                    sig["gyro_bias"] * self.rng_init.standard_normal(3))
        else:
            self.biases = ImuBiases()
        self.gust = np.zeros(3)
        self.wind = np.asarray(wind.mean_wind, dtype=float)
        self.gust_scale = 1.0
        self.scheduler = RangeScheduler(anchors.ids, uwb, sim.dt)
        self.heading_every = max(int(round(1.0 / (sim.heading_rate * sim.dt))), 1)
        self.pending = []
        range_std = sim.filter_range_std
        if range_std is None:
            range_std = max(uwb.range_noise_std, 0.02)
        self.estimator = Estimator(self._initial_estimate(start_yaw), anchors, ImuNoise(), range_std,
                                   horizon=sim.buffer_horizon)

        self.n = n_ticks
        self.rec = {
            "t": np.empty(n_ticks), "slice_index": np.empty(n_ticks, dtype=int),
            "ref_position": np.empty((n_ticks, 3)), "ref_yaw": np.empty(n_ticks),
            "true_position": np.empty((n_ticks, 3)), "true_velocity": np.empty((n_ticks, 3)),
            "true_orientation": np.empty((n_ticks, 4)), "est_position": np.empty((n_ticks, 3)),
            "est_velocity": np.empty((n_ticks, 3)), "est_orientation": np.empty((n_ticks, 4)),
            "est_position_std": np.empty((n_ticks, 3)), "cmd_orientation": np.empty((n_ticks, 4)),
            "thrust": np.empty(n_ticks),
        }

    def _initial_estimate(self, yaw):
        t0 = self.truth.timestamp
        meas = []
        for aid in self.anchors.ids:
            m = simulate_ranging(aid, self.anchors, self.truth.position, self.solid, self.uwb, self.rng_uwb, t0)
            if m is not None:
                meas.append(m)
        try:
            fix = trilaterate(meas, self.anchors).position
        except TrilaterationError as exc:
            raise MissionError(f"agent {self.agent_id}: cannot initialise position: {exc}") from exc
        yaw_meas = wrap_angle(yaw + math.radians(self.sim.heading_std_deg) * self.rng_heading.standard_normal())
        return NavState.initial(fix, yaw=yaw_meas, timestamp=t0)

    def tick(self, k, record_index):
        sim = self.sim
        t = self.truth.timestamp
        if k > 0:
            self.biases = walk_biases(self.biases, sim.imu_noise, sim.dt, self.rng_imu)
            imu = sample_imu(self.truth, self.biases, sim.imu_noise, sim.dt, self.rng_imu)
            self.estimator.propagate(imu)

        for aid in self.scheduler.due(k):
            m = simulate_ranging(aid, self.anchors, self.truth.position, self.solid, self.uwb, self.rng_uwb, t)
            if m is not None:
                self.pending.append(m)
        if self.pending:
            ready = [m for m in self.pending if m.delivered_at <= t + 1e-9]
            if ready:
                self.pending = [m for m in self.pending if m.delivered_at > t + 1e-9]
                for m in ready:
                    self.estimator.correct_range(m)
        if sim.heading_updates and k % self.heading_every == 0:
            yaw = quat_yaw(self.truth.orientation)
            yaw += math.radians(sim.heading_std_deg) * self.rng_heading.standard_normal()
            std = math.radians(max(sim.heading_std_deg, 0.5))
            self.estimator.correct_heading(HeadingMeasurement(wrap_angle(yaw), t, std))

        est = self.estimator.state
        err = float(np.linalg.norm(est.position - self.truth.position))
        if err > sim.divergence_limit:
            raise EstimatorDivergence(self.agent_id, t, err)

        i = min(max(record_index, 0), len(self.ref_pos) - 1)
        if record_index >= 0:
            window = slice(i + 1, i + 1 + self.horizon)
            preview_pos, preview_vel = self.pad_pos[window], self.pad_vel[window]
        else:
            # warm-up: hold the first waypoint until the mission clock reaches zero
            idx = record_index + 1 + np.arange(self.horizon)
            preview_pos = self.pad_pos[np.maximum(idx, 0)]
            preview_vel = self.pad_vel[np.maximum(idx, 0)]
            preview_vel[idx < 0] = 0.0
        cmd = self.controller.command(est, preview_pos, float(self.ref_yaw[i]), preview_vel)

        if record_index >= 0:
            r = self.rec
            j = record_index
            r["t"][j] = t
            r["slice_index"][j] = self.ref_slice[i]
            r["ref_position"][j] = self.ref_pos[i]
            r["ref_yaw"][j] = self.ref_yaw[i]
            r["true_position"][j] = self.truth.position
            r["true_velocity"][j] = self.truth.velocity
            r["true_orientation"][j] = self.truth.orientation
            r["est_position"][j] = est.position
            r["est_velocity"][j] = est.velocity
            r["est_orientation"][j] = est.orientation
            r["est_position_std"][j] = np.sqrt(np.diag(est.covariance)[0:3])
            r["cmd_orientation"][j] = cmd.attitude_reference
            r["thrust"][j] = cmd.thrust_reference

        if self.wind_model.turbulence_radius > 0.0 and k % 10 == 0 and self.solid is not None:
            near = self.solid.distance(self.truth.position)[0] <= self.wind_model.turbulence_radius
            self.gust_scale = self.wind_model.turbulence_gain if near else 1.0
        self.wind, self.gust = sample_wind(self.wind_model, self.gust, sim.dt, self.rng_wind, self.gust_scale)
        self.truth = step_dynamics(self.truth, cmd, self.wind, sim.dt, self.vehicle)
        # keep the clock on the tick grid
        self.truth = VehicleState(self.truth.position, self.truth.velocity, self.truth.orientation,
                                  self.truth.angular_rate, (k + 1) * sim.dt - sim.warmup, self.truth.acceleration)

    def trace(self):
        return SimTrace(self.agent_id, **self.rec)


def run_mission(plan, anchors, solid=None, uwb=UwbNoiseModel(), wind=WindModel(), vehicle=VehicleParams(),
                mpc=None, sim=SimConfig()):
    """Fly every agent of ``plan`` in closed loop; returns one SimTrace per agent.

    Each agent starts hovering at its first waypoint and spends ``sim.warmup``
    seconds there before the reference starts moving at t = 0. Agents whose
    paths end early keep holding their last waypoint until the longest path
    finishes, so all traces share one timeline.
    """
    if mpc is None:
        mpc = MpcParams(t_s=sim.dt)
    if abs(mpc.t_s - sim.dt) > 1e-12:
        raise MissionError("controller sampling time must equal the simulation tick")
    durations = [p.t[-1] - p.t[0] for p in plan.paths]
    n_ticks = int(math.floor(max(durations) / sim.dt + 1e-9)) + 1
    warm = int(round(sim.warmup / sim.dt))
    seeds = np.random.SeedSequence(sim.seed).spawn(len(plan.paths))
    agents = [_AgentSim(p.agent_id, p, plan.slice_levels, anchors, solid, uwb, wind, vehicle, mpc, sim, seeds[i], n_ticks)
              for i, p in enumerate(plan.paths)]
    for k in range(warm + n_ticks):
        for a in agents:
            a.tick(k, k - warm)
    return [a.trace() for a in agents]


# ---------------------------------------------------------------- metrics


def tracking_rmse(trace, against="reference"):
    """3D RMS position error of the true trajectory against the reference or the estimate."""
    if len(trace) == 0:
        raise MissionError("empty trace")
    other = trace.ref_position if against == "reference" else trace.est_position
    if against not in ("reference", "estimate"):
        raise ValueError(f"against must be 'reference' or 'estimate', got {against!r}")
    err = trace.true_position - other
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


@dataclass
class SafetyAudit:
    min_inter_agent_distance: float | None
    min_structure_distance: float
    violations: list = field(default_factory=list)


def _runs(mask):
    """(start, stop) index pairs of consecutive True runs."""
    if not mask.any():
        return []
    edges = np.diff(np.concatenate([[0], mask.astype(int), [0]]))
    return list(zip(np.nonzero(edges == 1)[0], np.nonzero(edges == -1)[0]))


def safety_audit(traces, d_s, solid, omega):
    """Inter-agent and agent-structure clearance over the shared timeline.

    Each contiguous stretch below a threshold is one violation entry carrying
    its start/end time and the minimum value reached.
    """
    if not traces:
        raise MissionError("safety audit needs at least one trace")
    t0 = traces[0].t
    for tr in traces[1:]:
        if len(tr.t) != len(t0) or not np.allclose(tr.t, t0, atol=1e-9):
            raise MissionError("traces do not share a timeline")
    violations = []
    min_pair = None
    for a in range(len(traces)):
        for b in range(a + 1, len(traces)):
            d = np.linalg.norm(traces[a].true_position - traces[b].true_position, axis=1)
            m = float(d.min())
            min_pair = m if min_pair is None else min(min_pair, m)
            for s, e in _runs(d < d_s):
                violations.append({"t_start": float(t0[s]), "t_end": float(t0[e - 1]), "kind": "inter_agent",
                                   "agents": [int(traces[a].agent_id), int(traces[b].agent_id)],
                                   "value": float(d[s:e].min())})
    min_struct = math.inf
    if solid is not None and solid.primitives:
        for tr in traces:
            d = solid.distance(tr.true_position)
            min_struct = min(min_struct, float(d.min()))
            for s, e in _runs(d < 0.5 * omega):
                violations.append({"t_start": float(tr.t[s]), "t_end": float(tr.t[e - 1]), "kind": "structure",
                                   "agents": [int(tr.agent_id)], "value": float(d[s:e].min())})
    violations.sort(key=lambda v: (v["t_start"], v["kind"], v["agents"]))
    return SafetyAudit(min_pair, min_struct, violations)


@dataclass
class CoverageReport:
    point_indices: np.ndarray  # indices into the cloud of the points inside the band
    view_count: np.ndarray     # per band point
    covered_fraction: float
    overlap_fraction: float
    uncovered: np.ndarray      # (K, 3) uncovered band points
    overlap_points: int = 0    # band points eligible for overlap

    @property
    def n_points(self):
        return len(self.point_indices)


def coverage_band(z_start, z_end, omega, alpha):
    reach = omega * math.tan(math.radians(alpha) / 2.0)
    return z_start - reach, z_end + reach


def camera_views(position, orientation, points, solid, alpha, r_max):
    """Mask of ``points`` visible from one camera pose (body x axis, cone half-angle alpha/2)."""
    axis = quat_to_matrix(orientation)[:, 0]
    d = points - position
    dist = np.linalg.norm(d, axis=1)
    cos_half = math.cos(math.radians(alpha) / 2.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        inside = (dist <= r_max) & (dist > 0.0) & ((d @ axis) >= cos_half * dist)
    if solid is not None and solid.primitives and inside.any():
        idx = np.nonzero(inside)[0]
        inside[idx] = solid.segments_clear(np.broadcast_to(position, (len(idx), 3)), points[idx])
    return inside


def coverage_report(traces, cloud, solid, alpha, r_max, band, camera_rate=10.0, overlap_band=None):
    """Count how often each band point falls in a camera view along the true trajectories.

    Frames are taken at ``camera_rate`` Hz. A point counts toward overlap when
    frames attributed to at least two different slice levels saw it. The
    overlap fraction is taken over the band points inside ``overlap_band``
    (default: the whole band); points beyond the outermost slices can only
    ever be seen from one of them.
    """
    if not traces:
        raise MissionError("coverage needs at least one trace")
    z = cloud.points[:, 2]
    idx = np.nonzero((z >= band[0]) & (z <= band[1]))[0]
    pts = cloud.points[idx]
    counts = np.zeros(len(idx), dtype=int)
    n_slices = 1 + max(int(tr.slice_index.max()) for tr in traces)
    seen_from = np.zeros((len(idx), max(n_slices, 1)), dtype=bool)
    for tr in traces:
        dt = float(tr.t[1] - tr.t[0]) if len(tr.t) > 1 else 1.0
        stride = max(int(round(1.0 / (camera_rate * dt))), 1)
        for j in range(0, len(tr.t), stride):
            vis = camera_views(tr.true_position[j], tr.true_orientation[j], pts, solid, alpha, r_max)
            counts += vis
            s = int(tr.slice_index[j])
            if s >= 0:
                seen_from[vis, s] = True
    covered = counts >= 1
    lo, hi = band if overlap_band is None else overlap_band
    eligible = (pts[:, 2] >= lo) & (pts[:, 2] <= hi)
    overlapped = (seen_from.sum(axis=1) >= 2) & eligible
    return CoverageReport(
        point_indices=idx,
        view_count=counts,
        covered_fraction=float(covered.sum()) / max(len(idx), 1),
        overlap_fraction=float(overlapped.sum()) / max(int(eligible.sum()), 1),
        uncovered=pts[~covered],
        overlap_points=int(eligible.sum()),
    )
