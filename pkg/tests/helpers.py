"""Small open-loop scenarios shared by the estimator tests and the acceptance suite."""

import math

import numpy as np

from aerial_inspector.localization.eskf import Estimator, position_nees
from aerial_inspector.localization.models import (REFERENCE_ANCHORS, HeadingMeasurement, ImuNoise, NavState,
                                                  UwbNoiseModel)
from aerial_inspector.localization.ranging import RangeScheduler, simulate_ranging
from aerial_inspector.rotations import quat_exp, quat_from_euler, quat_multiply, quat_yaw, wrap_angle
from aerial_inspector.vehicle import ImuBiases, VehicleState, sample_imu


def hover_run(seed, position=(13.0, 0.0, 10.0), duration=30.0, warmup=10.0, uwb=UwbNoiseModel(),
              anchors=REFERENCE_ANCHORS, solid=None, dt=0.01, heading=True):
    """Static truth, filter started from a draw of its own prior.

    Returns ``(nees per tick after warm-up, position errors per tick, estimator)``.
    """
    rng = np.random.default_rng(seed)
    noise = ImuNoise()
    truth = VehicleState.hover(position, quat_from_euler(0.0, 0.0, 0.3))
    prior = NavState.initial(position, yaw=0.3)
    d = np.sqrt(np.diag(prior.covariance)) * rng.standard_normal(15)
    start = NavState(prior.position - d[0:3], -d[3:6], quat_multiply(truth.orientation, quat_exp(-d[6:9])),
                     np.zeros(3), np.zeros(3), prior.covariance)
    biases = ImuBiases(d[9:12], d[12:15])
    est = Estimator(start, anchors)
    sched = RangeScheduler(anchors.ids, uwb, dt)
    nees, errors = [], []
    for k in range(1, int(round(duration / dt)) + 1):
        t = k * dt
        truth = VehicleState(truth.position, truth.velocity, truth.orientation, np.zeros(3), t, np.zeros(3))
        est.propagate(sample_imu(truth, biases, noise, dt, rng))
        for aid in sched.due(k):
            m = simulate_ranging(aid, anchors, truth.position, solid, uwb, rng, t)
            if m is not None:
                est.correct_range(m)
        if heading and k % 10 == 0:
            yaw = wrap_angle(quat_yaw(truth.orientation) + math.radians(2.0) * rng.standard_normal())
            est.correct_heading(HeadingMeasurement(yaw, t, math.radians(2.0)))
        errors.append(float(np.linalg.norm(est.state.position - truth.position)))
        if t > warmup:
            nees.append(position_nees(est.state, truth.position))
    return np.array(nees), np.array(errors), est


def ideal_trace(path, levels=(), agent_id=None, dt=0.01, offset=(0.0, 0.0, 0.0)):
    """SimTrace of a vehicle flying ``path`` perfectly (truth and estimate on the reference, plus ``offset``)."""
    from aerial_inspector.mission import SimTrace, attribute_slices

    t_path = np.asarray(path.t, dtype=float) - path.t[0]
    t = np.arange(int(math.floor(t_path[-1] / dt + 1e-9)) + 1) * dt
    pos = np.column_stack([np.interp(t, t_path, path.positions[:, i]) for i in range(3)])
    yaw = np.interp(t, t_path, np.unwrap(path.yaw))
    if path.slice_index is not None:
        slc = np.asarray(path.slice_index)[np.clip(np.searchsorted(t_path, t, side="right") - 1, 0, len(t_path) - 1)]
    else:
        slc = attribute_slices(pos[:, 2], levels)
    quat = np.array([quat_from_euler(0.0, 0.0, y) for y in yaw])
    true = pos + np.asarray(offset, dtype=float)
    n = len(t)
    return SimTrace(path.agent_id if agent_id is None else agent_id, t, np.asarray(slc, dtype=int), pos, yaw,
                    true, np.zeros((n, 3)), quat, true.copy(), np.zeros((n, 3)), quat.copy(), np.zeros((n, 3)),
                    quat.copy(), np.full(n, 34.335))


def level_imu(t, accel=(0.0, 0.0, 0.0)):
    """Noise-free IMU sample of a level vehicle with world acceleration ``accel``."""
    from aerial_inspector.localization.models import ImuSample

    return ImuSample(t, np.array([0.0, 0.0, 9.81]) + np.asarray(accel, dtype=float), np.zeros(3))
