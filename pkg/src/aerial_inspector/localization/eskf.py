"""15-state error-state Kalman filter fusing IMU propagation with UWB ranges.

Error state: [dp(3), dv(3), dtheta(3), dba(3), dbg(3)], attitude error in the
body frame (R_true = R_nominal * Exp(dtheta)).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from ..rotations import quat_exp, quat_multiply, quat_normalize, quat_to_matrix, quat_yaw, skew, wrap_angle
from .models import GRAVITY, HeadingMeasurement, ImuNoise, LocalizationError, NavState

ACCEPTED = "accepted"
GATED = "gated"
DEGENERATE = "degenerate"
TOO_OLD = "too_old"

_GRAVITY_VEC = np.array([0.0, 0.0, -GRAVITY])
_I3 = np.eye(3)


def ekf_propagate(state, imu, dt, noise=ImuNoise()):
    """Strapdown integration of the nominal state and first-order covariance propagation."""
    if not 0.0 < dt <= 0.1:
        raise LocalizationError(f"propagation step must be in (0, 0.1] s, got {dt}")
    f_raw, w_raw = imu.specific_force, imu.angular_rate
    if not (np.all(np.isfinite(f_raw)) and np.all(np.isfinite(w_raw))):
        raise LocalizationError("non-finite IMU sample")
    R = quat_to_matrix(state.orientation)
    f = f_raw - state.accel_bias
    w = w_raw - state.gyro_bias
    acc = R @ f + _GRAVITY_VEC
    position = state.position + state.velocity * dt + 0.5 * acc * dt * dt
    velocity = state.velocity + acc * dt
    orientation = quat_normalize(quat_multiply(state.orientation, quat_exp(w * dt)))

    F = np.eye(15)
    F[0:3, 3:6] = _I3 * dt
    F[3:6, 6:9] = -R @ skew(f) * dt
    F[3:6, 9:12] = -R * dt
    F[6:9, 6:9] = _I3 - skew(w) * dt
    F[6:9, 12:15] = -_I3 * dt
    q = np.concatenate([
        np.zeros(3),
        np.full(3, noise.accel_noise ** 2 * dt),
        np.full(3, noise.gyro_noise ** 2 * dt),
        np.full(3, noise.accel_bias_walk ** 2 * dt),
        np.full(3, noise.gyro_bias_walk ** 2 * dt),
    ])
    P = F @ state.covariance @ F.T
    P[np.diag_indices(15)] += q
    P = 0.5 * (P + P.T)
    return NavState(position, velocity, orientation, state.accel_bias, state.gyro_bias, P,
                    state.timestamp + dt)


def _inject(state, dx, P):
    return NavState(
        state.position + dx[0:3],
        state.velocity + dx[3:6],
        quat_normalize(quat_multiply(state.orientation, quat_exp(dx[6:9]))),
        state.accel_bias + dx[9:12],
        state.gyro_bias + dx[12:15],
        P,
        state.timestamp,
    )


def _scalar_update(state, innovation, H, variance, gate_sigma):
    P = state.covariance
    PHt = P @ H
    S = float(H @ PHt) + variance
    if gate_sigma is not None and abs(innovation) > gate_sigma * math.sqrt(S):
        return state, GATED
    K = PHt / S
    IKH = np.eye(15) - np.outer(K, H)
    P_new = IKH @ P @ IKH.T + variance * np.outer(K, K)
    P_new = 0.5 * (P_new + P_new.T)
    return _inject(state, K * innovation, P_new), ACCEPTED


def range_jacobian(position, anchor):
    """d range / d error-state: unit vector anchor -> tag in the position block."""
    diff = np.asarray(position, dtype=float) - anchor
    dist = float(np.linalg.norm(diff))
    H = np.zeros(15)
    H[0:3] = diff / dist
    return H, dist


def ekf_update_range(state, meas, anchors, range_std=0.1, gate_sigma=3.0):
    """Scalar range correction; returns ``(state, status)``.

    A gated measurement or a tag estimate sitting on the anchor leaves the
    state untouched and reports ``GATED`` / ``DEGENERATE``.
    """
    anchor = anchors.position_of(meas.anchor_id)
    if np.linalg.norm(state.position - anchor) < 1e-9:
        return state, DEGENERATE
    H, predicted = range_jacobian(state.position, anchor)
    return _scalar_update(state, meas.range - predicted, H, range_std ** 2, gate_sigma)


def heading_jacobian(orientation):
    R = quat_to_matrix(orientation)
    den = R[0, 0] ** 2 + R[1, 0] ** 2
    H = np.zeros(15)
    H[7] = (R[1, 0] * R[0, 2] - R[0, 0] * R[1, 2]) / den
    H[8] = (R[0, 0] * R[1, 1] - R[1, 0] * R[0, 1]) / den
    return H


def ekf_update_heading(state, meas, gate_sigma=3.0):
    """Yaw correction (stands in for a visual-inertial heading source)."""
    H = heading_jacobian(state.orientation)
    innovation = wrap_angle(meas.yaw - quat_yaw(state.orientation))
    return _scalar_update(state, innovation, H, meas.std ** 2, gate_sigma)


@dataclass
class _Entry:
    state: NavState            # after propagation and any updates at this tick
    imu: object                # sample that propagated the previous entry to this one
    dt: float
    updates: list


class StateBuffer:
    """Recent filter history for applying late measurements and replaying forward."""

    def __init__(self, state, horizon=0.5):
        self.horizon = horizon
        self.entries = deque([_Entry(state, None, 0.0, [])])

    @property
    def current(self):
        return self.entries[-1].state

    def push(self, state, imu, dt):
        self.entries.append(_Entry(state, imu, dt, []))
        while len(self.entries) > 1 and self.entries[1].state.timestamp < state.timestamp - self.horizon - 1e-9:
            self.entries.popleft()

    def record(self, state, update):
        self.entries[-1].state = state
        self.entries[-1].updates.append(update)


def _apply(state, update, anchors, range_std, gate_sigma):
    if isinstance(update, HeadingMeasurement):
        return ekf_update_heading(state, update, gate_sigma)
    return ekf_update_range(state, update, anchors, range_std, gate_sigma)


def ekf_handle_delayed(buffer, meas, anchors, range_std=0.1, gate_sigma=3.0, noise=ImuNoise()):
    """Apply ``meas`` at the buffered state nearest its timestamp, then replay to now.

    Returns ``(current_state, status)``. Measurements older than the buffer
    horizon are refused with ``TOO_OLD``. With zero latency this reduces to a
    direct update of the current state.
    """
    now = buffer.current.timestamp
    if now - meas.timestamp > buffer.horizon + 1e-9:
        return buffer.current, TOO_OLD
    times = np.array([e.state.timestamp for e in buffer.entries])
    k = int(np.argmin(np.abs(times - meas.timestamp)))
    entries = buffer.entries
    state, status = _apply(entries[k].state, meas, anchors, range_std, gate_sigma)
    if status != ACCEPTED:
        return buffer.current, status
    entries[k].state = state
    entries[k].updates.append(meas)
    for j in range(k + 1, len(entries)):
        e = entries[j]
        state = ekf_propagate(state, e.imu, e.dt, noise)
        for upd in e.updates:
            state, _ = _apply(state, upd, anchors, range_std, gate_sigma)
        e.state = state
    return state, status


class Estimator:
    """Single-agent UWB-inertial estimator processing a time-ordered event stream."""

    def __init__(self, state, anchors, imu_noise=ImuNoise(), range_std=0.1, gate_sigma=3.0, horizon=0.5):
        self.anchors = anchors
        self.imu_noise = imu_noise
        self.range_std = range_std
        self.gate_sigma = gate_sigma
        self.buffer = StateBuffer(state, horizon)
        self.counts = {ACCEPTED: 0, GATED: 0, DEGENERATE: 0, TOO_OLD: 0}

    @property
    def state(self):
        return self.buffer.current

    def propagate(self, imu):
        dt = imu.timestamp - self.state.timestamp
        new = ekf_propagate(self.state, imu, dt, self.imu_noise)
        self.buffer.push(new, imu, dt)
        return new

    def correct_range(self, meas):
        if meas.latency > 0.0 or meas.timestamp < self.state.timestamp - 1e-12:
            _, status = ekf_handle_delayed(self.buffer, meas, self.anchors, self.range_std,
                                           self.gate_sigma, self.imu_noise)
        else:
            new, status = ekf_update_range(self.state, meas, self.anchors, self.range_std, self.gate_sigma)
            if status == ACCEPTED:
                self.buffer.record(new, meas)
        self.counts[status] += 1
        return status

    def correct_heading(self, meas):
        new, status = ekf_update_heading(self.state, meas, self.gate_sigma)
        if status == ACCEPTED:
            self.buffer.record(new, meas)
        self.counts[status] += 1
        return status


def estimator_pipeline(imu_stream, range_stream, anchors, initial_state, heading_stream=(), **kwargs):
    """Run the filter over recorded streams; returns the state after every IMU sample.

    Ranges are consumed once their delivery time (timestamp + latency) has been
    reached by the IMU clock.
    """
    est = Estimator(initial_state, anchors, **kwargs)
    ranges = sorted(range_stream, key=lambda m: (m.delivered_at, m.timestamp))
    headings = sorted(heading_stream, key=lambda m: m.timestamp)
    ri = hi = 0
    out = []
    for imu in imu_stream:
        est.propagate(imu)
        now = est.state.timestamp
        while ri < len(ranges) and ranges[ri].delivered_at <= now + 1e-9:
            est.correct_range(ranges[ri])
            ri += 1
        while hi < len(headings) and headings[hi].timestamp <= now + 1e-9:
            est.correct_heading(headings[hi])
            hi += 1
        out.append(est.state)
    return out


def position_nees(state, true_position):
    err = state.position - np.asarray(true_position, dtype=float)
    return float(err @ np.linalg.solve(state.covariance[0:3, 0:3], err))
