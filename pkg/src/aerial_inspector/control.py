"""Position control: linear MPC over a per-axis jerk-driven triple integrator,
mapped to attitude and thrust references for the inner attitude loop."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .localization.models import GRAVITY
from .rotations import matrix_to_quat
from .vehicle import ControlCommand, VehicleParams

_E3 = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class MpcParams:
    t_s: float = 0.01
    horizon: float = 2.0
    position_weight: float = 1.0
    velocity_weight: float = 0.3
    acceleration_weight: float = 0.05
    # penalty on jerk / g, i.e. on tilt rate; raise it to calm angular motion
    angular_rate_weight: float = 0.02
    max_tilt_deg: float = 25.0
    min_thrust_ratio: float = 0.3
    max_thrust_ratio: float = 1.7

    @property
    def steps(self):
        return max(int(round(self.horizon / self.t_s)), 1)


@lru_cache(maxsize=16)
def _mpc_gains(params):
    """First-move gains of the unconstrained batch solution.

    Returns ``(k_ref, k_state)`` so that the optimal first jerk is
    ``k_ref @ ref_stack - k_state @ x0`` with ``ref_stack`` the horizon's
    [p, v, a] references interleaved per step.
    """
    dt, n = params.t_s, params.steps
    A = np.array([[1.0, dt, 0.5 * dt * dt], [0.0, 1.0, dt], [0.0, 0.0, 1.0]])
    B = np.array([dt ** 3 / 6.0, 0.5 * dt * dt, dt])
    Phi = np.zeros((3 * n, 3))
    Gam = np.zeros((3 * n, n))
    Ak = np.eye(3)
    powers = [np.eye(3)]
    for k in range(n):
        Ak = A @ Ak
        powers.append(Ak)
        Phi[3 * k:3 * k + 3] = Ak
    for k in range(n):
        for j in range(k + 1):
            Gam[3 * k:3 * k + 3, j] = powers[k - j] @ B
    qdiag = np.tile([params.position_weight, params.velocity_weight, params.acceleration_weight], n)
    r = params.angular_rate_weight / GRAVITY ** 2
    H = Gam.T @ (qdiag[:, None] * Gam) + r * np.eye(n)
    row = np.linalg.solve(H, Gam.T * qdiag)[0]
    return row, row @ Phi


def attitude_from_force(force, yaw):
    """Attitude putting body z along ``force`` with body x heading ``yaw``."""
    zx, zy, zz = force / math.sqrt(force[0] ** 2 + force[1] ** 2 + force[2] ** 2)
    c, s = math.cos(yaw), math.sin(yaw)
    # yb = zb x (c, s, 0); xb = yb x zb (np.cross is slow for single vectors)
    yx, yy, yz = -zz * s, zz * c, zx * s - zy * c
    n = math.sqrt(yx * yx + yy * yy + yz * yz)
    yx, yy, yz = yx / n, yy / n, yz / n
    xb = (yy * zz - yz * zy, yz * zx - yx * zz, yx * zy - yy * zx)
    return matrix_to_quat(np.array([[xb[0], yx, zx], [xb[1], yy, zy], [xb[2], yz, zz]]))


def _saturate(force, params, vehicle):
    """Clamp tilt and thrust; returns ``(force, saturated)``."""
    hover = vehicle.mass * GRAVITY
    saturated = False
    fz = max(force[2], params.min_thrust_ratio * hover * math.cos(math.radians(params.max_tilt_deg)))
    if fz != force[2]:
        saturated = True
    fh = force[:2].copy()
    limit = fz * math.tan(math.radians(params.max_tilt_deg))
    h = float(np.hypot(fh[0], fh[1]))
    if h > limit:
        fh *= limit / h
        saturated = True
    f = np.array([fh[0], fh[1], fz])
    mag = float(np.linalg.norm(f))
    lo, hi = params.min_thrust_ratio * hover, params.max_thrust_ratio * hover
    if mag > hi or mag < lo:
        f *= min(max(mag, lo), hi) / mag
        saturated = True
    return f, saturated


class LinearMPC:
    """Receding-horizon position controller.

    The model per axis is ``[p, v, a]`` driven by jerk; the commanded
    acceleration is the controller's own integrator state, turned into a thrust
    vector with gravity and drag feed-forward.
    """

    def __init__(self, params=MpcParams(), vehicle=VehicleParams()):
        self.params = params
        self.vehicle = vehicle
        self.k_ref, self.k_state = _mpc_gains(params)
        self.acc_cmd = np.zeros(3)

    def reset(self, acc_cmd=None):
        self.acc_cmd = np.zeros(3) if acc_cmd is None else np.asarray(acc_cmd, dtype=float)

    def command(self, estimate, ref_positions, yaw, ref_velocities=None, ref_accelerations=None):
        """``ref_positions`` is the (M, 3) preview starting one step ahead; short previews hold the last value."""
        n = self.params.steps
        refs = np.atleast_2d(np.asarray(ref_positions, dtype=float))
        refs = _fit(refs, n)
        vels = np.zeros((n, 3)) if ref_velocities is None else _fit(np.atleast_2d(ref_velocities), n)
        accs = np.zeros((n, 3)) if ref_accelerations is None else _fit(np.atleast_2d(ref_accelerations), n)
        stack = np.empty((3 * n, 3))
        stack[0::3], stack[1::3], stack[2::3] = refs, vels, accs
        x0 = np.stack([estimate.position, estimate.velocity, self.acc_cmd])  # (3 states, 3 axes)
        jerk = self.k_ref @ stack - self.k_state @ x0
        acc = self.acc_cmd + jerk * self.params.t_s
        force = self.vehicle.mass * (acc + GRAVITY * _E3) + self.vehicle.drag * estimate.velocity
        force, saturated = _saturate(force, self.params, self.vehicle)
        if saturated:
            acc = (force - self.vehicle.drag * estimate.velocity) / self.vehicle.mass - GRAVITY * _E3
        self.acc_cmd = acc
        return ControlCommand(attitude_from_force(force, yaw), float(np.linalg.norm(force)), saturated)


class PDController:
    """Cascaded PD fallback with the same attitude/thrust output."""

    def __init__(self, kp=1.2, kd=1.8, params=MpcParams(), vehicle=VehicleParams()):
        self.kp, self.kd = kp, kd
        self.params = params
        self.vehicle = vehicle

    def command(self, estimate, ref_positions, yaw, ref_velocities=None, ref_accelerations=None):
        r = np.atleast_2d(ref_positions)[0]
        rv = np.zeros(3) if ref_velocities is None else np.atleast_2d(ref_velocities)[0]
        ra = np.zeros(3) if ref_accelerations is None else np.atleast_2d(ref_accelerations)[0]
        acc = self.kp * (r - estimate.position) + self.kd * (rv - estimate.velocity) + ra
        force = self.vehicle.mass * (acc + GRAVITY * _E3) + self.vehicle.drag * estimate.velocity
        force, saturated = _saturate(force, self.params, self.vehicle)
        return ControlCommand(attitude_from_force(force, yaw), float(np.linalg.norm(force)), saturated)


def _fit(arr, n):
    if len(arr) >= n:
        return arr[:n]
    return np.vstack([arr, np.repeat(arr[-1:], n - len(arr), axis=0)])


def position_controller(estimate, reference, params=MpcParams(), vehicle=VehicleParams()):
    """One-shot MPC command for a fixed ``(position, yaw)`` reference from rest."""
    position, yaw = reference
    return LinearMPC(params, vehicle).command(estimate, np.asarray(position, dtype=float), yaw)
