"""MAV truth model: gusty wind, rigid-body translation with a first-order
attitude loop, and IMU synthesis."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .localization.models import GRAVITY, ImuSample
from .rotations import quat_exp, quat_log, quat_multiply, quat_normalize, quat_to_matrix, quat_conjugate

_GRAVITY_VEC = np.array([0.0, 0.0, -GRAVITY])
_E3 = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class VehicleParams:
    mass: float = 3.5
    drag: float = 1.0          # N s/m, per axis, on air-relative velocity
    attitude_tau: float = 0.15  # s
    max_thrust_ratio: float = 1.7

    @property
    def hover_thrust(self):
        return self.mass * GRAVITY

    @property
    def max_thrust(self):
        return self.max_thrust_ratio * self.hover_thrust


@dataclass(frozen=True)
class VehicleState:
    position: np.ndarray
    velocity: np.ndarray
    orientation: np.ndarray
    angular_rate: np.ndarray = field(default_factory=lambda: np.zeros(3))
    timestamp: float = 0.0
    acceleration: np.ndarray = field(default_factory=lambda: np.zeros(3))  # world frame, last step

    @classmethod
    def hover(cls, position, orientation=(1.0, 0.0, 0.0, 0.0), timestamp=0.0):
        return cls(np.asarray(position, dtype=float), np.zeros(3), np.asarray(orientation, dtype=float),
                   np.zeros(3), timestamp, np.zeros(3))


@dataclass(frozen=True)
class ControlCommand:
    attitude_reference: np.ndarray  # unit quaternion, body -> world
    thrust_reference: float         # N
    saturated: bool = False


@dataclass(frozen=True)
class WindModel:
    mean_wind: tuple = (0.0, 0.0, 0.0)
    gust_std: float = 0.0
    gust_time_constant: float = 2.0
    max_speed: float = 13.0
    turbulence_gain: float = 1.0    # gust_std multiplier near the structure
    turbulence_radius: float = 0.0  # m from the structure surface; 0 disables

    def __post_init__(self):
        if self.gust_std < 0.0:
            raise ValueError("gust_std must be >= 0")
        if not self.gust_time_constant > 0.0:
            raise ValueError("gust_time_constant must be > 0")
        if not self.max_speed > 0.0:
            raise ValueError("max_speed must be > 0")
        if self.turbulence_gain < 0.0 or self.turbulence_radius < 0.0:
            raise ValueError("turbulence_gain and turbulence_radius must be >= 0")


def sample_wind(model, previous_gust, dt, rng, gust_scale=1.0):
    """Advance the exponentially correlated gust and return ``(wind, gust)``.

    The gust is a first-order Gauss-Markov process per axis with stationary
    std ``gust_std * gust_scale``; the total wind speed is clamped to
    ``max_speed``.
    """
    if not dt > 0.0:
        raise ValueError("dt must be > 0")
    phi = math.exp(-dt / model.gust_time_constant)
    sigma = model.gust_std * gust_scale
    gust = phi * np.asarray(previous_gust, dtype=float) + sigma * math.sqrt(1.0 - phi * phi) * rng.standard_normal(3)
    wind = np.asarray(model.mean_wind, dtype=float) + gust
    speed = float(np.linalg.norm(wind))
    if speed > model.max_speed:
        wind = wind * (model.max_speed / speed)
    return wind, gust


def step_dynamics(state, cmd, wind, dt, params=VehicleParams()):
    """One symplectic-Euler step of the truth model."""
    if not 0.0 < dt <= 0.02:
        raise ValueError(f"dt must be in (0, 0.02], got {dt}")
    q = state.orientation
    err = quat_log(quat_multiply(quat_conjugate(q), cmd.attitude_reference))
    # exact discretisation of the first-order attitude response
    rate = err * (-math.expm1(-dt / params.attitude_tau)) / dt
    q_new = quat_normalize(quat_multiply(q, quat_exp(rate * dt)))
    thrust = min(max(cmd.thrust_reference, 0.0), params.max_thrust)
    R = quat_to_matrix(q_new)
    acc = (thrust / params.mass) * R[:, 2] + _GRAVITY_VEC - (params.drag / params.mass) * (state.velocity - wind)
    velocity = state.velocity + acc * dt
    position = state.position + velocity * dt
    return VehicleState(position, velocity, q_new, rate, state.timestamp + dt, acc)


@dataclass(frozen=True)
class ImuBiases:
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))


def walk_biases(biases, noise, dt, rng):
    return ImuBiases(
        biases.accel + noise.accel_bias_walk * math.sqrt(dt) * rng.standard_normal(3),
        biases.gyro + noise.gyro_bias_walk * math.sqrt(dt) * rng.standard_normal(3),
    )


def sample_imu(state, biases, noise, dt, rng):
    """Body-frame specific force and angular rate with bias and white noise.

    Noise densities are converted to per-sample standard deviations for a
    sample period ``dt``; pass ``rng=None`` for a noise-free sample.
    """
    if not dt > 0.0:
        raise ValueError("dt must be > 0")
    R = quat_to_matrix(state.orientation)
    f = R.T @ (state.acceleration - _GRAVITY_VEC) + biases.accel
    w = state.angular_rate + biases.gyro
    if rng is not None:
        f = f + (noise.accel_noise / math.sqrt(dt)) * rng.standard_normal(3)
        w = w + (noise.gyro_noise / math.sqrt(dt)) * rng.standard_normal(3)
    return ImuSample(state.timestamp, f, w)
