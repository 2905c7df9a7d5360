"""Data types shared by the ranging model, the solver and the filter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRAVITY = 9.81


class LocalizationError(ValueError):
    pass


@dataclass(frozen=True)
class Anchor:
    id: str
    position: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))


@dataclass(frozen=True)
class AnchorSet:
    anchors: tuple

    def __post_init__(self):
        anchors = tuple(a if isinstance(a, Anchor) else Anchor(*a) for a in self.anchors)
        object.__setattr__(self, "anchors", anchors)
        if len(anchors) < 3:
            raise LocalizationError("an anchor set needs at least 3 anchors")
        ids = [a.id for a in anchors]
        if len(set(ids)) != len(ids):
            raise LocalizationError("anchor ids must be unique")
        pos = self.positions
        for i in range(len(pos)):
            for j in range(i + 1, len(pos)):
                if np.linalg.norm(pos[i] - pos[j]) < 1e-9:
                    raise LocalizationError(f"anchors {ids[i]} and {ids[j]} coincide")
        if geometry_rank(pos) < 2:
            raise LocalizationError("anchors are collinear")

    @property
    def ids(self):
        return [a.id for a in self.anchors]

    @property
    def positions(self):
        return np.array([a.position for a in self.anchors])

    def position_of(self, anchor_id):
        for a in self.anchors:
            if a.id == anchor_id:
                return a.position
        raise LocalizationError(f"unknown anchor id {anchor_id!r}")

    def __len__(self):
        return len(self.anchors)


def geometry_rank(positions, tol=1e-6):
    centered = positions - positions.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


# Reference site layout: five anchors on the ground around the turbine.
REFERENCE_ANCHORS = AnchorSet((
    Anchor("A1", (0.0, 0.0, 0.0)),
    Anchor("A2", (26.1, 0.0, 0.0)),
    Anchor("A3", (6.6, 24.8, 0.0)),
    Anchor("A4", (19.5, 18.2, 0.0)),
    Anchor("A5", (14.6, -21.7, 0.0)),
))


@dataclass(frozen=True)
class RangeMeasurement:
    anchor_id: str
    range: float
    timestamp: float
    latency: float = 0.0

    def __post_init__(self):
        if not self.range > 0.0:
            raise LocalizationError("range must be > 0")
        if self.latency < 0.0:
            raise LocalizationError("latency must be >= 0")

    @property
    def delivered_at(self):
        return self.timestamp + self.latency


@dataclass(frozen=True)
class HeadingMeasurement:
    yaw: float
    timestamp: float
    std: float


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    specific_force: np.ndarray
    angular_rate: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.specific_force, dtype=float).reshape(3)
        w = np.asarray(self.angular_rate, dtype=float).reshape(3)
        object.__setattr__(self, "specific_force", f)
        object.__setattr__(self, "angular_rate", w)


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time IMU noise densities shared by the IMU model and the filter.

    accel_noise: m/s^2/sqrt(Hz); gyro_noise: rad/s/sqrt(Hz);
    accel_bias_walk: m/s^2/sqrt(s); gyro_bias_walk: rad/s/sqrt(s).
    """

    accel_noise: float = 0.005
    gyro_noise: float = 2e-4
    accel_bias_walk: float = 1e-4
    gyro_bias_walk: float = 1e-5


@dataclass(frozen=True)
class UwbNoiseModel:
    range_noise_std: float = 0.1
    dropout_on_occlusion: bool = True
    nlos_bias: float = 0.5
    measurement_rate: float = 20.0
    round_robin: bool = True
    latency: float = 0.0

    def __post_init__(self):
        if self.range_noise_std < 0.0:
            raise LocalizationError("range_noise_std must be >= 0")
        if not self.measurement_rate > 0.0:
            raise LocalizationError("measurement_rate must be > 0")
        if self.latency < 0.0:
            raise LocalizationError("latency must be >= 0")


@dataclass(frozen=True)
class NavState:
    """Nominal navigation state plus the 15x15 error-state covariance.

    Error-state ordering: position, velocity, attitude (body-frame small
    angle), accelerometer bias, gyro bias.
    """

    position: np.ndarray
    velocity: np.ndarray
    orientation: np.ndarray
    accel_bias: np.ndarray
    gyro_bias: np.ndarray
    covariance: np.ndarray
    timestamp: float = 0.0

    @classmethod
    def initial(cls, position, yaw=0.0, timestamp=0.0, velocity=(0.0, 0.0, 0.0),
                orientation=None, sigmas=None):
        from ..rotations import quat_from_euler

        s = dict(DEFAULT_INITIAL_SIGMAS)
        s.update(sigmas or {})
        var = np.concatenate([
            np.full(3, s["position"] ** 2),
            np.full(3, s["velocity"] ** 2),
            np.array([s["tilt"] ** 2, s["tilt"] ** 2, s["yaw"] ** 2]),
            np.full(3, s["accel_bias"] ** 2),
            np.full(3, s["gyro_bias"] ** 2),
        ])
        q = quat_from_euler(0.0, 0.0, yaw) if orientation is None else np.asarray(orientation, dtype=float)
        return cls(
            position=np.asarray(position, dtype=float),
            velocity=np.asarray(velocity, dtype=float),
            orientation=q,
            accel_bias=np.zeros(3),
            gyro_bias=np.zeros(3),
            covariance=np.diag(var),
            timestamp=float(timestamp),
        )


DEFAULT_INITIAL_SIGMAS = {
    "position": 0.5,
    "velocity": 0.1,
    "tilt": 0.02,
    "yaw": 0.05,
    "accel_bias": 0.05,
    "gyro_bias": 0.002,
}
