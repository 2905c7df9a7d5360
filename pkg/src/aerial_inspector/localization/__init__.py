"""UWB ranging, trilateration and the error-state inertial filter."""

from .eskf import Estimator, ekf_handle_delayed, ekf_propagate, ekf_update_heading, ekf_update_range, position_nees
from .models import (REFERENCE_ANCHORS, Anchor, AnchorSet, HeadingMeasurement, ImuNoise, ImuSample,
                     LocalizationError, NavState, RangeMeasurement, UwbNoiseModel)
from .ranging import RangeScheduler, simulate_ranging
from .trilateration import TrilaterationError, trilaterate

__all__ = [
    "Anchor", "AnchorSet", "Estimator", "HeadingMeasurement", "ImuNoise", "ImuSample", "LocalizationError",
    "NavState", "RangeMeasurement", "RangeScheduler", "REFERENCE_ANCHORS", "TrilaterationError", "UwbNoiseModel",
    "ekf_handle_delayed", "ekf_propagate", "ekf_update_heading", "ekf_update_range", "position_nees",
    "simulate_ranging", "trilaterate",
]
