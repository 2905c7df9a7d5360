"""Cooperative coverage planning, UWB-inertial estimation and mission simulation
for multi-MAV inspection of wind turbines."""

__version__ = "0.1.0"
