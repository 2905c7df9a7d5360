"""Simulated UWB two-way ranging against fixed anchors, plus range-log I/O."""

import csv
import math

import numpy as np

from ..structures import line_of_sight
from .models import LocalizationError, RangeMeasurement

RANGE_LOG_FORMAT_VERSION = 1
RANGE_LOG_HEADER = ["t", "anchor_id", "range", "latency"]

_MIN_RANGE = 1e-3


def simulate_ranging(anchor_id, anchors, true_tag_position, model, noise, rng, timestamp=0.0):
    """One range to ``anchor_id``, or ``None`` when the anchor is occluded and dropped.

    ``model`` is the SolidModel used for the line-of-sight test (``None``
    disables occlusion); ``rng`` is a ``numpy.random.Generator``.
    """
    anchor = anchors.position_of(anchor_id)
    tag = np.asarray(true_tag_position, dtype=float)
    true_range = float(np.linalg.norm(tag - anchor))
    blocked = model is not None and true_range > 0.0 and not line_of_sight(model, anchor, tag)
    # one draw per call, regardless of the outcome, keeps streams aligned
    value = true_range + noise.range_noise_std * rng.standard_normal()
    if blocked and noise.dropout_on_occlusion:
        return None
    if blocked:
        value += noise.nlos_bias
    return RangeMeasurement(anchor_id, max(value, _MIN_RANGE), timestamp, noise.latency)


class RangeScheduler:
    """Decides which anchors are polled at a given simulation tick.

    Round-robin polls one anchor per slot at the aggregate rate; otherwise
    every anchor is polled in each slot.
    """

    def __init__(self, anchor_ids, noise, tick_dt):
        self.anchor_ids = list(anchor_ids)
        self.round_robin = noise.round_robin
        self.ticks_per_slot = max(int(round(1.0 / (noise.measurement_rate * tick_dt))), 1)
        self._slot = 0

    def due(self, tick):
        if tick % self.ticks_per_slot:
            return []
        if not self.round_robin:
            return list(self.anchor_ids)
        anchor = self.anchor_ids[self._slot % len(self.anchor_ids)]
        self._slot += 1
        return [anchor]


def write_range_log(measurements, filename):
    with open(filename, "w", newline="") as fh:
        fh.write(f"# format_version={RANGE_LOG_FORMAT_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RANGE_LOG_HEADER)
        for m in measurements:
            w.writerow([repr(float(m.timestamp)), m.anchor_id, repr(float(m.range)), repr(float(m.latency))])


def read_range_log(filename):
    out = []
    header = False
    with open(filename, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split(",")
            if not header:
                if fields != RANGE_LOG_HEADER:
                    raise LocalizationError(f"{filename}:{lineno}: bad header {text!r}")
                header = True
                continue
            if len(fields) != 4:
                raise LocalizationError(f"{filename}:{lineno}: expected 4 fields")
            try:
                t, rng, lat = float(fields[0]), float(fields[2]), float(fields[3])
            except ValueError:
                raise LocalizationError(f"{filename}:{lineno}: malformed number") from None
            if not all(math.isfinite(v) for v in (t, rng, lat)):
                raise LocalizationError(f"{filename}:{lineno}: non-finite value")
            out.append(RangeMeasurement(fields[1], rng, t, lat))
    return out
