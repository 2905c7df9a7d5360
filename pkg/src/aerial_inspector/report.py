"""Trace, series and report files for a simulated mission.

Traces use shortest round-trip float text so they reload bit-exactly; the
plot series are rounded for readability. Every file carries a format version.
"""

from __future__ import annotations

import csv
import json
import math
import os

import numpy as np

from .mission import MissionError, SimTrace

FORMAT_VERSION = 1

_VEC = {
    "ref_position": ("ref_x", "ref_y", "ref_z"),
    "true_position": ("true_x", "true_y", "true_z"),
    "true_velocity": ("true_vx", "true_vy", "true_vz"),
    "true_orientation": ("true_qw", "true_qx", "true_qy", "true_qz"),
    "est_position": ("est_x", "est_y", "est_z"),
    "est_velocity": ("est_vx", "est_vy", "est_vz"),
    "est_orientation": ("est_qw", "est_qx", "est_qy", "est_qz"),
    "est_position_std": ("est_sx", "est_sy", "est_sz"),
    "cmd_orientation": ("cmd_qw", "cmd_qx", "cmd_qy", "cmd_qz"),
}
TRACE_FIELDS = ["t", "slice_index", "ref_position", "ref_yaw", "true_position", "true_velocity",
                "true_orientation", "est_position", "est_velocity", "est_orientation", "est_position_std",
                "cmd_orientation", "thrust"]
TRACE_HEADER = ["agent"] + [c for f in TRACE_FIELDS for c in _VEC.get(f, (f,))]
SERIES_HEADER = ["t", "ref_x", "ref_y", "ref_z", "true_x", "true_y", "true_z", "est_x", "est_y", "est_z", "err"]


class ReportError(MissionError):
    pass


# ---------------------------------------------------------------- traces


def write_trace_csv(trace, filename):
    cols = [np.full(len(trace), trace.agent_id)]
    for f in TRACE_FIELDS:
        arr = getattr(trace, f)
        cols.extend(arr.T if arr.ndim == 2 else [arr])
    ints = {0, 2}  # agent, slice_index
    with open(filename, "w", newline="") as fh:
        fh.write(f"# format_version={FORMAT_VERSION}\n")
        fh.write(",".join(TRACE_HEADER) + "\n")
        for row in zip(*cols):
            fh.write(",".join(str(int(v)) if i in ints else repr(float(v)) for i, v in enumerate(row)) + "\n")


def read_trace_csv(filename):
    """Parse a trace file; malformed content raises ReportError with the line number."""
    rows = []
    header_seen = False
    with open(filename, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split(",")
            if not header_seen:
                if fields != TRACE_HEADER:
                    raise ReportError(f"{filename}:{lineno}: unexpected trace header")
                header_seen = True
                continue
            if len(fields) != len(TRACE_HEADER):
                raise ReportError(f"{filename}:{lineno}: expected {len(TRACE_HEADER)} fields, got {len(fields)}")
            try:
                rows.append([float(v) for v in fields])
            except ValueError:
                raise ReportError(f"{filename}:{lineno}: malformed number") from None
    if not rows:
        raise ReportError(f"{filename}: no samples")
    data = np.array(rows)
    agents = np.unique(data[:, 0])
    if len(agents) != 1:
        raise ReportError(f"{filename}: mixed agent ids")
    out = {}
    col = 1
    for f in TRACE_FIELDS:
        width = len(_VEC.get(f, (f,)))
        block = data[:, col:col + width]
        out[f] = block if width > 1 else block[:, 0]
        col += width
    out["slice_index"] = out["slice_index"].astype(int)
    return SimTrace(int(agents[0]), **out)


# ---------------------------------------------------------------- plot series


def write_series_csv(trace, filename):
    err = np.linalg.norm(trace.true_position - trace.ref_position, axis=1)
    data = np.column_stack([trace.t, trace.ref_position, trace.true_position, trace.est_position, err])
    with open(filename, "w", newline="") as fh:
        fh.write(f"# format_version={FORMAT_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SERIES_HEADER)
        for row in data:
            w.writerow([f"{v:.6f}" for v in row])


def read_series_csv(filename):
    return _read_numeric_csv(filename, SERIES_HEADER)


def write_coverage_histogram(coverage, filename):
    counts = np.bincount(coverage.view_count) if len(coverage.view_count) else np.zeros(1, dtype=int)
    with open(filename, "w", newline="") as fh:
        fh.write(f"# format_version={FORMAT_VERSION}\n")
        fh.write("view_count,n_points\n")
        for k, n in enumerate(counts):
            fh.write(f"{k},{int(n)}\n")


def read_coverage_histogram(filename):
    return _read_numeric_csv(filename, ["view_count", "n_points"]).astype(int)


def _read_numeric_csv(filename, header):
    rows = []
    header_seen = False
    with open(filename, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split(",")
            if not header_seen:
                if fields != header:
                    raise ReportError(f"{filename}:{lineno}: unexpected header")
                header_seen = True
                continue
            if len(fields) != len(header):
                raise ReportError(f"{filename}:{lineno}: expected {len(header)} fields")
            try:
                rows.append([float(v) for v in fields])
            except ValueError:
                raise ReportError(f"{filename}:{lineno}: malformed number") from None
    return np.array(rows).reshape(-1, len(header))


# ---------------------------------------------------------------- report


def _num(x):
    """JSON-safe float (infinities become null)."""
    if x is None or not math.isfinite(x):
        return None
    return float(x)


def build_report(plan_info, traces, coverage, safety, seed, config_hash):
    """Assemble the report dictionary.

    ``plan_info`` is a mapping of mission-level fields (durations, parameters)
    copied verbatim under ``mission``.
    """
    ref = [float(np.mean(np.sum((tr.true_position - tr.ref_position) ** 2, axis=1))) for tr in traces]
    est = [float(np.mean(np.sum((tr.true_position - tr.est_position) ** 2, axis=1))) for tr in traces]
    agents = [
        {
            "agent": int(tr.agent_id),
            "samples": len(tr),
            "rmse_reference": math.sqrt(r),
            "rmse_estimate": math.sqrt(e),
        }
        for tr, r, e in zip(traces, ref, est)
    ]
    return {
        "format_version": FORMAT_VERSION,
        "seed": int(seed),
        "config_hash": config_hash,
        "mission": dict(plan_info),
        "agents": agents,
        "rmse": {"reference": math.sqrt(float(np.mean(ref))), "estimate": math.sqrt(float(np.mean(est)))},
        "coverage": {
            "band_points": int(coverage.n_points),
            "covered_fraction": coverage.covered_fraction,
            "overlap_fraction": coverage.overlap_fraction,
            "overlap_band_points": int(coverage.overlap_points),
            "uncovered_points": int(len(coverage.uncovered)),
            "min_view_count": int(coverage.view_count.min()) if len(coverage.view_count) else 0,
            "mean_view_count": float(coverage.view_count.mean()) if len(coverage.view_count) else 0.0,
        },
        "safety": {
            "min_inter_agent_distance": _num(safety.min_inter_agent_distance),
            "min_structure_distance": _num(safety.min_structure_distance),
            "violations": [dict(v) for v in safety.violations],
        },
    }


def dumps_report(report):
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def write_report(report, filename):
    with open(filename, "w") as fh:
        fh.write(dumps_report(report))


def read_report(filename):
    with open(filename) as fh:
        try:
            report = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ReportError(f"{filename}:{exc.lineno}: {exc.msg}") from None
    if report.get("format_version") != FORMAT_VERSION:
        raise ReportError(f"{filename}: unsupported format_version {report.get('format_version')!r}")
    return report


def export_report(traces, coverage, safety, report, out_dir):
    """Write traces, plot series, the coverage histogram and report.json; returns the written paths."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create output directory {out_dir}: {exc}") from None
    written = []
    try:
        for tr in traces:
            path = os.path.join(out_dir, f"trace_agent{tr.agent_id}.csv")
            write_trace_csv(tr, path)
            written.append(path)
            path = os.path.join(out_dir, f"series_agent{tr.agent_id}.csv")
            write_series_csv(tr, path)
            written.append(path)
        path = os.path.join(out_dir, "coverage_histogram.csv")
        write_coverage_histogram(coverage, path)
        written.append(path)
        path = os.path.join(out_dir, "report.json")
        write_report(report, path)
        written.append(path)
    except OSError as exc:
        raise ReportError(f"cannot write report files: {exc}") from None
    return written


_NUMBER_OR_NULL = {"type": ["number", "null"]}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["format_version", "seed", "config_hash", "mission", "agents", "rmse", "coverage", "safety"],
    "properties": {
        "format_version": {"const": FORMAT_VERSION},
        "seed": {"type": "integer"},
        "config_hash": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "mission": {"type": "object"},
        "agents": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["agent", "samples", "rmse_reference", "rmse_estimate"],
                "properties": {
                    "agent": {"type": "integer", "minimum": 0},
                    "samples": {"type": "integer", "minimum": 1},
                    "rmse_reference": {"type": "number", "minimum": 0},
                    "rmse_estimate": {"type": "number", "minimum": 0},
                },
            },
        },
        "rmse": {
            "type": "object",
            "required": ["reference", "estimate"],
            "properties": {"reference": {"type": "number", "minimum": 0},
                           "estimate": {"type": "number", "minimum": 0}},
        },
        "coverage": {
            "type": "object",
            "required": ["band_points", "covered_fraction", "overlap_fraction", "overlap_band_points",
                         "uncovered_points", "min_view_count", "mean_view_count"],
            "properties": {
                "band_points": {"type": "integer", "minimum": 0},
                "covered_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "overlap_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "overlap_band_points": {"type": "integer", "minimum": 0},
                "uncovered_points": {"type": "integer", "minimum": 0},
                "min_view_count": {"type": "integer", "minimum": 0},
                "mean_view_count": {"type": "number", "minimum": 0},
            },
        },
        "safety": {
            "type": "object",
            "required": ["min_inter_agent_distance", "min_structure_distance", "violations"],
            "properties": {
                "min_inter_agent_distance": _NUMBER_OR_NULL,
                "min_structure_distance": _NUMBER_OR_NULL,
                "violations": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["t_start", "t_end", "kind", "agents", "value"],
                        "properties": {
                            "t_start": {"type": "number"},
                            "t_end": {"type": "number"},
                            "kind": {"enum": ["inter_agent", "structure"]},
                            "agents": {"type": "array", "items": {"type": "integer"}},
                            "value": {"type": "number"},
                        },
                    },
                },
            },
        },
    },
}
