import dataclasses
import json
import os

import jsonschema
import numpy as np
import pytest

from aerial_inspector.mission import SimTrace, coverage_band, coverage_report, safety_audit
from aerial_inspector.planner import plan_mission
from aerial_inspector.report import (
    FORMAT_VERSION, REPORT_SCHEMA, SERIES_HEADER, TRACE_HEADER, ReportError, build_report, dumps_report,
    export_report, read_coverage_histogram, read_report, read_series_csv, read_trace_csv, write_trace_csv,
)

from conftest import TOWER_PARAMS
from helpers import ideal_trace

PARAMS = dataclasses.replace(TOWER_PARAMS, z_start=14.0, z_end=18.0)


@pytest.fixture(scope="module")
def analysed(site_turbine):
    cloud, solid = site_turbine
    plan = plan_mission(cloud, solid, PARAMS)
    traces = [ideal_trace(p, offset=(0.05 * p.agent_id, 0.02, -0.01)) for p in plan.paths]
    band = coverage_band(PARAMS.z_start, PARAMS.z_end, PARAMS.omega, PARAMS.alpha)
    coverage = coverage_report(traces, cloud, solid, PARAMS.alpha, PARAMS.r_max, band, camera_rate=2.0,
                               overlap_band=(PARAMS.z_start, PARAMS.z_end))
    safety = safety_audit(traces, PARAMS.d_s, solid, PARAMS.omega)
    report = build_report({"n_agents": 2}, traces, coverage, safety, 7, "ab" * 32)
    return traces, coverage, safety, report


def random_trace(rng, n=50, agent_id=3):
    def r(*shape):
        return rng.normal(size=shape) * 10.0 ** rng.integers(-8, 8)

    return SimTrace(agent_id, np.arange(n) * 0.01, rng.integers(0, 5, n), r(n, 3), r(n), r(n, 3), r(n, 3), r(n, 4),
                    r(n, 3), r(n, 3), r(n, 4), np.abs(r(n, 3)), r(n, 4), np.abs(r(n)))


def test_trace_round_trip_is_exact(tmp_path, rng):
    tr = random_trace(rng)
    f = tmp_path / "trace.csv"
    write_trace_csv(tr, f)
    lines = f.read_text().splitlines()
    assert lines[0] == f"# format_version={FORMAT_VERSION}"
    assert lines[1].split(",") == TRACE_HEADER
    back = read_trace_csv(f)
    assert back.agent_id == 3
    for fld in dataclasses.fields(SimTrace):
        if fld.name != "agent_id":
            assert np.array_equal(getattr(back, fld.name), getattr(tr, fld.name)), fld.name


def test_truncated_trace_reports_line(tmp_path, rng):
    f = tmp_path / "trace.csv"
    write_trace_csv(random_trace(rng, n=10), f)
    lines = f.read_text().splitlines()
    lines[7] = lines[7][: len(lines[7]) // 2]
    f.write_text("\n".join(lines[:8]) + "\n")
    with pytest.raises(ReportError, match=r"trace\.csv:8:"):
        read_trace_csv(f)


def test_malformed_trace_files(tmp_path):
    f = tmp_path / "t.csv"
    f.write_text("wrong,header\n")
    with pytest.raises(ReportError, match=":1:"):
        read_trace_csv(f)
    f.write_text(",".join(TRACE_HEADER) + "\n")
    with pytest.raises(ReportError, match="no samples"):
        read_trace_csv(f)


def test_export_files(analysed, tmp_path):
    traces, coverage, safety, report = analysed
    written = export_report(traces, coverage, safety, report, tmp_path / "out")
    names = sorted(os.path.basename(p) for p in written)
    assert names == ["coverage_histogram.csv", "report.json", "series_agent0.csv", "series_agent1.csv",
                     "trace_agent0.csv", "trace_agent1.csv"]
    assert read_report(tmp_path / "out" / "report.json") == report
    series = read_series_csv(tmp_path / "out" / "series_agent1.csv")
    assert (tmp_path / "out" / "series_agent1.csv").read_text().splitlines()[1].split(",") == SERIES_HEADER
    np.testing.assert_allclose(series[:, 4:7], traces[1].true_position, atol=5e-7)
    np.testing.assert_allclose(series[:, 10], np.linalg.norm(traces[1].true_position - traces[1].ref_position,
                                                             axis=1), atol=5e-7)
    hist = read_coverage_histogram(tmp_path / "out" / "coverage_histogram.csv")
    assert hist[:, 1].sum() == coverage.n_points
    np.testing.assert_array_equal(hist[:, 1], np.bincount(coverage.view_count))
    for tr in traces:
        back = read_trace_csv(tmp_path / "out" / f"trace_agent{tr.agent_id}.csv")
        assert np.array_equal(back.true_position, tr.true_position)


def test_re_export_byte_identical(analysed, tmp_path):
    traces, coverage, safety, report = analysed
    a = export_report(traces, coverage, safety, report, tmp_path / "a")
    b = export_report(traces, coverage, safety, report, tmp_path / "b")
    for x, y in zip(a, b):
        assert open(x, "rb").read() == open(y, "rb").read()


def test_report_matches_schema(analysed):
    report = analysed[3]
    jsonschema.validate(report, REPORT_SCHEMA)
    assert report["safety"]["violations"] == []
    assert '"violations": []' in dumps_report(report)
    assert set(report) == {"format_version", "seed", "config_hash", "mission", "agents", "rmse", "coverage",
                           "safety"}


def test_report_values(analysed):
    traces, coverage, safety, report = analysed
    assert report["seed"] == 7
    assert report["agents"][0]["rmse_reference"] == pytest.approx(np.hypot(0.02, 0.01), abs=1e-12)
    assert report["agents"][1]["rmse_reference"] == pytest.approx(np.linalg.norm([0.05, 0.02, 0.01]), abs=1e-12)
    assert report["coverage"]["covered_fraction"] == coverage.covered_fraction
    assert report["safety"]["min_inter_agent_distance"] == safety.min_inter_agent_distance


def test_violations_serialise(analysed):
    traces, coverage, _, _ = analysed
    close = safety_audit(traces, 100.0, None, PARAMS.omega)
    report = build_report({}, traces, coverage, close, 0, "0" * 64)
    jsonschema.validate(json.loads(dumps_report(report)), REPORT_SCHEMA)
    assert report["safety"]["violations"][0]["kind"] == "inter_agent"


def test_read_report_rejects_other_versions(tmp_path):
    f = tmp_path / "r.json"
    f.write_text('{"format_version": 99}')
    with pytest.raises(ReportError, match="format_version"):
        read_report(f)
    f.write_text('{"format_version": ')
    with pytest.raises(ReportError, match=":1:"):
        read_report(f)


def test_unwritable_output(analysed, tmp_path):
    traces, coverage, safety, report = analysed
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ReportError):
        export_report(traces, coverage, safety, report, blocker / "sub")
