#!/usr/bin/env python3
"""
Tests for the tensor container, CSV schemas, SVG plots and external representation ingest
"""

import json
import struct

import numpy as np
import pytest

from lab.core.exceptions import CoverageError, FormatError, SchemaError, ShapeError
from lab.geometry import RepresentationSet, loglog_slope, tdnv_curve
from lab.io.container import decode_tensors, encode_tensors, load_tensors, save_tensors
from lab.io.csvio import format_value, read_csv, schema_for, write_csv
from lab.io.ingest import LayoutManifest, dump_representations, ingest_external_reps, round_to
from lab.io.plots import loglog_fit, plot_curves
from lab.taskgen import get_tasks, sample_dataset
from lab.theorem import summarize_decay
from lab.tracing import trace_instances


def test_container_f64_roundtrip_is_bitwise(tmp_path, rng):
    x = rng.normal(size=(3, 4))
    path = save_tensors(tmp_path / "x.iclt", {"x": x, "empty": np.zeros((0, 5))}, dtype="f64")
    back = load_tensors(path)
    assert list(back) == ["x", "empty"]
    assert back["x"].tobytes() == x.tobytes()
    assert back["empty"].shape == (0, 5)


def test_container_f32_rounds(rng):
    x = rng.normal(size=(2, 3))
    back = decode_tensors(encode_tensors({"x": x}))["x"]
    assert back.dtype == np.float32
    assert np.array_equal(back.astype(np.float64), round_to(x, "f32"))


def test_container_format_errors():
    buf = encode_tensors({"a": np.ones(4)}, dtype="f64")
    with pytest.raises(FormatError) as exc:
        decode_tensors(b"XXXX" + buf[4:])
    assert exc.value.offset == 0
    with pytest.raises(FormatError) as exc:
        decode_tensors(buf[:4] + struct.pack("<I", 9) + buf[8:])
    assert exc.value.offset == 4
    with pytest.raises(FormatError) as exc:
        decode_tensors(buf[:-3])
    assert "truncated" in str(exc.value)
    with pytest.raises(FormatError):
        decode_tensors(buf + b"\0")
    with pytest.raises(ValueError):
        encode_tensors({"a": np.ones(2)}, dtype="f16")


def test_schema_lookup():
    assert schema_for("out/tdnv_curve.csv") == ["layer", "value"]
    assert schema_for("pca_k5.csv") == ["task", "instance", "x", "y"]
    assert schema_for("grid_tdnv_pos2.csv") == ["layer", "sep", "value"]
    assert schema_for("tdnv_curves.csv") == ["series", "layer", "value"]
    assert schema_for("unknown.csv") is None


def test_format_value():
    assert format_value(None) == ""
    assert format_value(True) == "1"
    assert format_value(0.1) == "0.1"
    assert format_value(np.float64(float("nan"))) == "nan"
    assert format_value(np.int64(3)) == "3"


def test_write_and_read_csv(tmp_path):
    path = write_csv(tmp_path / "tdnv_curve.csv", [{"layer": 0, "value": 1.5}, {"layer": 1, "value": None}])
    assert path.read_text(encoding="utf-8") == "layer,value\n0,1.5\n1,\n"
    assert read_csv(path)[1] == {"layer": "1", "value": ""}
    with pytest.raises(SchemaError):
        write_csv(tmp_path / "unknown.csv", [])
    (tmp_path / "tdnv_curve.csv").write_text("layer\n0\n", encoding="utf-8")
    with pytest.raises(SchemaError) as exc:
        read_csv(tmp_path / "tdnv_curve.csv")
    assert "value" in str(exc.value)


def test_plot_is_deterministic(tmp_path):
    csv = write_csv(tmp_path / "tdnv_curve.csv", [{"layer": l, "value": v} for l, v in enumerate([3.0, 1.0, 2.0])])
    a = plot_curves(csv, out_path=tmp_path / "a.svg")
    b = plot_curves(csv, out_path=tmp_path / "b.svg")
    assert a == b
    assert a.startswith("<?xml")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_plot_rejects_empty_and_bad_schema(tmp_path):
    empty = write_csv(tmp_path / "tdnv_curve.csv", [])
    with pytest.raises(SchemaError):
        plot_curves(empty)
    other = tmp_path / "other.csv"
    other.write_text("layer,score\n0,1\n", encoding="utf-8")
    with pytest.raises(SchemaError):
        plot_curves(other)
    with pytest.raises(ValueError):
        plot_curves(empty, style="bars")


def test_loglog_plot_prints_slope(tmp_path):
    rows = [{"K": k, "bias_ratio": 1.0 / (k + 1), "variance": 2.0 / k if k else 3.0} for k in (0, 1, 2, 4, 8, 16)]
    csv = write_csv(tmp_path / "bias_variance.csv", rows)
    svg = plot_curves(csv, style="loglog")
    assert "slope" in svg
    slope, _ = loglog_fit(np.array([1.0, 2.0, 4.0, 8.0]), np.array([2.0, 1.0, 0.5, 0.25]))
    assert slope == pytest.approx(-1.0)


def test_loglog_plot_slope_matches_run_summaries(tmp_path):
    ks = np.array([0, 1, 2, 4, 8, 16, 32])
    # K=0 carries round-off, as a fixed-query run does
    var = np.where(ks == 0, 1e-29, 3.0 * (ks + 1.0) ** -1.2 * (1.0 + 0.05 * np.cos(ks)))
    decay = summarize_decay(ks, var, np.zeros_like(var))
    csv = write_csv(tmp_path / "theorem_report.csv", [{"K": int(k), "var_est": float(v)} for k, v in zip(ks, var)])
    assert f"var_est fit, slope {decay.slope:.3f}" in plot_curves(csv, style="loglog")

    variance = 2.0 / np.maximum(ks, 1) ** 0.8
    csv = write_csv(tmp_path / "bias_variance.csv",
                    [{"K": int(k), "bias_ratio": 1.0, "variance": float(v)} for k, v in zip(ks, variance)])
    expected = loglog_slope(ks[ks >= 1], variance[ks >= 1])
    assert f"variance fit, slope {expected:.3f}" in plot_curves(csv, style="loglog")


def test_heatmap_and_pca_styles(tmp_path):
    grid = write_csv(tmp_path / "grid_tdnv.csv",
                     [{"layer": l, "sep": s, "value": float(l + s)} for l in range(3) for s in (1, 2)])
    assert "<svg" in plot_curves(grid, style="heatmap")
    pca = write_csv(tmp_path / "pca.csv", [{"task": t, "instance": i, "x": float(i), "y": float(i * i)}
                                           for t in ("copy", "upper") for i in range(3)])
    assert "<svg" in plot_curves(pca, style="pca")


def _layout(n_layers=2, entries=None):
    return LayoutManifest(task_names=["a", "b"], n_instances=2, n_layers=n_layers,
                          entries=entries or {f"t{t}/i{i}": [t, i] for t in range(2) for i in range(2)})


def test_ingest_roundtrip(tmp_path, rng):
    reps = RepresentationSet(reps=rng.normal(size=(2, 2, 3, 4)), kind="last_sep", K=2, task_names=["a", "b"])
    dump_representations(reps, tmp_path / "reps.iclt", tmp_path / "layout.json", dtype="f64")
    back = ingest_external_reps(tmp_path / "reps.iclt", tmp_path / "layout.json")
    assert np.array_equal(back.reps, reps.reps)
    assert back.task_names == ["a", "b"] and back.K == 2
    assert json.loads((tmp_path / "layout.json").read_text())["n_layers"] == 3


def test_ingest_per_layer_entries(tmp_path, rng):
    x = rng.normal(size=(2, 2, 2, 3))
    tensors = {f"{t}-{i}-{l}": x[t, i, l] for t in range(2) for i in range(2) for l in range(2)}
    save_tensors(tmp_path / "c.iclt", tensors, dtype="f64")
    layout = _layout(entries={f"{t}-{i}-{l}": [t, i, l] for t in range(2) for i in range(2) for l in range(2)})
    assert np.array_equal(ingest_external_reps(tmp_path / "c.iclt", layout).reps, x)


def test_ingest_missing_layer_is_coverage_error(tmp_path, rng):
    tensors = {f"{t}-{i}-0": rng.normal(size=3) for t in range(2) for i in range(2)}
    save_tensors(tmp_path / "c.iclt", tensors, dtype="f64")
    layout = _layout(entries={f"{t}-{i}-0": [t, i, 0] for t in range(2) for i in range(2)})
    with pytest.raises(CoverageError) as exc:
        ingest_external_reps(tmp_path / "c.iclt", layout)
    assert (0, 0, 1) in exc.value.gaps


def test_ingest_dimension_mismatch(tmp_path, rng):
    tensors = {f"t{t}/i{i}": rng.normal(size=(2, 4 if (t, i) == (1, 1) else 3)) for t in range(2) for i in range(2)}
    save_tensors(tmp_path / "c.iclt", tensors, dtype="f64")
    with pytest.raises(ShapeError):
        ingest_external_reps(tmp_path / "c.iclt", _layout())


def test_trace_dump_matches_in_memory_tdnv(tiny_model, tmp_path):
    tasks = get_tasks(["copy", "next", "upper"])
    traces = trace_instances(tiny_model, sample_dataset(tasks, N=4, K=3, seed=0))
    reps = traces.representation_set(tasks)
    dump_representations(reps, tmp_path / "reps.iclt", tmp_path / "layout.json", dtype="f32")
    ingested = ingest_external_reps(tmp_path / "reps.iclt", tmp_path / "layout.json")
    rounded = RepresentationSet(reps=round_to(reps.reps, "f32"), kind=reps.kind)
    assert np.array_equal(tdnv_curve(ingested).values, tdnv_curve(rounded).values)
