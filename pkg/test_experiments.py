#!/usr/bin/env python3
"""
End-to-end runs of the probe, sweep and fine-tuning experiments on a tiny checkpoint
"""

import numpy as np
import pytest

from lab.experiments.contrastive import bootstrap_mean_ci
from lab.experiments.runner import run_experiment
from lab.io.container import load_tensors
from lab.io.csvio import read_csv
from lab.models.config import ExperimentConfig

TINY = dict(
    seed=0,
    tasks=["copy", "next", "upper"],
    n_instances=6,
    k=4,
    n_layers=2,
    d_model=16,
    n_heads=2,
    d_ff=32,
    p_max=128,
    steps=3,
    warmup_steps=1,
    batch_size=6,
    k_train=4,
    eval_every=2,
    eval_instances=3,
    eval_k=3,
    saliency_instances=1,
)


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    report = run_experiment(ExperimentConfig(kind="train", output_dir=str(out), **TINY))
    return str(report.file("model.iclt"))


@pytest.fixture
def experiment(tmp_path, checkpoint):
    def make(kind, **overrides):
        fields = dict(TINY, kind=kind, output_dir=str(tmp_path / kind), checkpoint=checkpoint)
        fields.update(overrides)
        return ExperimentConfig(**fields)

    return make


def test_probes_run(experiment):
    report = run_experiment(experiment("probes"))
    rows = read_csv(report.file("probe_report.csv"))
    assert [int(r["layer"]) for r in rows] == [0, 1, 2]
    assert 1 <= report.summary["optimal_layer"] <= 2
    assert 0.0 <= report.summary["icl_acc"] <= 1.0
    saliency = load_tensors(report.file("saliency.iclt"))
    assert "copy/i0" in saliency and "copy/i0/shallow" in saliency
    assert report.manifest.stages == ["load", "reference", "probe", "saliency", "report"]


def test_noise_sweep(experiment):
    report = run_experiment(experiment("noise_sweep", noise_ratios=[0.0, 1.0]))
    rows = read_csv(report.file("sweep_summary.csv"))
    assert [float(r["x"]) for r in rows] == [0.0, 1.0]
    # the zero-ratio series is the clean reference dataset
    assert report.summary["tdnv_at_opt"]["0.0"] == pytest.approx(
        float(read_csv(report.file("tdnv_curves.csv"))[report.summary["layer"]]["value"]))
    assert report.file("tdnv_curves.svg").exists()


def test_position_sweep_skips_positions_beyond_k(experiment):
    report = run_experiment(experiment("position_sweep", perturb_positions=[0, 2, 9], perturb_count=2))
    assert report.file("grid_tdnv_pos0.csv").exists() and report.file("grid_tdnv_pos2.csv").exists()
    assert not report.file("grid_tdnv_pos9.csv").exists()
    assert any("[9]" in n for n in report.manifest.notes)
    series = [r["series"] for r in read_csv(report.file("sweep_summary.csv"))]
    assert series == ["position", "position", "first2", "last2"]


def test_k_sweep_writes_shared_query_pca(experiment):
    report = run_experiment(experiment("k_sweep", k_sweep_values=[0, 1, 3]))
    assert report.summary["pca_files"] == ["pca_k0.csv", "pca_k1.csv", "pca_k3.csv"]
    assert set(report.summary["tdnv_at_opt"]) == {"1", "3"}
    rows = read_csv(report.file("pca_k1.csv"))
    assert {r["task"] for r in rows} == {"copy", "upper"}
    assert any("K=0" in n for n in report.manifest.notes)


def test_repeat_distinct(experiment):
    report = run_experiment(experiment("repeat_distinct", k_base=2, k_extended=4))
    series = [r["series"] for r in read_csv(report.file("sweep_summary.csv"))]
    assert series == ["base", "repeat", "distinct"]
    assert isinstance(report.summary["distinct_is_better"], bool)


def test_bias_variance(experiment):
    report = run_experiment(experiment("bias_variance", k_grid=[0, 1, 2, 3], k_inf_instances=8))
    rows = read_csv(report.file("bias_variance.csv"))
    assert [int(r["K"]) for r in rows] == [0, 1, 2, 3]
    assert float(rows[0]["bias_ratio"]) == pytest.approx(1.0)
    assert float(rows[-1]["bias_ratio"]) == 0.0
    assert report.summary["K_inf"] == 3


def test_grid_tdnv(experiment):
    report = run_experiment(experiment("grid_tdnv"))
    rows = read_csv(report.file("grid_tdnv.csv"))
    assert len(rows) == 3 * 5
    assert report.summary["K"] == 4


def test_size_sweep_ignores_checkpoint(experiment):
    report = run_experiment(experiment("size_sweep", size_grid=[(1, 8)]))
    rows = read_csv(report.file("size_sweep.csv"))
    assert [(int(r["n_layers"]), int(r["d_model"])) for r in rows] == [(1, 8)]
    assert report.file("model_L1_d8.iclt").exists()
    assert any("checkpoint is ignored" in n for n in report.manifest.notes)


def test_contrastive_compare(experiment):
    report = run_experiment(experiment("contrastive_compare", contrastive_tasks=["copy", "next", "upper"],
                                       finetune_steps=2))
    summary = report.summary
    assert summary["contrast_layer"] == 2
    lo, hi = summary["tv_gain_ci"]
    assert lo <= hi and -1.0 <= summary["tv_gain"] <= 1.0
    for tag in ("ce_only", "contrastive"):
        assert report.file(f"model_{tag}.iclt").exists()
        assert report.file(f"pca_{tag}.csv").exists()


def test_bootstrap_interval():
    mean, lo, hi = bootstrap_mean_ci(np.array([1.0, 0.0, 1.0, 1.0]), seed=0)
    assert mean == 0.75 and 0.0 <= lo <= mean <= hi <= 1.0
    assert bootstrap_mean_ci(np.array([0.5]), seed=0) == (0.5, 0.5, 0.5)
    assert bootstrap_mean_ci(np.ones(5), seed=0) == (1.0, 1.0, 1.0)


# The toy model behind the qualitative checks: L=8, d=64 on the five letter tasks, judged at K=10
TOY = dict(
    seed=0,
    n_instances=40,
    k=10,
    lr=1e-3,
    steps=4000,
    warmup_steps=200,
    batch_size=50,
    k_train=15,
    eval_every=1000,
    saliency_instances=0,
)


@pytest.fixture(scope="module")
def toy_checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    report = run_experiment(ExperimentConfig(kind="train", output_dir=str(out), **TOY))
    return str(report.file("model.iclt"))


@pytest.fixture
def toy_experiment(tmp_path, toy_checkpoint):
    def run(kind, **overrides):
        fields = dict(TOY, kind=kind, output_dir=str(tmp_path / kind), checkpoint=toy_checkpoint)
        fields.update(overrides)
        return run_experiment(ExperimentConfig(**fields)).summary

    return run


def _by_x(values):
    return [v for _, v in sorted((float(k), v) for k, v in values.items())]


@pytest.mark.slow
def test_toy_tdnv_is_u_shaped(toy_experiment):
    summary = toy_experiment("tdnv")
    assert summary["accuracy"] >= 0.95
    assert 0 < summary["optimal_layer"] < 8
    assert summary["tdnv_min"] < 0.5 * min(summary["tdnv_first"], summary["tdnv_last"])


@pytest.mark.slow
def test_toy_probes_peak_near_the_optimal_layer(toy_experiment):
    summary = toy_experiment("probes")
    assert summary["early_exit_final"] >= 0.95
    assert summary["early_exit_at_optimal"] <= summary["early_exit_final"] - 0.20
    assert abs(summary["tv_acc_argmax"] - summary["optimal_layer"]) <= 2


@pytest.mark.slow
def test_toy_more_demonstrations_compress(toy_experiment):
    summary = toy_experiment("k_sweep", k_sweep_values=[2, 5, 10, 20])
    assert summary["strictly_decreasing"], summary["tdnv_at_opt"]
    summary = toy_experiment("bias_variance", k_grid=[0, 1, 2, 4, 8, 16, 32])
    assert summary["bias_slope"] <= -0.5
    assert summary["variance_slope"] <= -0.5


@pytest.mark.slow
def test_toy_label_noise(toy_experiment):
    summary = toy_experiment("noise_sweep", noise_ratios=[0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    values = _by_x(summary["tdnv_at_opt"])
    assert all(a <= b for a, b in zip(values, values[1:])), values
    assert summary["u_shape_ratio"]["ratio=1"] > 0.8
    summary = toy_experiment("position_sweep", perturb_count=3)
    assert summary["later_is_worse"], (summary["first_tdnv"], summary["last_tdnv"])


@pytest.mark.slow
def test_toy_distinct_beats_repeat(toy_experiment):
    summary = toy_experiment("repeat_distinct", k_base=5, k_extended=20)
    assert summary["distinct_is_better"], (summary["repeat"], summary["distinct"])


@pytest.mark.slow
def test_toy_contrastive_finetuning_helps(toy_experiment):
    summary = toy_experiment("contrastive_compare", finetune_steps=1000)
    tdnv = summary["tdnv_at_contrast_layer"]
    assert tdnv["contrastive"] < tdnv["ce_only"]
    assert summary["tv_gain"] > 0 and summary["tv_gain_ci"][0] > 0
    assert summary["improved"]
