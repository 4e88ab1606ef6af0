#!/usr/bin/env python3
"""
Tests for TDNV, grid TDNV, PCA and the bias-variance decomposition
"""

import numpy as np
import pytest
from scipy import linalg

from lab.core.exceptions import DegenerateGeometryError, RaggedInstancesError, ShapeError
from lab.geometry import (
    RepresentationSet,
    TDNVCurve,
    between_task_distance,
    bias_variance_decompose,
    compression_expression_ratios,
    grid_tdnv,
    loglog_slope,
    optimal_layer,
    pca_2d,
    tdnv,
    tdnv_curve,
    within_task_variance,
)

TWO_TASKS = np.array([[0.0, 0.0], [2.0, 0.0], [5.0, 0.0], [5.0, 2.0]])
TWO_LABELS = [0, 0, 1, 1]


def test_within_task_variance_examples():
    assert within_task_variance([[0.0, 0.0], [2.0, 0.0]]) == 1.0
    assert within_task_variance([[3.0, 1.0]] * 4) == 0.0
    assert within_task_variance([[3.0, 1.0]]) == 0.0
    with pytest.raises(ShapeError):
        within_task_variance(np.empty((0, 2)))


def test_between_task_distance_examples():
    assert between_task_distance([1.0, 0.0], [5.0, 1.0]) == 17.0
    assert between_task_distance([5.0, 1.0], [1.0, 0.0]) == 17.0
    assert between_task_distance([2.0, 2.0], [2.0, 2.0]) == 0.0
    with pytest.raises(ShapeError):
        between_task_distance([1.0, 0.0], [1.0, 0.0, 0.0])


def test_tdnv_hand_example():
    """Variances 1 and 1, squared mean distance 17"""
    assert tdnv(TWO_TASKS, TWO_LABELS) == pytest.approx(1.0 / 17.0)
    assert tdnv(TWO_TASKS, TWO_LABELS, literal_sum=True) == pytest.approx(2.0 / 17.0)


def test_tdnv_literal_sum_scales_with_pair_count(rng):
    T, N = 4, 10
    x = rng.normal(size=(T * N, 3)) + np.repeat(rng.normal(scale=4.0, size=(T, 3)), N, axis=0)
    labels = np.repeat(np.arange(T), N)
    assert tdnv(x, labels, literal_sum=True) == pytest.approx(tdnv(x, labels) * T * (T - 1))


def test_tdnv_zero_variance_and_permutation(rng):
    x = np.repeat(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 3.0]]), 4, axis=0)
    labels = np.repeat(np.arange(3), 4)
    assert tdnv(x, labels) == 0.0

    noisy = x + rng.normal(scale=0.1, size=x.shape)
    relabelled = np.array([2, 0, 1])[labels]
    assert tdnv(noisy, relabelled) == pytest.approx(tdnv(noisy, labels))


def test_tdnv_degenerate():
    with pytest.raises(DegenerateGeometryError):
        tdnv(TWO_TASKS, [0, 0, 0, 0])
    with pytest.raises(DegenerateGeometryError):
        tdnv([[0.0, 0.0], [2.0, 0.0], [1.0, 1.0], [1.0, -1.0]], TWO_LABELS)
    with pytest.raises(ShapeError):
        tdnv(TWO_TASKS, [0, 1])


def _u_shaped_reps(rng, spreads):
    """[T, N, L+1, d] with task means fixed and per-layer spread"""
    T, N, d = 3, 8, 4
    centers = np.eye(d)[:T] * 5.0
    reps = np.empty((T, N, len(spreads), d))
    for l, s in enumerate(spreads):
        reps[:, :, l, :] = centers[:, None, :] + rng.normal(scale=s, size=(T, N, d))
    return reps


def test_tdnv_curve_finds_tight_layer(rng):
    curve = tdnv_curve(RepresentationSet(_u_shaped_reps(rng, [2.0, 1.0, 0.1, 1.0, 2.0]), kind="last_sep"))
    assert curve.values.shape == (5,)
    assert curve.argmin == 2
    compression, expression = compression_expression_ratios(curve)
    assert 0.0 < compression < 1.0 and 0.0 < expression < 1.0


def test_tdnv_curve_marks_coincident_layers_undefined(rng):
    """Identical embeddings at layer 0 leave that point NaN instead of aborting the curve"""
    reps = _u_shaped_reps(rng, [1.0, 0.5, 1.0])
    reps[:, :, 0, :] = 1.0
    curve = tdnv_curve(RepresentationSet(reps, kind="last_sep"))
    assert np.isnan(curve.values[0])
    assert np.all(np.isfinite(curve.values[1:]))
    assert curve.argmin == 1
    compression, _ = compression_expression_ratios(curve)
    # the first defined layer is also the minimum
    assert compression == 0.0
    with pytest.raises(DegenerateGeometryError):
        tdnv_curve(RepresentationSet(reps[:1], kind="last_sep"))
    with pytest.raises(DegenerateGeometryError):
        optimal_layer([np.nan, np.nan])


def test_grid_last_column_matches_curve(rng):
    n_tasks, per_task, n_layers, n_seps, d = 2, 5, 3, 4, 6
    h = rng.normal(size=(n_tasks * per_task, n_layers, n_seps, d))
    h[:per_task] += 3.0
    labels = np.repeat(np.arange(n_tasks), per_task)
    grid = grid_tdnv(h, labels)
    assert grid.values.shape == (n_layers, n_seps)
    assert grid.K == n_seps - 1

    last = h[:, :, -1, :].reshape(n_tasks, per_task, n_layers, d)
    curve = tdnv_curve(RepresentationSet(last, kind="last_sep"))
    assert np.allclose(grid.values[:, -1], curve.values)


def test_grid_single_demo_has_two_columns(rng):
    h = rng.normal(size=(6, 2, 2, 3))
    h[:3] += 2.0
    assert grid_tdnv(h, [0, 0, 0, 1, 1, 1]).values.shape == (2, 2)


def test_grid_rejects_ragged_instances():
    with pytest.raises(RaggedInstancesError):
        grid_tdnv([np.zeros((2, 3, 4)), np.zeros((2, 5, 4))], [0, 1])


def test_compression_expression_examples():
    assert compression_expression_ratios(TDNVCurve(np.array([10.0, 1.0, 4.0]))) == pytest.approx((0.9, 0.75))
    assert compression_expression_ratios(TDNVCurve(np.array([2.0, 2.0, 2.0]))) == (0.0, 0.0)
    assert compression_expression_ratios(TDNVCurve(np.array([3.0, 2.0, 1.0])))[1] == 0.0
    with pytest.raises(DegenerateGeometryError):
        compression_expression_ratios(TDNVCurve(np.array([0.0, 1.0])))


@pytest.mark.parametrize("values,expected", [([3, 1, 2], 1), ([2, 1, 1, 3], 1), ([5, 4, 3, 2], 3)])
def test_optimal_layer(values, expected):
    assert optimal_layer(values) == expected


def test_pca_collinear_points():
    x = np.outer(np.arange(6.0), np.array([1.0, 2.0, -1.0]))
    result = pca_2d(x)
    assert result.explained[1] == pytest.approx(0.0, abs=1e-10)
    assert np.allclose(result.coords.mean(axis=0), 0.0, atol=1e-12)


def test_pca_matches_dense_eigendecomposition(rng):
    x = rng.normal(size=(400, 2)) @ np.diag([1.0, 1.2])
    x = np.hstack([x, 0.01 * rng.normal(size=(400, 3))])
    result = pca_2d(x)

    cov = np.cov(x, rowvar=False)
    evals, evecs = linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:2]
    assert result.explained == pytest.approx(evals[order], rel=1e-6)
    for i, j in enumerate(order):
        assert abs(abs(result.components[:, i] @ evecs[:, j]) - 1.0) < 1e-6
    assert np.allclose(result.coords.mean(axis=0), 0.0, atol=1e-12)


def test_pca_needs_two_vectors():
    with pytest.raises(ShapeError):
        pca_2d([[1.0, 2.0]])


def test_loglog_slope():
    xs = [1, 2, 4, 8, 16]
    assert loglog_slope(xs, [1.0 / x for x in xs]) == pytest.approx(-1.0)
    assert loglog_slope([1, 2, 4], [1.0, 0.5, 0.25]) is None
    # non-positive points are dropped before counting
    assert loglog_slope([0, 1, 2, 4], [1.0, 1.0, 0.5, 0.25]) is None


def _synthetic_by_K(rng, grid, T=2, N=400, d=4):
    mu = np.stack([np.full(d, 2.0), np.full(d, -2.0)])[:T]
    reps = {0: np.repeat(np.zeros((T, 1, d)), N, axis=1) + rng.normal(scale=0.1, size=(T, N, d))}
    for k in grid:
        if k > 0:
            reps[k] = mu[:, None, :] + rng.normal(size=(T, N, d)) / np.sqrt(k)
    return reps


def test_bias_variance_on_synthetic_reps(rng):
    grid = [0, 1, 2, 4, 8, 16, 32]
    report = bias_variance_decompose(_synthetic_by_K(rng, grid), grid)
    assert report.K_inf == 32
    assert report.mean_bias_ratio[0] == pytest.approx(1.0)
    assert report.mean_bias_ratio[-1] == 0.0
    assert report.variance_slope == pytest.approx(-1.0, abs=0.1)
    assert report.means.shape == (2, len(grid), 4)
    assert "K=32" in report.note


def test_bias_variance_rejects_bad_grids(rng):
    reps = _synthetic_by_K(rng, [0, 1, 2, 4])
    with pytest.raises(ValueError):
        bias_variance_decompose(reps, [1, 2, 4])
    with pytest.raises(ValueError):
        bias_variance_decompose(reps, [0, 4])
    with pytest.raises(ShapeError):
        bias_variance_decompose(reps, [0, 1, 2, 4, 8])
