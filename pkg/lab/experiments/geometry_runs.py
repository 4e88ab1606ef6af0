"""
Training and layerwise geometry experiments: train, tdnv, grid_tdnv, bias_variance
"""

import logging
from typing import Any, Dict

import numpy as np

from lab.core.exceptions import DegenerateGeometryError
from lab.experiments.context import RunContext, series_rows, tdnv_rows
from lab.geometry import (
    REPRESENTATION_KINDS,
    bias_variance_decompose,
    compression_expression_ratios,
    grid_tdnv,
    pca_2d,
    tdnv_curve,
)
from lab.tracing import trace_instances

logger = logging.getLogger(__name__)


def run_train(ctx: RunContext) -> Dict[str, Any]:
    """Train from scratch (ignores ``checkpoint``) and save model.iclt"""
    if ctx.config.checkpoint:
        ctx.note("train ignores the configured checkpoint and starts from a fresh initialization")
        ctx.config = ctx.config.model_copy(update={"checkpoint": None})
    model = ctx.model()
    with ctx.stage("report"):
        if ctx.config.steps > 0:
            ctx.plot(["tdnv_training.csv"], "layers", "tdnv_training.svg", title="TDNV at eval steps")
    return {"parameters": model.parameter_count(), "n_layers": model.n_layers}


def pca_rows(coords: np.ndarray, task_names, n_instances: int):
    return [
        {"task": task_names[j // n_instances], "instance": j % n_instances,
         "x": float(coords[j, 0]), "y": float(coords[j, 1])}
        for j in range(coords.shape[0])
    ]


def run_tdnv(ctx: RunContext) -> Dict[str, Any]:
    """Layerwise TDNV for every representation kind, ratios and PCA at the optimal layer"""
    model = ctx.model()
    tasks = ctx.tasks()
    with ctx.stage("trace"):
        traces = trace_instances(model, ctx.dataset())
        logger.info(f"ICL accuracy at K={ctx.config.k}: {traces.accuracy():.3f}")
    with ctx.stage("measure"):
        sets = {kind: traces.representation_set(tasks, kind, model_tag=f"L{model.n_layers}")
                for kind in REPRESENTATION_KINDS}
        curves = {kind: tdnv_curve(reps, literal_sum=ctx.config.tdnv_literal_sum) for kind, reps in sets.items()}
        chosen = ctx.config.representation
        curve = curves[chosen]
        layer = curve.argmin
        ratios = {}
        for kind, c in curves.items():
            try:
                ratios[kind] = compression_expression_ratios(c)
            except DegenerateGeometryError as e:
                ctx.note(f"{kind}: {e.message}")
                ratios[kind] = (None, None)
        vectors, _ = sets[chosen].at_layer(layer)
        pca = pca_2d(vectors)
    with ctx.stage("report"):
        ctx.write_csv("tdnv_curve.csv", tdnv_rows(curve))
        ctx.write_csv("tdnv_curves.csv", series_rows(curves))
        ctx.write_csv("compression_expression.csv", [
            {"representation": kind, "compression": c, "expression": e} for kind, (c, e) in ratios.items()
        ])
        ctx.write_csv("pca.csv", pca_rows(pca.coords, sets[chosen].task_names, sets[chosen].n_instances))
        ctx.plot(["tdnv_curve.csv"], "layers", "tdnv_curve.svg", title=f"TDNV ({chosen}, K={ctx.config.k})")
        ctx.plot(["tdnv_curves.csv"], "layers", "tdnv_curves.svg", title="TDNV by representation")
        ctx.plot(["pca.csv"], "pca", "pca.svg", title=f"PCA at layer {layer}")
    return {
        "accuracy": traces.accuracy(),
        "optimal_layer": layer,
        "tdnv_min": float(curve.values[layer]),
        "tdnv_first": curve.endpoints[0],
        "tdnv_last": curve.endpoints[1],
        "pca_explained": pca.explained,
    }


def run_grid_tdnv(ctx: RunContext) -> Dict[str, Any]:
    """TDNV at every (layer, separator) for a fixed-K instance set"""
    model = ctx.model()
    tasks = ctx.tasks()
    with ctx.stage("trace"):
        traces = trace_instances(model, ctx.dataset())
    with ctx.stage("measure"):
        grid = grid_tdnv(traces.grid_input(), traces.task_labels(tasks), literal_sum=ctx.config.tdnv_literal_sum)
        last = tdnv_curve(traces.representation_set(tasks, "last_sep"), literal_sum=ctx.config.tdnv_literal_sum)
        if not np.array_equal(grid.values[:, -1], last.values, equal_nan=True):
            ctx.note("final grid column differs from the last-separator curve")
    with ctx.stage("report"):
        ctx.write_csv("grid_tdnv.csv", grid_rows(grid.values))
        ctx.plot(["grid_tdnv.csv"], "heatmap", "grid_tdnv.svg", title=f"Grid TDNV (K={grid.K})")
    return {"K": grid.K, "optimal_layer_last_sep": last.argmin}


def grid_rows(values: np.ndarray):
    return [{"layer": l, "sep": s + 1, "value": float(values[l, s])}
            for l in range(values.shape[0]) for s in range(values.shape[1])]


def run_bias_variance(ctx: RunContext) -> Dict[str, Any]:
    """Task-vector means and variances at the optimal layer across the K grid"""
    model = ctx.model()
    tasks = ctx.tasks()
    layer, _ = ctx.reference()
    grid = ctx.config.k_grid
    K_inf = grid[-1]
    reps_by_K = {}
    with ctx.stage("trace"):
        for K in grid:
            n = ctx.config.k_inf_instances if K == K_inf else ctx.config.n_instances
            traces = trace_instances(model, ctx.dataset(K=K, N=n))
            reps = traces.representation_set(tasks, ctx.config.representation)
            reps_by_K[K] = reps.reps[:, :, layer, :]
            logger.info(f"K={K}: {n} instances per task, accuracy {traces.accuracy():.3f}")
    with ctx.stage("measure"):
        report = bias_variance_decompose(reps_by_K, grid, K_inf)
        ctx.note(f"{report.note} with {ctx.config.k_inf_instances} instances per task")
    with ctx.stage("report"):
        ctx.write_csv("bias_variance.csv", [
            {"K": K, "bias_ratio": float(b), "variance": float(v)}
            for K, b, v in zip(report.K_grid, report.mean_bias_ratio, report.mean_variance)
        ])
        ctx.plot(["bias_variance.csv"], "loglog", "bias_variance.svg", title=f"Bias and variance at layer {layer}")
    return {
        "layer": layer,
        "K_inf": K_inf,
        "bias_slope": report.bias_slope,
        "variance_slope": report.variance_slope,
        "mu_inf_note": report.note,
    }


experiments = {
    "train": run_train,
    "tdnv": run_tdnv,
    "grid_tdnv": run_grid_tdnv,
    "bias_variance": run_bias_variance,
}
