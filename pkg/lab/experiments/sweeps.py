"""
Sweeps over context corruption, context length, model size and context extension
"""

import logging
from typing import Any, Dict, List

import numpy as np

from lab.core.exceptions import ConfigError
from lab.experiments.context import Measurement, RunContext, series_rows
from lab.experiments.geometry_runs import grid_rows, pca_rows
from lab.experiments.probe_runs import build_probes, task_vector_scores
from lab.geometry import TDNVCurve, grid_tdnv, pca_2d
from lab.models.config import NoiseSpec, default_contrast_layer
from lab.taskgen import (
    STREAM_DATA,
    STREAM_EVAL,
    STREAM_EXTEND,
    ICLInstance,
    extend_instance,
    instance_rng,
    make_instance,
)
from lab.tracing import trace_instances
from lab.transformer import init_model

logger = logging.getLogger(__name__)


def sweep_row(series: str, x: float, m: Measurement, layer: int) -> Dict[str, Any]:
    return {"series": series, "x": x, "tdnv_at_opt": float(m.curve.values[layer]),
            "opt_layer": m.curve.argmin, "accuracy": m.accuracy}


def _report(ctx: RunContext, curves: Dict[str, TDNVCurve], rows: List[Dict[str, Any]], title: str) -> None:
    with ctx.stage("report"):
        ctx.write_csv("tdnv_curves.csv", series_rows(curves))
        ctx.write_csv("sweep_summary.csv", rows)
        ctx.plot(["tdnv_curves.csv"], "layers", "tdnv_curves.svg", title=title)


def run_noise_sweep(ctx: RunContext) -> Dict[str, Any]:
    """Layerwise TDNV as a growing fraction of demonstrations carries wrong labels"""
    layer, reference = ctx.reference()
    clean = ctx.dataset()
    curves, rows = {}, []
    with ctx.stage("sweep"):
        for ratio in ctx.config.noise_ratios:
            m = ctx.measure(ctx.corrupt(clean, NoiseSpec(mode="ratio", ratio=ratio)))
            curves[f"ratio={ratio:g}"] = m.curve
            rows.append(sweep_row("noise_ratio", ratio, m, layer))
            logger.info(f"ratio {ratio:g}: TDNV at layer {layer} = {m.curve.values[layer]:.4f}, "
                        f"accuracy {m.accuracy:.3f}")
    _report(ctx, curves, rows, f"TDNV under label noise (K={ctx.config.k})")
    return {
        "layer": layer,
        "tdnv_at_opt": {r["x"]: r["tdnv_at_opt"] for r in rows},
        "u_shape_ratio": {
            name: float(c.values[layer] / min(c.endpoints)) for name, c in curves.items()
        },
        "clean_accuracy": reference.accuracy,
    }


def run_position_sweep(ctx: RunContext) -> Dict[str, Any]:
    """Single-position corruptions with their grids, then the first-c vs last-c comparison"""
    layer, _ = ctx.reference()
    K = ctx.config.k
    c = ctx.config.perturb_count
    if c > K:
        raise ConfigError(f"perturb_count={c} exceeds K={K}")
    positions = [p for p in ctx.config.perturb_positions if p < K]
    skipped = sorted(set(ctx.config.perturb_positions) - set(positions))
    if skipped:
        ctx.note(f"positions {skipped} skipped: K={K}")
    clean = ctx.dataset()
    tasks = ctx.tasks()
    curves, rows = {}, []
    with ctx.stage("sweep"):
        for p in positions:
            m = ctx.measure(ctx.corrupt(clean, NoiseSpec(mode="position", positions=[p])))
            grid = grid_tdnv(m.traces.grid_input(), m.traces.task_labels(tasks),
                             literal_sum=ctx.config.tdnv_literal_sum)
            ctx.write_csv(f"grid_tdnv_pos{p}.csv", grid_rows(grid.values))
            curves[f"pos={p}"] = m.curve
            rows.append(sweep_row("position", p, m, layer))
        for name, chosen in ((f"first{c}", range(c)), (f"last{c}", range(K - c, K))):
            m = ctx.measure(ctx.corrupt(clean, NoiseSpec(mode="position", positions=list(chosen))))
            curves[name] = m.curve
            rows.append(sweep_row(name, c, m, layer))
    _report(ctx, curves, rows, f"TDNV with one corrupted demonstration (K={K})")
    first, last = curves[f"first{c}"].values[layer], curves[f"last{c}"].values[layer]
    return {"layer": layer, "first_tdnv": float(first), "last_tdnv": float(last), "later_is_worse": bool(last >= first)}


def shared_query_instances(ctx: RunContext, tasks, K: int) -> List[ICLInstance]:
    """Instance i of every task uses the same query; task-major order"""
    domains = {t.input_domain for t in tasks}
    if len(domains) != 1 or len({t.family for t in tasks}) != 1:
        raise ConfigError("shared-query PCA needs tasks with one input domain")
    rng = np.random.default_rng((ctx.config.seed, STREAM_EVAL, 0))
    queries = [tasks[0].sample_input(rng) for _ in range(ctx.config.n_instances)]
    return [
        make_instance(t, K, instance_rng(ctx.config.seed, STREAM_DATA, t, i), p_max=ctx.config.p_max, query=q)
        for t in tasks
        for i, q in enumerate(queries)
    ]


def run_k_sweep(ctx: RunContext) -> Dict[str, Any]:
    """TDNV across demonstration counts plus shared-query PCA of two tasks per K"""
    model = ctx.model()
    layer, _ = ctx.reference()
    curves, rows = {}, []
    with ctx.stage("sweep"):
        for K in ctx.config.k_sweep_values:
            if K == 0:
                ctx.note("K=0 skipped in the TDNV sweep: queries alone do not identify the task")
                continue
            m = ctx.measure(ctx.dataset(K=K))
            curves[f"K={K}"] = m.curve
            rows.append(sweep_row("K", K, m, layer))
    pca_tasks = ctx.tasks(ctx.config.pca_tasks)
    pca_files = []
    with ctx.stage("pca"):
        for K in sorted({0} | set(ctx.config.k_sweep_values)):
            traces = trace_instances(model, shared_query_instances(ctx, pca_tasks, K))
            reps = traces.representation_set(pca_tasks, ctx.config.representation)
            vectors, _ = reps.at_layer(layer)
            pca = pca_2d(vectors)
            name = f"pca_k{K}.csv"
            ctx.write_csv(name, pca_rows(pca.coords, reps.task_names, reps.n_instances))
            ctx.plot([name], "pca", f"pca_k{K}.svg", title=f"Shared-query PCA at layer {layer}, K={K}")
            pca_files.append(name)
    _report(ctx, curves, rows, "TDNV across K")
    values = [r["tdnv_at_opt"] for r in rows]
    return {
        "layer": layer,
        "tdnv_at_opt": {r["x"]: r["tdnv_at_opt"] for r in rows},
        "strictly_decreasing": bool(all(a > b for a, b in zip(values, values[1:]))),
        "pca_files": pca_files,
    }


def run_size_sweep(ctx: RunContext) -> Dict[str, Any]:
    """Train one model per (n_layers, d_model) and compare geometry and probe accuracy"""
    if ctx.config.checkpoint:
        ctx.note("size_sweep trains its own models; the configured checkpoint is ignored")
    tasks = ctx.tasks()
    curves, rows = {}, []
    for L, d in ctx.config.size_grid:
        tag = f"L{L}_d{d}"
        if d % ctx.config.n_heads:
            raise ConfigError(f"size {tag}: d_model={d} is not divisible by n_heads={ctx.config.n_heads}")
        with ctx.stage(f"train_{tag}"):
            sized = ctx.config.model_copy(update={"n_layers": L, "d_model": d, "d_ff": 4 * d})
            model = init_model(sized.model_settings(len(ctx.tokenizer)))
            model, _ = ctx.train_model(model, tasks, prefix=f"{tag}_", contrast_layer=default_contrast_layer(L))
            ctx.save_model(model, f"model_{tag}.iclt")
        with ctx.stage(f"measure_{tag}"):
            m = ctx.measure(ctx.dataset(), model)
            layer = max(1, m.curve.argmin)
            scores = task_vector_scores(model, build_probes(ctx, tasks), layer)
        curves[tag] = m.curve
        rows.append({"n_layers": L, "d_model": d, "opt_layer": m.curve.argmin, "icl_acc": m.accuracy,
                     "tv_acc": scores["tv_acc"], "baseline": scores["baseline"]})
        logger.info(f"{tag}: optimal layer {m.curve.argmin}, ICL {m.accuracy:.3f}, TV {scores['tv_acc']:.3f}")
    with ctx.stage("report"):
        ctx.write_csv("size_sweep.csv", rows)
        ctx.write_csv("tdnv_curves.csv", series_rows(curves))
        ctx.plot(["tdnv_curves.csv"], "layers", "tdnv_curves.svg", title="TDNV by model size")
    return {"sizes": rows}


def run_repeat_distinct(ctx: RunContext) -> Dict[str, Any]:
    """Extend short contexts by repeating their demonstrations or by fresh distinct ones"""
    layer, _ = ctx.reference()
    by_id = {t.id: t for t in ctx.tasks()}
    base = ctx.dataset(K=ctx.config.k_base)
    curves, rows = {}, []
    with ctx.stage("sweep"):
        m = ctx.measure(base)
        curves[f"base K={ctx.config.k_base}"] = m.curve
        rows.append(sweep_row("base", ctx.config.k_base, m, layer))
        for mode in ("repeat", "distinct"):
            extended = [
                extend_instance(inst, mode, ctx.config.k_extended, by_id[inst.task_id],
                                np.random.default_rng((ctx.config.seed, STREAM_EXTEND, i)), p_max=ctx.config.p_max)
                for i, inst in enumerate(base)
            ]
            m = ctx.measure(extended)
            curves[mode] = m.curve
            rows.append(sweep_row(mode, ctx.config.k_extended, m, layer))
    _report(ctx, curves, rows, f"Extending K={ctx.config.k_base} to {ctx.config.k_extended}")
    by_series = {r["series"]: r for r in rows}
    return {
        "layer": layer,
        "repeat": by_series["repeat"],
        "distinct": by_series["distinct"],
        "distinct_is_better": bool(by_series["distinct"]["tdnv_at_opt"] < by_series["repeat"]["tdnv_at_opt"]
                                   and by_series["distinct"]["accuracy"] >= by_series["repeat"]["accuracy"]),
    }


experiments = {
    "noise_sweep": run_noise_sweep,
    "position_sweep": run_position_sweep,
    "k_sweep": run_k_sweep,
    "size_sweep": run_size_sweep,
    "repeat_distinct": run_repeat_distinct,
}
