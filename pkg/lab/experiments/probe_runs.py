"""
Task-vector, early-exit and saliency probes
"""

import logging
from typing import Any, Dict, List

import numpy as np

from lab.core.exceptions import ConfigError, UnsupportedProbeError
from lab.experiments.context import RunContext
from lab.probes import (
    TaskProbe,
    aggregate_saliency,
    choose_dummy_query,
    evaluation_queries,
    extract_task_vectors,
    probe_report,
    saliency_groups,
    saliency_maps,
    task_vector_hits,
    zero_shot_accuracy,
)
from lab.taskgen import STREAM_EVAL, TaskSpec

logger = logging.getLogger(__name__)


def build_probes(ctx: RunContext, tasks: List[TaskSpec]) -> List[TaskProbe]:
    """One instance per evaluation query; queries never equal the dummy query"""
    probes = []
    for task in tasks:
        try:
            dummy = choose_dummy_query(task, ctx.config.dummy_query)
        except ValueError as e:
            raise ConfigError(str(e))
        rng = np.random.default_rng((ctx.config.seed, STREAM_EVAL, task.id))
        instances = ctx.dataset(tasks=[task])
        queries = evaluation_queries(task, dummy, len(instances), rng)
        probes.append(TaskProbe(task=task, instances=instances, queries=queries, dummy_query=dummy))
    return probes


def run_probes(ctx: RunContext) -> Dict[str, Any]:
    """probe_report.csv over all layers plus saliency dumps"""
    model = ctx.model()
    tasks = ctx.tasks()
    layer, _ = ctx.reference()
    with ctx.stage("probe"):
        report = probe_report(model, build_probes(ctx, tasks))
    summary: Dict[str, Any] = {
        "optimal_layer": layer,
        "icl_acc": report.icl_acc,
        "baseline": report.baseline,
        "tv_acc_argmax": int(np.argmax(report.tv_acc)),
        "mean_tv_acc_argmax": int(np.argmax(report.mean_tv_acc)),
        "tv_acc_at_optimal": float(report.tv_acc[layer]),
        "early_exit_at_optimal": float(report.early_exit_acc[layer]),
        "early_exit_final": float(report.early_exit_acc[-1]),
    }

    if ctx.config.saliency_instances:
        with ctx.stage("saliency"):
            groups = saliency_groups(model.n_layers, ctx.config.saliency_preset)
            tensors: Dict[str, np.ndarray] = {}
            try:
                for task in tasks:
                    chosen = ctx.dataset(tasks=[task], N=ctx.config.saliency_instances)
                    for j, maps in enumerate(saliency_maps(model, chosen)):
                        tensors[f"{task.name}/i{j}"] = maps
                        for name, agg in aggregate_saliency(maps, groups).items():
                            tensors[f"{task.name}/i{j}/{name}"] = agg
                ctx.save_tensors("saliency.iclt", tensors)
                summary["saliency_groups"] = {k: list(v) for k, v in groups.items()}
            except UnsupportedProbeError as e:
                ctx.note(f"saliency skipped: {e.message}")

    with ctx.stage("report"):
        ctx.write_csv("probe_report.csv", report.rows())
        ctx.plot(["probe_report.csv"], "layers", "probe_report.svg", title="Probe accuracy by layer")
    logger.info(f"Task-vector accuracy peaks at layer {summary['tv_acc_argmax']}, optimal TDNV layer {layer}")
    return summary


def task_vector_scores(model, probes: List[TaskProbe], layer: int) -> Dict[str, Any]:
    """Per-query hits (concatenated over tasks) with per-query vectors at ``layer`` and the zero-shot baseline"""
    hits, baseline = [], []
    for probe in probes:
        vectors = extract_task_vectors(model, probe.instances, probe.task, probe.dummy_query)[:, layer, :]
        hits.append(task_vector_hits(model, probe.task, layer, probe.queries, vectors))
        baseline.append(zero_shot_accuracy(model, probe.task, probe.queries))
    hits = np.concatenate(hits)
    return {"hits": hits, "tv_acc": float(hits.mean()), "baseline": float(np.mean(baseline))}


experiments = {"probes": run_probes}
