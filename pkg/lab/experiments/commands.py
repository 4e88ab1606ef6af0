"""
Data-plumbing commands: dataset dumps, trace dumps and ingestion of external dumps
"""

import logging
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

from lab.experiments.context import RunContext, tdnv_rows
from lab.geometry import tdnv_curve
from lab.io.ingest import LayoutManifest, dump_representations, ingest_external_reps, round_to
from lab.taskgen import dump_dataset
from lab.tracing import trace_instances

logger = logging.getLogger(__name__)


def run_gen_data(ctx: RunContext) -> Dict[str, Any]:
    """dataset.tsv for the configured tasks, with the configured label noise applied"""
    tasks = ctx.tasks()
    with ctx.stage("generate"):
        instances = ctx.dataset()
        spec = ctx.config.noise_spec()
        if spec.ratio > 0 or spec.positions:
            instances = ctx.corrupt(instances, spec)
        dump_dataset(instances, ctx.track("dataset.tsv"))
    rows = []
    for task in tasks:
        lengths = [len(inst) for inst in instances if inst.task_id == task.id]
        rows.append({"task": task.name, "K": ctx.config.k, "n_instances": len(lengths),
                     "mean_length": float(np.mean(lengths))})
    with ctx.stage("report"):
        ctx.write_csv("dataset_summary.csv", rows)
    return {"instances": len(instances), "max_length": max(len(inst) for inst in instances)}


def run_trace(ctx: RunContext) -> Dict[str, Any]:
    """reps.iclt + reps_layout.json, and the TDNV curve of exactly the dumped values"""
    model = ctx.model()
    tasks = ctx.tasks()
    with ctx.stage("trace"):
        traces = trace_instances(model, ctx.dataset())
        reps = traces.representation_set(tasks, ctx.config.representation, model_tag=f"L{model.n_layers}")
    dtype = ctx.dump_dtype
    with ctx.stage("dump"):
        dump_representations(reps, ctx.track("reps.iclt"), ctx.track("reps_layout.json"), dtype=dtype)
        curve = tdnv_curve(replace(reps, reps=round_to(reps.reps, dtype)), literal_sum=ctx.config.tdnv_literal_sum)
    with ctx.stage("report"):
        ctx.write_csv("tdnv_curve.csv", tdnv_rows(curve))
        ctx.plot(["tdnv_curve.csv"], "layers", "tdnv_curve.svg", title=f"TDNV ({reps.kind}, {dtype} dump)")
    return {"dtype": dtype, "optimal_layer": curve.argmin, "accuracy": traces.accuracy()}


def run_ingest(ctx: RunContext, container: Union[str, Path], layout: Union[str, Path]) -> Dict[str, Any]:
    """TDNV curve of hidden states produced elsewhere"""
    with ctx.stage("ingest"):
        manifest = LayoutManifest.from_file(layout)
        reps = ingest_external_reps(container, manifest)
        curve = tdnv_curve(reps, literal_sum=ctx.config.tdnv_literal_sum)
    with ctx.stage("report"):
        ctx.write_csv("tdnv_curve.csv", tdnv_rows(curve))
        ctx.plot(["tdnv_curve.csv"], "layers", "tdnv_curve.svg",
                 title=f"TDNV of {Path(container).name} ({reps.kind})")
    return {
        "container": str(container),
        "tasks": reps.task_names,
        "n_instances": reps.n_instances,
        "layers": reps.n_layers,
        "optimal_layer": curve.argmin,
    }


commands = {
    "gen_data": run_gen_data,
    "trace": run_trace,
    "ingest": run_ingest,
}
