"""
CE-only vs CE + contrastive fine-tuning of the trained model for the same number of steps
"""

import logging
from typing import Any, Dict, Tuple

import numpy as np

from lab.experiments.context import RunContext, series_rows
from lab.experiments.geometry_runs import pca_rows
from lab.experiments.probe_runs import build_probes, task_vector_scores
from lab.geometry import pca_2d
from lab.models.config import default_contrast_layer

logger = logging.getLogger(__name__)

STREAM_BOOTSTRAP = 9
BOOTSTRAP_RESAMPLES = 2000
FINETUNE_K = 20

MODES = (("ce_only", "ce_only"), ("contrastive", "ce_plus_contrastive"))


def bootstrap_mean_ci(values: np.ndarray, seed: int, resamples: int = BOOTSTRAP_RESAMPLES,
                      level: float = 0.95) -> Tuple[float, float, float]:
    """Mean with a percentile bootstrap interval"""
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    if arr.size == 1:
        return mean, mean, mean
    rng = np.random.default_rng((seed, STREAM_BOOTSTRAP))
    idx = rng.integers(0, arr.size, size=(resamples, arr.size))
    samples = arr[idx].mean(axis=1)
    tail = (1.0 - level) / 2.0
    return mean, float(np.quantile(samples, tail)), float(np.quantile(samples, 1.0 - tail))


def run_contrastive_compare(ctx: RunContext) -> Dict[str, Any]:
    base = ctx.model()
    tasks = ctx.tasks(ctx.config.contrastive_tasks)
    contrast_layer = ctx.config.contrast_layer or default_contrast_layer(base.n_layers)
    probes = build_probes(ctx, tasks)
    instances = ctx.dataset(tasks=tasks)

    tuned, curves = {}, {}
    for tag, mode in MODES:
        with ctx.stage(f"finetune_{tag}"):
            model, _ = ctx.train_model(base.copy(), tasks, prefix=f"{tag}_", loss_mode=mode,
                                       steps=ctx.config.finetune_steps, k_train=FINETUNE_K,
                                       k_train_min=FINETUNE_K, contrast_layer=contrast_layer)
            ctx.save_model(model, f"model_{tag}.iclt")
        tuned[tag] = model
        with ctx.stage(f"measure_{tag}"):
            curves[tag] = ctx.measure(instances, model, tasks=tasks)

    # both models are probed at the CE-only optimal layer so the hits pair up
    layer = max(1, curves["ce_only"].curve.argmin)
    scores = {}
    with ctx.stage("probe"):
        for tag, model in tuned.items():
            scores[tag] = task_vector_scores(model, probes, layer)
    diff = scores["contrastive"]["hits"].astype(np.float64) - scores["ce_only"]["hits"].astype(np.float64)
    gain, lo, hi = bootstrap_mean_ci(diff, ctx.config.seed)

    with ctx.stage("report"):
        ctx.write_csv("tdnv_curves.csv", series_rows({tag: m.curve for tag, m in curves.items()}))
        ctx.plot(["tdnv_curves.csv"], "layers", "tdnv_curves.svg",
                 title=f"TDNV after fine-tuning (contrast layer {contrast_layer})")
        for tag, m in curves.items():
            reps = m.traces.representation_set(tasks, ctx.config.representation)
            vectors, _ = reps.at_layer(contrast_layer)
            name = f"pca_{tag}.csv"
            ctx.write_csv(name, pca_rows(pca_2d(vectors).coords, reps.task_names, reps.n_instances))
            ctx.plot([name], "pca", f"pca_{tag}.svg", title=f"PCA at layer {contrast_layer}, {tag}")

    tdnv = {tag: float(m.curve.values[contrast_layer]) for tag, m in curves.items()}
    logger.info(f"TDNV at layer {contrast_layer}: CE-only {tdnv['ce_only']:.4f}, "
                f"contrastive {tdnv['contrastive']:.4f}; TV gain {gain:+.3f} [{lo:+.3f}, {hi:+.3f}]")
    return {
        "contrast_layer": contrast_layer,
        "probe_layer": layer,
        "tdnv_at_contrast_layer": tdnv,
        "tv_acc": {tag: s["tv_acc"] for tag, s in scores.items()},
        "icl_acc": {tag: m.accuracy for tag, m in curves.items()},
        "tv_gain": gain,
        "tv_gain_ci": [lo, hi],
        "improved": bool(tdnv["contrastive"] < tdnv["ce_only"] and lo > 0),
    }


experiments = {"contrastive_compare": run_contrastive_compare}
