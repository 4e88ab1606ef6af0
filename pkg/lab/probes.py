"""
Intervention probes: task-vector extraction and injection, early exit, saliency maps
"""

import concurrent.futures
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from lab import autodiff as ad
from lab.autodiff import Tape
from lab.core.config import get_settings
from lab.core.exceptions import ShapeError, UnsupportedProbeError
from lab.taskgen import ICLInstance, Input, TaskSpec, pad_batch, with_query, zero_shot
from lab.transformer import BatchInjection, TransformerModel, apply_classifier, forward_batch

logger = logging.getLogger(__name__)


@dataclass
class TaskVector:
    vector: np.ndarray
    layer: int
    K: int
    task_id: int
    dummy_query: Input


@dataclass
class ProbeReport:
    """Per-layer accuracies; index l is layer l (0 = embeddings)"""
    tv_acc: np.ndarray
    mean_tv_acc: np.ndarray
    early_exit_acc: np.ndarray
    baseline: float
    icl_acc: float = float("nan")

    def rows(self) -> List[dict]:
        return [
            {"layer": l, "tv_acc": float(self.tv_acc[l]), "mean_tv_acc": float(self.mean_tv_acc[l]),
             "early_exit_acc": float(self.early_exit_acc[l]), "baseline": float(self.baseline)}
            for l in range(len(self.tv_acc))
        ]


def _check_layer(model: TransformerModel, layer: int) -> None:
    if not 1 <= layer <= model.n_layers:
        raise ShapeError(f"layer {layer} outside [1, {model.n_layers}]")


def choose_dummy_query(task: TaskSpec, name: Optional[str] = None) -> Input:
    """Fixed per experiment: the named token, else the first input-domain element"""
    if name is not None:
        if name not in task.input_domain:
            raise ValueError(f"dummy query {name!r} is not in the input domain of {task.name}")
        token = name
    else:
        token = task.input_domain[0]
    if task.family == "list_to_element":
        return (token, token)
    return (token,)


def evaluation_queries(task: TaskSpec, dummy: Input, n: int, rng: np.random.Generator) -> List[Input]:
    """``n`` queries drawn from the task distribution, never equal to the dummy query"""
    out: List[Input] = []
    while len(out) < n:
        x = task.sample_input(rng)
        if x != dummy:
            out.append(x)
    return out


def _last_hidden_batch(model: TransformerModel, instances: Sequence[ICLInstance],
                       batch_size: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Hidden states at the last position [n, L+1, d] and last-position logits [n, V]"""
    batch_size = batch_size or get_settings().eval_batch_size
    hidden, logits = [], []
    for start in range(0, len(instances), batch_size):
        chunk = instances[start:start + batch_size]
        ids, lengths = pad_batch(chunk)
        trace = forward_batch(model, ids, lengths, capture=False)
        hidden.append(np.stack(trace.last_hidden, axis=1))
        logits.append(trace.logits.data[np.arange(len(chunk)), lengths - 1])
    return np.concatenate(hidden), np.concatenate(logits)


def extract_task_vectors(model: TransformerModel, instances: Sequence[ICLInstance], task: TaskSpec,
                         dummy_query: Input) -> np.ndarray:
    """[n, L+1, d]: each instance's demonstrations followed by the dummy query"""
    prompts = [with_query(inst, task, dummy_query, p_max=model.config.p_max) for inst in instances]
    hidden, _ = _last_hidden_batch(model, prompts)
    return hidden


def extract_task_vector(model: TransformerModel, instance: ICLInstance, task: TaskSpec, dummy_query: Input,
                        layer: int) -> TaskVector:
    """Hidden state at (layer, final separator) of ``demos, x', →``"""
    _check_layer(model, layer)
    vec = extract_task_vectors(model, [instance], task, dummy_query)[0, layer]
    return TaskVector(vector=vec, layer=layer, K=instance.K, task_id=task.id, dummy_query=tuple(dummy_query))


def mean_task_vector(vectors: Sequence[TaskVector]) -> TaskVector:
    if not vectors:
        raise ValueError("mean of an empty task-vector list")
    layers = {v.layer for v in vectors}
    tasks = {v.task_id for v in vectors}
    if len(layers) != 1 or len(tasks) != 1:
        raise ValueError("task vectors must share layer and task")
    first = vectors[0]
    mean = np.mean(np.stack([v.vector for v in vectors]), axis=0)
    return TaskVector(vector=mean, layer=first.layer, K=first.K, task_id=first.task_id,
                      dummy_query=first.dummy_query)


def task_vector_hits(model: TransformerModel, task: TaskSpec, layer: int, queries: Sequence[Input],
                     vectors: Union[TaskVector, np.ndarray, Sequence[TaskVector]],
                     batch_size: Optional[int] = None) -> np.ndarray:
    """Per-query correctness with the task vector patched at (layer, last separator)"""
    _check_layer(model, layer)
    if not len(queries):
        raise ValueError("no queries")
    if isinstance(vectors, TaskVector):
        vecs = np.tile(vectors.vector, (len(queries), 1))
    elif isinstance(vectors, np.ndarray):
        vecs = np.tile(vectors, (len(queries), 1)) if vectors.ndim == 1 else vectors
    else:
        vecs = np.stack([v.vector for v in vectors])
    if vecs.shape[0] != len(queries):
        raise ShapeError(f"{vecs.shape[0]} task vectors for {len(queries)} queries")

    batch_size = batch_size or get_settings().eval_batch_size
    prompts = [zero_shot(task, q) for q in queries]
    hits = []
    for start in range(0, len(prompts), batch_size):
        chunk = prompts[start:start + batch_size]
        ids, lengths = pad_batch(chunk)
        inj = BatchInjection(layer, lengths - 1, vecs[start:start + len(chunk)])
        trace = forward_batch(model, ids, lengths, capture=False, injection=inj)
        pred = trace.logits.data[np.arange(len(chunk)), lengths - 1].argmax(axis=1)
        hits.append(pred == np.array([p.gold_id for p in chunk]))
    return np.concatenate(hits)


def task_vector_accuracy(model: TransformerModel, task: TaskSpec, layer: int, queries: Sequence[Input],
                         vectors: Union[TaskVector, np.ndarray, Sequence[TaskVector]],
                         batch_size: Optional[int] = None) -> float:
    """Zero-shot accuracy with per-query or shared task vectors injected"""
    return float(np.mean(task_vector_hits(model, task, layer, queries, vectors, batch_size)))


def zero_shot_accuracy(model: TransformerModel, task: TaskSpec, queries: Sequence[Input]) -> float:
    """Baseline: query only, no demonstrations and no injection"""
    prompts = [zero_shot(task, q) for q in queries]
    _, logits = _last_hidden_batch(model, prompts)
    return float(np.mean(logits.argmax(axis=1) == np.array([p.gold_id for p in prompts])))


def early_exit_curve(model: TransformerModel, instances: Sequence[ICLInstance]) -> Tuple[np.ndarray, float]:
    """Early-exit accuracy for every layer 0..L plus the standard ICL accuracy"""
    hidden, logits = _last_hidden_batch(model, instances)
    gold = np.array([inst.gold_id for inst in instances])
    acc = np.array([
        np.mean(apply_classifier(model, hidden[:, l, :]).argmax(axis=1) == gold)
        for l in range(hidden.shape[1])
    ])
    return acc, float(np.mean(logits.argmax(axis=1) == gold))


def early_exit_accuracy(model: TransformerModel, instances: Sequence[ICLInstance], layer: int) -> float:
    if not 0 <= layer <= model.n_layers:
        raise ShapeError(f"layer {layer} outside [0, {model.n_layers}]")
    hidden, _ = _last_hidden_batch(model, instances)
    gold = np.array([inst.gold_id for inst in instances])
    return float(np.mean(apply_classifier(model, hidden[:, layer, :]).argmax(axis=1) == gold))


def saliency_map(model: TransformerModel, instance: ICLInstance) -> np.ndarray:
    """[L, p, p] maps |sum_h A * dL/dA| for the last-token cross-entropy against gold"""
    if model.config.attention_kind != "softmax":
        raise UnsupportedProbeError("saliency maps need softmax attention maps")
    tape = Tape()
    ids = np.asarray(instance.tokens, dtype=np.int64)[None, :]
    p = ids.shape[1]
    trace = forward_batch(model, ids, capture=False, tape=tape, watch_attention=True)
    last = ad.reshape(ad.take(trace.logits, (0, p - 1), tape=tape), (1, -1), tape=tape)
    loss = ad.cross_entropy(last, [instance.gold_id], tape=tape)
    tape.backward(loss)
    maps = [np.abs((a.data[0] * a.grad[0]).sum(axis=0)) for a in trace.attn]
    return np.stack(maps)


def saliency_maps(model: TransformerModel, instances: Sequence[ICLInstance],
                  max_workers: Optional[int] = None) -> List[np.ndarray]:
    """One tape per instance, evaluated on a thread pool; results keep input order"""
    max_workers = max_workers or get_settings().max_workers
    results: Dict[int, np.ndarray] = {}
    with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as executor:
        future_to_index = {
            executor.submit(saliency_map, model, inst): i
            for i, inst in enumerate(instances)
        }
        for future in concurrent.futures.as_completed(future_to_index):
            results[future_to_index[future]] = future.result()
    return [results[i] for i in range(len(instances))]


FIXED_SALIENCY_GROUPS = {"shallow": (1, 14), "intermediate": (15, 16), "deep": (17, None)}


def saliency_groups(n_layers: int, preset: str = "proportional") -> Dict[str, Tuple[int, int]]:
    """Named 1-based inclusive layer ranges; empty ranges are dropped"""
    if preset == "fixed":
        groups = {k: (a, n_layers if b is None else min(b, n_layers)) for k, (a, b) in FIXED_SALIENCY_GROUPS.items()}
    elif preset == "proportional":
        # the fixed split scaled from a 32-layer model
        shallow_end = max(1, math.floor(14 * n_layers / 32))
        mid_end = min(n_layers, shallow_end + max(1, round(2 * n_layers / 32)))
        groups = {"shallow": (1, shallow_end), "intermediate": (shallow_end + 1, mid_end),
                  "deep": (mid_end + 1, n_layers)}
    else:
        raise ValueError(f"unknown saliency preset {preset!r}")
    return {k: v for k, v in groups.items() if v[0] <= v[1]}


def aggregate_saliency(maps: np.ndarray, groups: Dict[str, Tuple[int, int]]) -> Dict[str, np.ndarray]:
    """Average [L, p, p] maps over each 1-based inclusive layer range"""
    maps = np.asarray(maps)
    out = {}
    for name, (a, b) in groups.items():
        if not 1 <= a <= b <= maps.shape[0]:
            raise ShapeError(f"saliency group {name} range ({a}, {b}) outside [1, {maps.shape[0]}]")
        out[name] = maps[a - 1:b].mean(axis=0)
    return out


@dataclass
class TaskProbe:
    """Inputs to the per-task probe sweep"""
    task: TaskSpec
    instances: List[ICLInstance]
    queries: List[Input]
    dummy_query: Input
    extras: Dict[str, float] = field(default_factory=dict)


def probe_report(model: TransformerModel, probes: Sequence[TaskProbe]) -> ProbeReport:
    """Task-vector, mean-task-vector and early-exit accuracy at every layer, averaged over tasks.

    Per-query vectors pair instance i's task vector with query i; the mean
    vector is shared by all queries of the task.
    """
    L = model.n_layers
    tv = np.zeros(L + 1)
    mean_tv = np.zeros(L + 1)
    early = np.zeros(L + 1)
    baseline = 0.0
    icl = 0.0
    for probe in probes:
        vectors = extract_task_vectors(model, probe.instances, probe.task, probe.dummy_query)
        if vectors.shape[0] != len(probe.queries):
            raise ShapeError("one instance per evaluation query is required")
        for l in range(1, L + 1):
            tv[l] += task_vector_accuracy(model, probe.task, l, probe.queries, vectors[:, l, :])
            mean_tv[l] += task_vector_accuracy(model, probe.task, l, probe.queries, vectors[:, l, :].mean(axis=0))
        exits, acc = early_exit_curve(model, probe.instances)
        early += exits
        icl += acc
        baseline += zero_shot_accuracy(model, probe.task, probe.queries)
    n = len(probes)
    # layer 0 holds embeddings only, so patching there is undefined; report the baseline
    base = baseline / n
    tv[0] = mean_tv[0] = baseline
    logger.info(f"Probe sweep over {n} tasks: ICL accuracy {icl / n:.3f}, baseline {base:.3f}")
    return ProbeReport(tv_acc=tv / n, mean_tv_acc=mean_tv / n, early_exit_acc=early / n, baseline=base,
                       icl_acc=icl / n)
