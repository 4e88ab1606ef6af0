#!/usr/bin/env python3
"""
Tests for task-vector injection, early exit and saliency on an untrained tiny model
"""

import numpy as np
import pytest

from lab.core.exceptions import ShapeError, UnsupportedProbeError
from lab.probes import (
    TaskProbe,
    TaskVector,
    aggregate_saliency,
    choose_dummy_query,
    early_exit_accuracy,
    early_exit_curve,
    evaluation_queries,
    extract_task_vector,
    extract_task_vectors,
    mean_task_vector,
    probe_report,
    saliency_groups,
    saliency_map,
    saliency_maps,
    task_vector_accuracy,
    task_vector_hits,
    zero_shot_accuracy,
)
from lab.taskgen import TASKS, make_instance, with_query, zero_shot
from lab.transformer import forward, init_model


@pytest.fixture
def next_task():
    return TASKS["next"]


def test_dummy_query(next_task):
    assert choose_dummy_query(next_task) == ("a",)
    assert choose_dummy_query(next_task, "q") == ("q",)
    assert choose_dummy_query(TASKS["first"], "b") == ("b", "b")
    with pytest.raises(ValueError):
        choose_dummy_query(next_task, "A")


def test_evaluation_queries_skip_dummy(next_task, rng):
    queries = evaluation_queries(next_task, ("a",), 60, rng)
    assert len(queries) == 60
    assert ("a",) not in queries


def test_task_vector_matches_forward(tiny_model, next_task, rng):
    """The extracted vector is the hidden state at the last separator of demos + dummy query"""
    inst = make_instance(next_task, 3, rng)
    tv = extract_task_vector(tiny_model, inst, next_task, ("a",), layer=1)
    prompt = with_query(inst, next_task, ("a",))
    trace = forward(tiny_model, prompt.tokens)
    assert np.allclose(tv.vector, trace.hidden[1].data[-1], atol=1e-12)
    assert (tv.layer, tv.K, tv.task_id) == (1, 3, next_task.id)


def test_task_vector_ignores_real_query(tiny_model, next_task, rng):
    inst = make_instance(next_task, 3, rng)
    other = with_query(inst, next_task, ("z",))
    a = extract_task_vectors(tiny_model, [inst], next_task, ("a",))
    b = extract_task_vectors(tiny_model, [other], next_task, ("a",))
    assert np.array_equal(a, b)


@pytest.mark.parametrize("layer", [0, 3])
def test_task_vector_layer_out_of_range(tiny_model, next_task, rng, layer):
    inst = make_instance(next_task, 2, rng)
    with pytest.raises(ShapeError):
        extract_task_vector(tiny_model, inst, next_task, ("a",), layer=layer)


def test_mean_task_vector():
    v = TaskVector(vector=np.array([1.0, -2.0]), layer=1, K=3, task_id=0, dummy_query=("a",))
    neg = TaskVector(vector=-v.vector, layer=1, K=3, task_id=0, dummy_query=("a",))
    assert np.array_equal(mean_task_vector([v]).vector, v.vector)
    assert np.array_equal(mean_task_vector([v, neg]).vector, np.zeros(2))
    with pytest.raises(ValueError):
        mean_task_vector([])
    with pytest.raises(ValueError):
        mean_task_vector([v, TaskVector(vector=v.vector, layer=2, K=3, task_id=0, dummy_query=("a",))])


def test_noop_patch_equals_zero_shot(tiny_model, next_task, rng):
    queries = evaluation_queries(next_task, ("a",), 12, rng)
    prompts = [zero_shot(next_task, q) for q in queries]
    own = np.stack([forward(tiny_model, p.tokens).hidden[2].data[-1] for p in prompts])
    assert task_vector_accuracy(tiny_model, next_task, 2, queries, own) == zero_shot_accuracy(tiny_model, next_task,
                                                                                              queries)


def test_zero_vector_is_near_chance(tiny_model, next_task, rng):
    queries = evaluation_queries(next_task, ("a",), 52, rng)
    hits = task_vector_hits(tiny_model, next_task, 1, queries, np.zeros(tiny_model.config.d_model))
    assert hits.shape == (52,)
    assert hits.dtype == bool
    assert hits.mean() < 0.5


def test_task_vector_count_mismatch(tiny_model, next_task, rng):
    queries = evaluation_queries(next_task, ("a",), 3, rng)
    with pytest.raises(ShapeError):
        task_vector_hits(tiny_model, next_task, 1, queries, np.zeros((2, tiny_model.config.d_model)))
    with pytest.raises(ValueError):
        task_vector_hits(tiny_model, next_task, 1, [], np.zeros(tiny_model.config.d_model))


def test_early_exit_last_layer_equals_icl(tiny_model, next_task, rng):
    instances = [make_instance(next_task, 3, rng) for _ in range(10)]
    curve, icl = early_exit_curve(tiny_model, instances)
    assert curve.shape == (tiny_model.n_layers + 1,)
    assert curve[-1] == icl
    assert early_exit_accuracy(tiny_model, instances, tiny_model.n_layers) == icl
    with pytest.raises(ShapeError):
        early_exit_accuracy(tiny_model, instances, tiny_model.n_layers + 1)


def test_saliency_map_is_causal_and_nonnegative(tiny_model, next_task, rng):
    inst = make_instance(next_task, 2, rng)
    maps = saliency_map(tiny_model, inst)
    p = len(inst)
    assert maps.shape == (tiny_model.n_layers, p, p)
    assert np.all(maps >= 0)
    assert all(np.all(np.triu(m, k=1) == 0.0) for m in maps)


def test_saliency_maps_keep_order(tiny_model, next_task, rng):
    instances = [make_instance(next_task, k, rng) for k in (1, 2, 3)]
    maps = saliency_maps(tiny_model, instances, max_workers=2)
    assert [m.shape[1] for m in maps] == [len(inst) for inst in instances]
    assert np.array_equal(maps[1], saliency_map(tiny_model, instances[1]))


def test_saliency_rejects_linear_attention(tiny_config, next_task, rng):
    model = init_model(tiny_config.model_copy(update={"attention_kind": "linear_normalized",
                                                      "feature_map": "elu_plus_one"}))
    with pytest.raises(UnsupportedProbeError):
        saliency_map(model, make_instance(next_task, 2, rng))


def test_saliency_groups():
    assert saliency_groups(32, "fixed") == {"shallow": (1, 14), "intermediate": (15, 16), "deep": (17, 32)}
    groups = saliency_groups(8)
    assert groups["shallow"][0] == 1
    assert max(b for _, b in groups.values()) == 8
    assert saliency_groups(12, "fixed") == {"shallow": (1, 12)}
    with pytest.raises(ValueError):
        saliency_groups(8, "bogus")


def test_aggregate_saliency():
    maps = np.stack([np.full((2, 2), float(l)) for l in range(4)])
    out = aggregate_saliency(maps, {"low": (1, 2), "high": (3, 4)})
    assert np.array_equal(out["low"], np.full((2, 2), 0.5))
    assert np.array_equal(out["high"], np.full((2, 2), 2.5))
    with pytest.raises(ShapeError):
        aggregate_saliency(maps, {"bad": (3, 5)})


def test_probe_report_shapes(tiny_model, next_task, rng):
    queries = evaluation_queries(next_task, ("a",), 4, rng)
    instances = [make_instance(next_task, 3, rng) for _ in range(4)]
    report = probe_report(tiny_model, [TaskProbe(next_task, instances, queries, ("a",))])
    L = tiny_model.n_layers
    assert report.tv_acc.shape == report.early_exit_acc.shape == (L + 1,)
    assert report.tv_acc[0] == report.baseline
    assert len(report.rows()) == L + 1
    assert report.early_exit_acc[-1] == report.icl_acc
