"""
Batched tracing of ICL instances into per-layer separator representations
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from lab.core.config import get_settings
from lab.core.exceptions import RaggedInstancesError
from lab.geometry import RepresentationSet
from lab.taskgen import ICLInstance, TaskSpec, pad_batch
from lab.transformer import TransformerModel, forward_batch

logger = logging.getLogger(__name__)


@dataclass
class TraceSet:
    """Per-instance measurements of one model over a list of instances"""
    task_ids: np.ndarray             # [n] catalog task ids
    sep_hidden: List[np.ndarray]     # n arrays [L+1, K_i+1, d]
    mean_all: np.ndarray             # [n, L+1, d]
    mean_sep: np.ndarray             # [n, L+1, d]
    last_logits: np.ndarray          # [n, V]
    gold_ids: np.ndarray             # [n]

    def __len__(self) -> int:
        return len(self.task_ids)

    @property
    def last_sep(self) -> np.ndarray:
        """[n, L+1, d] hidden state at the final separator"""
        return np.stack([h[:, -1, :] for h in self.sep_hidden])

    def kind(self, kind: str) -> np.ndarray:
        if kind == "last_sep":
            return self.last_sep
        if kind == "mean_all_tokens":
            return self.mean_all
        if kind == "mean_sep_tokens":
            return self.mean_sep
        raise ValueError(f"unknown representation kind {kind!r}")

    def grid_input(self) -> np.ndarray:
        """[n, L+1, K+1, d]; all instances must share K"""
        shapes = {h.shape for h in self.sep_hidden}
        if len(shapes) != 1:
            raise RaggedInstancesError(f"instances have differing K: {sorted(s[1] - 1 for s in shapes)}")
        return np.stack(self.sep_hidden)

    def accuracy(self) -> float:
        return float(np.mean(np.argmax(self.last_logits, axis=1) == self.gold_ids))

    def representation_set(self, tasks: Sequence[TaskSpec], kind: str = "last_sep",
                           model_tag: str = "") -> RepresentationSet:
        """Group by task (in ``tasks`` order) into a rectangular [T, N, L+1, d] set"""
        reps = self.kind(kind)
        groups = [reps[self.task_ids == t.id] for t in tasks]
        counts = {g.shape[0] for g in groups}
        if len(counts) != 1 or 0 in counts:
            raise RaggedInstancesError(
                f"tasks have differing instance counts: {dict((t.name, g.shape[0]) for t, g in zip(tasks, groups))}"
            )
        Ks = {h.shape[1] - 1 for h in self.sep_hidden}
        return RepresentationSet(
            reps=np.stack(groups), kind=kind, K=Ks.pop() if len(Ks) == 1 else None,
            model_tag=model_tag, task_names=[t.name for t in tasks],
        )

    def task_labels(self, tasks: Sequence[TaskSpec]) -> np.ndarray:
        """Positional task index of every instance"""
        index: Dict[int, int] = {t.id: i for i, t in enumerate(tasks)}
        return np.array([index[int(t)] for t in self.task_ids])


def _query_start(inst: ICLInstance) -> int:
    # the previous demonstration ends with "→ y ,"
    return inst.sep_positions[-2] + 3 if inst.K else 0


def trace_instances(model: TransformerModel, instances: Sequence[ICLInstance],
                    batch_size: Optional[int] = None) -> TraceSet:
    """Forward every instance (right-padded chunks) and gather separator states"""
    batch_size = batch_size or get_settings().eval_batch_size
    sep_hidden: List[np.ndarray] = []
    mean_all, mean_sep, last_logits = [], [], []

    for start in range(0, len(instances), batch_size):
        chunk = instances[start:start + batch_size]
        ids, lengths = pad_batch(chunk)
        trace = forward_batch(model, ids, lengths, capture=True)
        hidden = np.stack([h.data for h in trace.hidden])          # [L+1, B, p, d]
        logits = trace.logits.data
        for b, inst in enumerate(chunk):
            seps = np.asarray(inst.sep_positions)
            sep_hidden.append(np.ascontiguousarray(hidden[:, b, seps, :]))
            q0 = _query_start(inst)
            upto = q0 if q0 > 0 else inst.sep_positions[-1]
            mean_all.append(hidden[:, b, :upto, :].mean(axis=1))
            mean_sep.append(hidden[:, b, seps, :].mean(axis=1))
            last_logits.append(logits[b, lengths[b] - 1])

    logger.debug(f"Traced {len(instances)} instances")
    return TraceSet(
        task_ids=np.array([inst.task_id for inst in instances]),
        sep_hidden=sep_hidden,
        mean_all=np.stack(mean_all),
        mean_sep=np.stack(mean_sep),
        last_logits=np.stack(last_logits),
        gold_ids=np.array([inst.gold_id for inst in instances]),
    )
