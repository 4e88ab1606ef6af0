"""
Separator-token pretraining and task-vector contrastive fine-tuning
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from lab import autodiff as ad
from lab.autodiff import Tape, Tensor
from lab.core.exceptions import ConfigError, ContrastiveBatchError, TrainingDivergedError
from lab.core.logging import progress_disabled
from lab.geometry import tdnv
from lab.models.config import TrainConfig
from lab.taskgen import STREAM_EVAL, ICLInstance, TaskSpec, make_instance, pad_batch, sample_dataset
from lab.tracing import trace_instances
from lab.transformer import TransformerModel, forward_batch, save_model

logger = logging.getLogger(__name__)

STREAM_TRAIN = 5

TRAINING_LOG_COLUMNS = ["step", "ce", "contrastive", "total", "eval_acc", "tdnv_at_contrast_layer"]


def _separator_targets(instances: Sequence[ICLInstance]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch rows, positions and targets of every separator (final separator predicts gold)"""
    rows, positions, targets = [], [], []
    for b, inst in enumerate(instances):
        for k, pos in enumerate(inst.sep_positions):
            rows.append(b)
            positions.append(pos)
            targets.append(inst.gold_id if k == inst.K else inst.tokens[pos + 1])
    return np.array(rows), np.array(positions), np.array(targets)


def ce_loss_on_separators(logits: Tensor, instances: Union[ICLInstance, Sequence[ICLInstance]],
                          tape: Optional[Tape] = None) -> Tensor:
    """Mean cross-entropy over all separator positions of the batch"""
    if isinstance(instances, ICLInstance):
        instances = [instances]
        logits = ad.reshape(logits, (1,) + tuple(logits.shape), tape=tape)
    rows, positions, targets = _separator_targets(instances)
    picked = ad.take(logits, (rows, positions), tape=tape)
    return ad.cross_entropy(picked, targets, tape=tape)


@dataclass
class ContrastiveBatch:
    """Unit-normalized task vectors with their task ids"""
    vectors: Tensor
    task_ids: np.ndarray

    @classmethod
    def from_hidden(cls, hidden: Tensor, task_ids: Sequence[int], tape: Optional[Tape] = None) -> "ContrastiveBatch":
        return cls(ad.l2_normalize(hidden, tape=tape), np.asarray(task_ids))

    def positive_mask(self) -> np.ndarray:
        same = self.task_ids[:, None] == self.task_ids[None, :]
        np.fill_diagonal(same, False)
        return same


def contrastive_loss(batch: ContrastiveBatch, tau: float, tape: Optional[Tape] = None) -> Tensor:
    """-(1/|pairs|) sum over same-task pairs (i, j) of log softmax_{k != i}(h_i . h_k / tau)_j"""
    ids = batch.task_ids
    tasks, counts = np.unique(ids, return_counts=True)
    if len(tasks) < 2:
        raise ContrastiveBatchError("contrastive batch needs at least two tasks")
    lonely = tasks[counts == 1]
    if len(lonely):
        logger.warning(f"tasks {lonely.tolist()} have a single sample in the contrastive batch; skipped as anchors")
    positives = batch.positive_mask()
    n_pairs = int(positives.sum())
    if n_pairs == 0:
        raise ContrastiveBatchError("contrastive batch has no positive pairs")

    z = batch.vectors
    sims = ad.scale(ad.matmul(z, ad.transpose(z, (1, 0), tape=tape), tape=tape), 1.0 / tau, tape=tape)
    logp = ad.log_softmax_rows(sims, mask=np.eye(len(ids), dtype=bool), tape=tape)
    return ad.scale(ad.sum_all(ad.mul(logp, positives.astype(np.float64), tape=tape), tape=tape),
                    -1.0 / n_pairs, tape=tape)


@dataclass
class AdamState:
    step: int
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: Dict[str, np.ndarray]) -> "AdamState":
        return cls(0, {k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam; returns new arrays and a new state"""
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = beta1 * state.m[name] + (1 - beta1) * g
        v = beta2 * state.v[name] + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> Tuple[Dict[str, np.ndarray], float]:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    factor = max_norm / (norm + 1e-12)
    return {k: g * factor for k, g in grads.items()}, norm


@dataclass
class TrainingLog:
    rows: List[Dict[str, Optional[float]]] = field(default_factory=list)
    tdnv_rows: List[Dict[str, float]] = field(default_factory=list)

    @property
    def final_eval_acc(self) -> Optional[float]:
        for row in reversed(self.rows):
            if row["eval_acc"] is not None:
                return row["eval_acc"]
        return None


def training_batch(tasks: Sequence[TaskSpec], config: TrainConfig, step: int, p_max: int) -> List[ICLInstance]:
    """Equal samples per task (remainder to the first tasks), one K for the whole batch"""
    rng = np.random.default_rng((config.seed, STREAM_TRAIN, step))
    K = int(rng.integers(config.k_train_min, config.k_train + 1))
    per_task, extra = divmod(config.batch_size, len(tasks))
    batch = []
    for i, task in enumerate(tasks):
        for _ in range(per_task + (1 if i < extra else 0)):
            batch.append(make_instance(task, K, rng, p_max=p_max))
    return batch


def evaluate(model: TransformerModel, tasks: Sequence[TaskSpec], config: TrainConfig) -> Tuple[float, np.ndarray]:
    """ICL accuracy and per-layer last-separator TDNV on a fixed evaluation set"""
    instances = sample_dataset(tasks, config.eval_instances, config.eval_k, config.seed, stream=STREAM_EVAL,
                               p_max=model.config.p_max)
    traces = trace_instances(model, instances)
    values = np.full(model.n_layers + 1, np.nan)
    if len(tasks) >= 2:
        reps = traces.last_sep
        labels = traces.task_labels(tasks)
        for l in range(model.n_layers + 1):
            try:
                values[l] = tdnv(reps[:, l, :], labels)
            except ArithmeticError:
                values[l] = np.nan
    return traces.accuracy(), values


def train(model: TransformerModel, tasks: Sequence[TaskSpec], config: TrainConfig,
          checkpoint_dir: Optional[Union[str, Path]] = None) -> Tuple[TransformerModel, TrainingLog]:
    """Adam training on CE over separators, plus beta * contrastive loss in ce_plus_contrastive mode"""
    if config.contrast_layer > model.n_layers:
        raise ConfigError(f"contrast_layer={config.contrast_layer} exceeds n_layers={model.n_layers}")
    if config.uses_contrastive and len(tasks) < 2:
        raise ConfigError("contrastive training needs at least two tasks")

    model = model.copy()
    state = AdamState.zeros({k: p.data for k, p in model.params.items()})
    log = TrainingLog()
    lc = config.contrast_layer
    logger.info(f"Training {len(tasks)} tasks for {config.steps} steps ({config.loss_mode}, "
                f"beta={config.contrastive_beta}, contrast layer {lc})")

    bar = tqdm(range(config.steps), desc="train", disable=progress_disabled())
    for step in bar:
        batch = training_batch(tasks, config, step, model.config.p_max)
        ids, lengths = pad_batch(batch)
        tape = Tape()
        model.watch(tape)
        trace = forward_batch(model, ids, lengths, capture=config.uses_contrastive, tape=tape)
        ce = ce_loss_on_separators(trace.logits, batch, tape=tape)
        total = ce
        con_value = None
        if config.uses_contrastive:
            hidden = ad.take(trace.hidden[lc], (np.arange(len(batch)), lengths - 1), tape=tape)
            con = contrastive_loss(ContrastiveBatch.from_hidden(hidden, [b.task_id for b in batch], tape),
                                   config.tau, tape=tape)
            con_value = con.item()
            total = ad.add(ce, ad.scale(con, config.contrastive_beta, tape=tape), tape=tape)

        if not np.isfinite(total.item()):
            if checkpoint_dir is not None:
                save_model(model, Path(checkpoint_dir) / f"diverged_step{step}.iclt")
            raise TrainingDivergedError(f"non-finite loss at step {step}", {"step": step})

        tape.backward(total)
        grads, _ = clip_gradients({k: p.grad for k, p in model.params.items()}, config.grad_clip)
        lr = config.lr * min(1.0, (step + 1) / config.warmup_steps) if config.warmup_steps else config.lr
        new_params, state = adam_step({k: p.data for k, p in model.params.items()}, grads, state, lr,
                                      config.beta1, config.beta2, config.adam_eps)
        model.params = {k: Tensor(v) for k, v in new_params.items()}

        row: Dict[str, Optional[float]] = {
            "step": step, "ce": ce.item(), "contrastive": con_value, "total": total.item(),
            "eval_acc": None, "tdnv_at_contrast_layer": None,
        }
        if (step + 1) % config.eval_every == 0 or step + 1 == config.steps:
            acc, values = evaluate(model, tasks, config)
            row["eval_acc"] = acc
            row["tdnv_at_contrast_layer"] = float(values[lc])
            log.tdnv_rows.extend({"step": step, "layer": l, "value": float(v)} for l, v in enumerate(values))
            logger.info(f"step {step + 1}: ce={row['ce']:.4f} total={row['total']:.4f} eval_acc={acc:.3f} "
                        f"tdnv@{lc}={values[lc]:.4f}")
        bar.set_postfix(loss=f"{row['total']:.4f}")
        log.rows.append(row)

    return model, log
