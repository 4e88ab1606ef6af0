"""
Per-run state shared by the experiment implementations: output files, stage
bookkeeping, the model under study and the standard measurements on it.
"""

import hashlib
import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from lab.core.config import get_settings
from lab.core.exceptions import ConfigError
from lab.core.logging import log_stage
from lab.geometry import TDNVCurve, tdnv_curve
from lab.io.container import save_tensors
from lab.io.csvio import SCHEMAS, write_csv
from lab.io.plots import plot_curves
from lab.models.config import ExperimentConfig, NoiseSpec
from lab.models.reports import ArtifactEntry, RunManifest
from lab.taskgen import (
    STREAM_DATA,
    STREAM_NOISE,
    TASKS,
    ICLInstance,
    TaskSpec,
    default_tokenizer,
    get_tasks,
    inject_noise,
    sample_dataset,
)
from lab.tracing import TraceSet, trace_instances
from lab.training import TrainingLog, train
from lab.transformer import TransformerModel, init_model, load_model, save_model

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.iclt"


@dataclass
class Measurement:
    """Traces of one instance set plus its TDNV curve"""
    traces: TraceSet
    curve: TDNVCurve

    @property
    def accuracy(self) -> float:
        return self.traces.accuracy()


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def tdnv_rows(curve: TDNVCurve) -> List[Dict[str, Any]]:
    return [{"layer": l, "value": float(v)} for l, v in enumerate(curve.values)]


def series_rows(curves: Mapping[str, TDNVCurve]) -> List[Dict[str, Any]]:
    return [{"series": name, "layer": l, "value": float(v)}
            for name, curve in curves.items() for l, v in enumerate(curve.values)]


class RunContext:
    """Output directory, manifest and cached model of a single run"""

    def __init__(self, config: ExperimentConfig, out_dir: Path, manifest: RunManifest):
        self.config = config
        self.out_dir = out_dir
        self.manifest = manifest
        self.tokenizer = default_tokenizer()
        self.current_stage: Optional[str] = None
        self._files: List[str] = []
        self._model: Optional[TransformerModel] = None
        self._reference: Optional[Tuple[int, Measurement]] = None

    # -- bookkeeping -------------------------------------------------------

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        """Completed stages are appended to the manifest; a failing one stays in ``current_stage``"""
        outer = self.current_stage
        self.current_stage = name
        with log_stage(name):
            yield
        self.manifest.stages.append(name)
        self.current_stage = outer

    def note(self, text: str) -> None:
        """Free-text remark carried into the manifest"""
        if text not in self.manifest.notes:
            logger.warning(text)
            self.manifest.notes.append(text)

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def track(self, name: str) -> Path:
        if name not in self._files:
            self._files.append(name)
        return self.path(name)

    def artifact_entries(self) -> List[ArtifactEntry]:
        entries = []
        for name in sorted(self._files):
            p = self.path(name)
            if p.exists():
                entries.append(ArtifactEntry(path=name, sha256=sha256_file(p), bytes=p.stat().st_size))
        return entries

    # -- writers -----------------------------------------------------------

    def write_csv(self, name: str, rows: Iterable[Mapping[str, Any]],
                  fieldnames: Optional[Sequence[str]] = None) -> Path:
        return write_csv(self.track(name), rows, fieldnames)

    def plot(self, csv_names: Sequence[str], style: str, svg_name: str, title: Optional[str] = None) -> Path:
        target = self.track(svg_name)
        plot_curves([self.path(n) for n in csv_names], style, out_path=target, title=title)
        return target

    def write_json(self, name: str, data: Any) -> Path:
        target = self.track(name)
        target.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n",
                          encoding="utf-8")
        return target

    def save_tensors(self, name: str, tensors: Mapping[str, np.ndarray], dtype: Optional[str] = None) -> Path:
        return save_tensors(self.track(name), tensors, dtype=dtype or self.dump_dtype)

    def save_model(self, model: TransformerModel, name: str = CHECKPOINT_NAME) -> Path:
        self.track(name + ".json")
        return save_model(model, self.track(name))

    @property
    def dump_dtype(self) -> str:
        return self.config.dump_dtype or get_settings().dump_dtype

    # -- data and model ----------------------------------------------------

    def tasks(self, names: Optional[Sequence[str]] = None) -> List[TaskSpec]:
        return get_tasks(names or self.config.tasks)

    def dataset(self, K: Optional[int] = None, N: Optional[int] = None, stream: int = STREAM_DATA,
                tasks: Optional[Sequence[TaskSpec]] = None) -> List[ICLInstance]:
        return sample_dataset(tasks or self.tasks(), N or self.config.n_instances,
                              self.config.k if K is None else K, self.config.seed, stream=stream,
                              p_max=self.config.p_max)

    def corrupt(self, instances: Sequence[ICLInstance], spec: NoiseSpec) -> List[ICLInstance]:
        """Label noise with one NOISE-stream generator per instance index"""
        by_id = {t.id: t for t in TASKS.values()}
        return [
            inject_noise(inst, spec, by_id[inst.task_id],
                         np.random.default_rng((self.config.seed, STREAM_NOISE, i)), p_max=self.config.p_max)
            for i, inst in enumerate(instances)
        ]

    def train_model(self, model: TransformerModel, tasks: Sequence[TaskSpec], prefix: str = "",
                    **overrides: Any) -> Tuple[TransformerModel, TrainingLog]:
        """Train and write ``{prefix}training_log.csv`` and ``{prefix}tdnv_training.csv``"""
        settings = self.config.train_settings(n_layers=model.n_layers, **overrides)
        trained, log = train(model, tasks, settings, checkpoint_dir=self.out_dir)
        self.write_csv(f"{prefix}training_log.csv", log.rows, fieldnames=SCHEMAS["training_log"])
        self.write_csv(f"{prefix}tdnv_training.csv", log.tdnv_rows, fieldnames=SCHEMAS["tdnv_training"])
        return trained, log

    def model(self) -> TransformerModel:
        """The checkpoint named in the config, or a freshly trained model saved as model.iclt"""
        if self._model is not None:
            return self._model
        if self.config.checkpoint:
            with self.stage("load"):
                if not Path(self.config.checkpoint).is_file():
                    raise ConfigError(f"checkpoint not found: {self.config.checkpoint}")
                model = load_model(self.config.checkpoint)
                if model.config.vocab_size != len(self.tokenizer):
                    raise ConfigError(f"checkpoint vocabulary {model.config.vocab_size} does not match "
                                      f"the tokenizer ({len(self.tokenizer)})")
        else:
            with self.stage("train"):
                model = init_model(self.config.model_settings(len(self.tokenizer)))
                model, log = self.train_model(model, self.tasks())
                self.save_model(model)
                logger.info(f"Final eval accuracy {log.final_eval_acc}")
        self._model = model
        return model

    def measure(self, instances: Sequence[ICLInstance], model: Optional[TransformerModel] = None,
                kind: Optional[str] = None, tasks: Optional[Sequence[TaskSpec]] = None) -> Measurement:
        traces = trace_instances(model or self.model(), instances)
        reps = traces.representation_set(tasks or self.tasks(), kind or self.config.representation)
        return Measurement(traces, tdnv_curve(reps, literal_sum=self.config.tdnv_literal_sum))

    def reference(self) -> Tuple[int, Measurement]:
        """Optimal layer of the clean dataset at the configured K, with its measurement"""
        if self._reference is None:
            with self.stage("reference"):
                m = self.measure(self.dataset())
                self._reference = (m.curve.argmin, m)
                logger.info(f"Optimal layer {m.curve.argmin} (TDNV {m.curve.values[m.curve.argmin]:.4f}, "
                            f"accuracy {m.accuracy:.3f})")
        return self._reference


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def jsonable(data: Any) -> Any:
    """Plain-JSON copy of ``data`` (numpy scalars and arrays become Python values)"""
    return json.loads(json.dumps(data, default=_json_default))
