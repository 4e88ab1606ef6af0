"""
Exchange of hidden-state representations with external tools.

A dump is an ICLT container plus a JSON layout manifest mapping every
tensor name to the cell it fills: ``[task, instance, layer]`` for a single
[d] vector, or ``[task, instance]`` for an [L+1, d] stack of all layers.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from lab.core.exceptions import ConfigError, CoverageError, ShapeError
from lab.geometry import REPRESENTATION_KINDS, RepresentationSet
from lab.io.container import CODE_DTYPES, DTYPE_CODES, load_tensors, save_tensors

logger = logging.getLogger(__name__)


class LayoutManifest(BaseModel):
    """Layout of an external representation dump"""
    model_config = ConfigDict(extra="forbid")

    kind: str = Field("last_sep", description="Representation kind")
    K: Optional[int] = Field(None, ge=0, description="Demonstration count, if uniform")
    model_tag: str = ""
    task_names: List[str] = Field(..., min_length=1)
    n_instances: int = Field(..., ge=1)
    n_layers: int = Field(..., ge=1, description="Layer slots including the embedding layer (L+1)")
    entries: Dict[str, List[int]] = Field(..., description="Tensor name -> [task, instance(, layer)]")

    @field_validator("kind")
    @classmethod
    def validate_kind(cls, v):
        if v not in REPRESENTATION_KINDS:
            raise ValueError(f"kind must be one of {', '.join(REPRESENTATION_KINDS)}")
        return v

    @field_validator("entries")
    @classmethod
    def validate_entries(cls, v):
        for name, cell in v.items():
            if len(cell) not in (2, 3) or any(c < 0 for c in cell):
                raise ValueError(f"entry {name!r} must map to [task, instance] or [task, instance, layer]")
        return v

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "LayoutManifest":
        path = Path(path)
        try:
            return cls.model_validate(json.loads(path.read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise ConfigError(f"layout manifest not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"layout manifest {path} is not valid JSON: {e}")


def _place(grid: np.ndarray, filled: np.ndarray, name: str, cell: List[int], value: np.ndarray,
           layout: LayoutManifest) -> None:
    t, i = cell[0], cell[1]
    if t >= len(layout.task_names) or i >= layout.n_instances:
        raise ShapeError(f"entry {name!r} addresses cell {tuple(cell)} outside the declared layout")
    if len(cell) == 3:
        l = cell[2]
        if l >= layout.n_layers:
            raise ShapeError(f"entry {name!r} addresses layer {l} >= {layout.n_layers}")
        if value.ndim != 1:
            raise ShapeError(f"entry {name!r} must be a [d] vector, got {list(value.shape)}")
        layers, rows = [l], value[None, :]
    else:
        if value.ndim != 2 or value.shape[0] != layout.n_layers:
            raise ShapeError(f"entry {name!r} must be [{layout.n_layers}, d], got {list(value.shape)}")
        layers, rows = list(range(layout.n_layers)), value
    if rows.shape[1] != grid.shape[-1]:
        raise ShapeError(f"entry {name!r} has d={rows.shape[1]}, expected {grid.shape[-1]}")
    for l, row in zip(layers, rows):
        if filled[t, i, l]:
            raise ShapeError(f"cell {(t, i, l)} is filled twice (entry {name!r})")
        grid[t, i, l] = row
        filled[t, i, l] = True


def ingest_external_reps(container_path: Union[str, Path],
                         layout: Union[str, Path, LayoutManifest]) -> RepresentationSet:
    """RepresentationSet from a container and its layout; every (task, instance, layer) cell must be covered"""
    if not isinstance(layout, LayoutManifest):
        layout = LayoutManifest.from_file(layout)
    tensors = load_tensors(container_path)
    missing_names = [n for n in layout.entries if n not in tensors]
    if missing_names:
        raise ShapeError(f"layout names tensors absent from the container: {missing_names[:10]}")

    dims = {np.asarray(tensors[n]).shape[-1] for n in layout.entries}
    if len(dims) != 1:
        raise ShapeError(f"entries disagree on d: {sorted(dims)}")
    d = dims.pop()
    T, N, L1 = len(layout.task_names), layout.n_instances, layout.n_layers
    grid = np.zeros((T, N, L1, d))
    filled = np.zeros((T, N, L1), dtype=bool)
    for name, cell in layout.entries.items():
        _place(grid, filled, name, cell, np.asarray(tensors[name], dtype=np.float64), layout)

    if not filled.all():
        gaps: List[Tuple[int, int, int]] = [tuple(int(x) for x in g) for g in np.argwhere(~filled)]
        raise CoverageError(gaps)
    logger.info(f"Ingested {T} tasks x {N} instances x {L1} layers (d={d}) from {container_path}")
    return RepresentationSet(reps=grid, kind=layout.kind, K=layout.K, model_tag=layout.model_tag,
                             task_names=list(layout.task_names))


def round_to(reps: np.ndarray, dtype: str) -> np.ndarray:
    """Values as they read back from a container written at ``dtype``"""
    return np.asarray(reps).astype(CODE_DTYPES[DTYPE_CODES[dtype]]).astype(np.float64)


def dump_representations(reps: RepresentationSet, container_path: Union[str, Path],
                         layout_path: Union[str, Path], dtype: str = "f32") -> LayoutManifest:
    """Write one [L+1, d] entry per (task, instance) plus its layout manifest"""
    tensors, entries = {}, {}
    for t in range(reps.n_tasks):
        for i in range(reps.n_instances):
            name = f"t{t}/i{i}"
            tensors[name] = reps.reps[t, i]
            entries[name] = [t, i]
    save_tensors(container_path, tensors, dtype=dtype)
    layout = LayoutManifest(
        kind=reps.kind, K=reps.K, model_tag=reps.model_tag,
        task_names=reps.task_names or [f"task{t}" for t in range(reps.n_tasks)],
        n_instances=reps.n_instances, n_layers=reps.n_layers, entries=entries,
    )
    Path(layout_path).write_text(layout.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return layout


__all__ = ["LayoutManifest", "ingest_external_reps", "dump_representations", "round_to"]
