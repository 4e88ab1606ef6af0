"""
CSV schemas and the writer/reader shared by every experiment
"""

import csv
import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

from lab.core.exceptions import SchemaError

logger = logging.getLogger(__name__)

# Declared headers; written in this exact order
SCHEMAS: Dict[str, List[str]] = {
    "tdnv_curve": ["layer", "value"],
    "grid_tdnv": ["layer", "sep", "value"],
    "bias_variance": ["K", "bias_ratio", "variance"],
    "pca": ["task", "instance", "x", "y"],
    "probe_report": ["layer", "tv_acc", "mean_tv_acc", "early_exit_acc", "baseline"],
    "training_log": ["step", "ce", "contrastive", "total", "eval_acc", "tdnv_at_contrast_layer"],
    "tdnv_training": ["step", "layer", "value"],
    "theorem_report": ["K", "var_est", "var_stderr", "var_pred", "scaled_var", "lambda_est", "lambda_pred",
                       "residual"],
    "theorem_identity": ["K", "trace_var_est", "trace_var_stderr", "trace_var_pred", "lambda_stderr",
                         "orthogonal_residual"],
    "compression_expression": ["representation", "compression", "expression"],
    "tdnv_curves": ["series", "layer", "value"],
    "sweep_summary": ["series", "x", "tdnv_at_opt", "opt_layer", "accuracy"],
    "size_sweep": ["n_layers", "d_model", "opt_layer", "icl_acc", "tv_acc", "baseline"],
    "dataset_summary": ["task", "K", "n_instances", "mean_length"],
}


def schema_for(path: Union[str, Path]) -> Optional[List[str]]:
    """Schema of a file by its stem; ``pca_*`` and ``grid_tdnv_*`` variants share the base schema"""
    stem = Path(path).stem
    if stem in SCHEMAS:
        return SCHEMAS[stem]
    for base in sorted(SCHEMAS, key=len, reverse=True):
        if stem.startswith(base + "_"):
            return SCHEMAS[base]
    return None


def format_value(value: Any) -> str:
    """Locale-free text: repr for floats (round-trips), empty for missing"""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float) or hasattr(value, "dtype") and getattr(value.dtype, "kind", "") == "f":
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if hasattr(value, "item"):
        return str(value.item())
    return str(value)


def write_csv(path: Union[str, Path], rows: Iterable[Mapping[str, Any]],
              fieldnames: Optional[Sequence[str]] = None) -> Path:
    """Write ``rows`` with a header; columns default to the schema named by the file stem"""
    path = Path(path)
    fieldnames = list(fieldnames or schema_for(path) or [])
    if not fieldnames:
        raise SchemaError(f"no schema declared for {path.name}", {"file": path.name})
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: format_value(row.get(k)) for k in fieldnames})
    logger.debug(f"Wrote {path}")
    return path


def read_csv(path: Union[str, Path], required: Optional[Sequence[str]] = None) -> List[Dict[str, str]]:
    """Rows as dicts of strings; every ``required`` column (default: the declared schema) must be present"""
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        rows = list(reader)
    required = list(required if required is not None else (schema_for(path) or []))
    for column in required:
        if column not in header:
            raise SchemaError(f"{path.name} is missing column {column!r}", {"file": path.name, "column": column})
    return rows


def parse_float(text: str) -> Optional[float]:
    return None if text == "" else float(text)
