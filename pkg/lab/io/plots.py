"""
SVG rendering of experiment CSVs: per-layer curves, log-log decay fits, PCA scatters, grid heatmaps
"""

import io
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams.update(
    {
        "font.family": "DejaVu Sans",
        "axes.unicode_minus": False,
        "svg.hashsalt": "icl-lab",
        "svg.fonttype": "path",
    }
)
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy import stats  # noqa: E402

from lab.core.exceptions import SchemaError  # noqa: E402
from lab.geometry import MIN_SLOPE_POINTS  # noqa: E402
from lab.io.csvio import read_csv  # noqa: E402

logger = logging.getLogger(__name__)

PLOT_STYLES = ("layers", "loglog", "pca", "heatmap")

# y columns drawn in log-log style, with the offset added to K on the x axis
LOGLOG_COLUMNS: Dict[str, int] = {"bias_ratio": 0, "variance": 0, "var_est": 1, "var_pred": 1, "trace_var_est": 1}
SERIES_COLUMNS = ("series", "representation", "step")
LAYER_COLUMNS = ("value", "tv_acc", "mean_tv_acc", "early_exit_acc", "baseline")


def _rows(path: Path, required: Sequence[str]) -> List[Dict[str, str]]:
    rows = read_csv(path)
    header = rows[0].keys() if rows else []
    for column in required:
        if rows and column not in header:
            raise SchemaError(f"{path.name} is missing column {column!r}", {"file": path.name, "column": column})
    if not rows:
        raise SchemaError(f"{path.name} has no rows to plot", {"file": path.name})
    return rows


def _floats(rows: List[Dict[str, str]], column: str) -> np.ndarray:
    return np.array([float(r[column]) if r[column] != "" else np.nan for r in rows])


def _groups(rows: List[Dict[str, str]], column: Optional[str]) -> Dict[str, List[Dict[str, str]]]:
    if column is None:
        return {"": rows}
    out: Dict[str, List[Dict[str, str]]] = {}
    for r in rows:
        out.setdefault(r[column], []).append(r)
    return out


def _series_column(rows: List[Dict[str, str]]) -> Optional[str]:
    for column in SERIES_COLUMNS:
        if column in rows[0]:
            return column
    return None


def _plot_layers(ax, paths: Sequence[Path]) -> None:
    for path in paths:
        rows = _rows(path, ["layer"])
        columns = [c for c in LAYER_COLUMNS if c in rows[0]]
        if not columns:
            raise SchemaError(f"{path.name} is missing column 'value'", {"file": path.name, "column": "value"})
        for name, group in _groups(rows, _series_column(rows)).items():
            for column in columns:
                parts = [path.stem if len(paths) > 1 else "", name, column if len(columns) > 1 else ""]
                label = " ".join(p for p in parts if p) or path.stem
                ax.plot(_floats(group, "layer"), _floats(group, column), marker="o", label=label)
    ax.set_xlabel("Layer")
    ax.set_ylabel("TDNV" if columns == ["value"] else "Value")


def loglog_fit(x: np.ndarray, y: np.ndarray) -> Optional[Tuple[float, float]]:
    """(slope, intercept) of log y on log x over positive points"""
    keep = (x > 0) & (y > 0) & np.isfinite(y)
    if keep.sum() < MIN_SLOPE_POINTS:
        return None
    fit = stats.linregress(np.log(x[keep]), np.log(y[keep]))
    return float(fit.slope), float(fit.intercept)


def _plot_loglog(ax, paths: Sequence[Path]) -> None:
    offsets = set()
    for path in paths:
        rows = _rows(path, ["K"])
        columns = [c for c in LOGLOG_COLUMNS if c in rows[0]]
        if not columns:
            raise SchemaError(f"{path.name} is missing column {next(iter(LOGLOG_COLUMNS))!r}",
                              {"file": path.name, "column": next(iter(LOGLOG_COLUMNS))})
        K = _floats(rows, "K")
        for column in columns:
            offset = LOGLOG_COLUMNS[column]
            offsets.add(offset)
            y = _floats(rows, column)
            if np.all(np.isnan(y)):
                continue
            # the same points and x values as the run summaries fit
            x = np.where(K >= 1, K + offset, 0.0)
            keep = (x > 0) & (y > 0) & np.isfinite(y)
            line, = ax.plot(x[keep], y[keep], marker="o", linestyle="none", label=column)
            fit = loglog_fit(x, y)
            if fit is None:
                logger.warning(f"{path.name}: too few positive points to fit {column}")
                continue
            slope, intercept = fit
            xs = x[keep]
            ax.plot(xs, np.exp(intercept) * xs ** slope, color=line.get_color(),
                    label=f"{column} fit, slope {slope:.3f}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("K+1" if offsets == {1} else "K")


def _plot_pca(ax, paths: Sequence[Path]) -> None:
    for path in paths:
        rows = _rows(path, ["task", "instance", "x", "y"])
        for task, group in _groups(rows, "task").items():
            label = f"{path.stem} {task}" if len(paths) > 1 else task
            ax.scatter(_floats(group, "x"), _floats(group, "y"), s=12, label=label)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")


def _plot_heatmap(ax, paths: Sequence[Path]) -> None:
    if len(paths) != 1:
        raise ValueError("heatmap style takes exactly one CSV")
    rows = _rows(paths[0], ["layer", "sep", "value"])
    layers = _floats(rows, "layer").astype(int)
    seps = _floats(rows, "sep").astype(int)
    grid = np.full((layers.max() + 1, seps.max()), np.nan)
    grid[layers, seps - 1] = _floats(rows, "value")
    image = ax.imshow(grid, origin="lower", aspect="auto",
                      extent=(0.5, seps.max() + 0.5, -0.5, layers.max() + 0.5))
    ax.figure.colorbar(image, ax=ax, label="TDNV")
    ax.set_xlabel("Separator")
    ax.set_ylabel("Layer")


_DRAW = {"layers": _plot_layers, "loglog": _plot_loglog, "pca": _plot_pca, "heatmap": _plot_heatmap}


def plot_curves(csv_paths: Union[str, Path, Sequence[Union[str, Path]]], style: str = "layers",
                out_path: Optional[Union[str, Path]] = None, title: Optional[str] = None) -> str:
    """Render CSVs into a standalone SVG; byte-identical for identical input"""
    if style not in _DRAW:
        raise ValueError(f"unknown plot style {style!r}; expected one of {', '.join(PLOT_STYLES)}")
    if isinstance(csv_paths, (str, Path)):
        csv_paths = [csv_paths]
    paths = [Path(p) for p in csv_paths]
    if not paths:
        raise ValueError("no CSV files to plot")

    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    try:
        _DRAW[style](ax, paths)
        ax.set_title(title or ", ".join(p.stem for p in paths))
        ax.grid(True, alpha=0.3)
        if style != "heatmap":
            ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    finally:
        plt.close(fig)
    svg = buf.getvalue()
    if out_path is not None:
        out = Path(out_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(svg, encoding="utf-8")
        logger.debug(f"Wrote {out}")
    return svg
