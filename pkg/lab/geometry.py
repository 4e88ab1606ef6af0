"""
Representation geometry: within-task variance, TDNV curves and grids,
compression/expression ratios, PCA and the bias-variance decomposition over K.

All functions are pure numpy over float64 arrays.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from lab.core.exceptions import DegenerateGeometryError, RaggedInstancesError, ShapeError

logger = logging.getLogger(__name__)

REPRESENTATION_KINDS = ("last_sep", "mean_all_tokens", "mean_sep_tokens")

PCA_TOL = 1e-10
PCA_MAX_ITER = 10_000
MIN_SLOPE_POINTS = 4


@dataclass
class RepresentationSet:
    """reps[t, i, l] in R^d for task t, instance i, layer l"""
    reps: np.ndarray
    kind: str = "last_sep"
    K: Optional[int] = None
    model_tag: str = ""
    task_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.reps = np.ascontiguousarray(self.reps, dtype=np.float64)
        if self.reps.ndim != 4:
            raise ShapeError(f"representation set must be [T, N, L+1, d], got {list(self.reps.shape)}")
        if self.kind not in REPRESENTATION_KINDS:
            raise ValueError(f"unknown representation kind {self.kind!r}")

    @property
    def n_tasks(self) -> int:
        return self.reps.shape[0]

    @property
    def n_instances(self) -> int:
        return self.reps.shape[1]

    @property
    def n_layers(self) -> int:
        """Number of layer slots, L+1"""
        return self.reps.shape[2]

    @property
    def dim(self) -> int:
        return self.reps.shape[3]

    def at_layer(self, layer: int) -> Tuple[np.ndarray, np.ndarray]:
        """Flattened [T*N, d] vectors and their task labels"""
        T, N = self.n_tasks, self.n_instances
        return self.reps[:, :, layer, :].reshape(T * N, self.dim), np.repeat(np.arange(T), N)


@dataclass
class TDNVCurve:
    values: np.ndarray
    kind: str = "last_sep"

    @property
    def argmin(self) -> int:
        return optimal_layer(self.values)

    @property
    def endpoints(self) -> Tuple[float, float]:
        """First defined and last value"""
        defined = self.values[~np.isnan(self.values)]
        return float(defined[0]) if defined.size else float("nan"), float(self.values[-1])


@dataclass
class GridTDNV:
    """values[l, s] for separator s = 1..K+1 (stored 0-based)"""
    values: np.ndarray

    @property
    def K(self) -> int:
        return self.values.shape[1] - 1


@dataclass
class BiasVarianceReport:
    K_grid: List[int]
    K_inf: int
    means: np.ndarray          # [T, nK, d]
    bias_ratio: np.ndarray     # [T, nK]
    variance: np.ndarray       # [T, nK]
    bias_slope: Optional[float]
    variance_slope: Optional[float]
    note: str = ""

    @property
    def mean_bias_ratio(self) -> np.ndarray:
        return self.bias_ratio.mean(axis=0)

    @property
    def mean_variance(self) -> np.ndarray:
        return self.variance.mean(axis=0)


@dataclass
class PCAResult:
    coords: np.ndarray        # [n, 2]
    explained: np.ndarray     # [2]
    components: np.ndarray    # [d, 2]
    mean: np.ndarray          # [d]


def _as_matrix(vectors) -> np.ndarray:
    x = np.ascontiguousarray(vectors, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ShapeError(f"expected a list of vectors, got shape {list(x.shape)}")
    return x


def within_task_variance(vectors) -> float:
    """(1/N) sum ||h_i - mean||^2"""
    x = _as_matrix(vectors)
    if x.shape[0] == 0:
        raise ShapeError("within-task variance of an empty set")
    centered = x - x.mean(axis=0)
    return float((centered * centered).sum(axis=1).mean())


def between_task_distance(mean_a, mean_b) -> float:
    a, b = np.asarray(mean_a, dtype=np.float64), np.asarray(mean_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"mean shapes differ: {list(a.shape)} vs {list(b.shape)}")
    diff = a - b
    return float(diff @ diff)


def tdnv(reps, task_ids: Sequence[int], literal_sum: bool = False) -> float:
    """Within-task variance over between-task distance, aggregated over ordered task pairs.

    Pair-mean by default; ``literal_sum`` returns the unnormalized sum.
    """
    x = _as_matrix(reps)
    labels = np.asarray(task_ids)
    if labels.shape != (x.shape[0],):
        raise ShapeError(f"{labels.shape[0]} task ids for {x.shape[0]} vectors")
    tasks = np.unique(labels)
    if len(tasks) < 2:
        raise DegenerateGeometryError("TDNV needs at least two tasks")

    means = []
    variances = []
    for t in tasks:
        group = x[labels == t]
        means.append(group.mean(axis=0))
        variances.append(within_task_variance(group))

    total = 0.0
    for a in range(len(tasks)):
        for b in range(a + 1, len(tasks)):
            dist = between_task_distance(means[a], means[b])
            if dist == 0.0:
                raise DegenerateGeometryError(f"tasks {tasks[a]} and {tasks[b]} have coincident means")
            # ordered pairs (a, b) and (b, a) contribute equally
            total += 2.0 * (variances[a] + variances[b]) / (2.0 * dist)
    if literal_sum:
        return float(total)
    return float(total / (len(tasks) * (len(tasks) - 1)))


def _tdnv_or_nan(reps, task_ids, literal_sum: bool, where: str) -> float:
    # coincident means at one layer (e.g. identical embeddings) leave that point undefined
    try:
        return tdnv(reps, task_ids, literal_sum=literal_sum)
    except DegenerateGeometryError as e:
        logger.warning(f"{where}: {e.message}; TDNV undefined")
        return float("nan")


def tdnv_curve(reps: RepresentationSet, literal_sum: bool = False) -> TDNVCurve:
    """TDNV at every layer; layers with coincident task means are NaN"""
    if reps.n_tasks < 2:
        raise DegenerateGeometryError("TDNV needs at least two tasks")
    values = np.array([_tdnv_or_nan(*reps.at_layer(l), literal_sum, f"layer {l}") for l in range(reps.n_layers)])
    return TDNVCurve(values=values, kind=reps.kind)


def grid_tdnv(sep_hidden: np.ndarray, task_ids: Sequence[int], literal_sum: bool = False) -> GridTDNV:
    """TDNV per (layer, separator) from hidden states [n, L+1, K+1, d]"""
    h = sep_hidden
    if isinstance(h, (list, tuple)):
        shapes = {np.shape(a) for a in h}
        if len(shapes) != 1:
            raise RaggedInstancesError(f"instances have differing separator counts: {sorted(shapes)}")
        h = np.stack(h)
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 4:
        raise ShapeError(f"grid input must be [n, L+1, K+1, d], got {list(h.shape)}")
    if len(np.unique(np.asarray(task_ids))) < 2:
        raise DegenerateGeometryError("TDNV needs at least two tasks")
    _, n_layers, n_seps, _ = h.shape
    values = np.empty((n_layers, n_seps))
    for l in range(n_layers):
        for s in range(n_seps):
            values[l, s] = _tdnv_or_nan(np.ascontiguousarray(h[:, l, s, :]), task_ids, literal_sum,
                                        f"layer {l}, separator {s + 1}")
    return GridTDNV(values=values)


def compression_expression_ratios(curve: TDNVCurve) -> Tuple[float, float]:
    """(TDNV_0 - min)/TDNV_0 and (TDNV_L - min)/TDNV_L.

    Undefined (NaN) layers are skipped; TDNV_0 is then the first defined layer.
    """
    v = np.asarray(curve.values, dtype=np.float64)
    if v.size == 0:
        raise ShapeError("empty TDNV curve")
    defined = v[~np.isnan(v)]
    if defined.size == 0 or np.isnan(v[-1]):
        raise DegenerateGeometryError("compression/expression ratios need a defined last-layer TDNV")
    first, last, low = defined[0], v[-1], defined.min()
    if first <= 0 or last <= 0:
        raise DegenerateGeometryError("compression/expression ratios need positive endpoint TDNV")
    return float((first - low) / first), float((last - low) / last)


def optimal_layer(values) -> int:
    """Lowest layer index attaining the minimum, ignoring undefined layers"""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ShapeError("empty TDNV curve")
    if np.isnan(v).all():
        raise DegenerateGeometryError("TDNV is undefined at every layer")
    return int(np.nanargmin(v))


def _power_iteration(cov: np.ndarray) -> Tuple[float, np.ndarray]:
    # deterministic start: the heaviest column lies in the dominant range
    col = int(np.argmax(np.linalg.norm(cov, axis=0)))
    v = cov[:, col].copy()
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return 0.0, np.zeros(cov.shape[0])
    v /= norm
    for _ in range(PCA_MAX_ITER):
        w = cov @ v
        n = np.linalg.norm(w)
        if n == 0.0:
            return 0.0, v
        w /= n
        if np.linalg.norm(w - v) < PCA_TOL:
            v = w
            break
        v = w
    else:
        logger.warning(f"power iteration did not converge within {PCA_MAX_ITER} iterations")
    return float(v @ cov @ v), v


def _orthogonal_unit(v: np.ndarray) -> np.ndarray:
    for i in range(v.shape[0]):
        e = np.zeros_like(v)
        e[i] = 1.0
        u = e - (e @ v) * v
        n = np.linalg.norm(u)
        if n > 1e-8:
            return u / n
    return np.zeros_like(v)


def _fix_sign(v: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    if nz.size and v[nz[0]] < 0:
        return -v
    return v


def pca_2d(vectors) -> PCAResult:
    """Project centered vectors on the two leading covariance eigenvectors (power iteration + deflation)"""
    x = _as_matrix(vectors)
    if x.shape[0] < 2:
        raise ShapeError("PCA needs at least two vectors")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    scale = max(float(np.abs(cov).max()), 1e-300)

    lam1, v1 = _power_iteration(cov)
    if not v1.any():
        v1 = np.zeros(x.shape[1])
        v1[0] = 1.0
    v1 = _fix_sign(v1)

    deflated = cov - lam1 * np.outer(v1, v1)
    lam2, v2 = _power_iteration(deflated)
    if lam2 <= 1e-12 * scale or not v2.any():
        lam2, v2 = 0.0, _orthogonal_unit(v1)
    else:
        v2 = v2 - (v2 @ v1) * v1
        v2 /= np.linalg.norm(v2)
    v2 = _fix_sign(v2)

    components = np.stack([v1, v2], axis=1)
    coords = xc @ components
    return PCAResult(coords=coords, explained=np.array([max(lam1, 0.0), max(lam2, 0.0)]),
                     components=components, mean=mean)


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> Optional[float]:
    """OLS slope of log(y) vs log(x); None when fewer than MIN_SLOPE_POINTS positive points"""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    keep = (x > 0) & (y > 0) & np.isfinite(y)
    if keep.sum() < MIN_SLOPE_POINTS:
        return None
    return float(stats.linregress(np.log(x[keep]), np.log(y[keep])).slope)


def bias_variance_decompose(reps_by_K: Dict[int, np.ndarray], K_grid: Sequence[int],
                            K_inf: Optional[int] = None) -> BiasVarianceReport:
    """Bias ratios and variances of task vectors across K.

    ``reps_by_K[K]`` is [T, N_K, d] at a fixed layer; mu(inf) is approximated by mu(K_inf).
    """
    grid = sorted(int(k) for k in K_grid)
    K_inf = grid[-1] if K_inf is None else int(K_inf)
    if K_inf != grid[-1]:
        raise ValueError(f"K_inf={K_inf} must be the largest grid value {grid[-1]}")
    if grid[0] != 0:
        raise ValueError("K grid must contain 0 for the bias ratio denominator")
    if len(grid) < 3:
        raise ValueError("bias-variance decomposition needs at least three grid points")
    missing = [k for k in grid if k not in reps_by_K]
    if missing:
        raise ShapeError(f"no representations for K in {missing}")

    arrays = {k: np.asarray(reps_by_K[k], dtype=np.float64) for k in grid}
    T, _, d = arrays[grid[0]].shape
    for k, a in arrays.items():
        if a.ndim != 3 or a.shape[0] != T or a.shape[2] != d:
            raise ShapeError(f"representations at K={k} have shape {list(a.shape)}, expected [{T}, N, {d}]")

    means = np.stack([arrays[k].mean(axis=1) for k in grid], axis=1)   # [T, nK, d]
    variance = np.array([[within_task_variance(arrays[k][t]) for k in grid] for t in range(T)])
    mu_inf = means[:, -1, :]
    denom = np.linalg.norm(means[:, 0, :] - mu_inf, axis=1)
    if np.any(denom == 0.0):
        raise DegenerateGeometryError("mu(0) coincides with mu(K_inf); bias ratio undefined")
    bias = np.linalg.norm(means - mu_inf[:, None, :], axis=2) / denom[:, None]

    ks = np.array(grid, dtype=np.float64)
    bias_keep = (ks >= 1) & (ks < K_inf)
    bias_slope = loglog_slope(ks[bias_keep], bias.mean(axis=0)[bias_keep])
    variance_slope = loglog_slope(ks[ks >= 1], variance.mean(axis=0)[ks >= 1])
    if bias_slope is None or variance_slope is None:
        logger.warning(f"fewer than {MIN_SLOPE_POINTS} usable K values; slope left undefined")

    note = f"mu(inf) approximated by mu(K={K_inf})"
    logger.info(note)
    return BiasVarianceReport(K_grid=grid, K_inf=K_inf, means=means, bias_ratio=bias, variance=variance,
                              bias_slope=bias_slope, variance_slope=variance_slope, note=note)
