"""
Linear-attention variance decay and mean interpolation, estimated by Monte Carlo
"""

import logging
from typing import Any, Dict, Tuple

import numpy as np

from lab.experiments.context import RunContext
from lab.models.config import ExperimentConfig
from lab.models.reports import TheoremSummary
from lab.theorem import FLAT_SCALED_RATIO, DemoDistribution, identity_params, random_params, run_theorem
from lab.transformer import LinearAttentionParams

logger = logging.getLogger(__name__)


def theorem_inputs(config: ExperimentConfig) -> Tuple[DemoDistribution, LinearAttentionParams]:
    d = config.theorem_d
    dist = DemoDistribution(kind=config.theorem_distribution, d=d)
    if config.theorem_weights == "identity":
        params = identity_params(d, config.theorem_feature_map)
    else:
        params = random_params(d, config.seed, config.theorem_feature_map)
    return dist, params


def run_theorem_experiment(ctx: RunContext) -> Dict[str, Any]:
    cfg = ctx.config
    dist, params = theorem_inputs(cfg)
    with ctx.stage("simulate"):
        result = run_theorem(dist, params, cfg.theorem_k_grid, cfg.theorem_samples, cfg.seed,
                             query_mode=cfg.theorem_query, tail_k=cfg.theorem_tail_k)
    decay = result.decay
    exact = result.exact_decay
    if decay.degenerate:
        ctx.note("zero variance at every K: the variance slope is undefined for this distribution")
    if result.shift.flagged:
        ctx.note(f"mean shift leaves the E[h'(0)]-E[h'(inf)] line at K={result.shift.flagged}")
    if decay.scaled_ratio is not None and not decay.flat:
        tail = "undefined" if decay.tail_scaled_ratio is None else f"{decay.tail_scaled_ratio:.3f}"
        ctx.note(f"(K+1)*Var ||h'(K)||^2 spans a factor {decay.scaled_ratio:.3f} over K >= 1 "
                 f"(limit {FLAT_SCALED_RATIO}); factor {tail} over K >= {decay.tail_k}. "
                 f"The 1/(K+1) decay of the squared norm is asymptotic; "
                 f"for a fixed query tr Cov h'(K) = K tr(Sigma_a)/(K+1)^2 is exact (theorem_identity.csv)")

    summary = TheoremSummary(
        d=cfg.theorem_d,
        samples=cfg.theorem_samples,
        distribution=cfg.theorem_distribution,
        query_mode=cfg.theorem_query,
        variance_slope=decay.slope,
        variance_degenerate=decay.degenerate,
        scaled_variance_ratio=decay.scaled_ratio,
        variance_flat=decay.flat,
        tail_k=decay.tail_k,
        tail_variance_slope=decay.tail_slope,
        tail_scaled_variance_ratio=decay.tail_scaled_ratio,
        closed_form_variance_slope=None if exact is None else exact.slope,
        closed_form_scaled_variance_ratio=None if exact is None else exact.scaled_ratio,
        trace_sigma_a=result.shift.trace_sigma_a,
        closed_form_mean=None if result.closed_form is None else result.closed_form.tolist(),
        mc_infinite_mean=result.shift.m_inf.tolist(),
        mc_infinite_mean_stderr=result.shift.m_inf_stderr.tolist(),
        collinearity_warnings=list(result.shift.flagged),
    )
    with ctx.stage("report"):
        ctx.write_csv("theorem_report.csv", result.report_rows())
        ctx.write_csv("theorem_identity.csv", result.identity_rows())
        ctx.write_json("theorem_summary.json", summary.model_dump())
        if not decay.degenerate:
            ctx.plot(["theorem_report.csv"], "loglog", "theorem_report.svg",
                     title=f"Var ||h'(K)||^2, {cfg.theorem_distribution}, d={cfg.theorem_d}")
            ctx.plot(["theorem_identity.csv"], "loglog", "theorem_identity.svg", title="tr Cov h'(K)")

    out: Dict[str, Any] = {
        "variance_slope": decay.slope,
        "scaled_variance_ratio": decay.scaled_ratio,
        "tail_variance_slope": decay.tail_slope,
        "degenerate": decay.degenerate,
    }
    if result.closed_form is not None:
        z = np.abs(result.shift.m_inf - result.closed_form) / np.maximum(result.shift.m_inf_stderr, 1e-300)
        out["closed_form_max_z"] = float(z.max())
        logger.info(f"Closed-form E[h'(inf)] within {z.max():.2f} standard errors of the Monte-Carlo mean")
    keep = np.array(decay.K_grid) >= 1
    if result.variance_pred is not None and keep.any():
        z = np.abs(decay.variance - result.variance_pred)[keep] / np.maximum(decay.stderr[keep], 1e-300)
        out["closed_form_variance_max_z"] = float(z.max())
        logger.info(f"Closed-form Var ||h'(K)||^2 within {z.max():.2f} standard errors at every K >= 1")
    return out


experiments = {"theorem": run_theorem_experiment}
