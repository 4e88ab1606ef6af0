"""
Run manifest and report models
"""

from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, Field


class ArtifactEntry(BaseModel):
    """One file written by a run"""
    path: str = Field(..., description="Path relative to the run directory")
    sha256: str = Field(..., description="Hex digest of the file content")
    bytes: int = Field(..., ge=0, description="File size")


class RunManifest(BaseModel):
    """manifest.json of a run directory"""
    kind: str
    seed: int
    status: Literal["running", "completed", "failed"] = "running"
    stages: List[str] = Field(default_factory=list, description="Completed stages in order")
    failed_stage: Optional[str] = None
    error: Optional[Dict[str, Any]] = Field(None, description="Error payload of a failed run")
    notes: List[str] = Field(default_factory=list)
    artifacts: List[ArtifactEntry] = Field(default_factory=list)

    def artifact(self, path: str) -> Optional[ArtifactEntry]:
        for entry in self.artifacts:
            if entry.path == path:
                return entry
        return None


class RunReport(BaseModel):
    """Handle returned by run_experiment"""
    output_dir: str
    manifest: RunManifest
    summary: Dict[str, Any] = Field(default_factory=dict)

    @property
    def path(self) -> Path:
        return Path(self.output_dir)

    def file(self, name: str) -> Path:
        return self.path / name


class TheoremSummary(BaseModel):
    """theorem_summary.json"""
    d: int
    samples: int
    distribution: str
    query_mode: str
    variance_slope: Optional[float] = Field(None, description="OLS slope of log variance vs log(K+1) over K >= 1")
    variance_degenerate: bool = False
    scaled_variance_ratio: Optional[float] = Field(None, description="max/min of (K+1) Var over K >= 1")
    variance_flat: bool = Field(False, description="scaled_variance_ratio below 1.5")
    tail_k: int
    tail_variance_slope: Optional[float] = None
    tail_scaled_variance_ratio: Optional[float] = None
    closed_form_variance_slope: Optional[float] = Field(None, description="The K >= 1 slope of the exact variance")
    closed_form_scaled_variance_ratio: Optional[float] = None
    trace_sigma_a: float = Field(..., description="Estimated trace of the a_i covariance")
    closed_form_mean: Optional[List[float]] = None
    mc_infinite_mean: List[float]
    mc_infinite_mean_stderr: List[float]
    collinearity_warnings: List[int] = Field(default_factory=list, description="K values with residual above tolerance")
