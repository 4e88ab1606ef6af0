"""
Run an experiment into its output directory: lock, config copy, stages, manifest
"""

import logging
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator, Optional

from lab.core.config import get_settings
from lab.core.exceptions import ConfigError, ExperimentLockedError, LabError
from lab.experiments import get_experiment
from lab.experiments.context import RunContext, jsonable
from lab.models.config import ExperimentConfig
from lab.models.reports import RunManifest, RunReport

logger = logging.getLogger(__name__)

LOCK_NAME = ".lock"
MANIFEST_NAME = "manifest.json"


def output_dir_for(config: ExperimentConfig, name: str) -> Path:
    if config.output_dir:
        return Path(config.output_dir)
    return get_settings().output_root_path / name


@contextmanager
def run_lock(out_dir: Path) -> Iterator[Path]:
    """Exclusive lock file for one process per output directory"""
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ExperimentLockedError(f"{out_dir} is in use by another run (remove {lock} if it is stale)",
                                    {"lock": str(lock)})
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield lock
    finally:
        lock.unlink(missing_ok=True)


def _write_manifest(ctx: RunContext) -> None:
    ctx.manifest.artifacts = ctx.artifact_entries()
    ctx.path(MANIFEST_NAME).write_text(ctx.manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")


def run_experiment(config: ExperimentConfig, command: Optional[str] = None, **params: Any) -> RunReport:
    """Execute ``command`` (default: the config's kind) and persist its artifacts.

    A failing run still writes manifest.json with status "failed", the stage it
    failed in and the error payload, then re-raises.
    """
    name = command or config.kind
    try:
        experiment = get_experiment(name)
    except KeyError as e:
        raise ConfigError(str(e.args[0]))

    out_dir = output_dir_for(config, name)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(kind=name, seed=config.seed)
    ctx = RunContext(config, out_dir, manifest)
    logger.info(f"Running {name} (seed {config.seed}) into {out_dir}")

    with run_lock(out_dir):
        ctx.write_json("config.json", config.model_dump(mode="json"))
        try:
            summary = experiment(ctx, **params) or {}
        except LabError as e:
            manifest.status = "failed"
            manifest.failed_stage = ctx.current_stage
            manifest.error = e.to_dict()
            _write_manifest(ctx)
            raise
        except Exception as e:
            manifest.status = "failed"
            manifest.failed_stage = ctx.current_stage
            manifest.error = {"error": "internal_error", "message": str(e), "details": {"type": type(e).__name__}}
            _write_manifest(ctx)
            raise
        ctx.write_json("summary.json", summary)
        manifest.status = "completed"
        _write_manifest(ctx)

    logger.info(f"{name} completed: {len(manifest.artifacts)} artifacts, {len(manifest.notes)} notes")
    return RunReport(output_dir=str(out_dir), manifest=manifest, summary=jsonable(summary))
