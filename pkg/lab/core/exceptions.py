"""
Error hierarchy for the ICL geometry lab and the CLI-level error handler
"""

import logging
from contextlib import contextmanager
from typing import Any, Dict, Iterator, List, Optional

from pydantic import ValidationError

logger = logging.getLogger(__name__)


EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_BAD_CONFIG = 2
EXIT_INTERRUPTED = 130


class LabError(Exception):
    """Base class for every error raised by the lab"""

    error = "lab_error"

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        """Serializable payload, written into failed-run manifests"""
        return {"error": self.error, "message": self.message, "details": self.details}


class ShapeError(LabError, ValueError):
    error = "shape_error"


class TargetIndexError(LabError, IndexError):
    error = "target_index_error"


class NumericError(LabError, ArithmeticError):
    error = "numeric_error"


class TapeError(LabError):
    error = "tape_error"


class MaskError(LabError, ValueError):
    error = "mask_error"


class ContextOverflowError(LabError, ValueError):
    error = "context_overflow"


class NoiseSpecError(LabError, ValueError):
    error = "noise_spec_error"


class DomainExhaustedError(LabError, ValueError):
    error = "domain_exhausted"


class UnknownTokenError(LabError, KeyError):
    error = "unknown_token"

    def __str__(self):
        return self.message


class DegenerateGeometryError(LabError, ArithmeticError):
    error = "degenerate_geometry"


class RaggedInstancesError(LabError, ValueError):
    error = "ragged_instances"


class UnsupportedProbeError(LabError):
    error = "unsupported_probe"


class ContrastiveBatchError(LabError, ValueError):
    error = "contrastive_batch_error"


class TrainingDivergedError(LabError, ArithmeticError):
    error = "training_diverged"


class UnsupportedClosedFormError(LabError):
    error = "unsupported_closed_form"


class FormatError(LabError):
    """Malformed tensor container; `offset` is the byte position of the fault"""

    error = "format_error"

    def __init__(self, message: str, offset: int, details: Optional[Dict[str, Any]] = None):
        super().__init__(f"{message} (at byte offset {offset})", {"offset": offset, **(details or {})})
        self.offset = offset


class CoverageError(LabError):
    """Missing (task, instance, layer) cells in an external representation dump"""

    error = "coverage_error"

    def __init__(self, gaps: List[tuple], limit: int = 20):
        shown = ", ".join(str(g) for g in gaps[:limit])
        more = f" (+{len(gaps) - limit} more)" if len(gaps) > limit else ""
        super().__init__(f"missing cells (task, instance, layer): {shown}{more}", {"gaps": [list(g) for g in gaps]})
        self.gaps = gaps


class SchemaError(LabError, ValueError):
    error = "schema_error"


class ConfigError(LabError, ValueError):
    error = "config_error"


class ExperimentLockedError(LabError):
    error = "experiment_locked"


@contextmanager
def handle_cli_errors(exit_codes: Dict[str, int]) -> Iterator[None]:
    """Translate exceptions escaping a CLI command into log lines and an exit code.

    The resolved code is stored under ``exit_codes["code"]``.
    """
    exit_codes["code"] = EXIT_OK
    try:
        yield
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        exit_codes["code"] = EXIT_INTERRUPTED
    except ValidationError as exc:
        for err in exc.errors():
            field = " -> ".join(str(loc) for loc in err["loc"])
            logger.error(f"Invalid configuration: {field}: {err['msg']}")
        exit_codes["code"] = EXIT_BAD_CONFIG
    except ConfigError as exc:
        logger.error(f"Invalid configuration: {exc.message}")
        exit_codes["code"] = EXIT_BAD_CONFIG
    except LabError as exc:
        logger.error(f"{exc.error}: {exc.message}")
        exit_codes["code"] = EXIT_FAILURE
    except Exception as exc:
        logger.error(f"Unexpected error: {exc}", exc_info=True)
        exit_codes["code"] = EXIT_FAILURE
