"""
Logging setup and stage timing for lab pipelines
"""

import logging
import time
from contextlib import contextmanager
from typing import Iterator, Optional

from lab.core.config import get_settings

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger(__name__)


def setup_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> None:
    """Configure the root logger once from settings (arguments override)"""
    settings = get_settings()
    handlers = [logging.StreamHandler()]
    target = log_file or settings.log_file
    if target:
        handlers.append(logging.FileHandler(target, encoding="utf-8"))

    logging.basicConfig(
        level=getattr(logging, (level or settings.log_level).upper()),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


def progress_disabled() -> bool:
    """tqdm bars are shown only when INFO records would be"""
    return not logging.getLogger("lab").isEnabledFor(logging.INFO)


@contextmanager
def log_stage(name: str) -> Iterator[None]:
    """Log start, finish and failure of a pipeline stage with elapsed time"""
    start_time = time.time()
    logger.info(f"Stage {name}: started")
    try:
        yield
    except Exception as e:
        process_time = time.time() - start_time
        logger.error(f"Stage {name}: failed after {process_time:.3f}s - {e}")
        raise
    process_time = time.time() - start_time
    logger.info(f"Stage {name}: done ({process_time:.3f}s)")
