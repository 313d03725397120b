"""
Logging Configuration
File-based structured logging for simulation runs.
"""

import logging
from pathlib import Path
from datetime import datetime
from typing import Optional


DETAILED_FORMAT = (
    "%(asctime)s | "
    "%(levelname)-8s | "
    "%(name)-30s | "
    "%(funcName)-20s | "
    "%(message)s"
)

SIMPLE_FORMAT = "%(levelname)-8s | %(name)-20s | %(message)s"


def setup_logging(
    log_level: str = "INFO",
    log_file: Optional[str] = None,
    log_dir: Optional[str] = None,
    console: bool = False,
):
    """
    Setup the logging system.

    Args:
        log_level: Log level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_file: Optional file name inside log_dir.
                  If None, uses shardsim_{timestamp}.log
        log_dir: Directory for log files (default ./logs)
        console: Also log to stderr with the short format
    """
    directory = Path(log_dir or "./logs")
    directory.mkdir(parents=True, exist_ok=True)

    if log_file is None:
        timestamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        log_path = directory / f"shardsim_{timestamp}.log"
    else:
        log_path = directory / log_file

    level = getattr(logging, log_level.upper(), logging.INFO)

    root_logger = logging.getLogger()
    root_logger.setLevel(level)
    root_logger.handlers.clear()

    try:
        file_handler = logging.FileHandler(log_path, encoding="utf-8")
        file_handler.setLevel(level)
        file_handler.setFormatter(logging.Formatter(DETAILED_FORMAT))
        root_logger.addHandler(file_handler)
    except OSError as e:
        print(f"⚠️  无法创建日志文件: {e}")

    if console:
        console_handler = logging.StreamHandler()
        console_handler.setLevel(level)
        console_handler.setFormatter(logging.Formatter(SIMPLE_FORMAT))
        root_logger.addHandler(console_handler)

    # Suppress noisy loggers
    logging.getLogger("PIL").setLevel(logging.WARNING)
    logging.getLogger("matplotlib").setLevel(logging.WARNING)

    return root_logger
