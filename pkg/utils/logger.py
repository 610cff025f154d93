"""
Centralized Logging Utility for the AMP Laboratory
Console/file logging setup plus a structured logger for pipeline stages and experiment cells
"""

import logging
import os
import sys
from typing import Optional
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()


class ColoredFormatter(logging.Formatter):
    """Custom formatter with colors for console output"""

    COLORS = {
        'DEBUG': '\033[36m',    # Cyan
        'INFO': '\033[32m',     # Green
        'WARNING': '\033[33m',  # Yellow
        'ERROR': '\033[31m',    # Red
        'CRITICAL': '\033[35m', # Magenta
        'RESET': '\033[0m'
    }

    def format(self, record):
        # the record is shared with the file handler, so color a copy
        record = logging.makeLogRecord(record.__dict__)
        if record.levelname in self.COLORS:
            record.levelname = (
                f"{self.COLORS[record.levelname]}{record.levelname}"
                f"{self.COLORS['RESET']}"
            )

        return super().format(record)


def setup_logging(log_level: Optional[str] = None, log_file: Optional[str] = None):
    """
    Setup centralized logging configuration

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL);
            defaults to AMPLAB_LOG_LEVEL or INFO
        log_file: Optional log file path; defaults to AMPLAB_LOG_FILE
    """
    log_level = log_level or os.getenv("AMPLAB_LOG_LEVEL", "INFO")
    log_file = log_file or os.getenv("AMPLAB_LOG_FILE") or None

    if log_file:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)

    root_logger = logging.getLogger()
    root_logger.setLevel(getattr(logging, log_level.upper()))
    root_logger.handlers.clear()

    console_handler = logging.StreamHandler(sys.stdout)
    console_formatter = ColoredFormatter(
        fmt='%(asctime)s | %(levelname)-8s | %(name)-24s | %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )
    console_handler.setFormatter(console_formatter)
    root_logger.addHandler(console_handler)

    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_formatter = logging.Formatter(
            fmt='%(asctime)s | %(levelname)-8s | %(name)-24s | %(funcName)-15s | %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )
        file_handler.setFormatter(file_formatter)
        root_logger.addHandler(file_handler)

    # third-party chatter
    logging.getLogger("langgraph").setLevel(logging.WARNING)
    logging.getLogger("asyncio").setLevel(logging.WARNING)


def get_logger(name: str) -> logging.Logger:
    """
    Get a logger instance with the specified name

    Args:
        name: Logger name (typically module or class name)

    Returns:
        Configured logger instance
    """
    return logging.getLogger(name)


class StructuredLogger:
    """
    Structured logger for stage and experiment events with consistent formatting
    """

    def __init__(self, name: str):
        self.logger = get_logger(name)
        self.name = name

    def log_stage_start(self, stage_name: str, cell_id: str, **kwargs):
        """Log stage execution start"""
        self.logger.info(
            f"[START] Stage {stage_name} started for cell {cell_id}",
            extra={"stage": stage_name, "cell_id": cell_id, **kwargs}
        )

    def log_stage_complete(self, stage_name: str, cell_id: str,
                           duration_ms: int, **kwargs):
        """Log stage execution completion"""
        self.logger.info(
            f"[COMPLETE] Stage {stage_name} completed for cell {cell_id} "
            f"in {duration_ms}ms",
            extra={
                "stage": stage_name,
                "cell_id": cell_id,
                "duration_ms": duration_ms,
                **kwargs
            }
        )

    def log_stage_error(self, stage_name: str, cell_id: str,
                        error: Exception, **kwargs):
        """Log stage execution error"""
        self.logger.error(
            f"[ERROR] Stage {stage_name} failed for cell {cell_id}: {str(error)}",
            extra={
                "stage": stage_name,
                "cell_id": cell_id,
                "error_type": type(error).__name__,
                "error_message": str(error),
                **kwargs
            },
            exc_info=True
        )

    def log_check(self, stage_name: str, cell_id: str, check: str,
                  passed: bool, value: float = None):
        """Log the outcome of a property check"""
        message = f"[CHECK] {stage_name}/{check}: {'pass' if passed else 'FAIL'}"
        if value is not None:
            message += f" (value: {value:.6g})"

        log = self.logger.info if passed else self.logger.warning
        log(
            message,
            extra={
                "stage": stage_name,
                "cell_id": cell_id,
                "check": check,
                "passed": passed,
                "value": value
            }
        )

    def log_experiment_start(self, experiment_id: str, cells: int, **kwargs):
        """Log experiment start"""
        self.logger.info(
            f"[WORKFLOW] Starting experiment {experiment_id} with {cells} cells",
            extra={
                "experiment_id": experiment_id,
                "cells": cells,
                **kwargs
            }
        )

    def log_experiment_complete(self, experiment_id: str, duration_ms: int, **kwargs):
        """Log experiment completion"""
        self.logger.info(
            f"[WORKFLOW_COMPLETE] Completed experiment {experiment_id} in {duration_ms}ms",
            extra={
                "experiment_id": experiment_id,
                "duration_ms": duration_ms,
                **kwargs
            }
        )

    def log_metric(self, metric_name: str, value: float, **kwargs):
        """Log metric value"""
        self.logger.info(
            f"[METRIC] {metric_name}: {value}",
            extra={
                "metric_name": metric_name,
                "metric_value": value,
                **kwargs
            }
        )


# Initialize default logging
setup_logging()
