from __future__ import annotations

import logging
import os
import sys
from datetime import datetime
from pathlib import Path

logger = logging.getLogger("pyslucache")
logger.setLevel(logging.INFO)


class InfoLevelFormatter(logging.Formatter):
    COLORS = {
        "STEP": "\033[1;35m",  # Purple
        "DATAIO": "\033[1;33m",  # Orange
        "RESULT": "\033[32m",  # Green
        "WARNING": "\033[31m",  # Red
        "PROCESS": "\033[1;36m",  # Cyan
        "CACHE": "\033[34m",  # Blue
        "DEFAULT": "\033[0m",  # Default
    }
    RESET = "\033[0m"

    def format(self, record):
        if record.levelname in ("WARNING", "ERROR"):
            color = self.COLORS["WARNING"]
        else:
            category = getattr(record, "category", "DEFAULT")
            color = self.COLORS.get(category, self.COLORS["DEFAULT"])

        message = super().format(record)
        return f"{color}{message}{self.RESET}"


def setup_logger(log_folder: str | None = None, run_mode: str = "TEST", level: int = logging.INFO) -> None:
    """
    Set up the package logger to output logs to console and, optionally, to a file

    Args:
        - log_folder (str | None): Log folder path. None logs to the console only
        - run_mode (str): "PROD" (plain console format), "TEST" (coloured console), "REGR" (no handlers, used by regression runs)
        - level (int): Logging level for the package logger and its handlers
    """
    if run_mode == "REGR":
        return

    logger.setLevel(level)
    fmt = "%(asctime)s - %(levelname)-8s - %(message)s"
    datefmt = "%Y-%m-%d %H:%M:%S"

    # Repeated calls replace the handlers of the previous call
    for handler in list(logger.handlers):
        logger.removeHandler(handler)

    stream_handler = logging.StreamHandler()
    stream_handler.setLevel(level)
    if run_mode == "PROD":
        stream_handler.setFormatter(logging.Formatter(fmt, datefmt))
    else:
        stream_handler.setFormatter(InfoLevelFormatter(fmt, datefmt))
    logger.addHandler(stream_handler)

    if log_folder is not None:
        os.makedirs(Path(log_folder), exist_ok=True)
        log_filename = Path(log_folder).joinpath(f"pyslucache_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log").absolute()
        file_handler = logging.FileHandler(log_filename, mode="a", encoding="utf-8")
        file_handler.setLevel(level)
        file_handler.setFormatter(logging.Formatter(fmt, datefmt))
        logger.addHandler(file_handler)

    def handle_exception(exc_type, exc_value, exc_traceback):
        if issubclass(exc_type, KeyboardInterrupt):
            return
        logger.error("Unhandled exception", exc_info=(exc_type, exc_value, exc_traceback))

    sys.excepthook = handle_exception
