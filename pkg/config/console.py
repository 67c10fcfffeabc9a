"""
Coloured console logging.
"""

import logging
import os
import sys
from typing import Optional

import colorama
from colorama import Fore, Style

colorama.init(autoreset=True)

_LEVEL_COLORS = {
    logging.DEBUG: Fore.BLUE,
    logging.INFO: Fore.CYAN,
    logging.WARNING: Fore.YELLOW,
    logging.ERROR: Fore.RED,
    logging.CRITICAL: Fore.RED + Style.BRIGHT,
}

_ROOT = "mdiff"


class ColorFormatter(logging.Formatter):
    """Formatter that colours the level name the way the CLI colours its messages."""

    def __init__(self, use_colors: bool = True):
        super().__init__("%(asctime)s %(levelname)s %(name)s: %(message)s", datefmt="%H:%M:%S")
        self.use_colors = use_colors

    def format(self, record: logging.LogRecord) -> str:
        message = super().format(record)
        if not self.use_colors:
            return message
        color = _LEVEL_COLORS.get(record.levelno, "")
        return f"{color}{message}{Style.RESET_ALL}"


def setup_logging(level: Optional[str] = None, use_colors: bool = True) -> logging.Logger:
    """Attach a single coloured stderr handler to the package logger."""
    level_name = (level or os.getenv("MDIFF_LOG_LEVEL", "INFO")).upper()
    logger = logging.getLogger(_ROOT)
    logger.setLevel(getattr(logging, level_name, logging.INFO))
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(ColorFormatter(use_colors=use_colors and sys.stderr.isatty()))
    logger.addHandler(handler)
    return logger


def get_logger(name: str) -> logging.Logger:
    """Child logger under the package root, e.g. ``mdiff.data.visuelle``."""
    return logging.getLogger(f"{_ROOT}.{name}")
