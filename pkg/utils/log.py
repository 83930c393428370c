# utils/log.py
"""
Logging setup: diagnostics go to stderr so stdout stays machine-parseable
"""

import logging
import sys
from typing import Optional

from config import Config

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

_handler: Optional[logging.Handler] = None


def configure_logging(level: Optional[str] = None) -> logging.Logger:
    """Install (or replace) this package's stderr handler on the root logger"""
    global _handler
    level_name = (level or Config.LOG_LEVEL).upper()
    root = logging.getLogger()
    if _handler is not None:
        root.removeHandler(_handler)

    _handler = logging.StreamHandler(sys.stderr)
    _handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(_handler)
    root.setLevel(getattr(logging, level_name, logging.WARNING))
    return root
