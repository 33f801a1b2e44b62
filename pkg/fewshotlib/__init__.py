"""fewshotlib - Few-shot episodic meta-learning for frame-feature corpora.

This module provides the core logging configuration for the fewshotlib package.
The logger is configured with Rich terminal formatting so training and evaluation
progress stays readable on a terminal.

The module exports a singleton logger instance that can be imported and used throughout
the library and by client applications.

Module Attributes:
    log (logging.Logger): Configured logger instance with RichHandler for colored terminal output.
        The log level is controlled via the ``FEWSHOTLIB_LOG_LEVEL`` environment variable.

Environment Variables:
    FEWSHOTLIB_LOG_LEVEL (str): Logging level, one of DEBUG, INFO, WARNING, ERROR.
        Defaults to INFO if not set or if an invalid value is provided.

Example:
    Basic usage of the logger::

        from fewshotlib import log

        log.info("Starting linear probe")
        log.debug("Optimizer step %d, loss %.4f", step, loss)
        log.error("Checkpoint could not be read: %s", error_message)

Note:
    The logger is configured only once to prevent duplicate handlers. Subsequent imports
    will reuse the same configured logger instance.

See Also:
    - :mod:`rich.logging.RichHandler` for terminal formatting details
    - :mod:`fewshotlib.cli` for the command-line entry point

.. versionadded:: 0.1.0
"""
import os
import logging
from rich.logging import RichHandler

__version__ = "0.1.0"

# module-level logger exposed as `from fewshotlib import log`
logger = logging.getLogger("fewshotlib")

# configure only once
if not logger.handlers:
    level_name = os.getenv("FEWSHOTLIB_LOG_LEVEL", "INFO").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.INFO
    handler = RichHandler(show_path=False)
    handler.setLevel(level)
    logger.addHandler(handler)
    logger.setLevel(level)
    logger.propagate = False

log = logger

__all__ = ["log", "__version__"]
