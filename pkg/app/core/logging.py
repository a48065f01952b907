"""
Logging setup for the command line and services.
"""
import logging
import sys

from app.core.config import Settings, get_settings

_HANDLER_NAME = "homtom"


def configure_logging(settings: Settings | None = None) -> logging.Logger:
    """
    Install the stderr handler on the package logger.

    Args:
        settings: Settings to read the level and format from (cached settings if omitted)

    Returns:
        The configured "app" logger
    """
    settings = settings or get_settings()
    logger = logging.getLogger("app")
    logger.setLevel(settings.log_level_value)

    for handler in logger.handlers:
        if handler.get_name() == _HANDLER_NAME:
            handler.setLevel(settings.log_level_value)
            return logger

    handler = logging.StreamHandler(sys.stderr)
    handler.set_name(_HANDLER_NAME)
    handler.setLevel(settings.log_level_value)
    handler.setFormatter(logging.Formatter(settings.log_format))
    logger.addHandler(handler)
    logger.propagate = False
    return logger
