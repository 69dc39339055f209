import logging

from rich.logging import RichHandler

LOGGER_NAME = "avhearing"


def get_logger(logger_name: str) -> logging.Logger:
    """Build a logger that renders through rich"""
    rich_handler = RichHandler(
        show_time=False,
        rich_tracebacks=False,
        show_path=False,
        tracebacks_show_locals=False,
    )
    rich_handler.setFormatter(
        logging.Formatter(
            fmt="%(message)s",
            datefmt="[%X]",
        )
    )

    _logger = logging.getLogger(logger_name)
    if not _logger.handlers:
        _logger.addHandler(rich_handler)
    _logger.setLevel(logging.INFO)
    _logger.propagate = False
    return _logger


logger: logging.Logger = get_logger(LOGGER_NAME)


def set_log_level_to_debug():
    logger.setLevel(logging.DEBUG)


def set_log_level_to_info():
    logger.setLevel(logging.INFO)


def set_log_level(name: str):
    """Set the level from a name such as "DEBUG" or "warning"."""
    logger.setLevel(getattr(logging, name.upper(), logging.INFO))
