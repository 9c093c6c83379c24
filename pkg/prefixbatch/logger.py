"""
Logging setup.

The rest of the code gets the logger through this module rather than
`logging.getLogger` to make sure that it is configured.
"""
import logging
import sys

logger = logging.getLogger('prefixbatch')

if not logger.handlers:  # pragma: no cover
    logger.setLevel(logging.WARNING)
    logger.addHandler(logging.NullHandler())


def configure_cli_logging(verbose: bool = False) -> logging.Handler:
    """Send log records to stderr for the duration of one command; the caller removes the handler."""
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter('%(levelname)s %(name)s: %(message)s'))
    logger.addHandler(handler)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    return handler


def reset_cli_logging(handler: logging.Handler) -> None:
    logger.removeHandler(handler)
    logger.setLevel(logging.WARNING)
