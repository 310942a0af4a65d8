"""
Console logging with the [+] / [*] / [!] / [x] status prefixes.
"""
import logging
import sys

PREFIXES = {
    logging.DEBUG: "[*]",
    logging.INFO: "[+]",
    logging.WARNING: "[!]",
    logging.ERROR: "[x]",
    logging.CRITICAL: "[x]",
}


class PrefixFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        prefix = PREFIXES.get(record.levelno, "[?]")
        return f"{prefix} {super().format(record)}"


def setup_logging(verbose: bool = False, stream=None) -> logging.Logger:
    """Attach one prefixed stderr handler to the ``vcnet`` logger."""
    logger = logging.getLogger("vcnet")
    for handler in list(logger.handlers):
        if getattr(handler, "_vcnet_console", False):
            logger.removeHandler(handler)
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(PrefixFormatter("%(message)s"))
    handler._vcnet_console = True
    logger.addHandler(handler)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    logger.propagate = False
    return logger
