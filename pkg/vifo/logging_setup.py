"""Log routing for the command line: stderr or journald, plus per-run log files."""

import logging
import os
import sys
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path

LEVEL_ENV = "VIFO_LOG_LEVEL"
RUN_LOG = "run.log"
CONSOLE_FORMAT = "%(asctime)s %(levelname)-8s %(name)s: %(message)s"
RUN_LOG_FORMAT = "%(asctime)s %(levelname)s [%(threadName)s] %(name)s: %(message)s"

# journald reads a leading <N> as the syslog priority of the line.
JOURNAL_PRIORITIES = {
    logging.DEBUG: 7,
    logging.INFO: 6,
    logging.WARNING: 4,
    logging.ERROR: 3,
    logging.CRITICAL: 2,
}


class JournalFormatter(logging.Formatter):
    def format(self, record):
        priority = JOURNAL_PRIORITIES.get(record.levelno, 6)
        return f"<{priority}>{super().format(record)}"


def parse_level(level: str | int | None) -> int:
    """A level name or number; ``None`` reads $VIFO_LOG_LEVEL, then INFO."""
    if level is None:
        level = os.environ.get(LEVEL_ENV) or "INFO"
    if isinstance(level, int):
        return level
    levels = logging.getLevelNamesMapping()
    name = level.strip().upper()
    if name not in levels:
        raise ValueError(f"Unknown log level {level!r}; expected one of {', '.join(levels)}")
    return levels[name]


def console_formatter() -> logging.Formatter:
    if "JOURNAL_STREAM" in os.environ:
        return JournalFormatter("%(name)s: %(message)s")
    return logging.Formatter(CONSOLE_FORMAT, datefmt="%H:%M:%S")


def configure_logging(level: str | int | None = None):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(console_formatter())

    root = logging.getLogger()
    root.handlers.clear()
    root.addHandler(handler)
    root.setLevel(parse_level(level))


@contextmanager
def run_log(out_dir: Path) -> Iterator[Path]:
    """Copy every ``vifo`` record emitted inside the block into ``out_dir/run.log``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RUN_LOG
    handler = logging.FileHandler(path, mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter(RUN_LOG_FORMAT))
    logger = logging.getLogger("vifo")
    logger.addHandler(handler)
    try:
        yield path
    finally:
        logger.removeHandler(handler)
        handler.close()
