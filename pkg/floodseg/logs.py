import csv
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Sequence

import structlog
from structlog.contextvars import bind_contextvars, unbind_contextvars


@contextmanager
def log_state(*args, **kws):
    bind_contextvars(**kws)
    try:
        yield
    finally:
        unbind_contextvars(*kws)


@contextmanager
def log_timing(event, logger=None, **kws):
    """Log `event` with the elapsed wall time once the block finishes."""
    log = logger or structlog.get_logger(__name__)
    start = time.perf_counter()
    with log_state(**kws):
        yield
        log.info(event, elapsed_s=round(time.perf_counter() - start, 4))


def stderr_logger(*args):
    """Logger factory writing to whatever sys.stderr is at call time."""
    return structlog.PrintLogger(sys.stderr)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """Header line then one row per item; returns the path written."""
    path = Path(path)
    with path.open("w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(header)
        writer.writerows(rows)
    return path
