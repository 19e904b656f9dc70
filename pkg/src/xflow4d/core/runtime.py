"""Process-level runtime knobs."""

import os

from ..errors import ConfigError


def worker_count():
    """Worker threads to use for batch work.

    PIONIX_THREADS overrides; otherwise all visible cores.
    """
    raw = os.environ.get("PIONIX_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("PIONIX_THREADS", f"expected an integer, got {raw!r}")
    if n < 1:
        raise ConfigError("PIONIX_THREADS", f"must be >= 1, got {n}")
    return n
