"""Worker thread limits."""

import os
from typing import Final, Mapping, Optional

from histoseg.errors import ConfigError

__all__ = ("max_workers", "THREADS_ENV")

THREADS_ENV: Final = "HISTOSEG_THREADS"


def max_workers(environ: Optional[Mapping[str, str]] = None) -> int:
    """Thread cap from ``HISTOSEG_THREADS``, else the CPU count.

    >>> max_workers({"HISTOSEG_THREADS": "3"})
    3
    """
    env = os.environ if environ is None else environ
    raw = env.get(THREADS_ENV, "").strip()
    if not raw:
        return max(1, os.cpu_count() or 1)

    try:
        value = int(raw)
    except ValueError:
        msg = f"{THREADS_ENV} must be an integer, got {raw!r}"
        raise ConfigError(msg) from None

    if value < 1:
        msg = f"{THREADS_ENV} must be at least 1, got {value}"
        raise ConfigError(msg)

    return value
