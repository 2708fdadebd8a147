# Lint as: python3
""" Logging utilities.

Every module logs through `get_logger(__name__)`, a child of the `fedlora` root logger. The root logger
owns one stream handler and does not propagate, so round lifecycle messages reach stderr exactly once.
`FEDLORA_VERBOSITY` picks the starting level.
"""

import logging
import os
from typing import Optional

from tqdm import auto as tqdm_lib


log_levels = {
    "debug": logging.DEBUG,
    "info": logging.INFO,
    "warning": logging.WARNING,
    "error": logging.ERROR,
    "critical": logging.CRITICAL,
}

_LIBRARY_NAME = __name__.split(".")[0]
_DEFAULT_LEVEL = logging.WARNING
_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _level_from_env() -> int:
    requested = os.getenv("FEDLORA_VERBOSITY", "").lower()
    if not requested:
        return _DEFAULT_LEVEL
    if requested not in log_levels:
        logging.getLogger().warning(
            f"Unknown option FEDLORA_VERBOSITY={requested}, has to be one of: {', '.join(log_levels)}"
        )
        return _DEFAULT_LEVEL
    return log_levels[requested]


def _root() -> logging.Logger:
    return logging.getLogger(_LIBRARY_NAME)


def _configure_root() -> None:
    root = _root()
    root.setLevel(_level_from_env())
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(_FORMAT))
        root.addHandler(handler)
    root.propagate = False


def get_logger(name: Optional[str] = None) -> logging.Logger:
    """Return the logger `name`, or the library root logger."""
    return logging.getLogger(name or _LIBRARY_NAME)


def get_verbosity() -> int:
    return _root().getEffectiveLevel()


def set_verbosity(verbosity) -> None:
    """Set the library level.

    Args:
        verbosity: a `logging` level or one of the names in `log_levels`, e.g. `"info"` to see
            broadcasts, collections, aggregations and ledger credits.
    """
    if isinstance(verbosity, str):
        verbosity = log_levels[verbosity.lower()]
    _root().setLevel(verbosity)


def enable_propagation() -> None:
    """Hand records to the parent loggers too, e.g. for pytest's `caplog`."""
    _root().propagate = True


def disable_propagation() -> None:
    _root().propagate = False


_configure_root()


class _SilentBar:
    """Stands in for a tqdm bar while progress bars are disabled."""

    def __init__(self, iterable=None, *args, **kwargs):
        self._iterable = iterable

    def __iter__(self):
        return iter(self._iterable)

    def __getattr__(self, _):
        return lambda *args, **kwargs: None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


_progress_bars = True


def tqdm(*args, **kwargs):
    """`tqdm.auto.tqdm` while progress bars are enabled, a silent pass-through otherwise."""
    if _progress_bars:
        return tqdm_lib.tqdm(*args, **kwargs)
    return _SilentBar(*args, **kwargs)


def is_progress_bar_enabled() -> bool:
    return _progress_bars


def enable_progress_bar() -> None:
    global _progress_bars
    _progress_bars = True


def disable_progress_bar() -> None:
    global _progress_bars
    _progress_bars = False
