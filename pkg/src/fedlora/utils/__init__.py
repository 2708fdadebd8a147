# flake8: noqa
# Lint as: python3
"""Util import."""

__all__ = [
    "disable_progress_bar",
    "enable_progress_bar",
    "is_progress_bar_enabled",
]

from .logging import disable_progress_bar, enable_progress_bar, is_progress_bar_enabled
