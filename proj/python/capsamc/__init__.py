"""Capsule-network modulation classifier."""

from ._core import *  # noqa: F401,F403
