#!/usr/bin/env python3
"""Onboard flood segmentation toolkit: rasters, baselines, a small CNN engine
and the downlink side of the pipeline."""
import os

import structlog
from structlog.contextvars import bind_contextvars


_log = structlog.get_logger(__name__)

__version__ = "0.3.1"

THREADS_ENV = "FLOODSEG_THREADS"


class FloodsegError(Exception):
    """Base class of every error raised by the library"""


class FormatError(FloodsegError):
    """A file does not follow its binary format"""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ArgumentError(FloodsegError, ValueError):
    """Arguments that the operation cannot work with"""


class ShapeError(FloodsegError, ValueError):
    """Tensor shapes do not line up"""


class CoverageError(FloodsegError):
    """A pixel is not covered by any patch"""


class NumericError(FloodsegError):
    """NaN or Inf where finite values are required"""


class EvaluationError(FloodsegError):
    """Nothing valid to evaluate"""


class LossError(FloodsegError):
    """Loss requested over a batch without valid pixels"""


class ConfigError(FloodsegError):
    """Malformed or unknown configuration"""


def get_thread_count(default: int = 1) -> int:
    """Gets the worker thread cap from the environment"""
    val = os.environ.get(THREADS_ENV, "").strip()
    if not val:
        return default
    try:
        threads = int(val)
    except ValueError:
        raise ConfigError(f"Environment variable {THREADS_ENV} is not an integer")
    if threads < 1:
        raise ConfigError(f"Environment variable {THREADS_ENV} must be >= 1")
    bind_contextvars(threads=threads)
    return threads


def make_rng(seed: int):
    """Explicitly seeded PCG64 generator; global numpy state is never used."""
    import numpy as np

    return np.random.Generator(np.random.PCG64(seed))
