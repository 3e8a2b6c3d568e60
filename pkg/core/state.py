#!/usr/bin/env python3
"""
Shared state management for dstg-tools
Holds the compute precision, the thread cap and the console quiet switch
"""

from contextlib import contextmanager

import numpy as np

# Storage dtype for every Tensor created while this is active
_COMPUTE_DTYPE = np.float32

# Accumulate matmuls in float64 then cast back (gradient-check builds)
_ACCUMULATE_F64 = False

# Upper bound for per-document worker threads
_THREADS = 1

# Silence console output from managers (tests)
_QUIET = False


def get_compute_dtype():
    """Get the current tensor storage dtype"""
    return _COMPUTE_DTYPE


def get_accumulate_f64():
    """Check whether matmuls accumulate in float64"""
    return _ACCUMULATE_F64


@contextmanager
def precision(dtype=np.float64, accumulate_f64=True):
    """
    Temporarily switch tensor precision
    Parameters:
        dtype: numpy float dtype for new tensors
        accumulate_f64: accumulate matmul products in float64
    """
    global _COMPUTE_DTYPE, _ACCUMULATE_F64
    previous = (_COMPUTE_DTYPE, _ACCUMULATE_F64)
    _COMPUTE_DTYPE = np.dtype(dtype).type
    _ACCUMULATE_F64 = accumulate_f64
    try:
        yield
    finally:
        _COMPUTE_DTYPE, _ACCUMULATE_F64 = previous


def get_threads():
    """Get the worker thread cap"""
    return _THREADS


def set_threads(threads):
    """Set the worker thread cap (minimum 1)"""
    global _THREADS
    _THREADS = max(1, int(threads))


def is_quiet():
    """Check whether console output is silenced"""
    return _QUIET


def set_quiet(quiet):
    """Silence or re-enable console output"""
    global _QUIET
    _QUIET = bool(quiet)
