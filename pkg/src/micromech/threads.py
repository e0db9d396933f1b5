"""Global worker-count setting for the data-parallel kernels.

One knob controls both the numba thread pool (per-point local solves) and
the FFT worker count. Results are bitwise independent of the worker count:
kernels only ever write to their own point's slot and every reduction runs
as a fixed-order pairwise sum outside the parallel region.
"""

from __future__ import annotations

import os
import warnings

import numba

__all__ = ["set_workers", "get_workers", "available_cores"]

_workers = 1


def available_cores() -> int:
    """Number of cores this process may actually use."""
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # non-Linux
        return os.cpu_count() or 1


def set_workers(n: int) -> int:
    """Set the worker count; clamped to the usable core count.

    Returns the effective value. Asking for more workers than cores is not
    an error (configs written on bigger machines should still run), but a
    warning is emitted because timing comparisons would be meaningless.
    """
    global _workers
    n = int(n)
    if n < 1:
        raise ValueError(f"worker count must be >= 1, got {n}")
    cores = available_cores()
    if n > cores:
        warnings.warn(
            f"requested {n} workers but only {cores} usable core(s); clamping",
            RuntimeWarning,
            stacklevel=2,
        )
        n = cores
    numba.set_num_threads(n)
    _workers = n
    return n


def get_workers() -> int:
    return _workers
