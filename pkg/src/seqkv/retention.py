"""Retained-length arithmetic shared by codecs, cache, scheduler, and planner.

Every module that needs the compressed vision length must call
effective_len so that ceiling behavior (including the float-noise guard)
is identical package-wide; byte-exact cross-checks between the footprint
model and the cache counters depend on this.
"""

import math

from .errors import ParameterError

# Guards ceil() against values like 65.00000000000001 produced by float
# schedule interpolation; only fractions in (0, 1e-9] are affected.
CEIL_EPS = 1e-9


def effective_len(retention: float, n: int) -> int:
    """Number of retained rows for a retention ratio over n vision tokens."""
    if n < 1:
        raise ParameterError(f"token count must be >= 1, got {n}")
    if not 0.0 < retention <= 1.0:
        raise ParameterError(f"retention must be in (0, 1], got {retention}")
    return math.ceil(retention * n - CEIL_EPS)
