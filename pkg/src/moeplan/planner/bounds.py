"""High-probability token-load bounds used to plan for the worst case.

With ``n`` routed tokens spread over ``K`` experts, the load on any fixed
expert stays below ``sqrt(3n)/2 + n/K`` with probability about 95%; a fixed
group of ``m`` experts stays below ``sqrt(3n)/2 + m*n/K``. The margin term
is the Hoeffding deviation at that confidence level.
"""

from __future__ import annotations

import math

CONFIDENCE = 0.95


class BoundError(ValueError):
    pass


def worst_case_tokens(n: int, m: int, K: int) -> float:
    """Upper bound on the tokens a fixed group of ``m`` out of ``K`` experts receives."""
    if n < 1:
        raise BoundError("n must be >= 1")
    if not 1 <= m <= K:
        raise BoundError(f"need 1 <= m <= K (m={m}, K={K})")
    return math.sqrt(3 * n) / 2 + m * n / K


def hoeffding_margin(n: float) -> float:
    return math.sqrt(3 * n) / 2 if n > 0 else 0.0


def worst_case_count(expected: float, n: float) -> float:
    """Expected load plus the same margin, never above the ``n`` tokens available."""
    if expected <= 0:
        return 0.0
    return min(float(n), expected + hoeffding_margin(n))


def worst_case_fraction(p: float, n: float) -> float:
    """Upper confidence value for a routing fraction ``p`` observed over ``n`` assignments."""
    if p <= 0:
        return 0.0
    if p >= 1 or n <= 0:
        return min(1.0, p) if n > 0 else 1.0
    return min(1.0, p + hoeffding_margin(n) / n)
