"""Lightweight invocation counters for the compute kernels.

Used by the benchmark harness to verify which kernels actually run in a
given inference mode (e.g. that classification-only inference never touches
the deconv stack or the flow loss).
"""

from collections import Counter

_COUNTS: Counter = Counter()


def count_op(name: str) -> None:
    _COUNTS[name] += 1


def reset_op_counts() -> None:
    _COUNTS.clear()


def op_counts() -> dict:
    """Snapshot of kernel invocation counts since the last reset."""
    return dict(_COUNTS)


def total_op_count() -> int:
    return sum(_COUNTS.values())
