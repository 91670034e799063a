"""Process-wide operation counters used for cost accounting.

Counting is off unless a :func:`counting` block is active, so the hot path
pays one attribute lookup.
"""

from __future__ import annotations

import threading
from collections import Counter
from contextlib import contextmanager

_local = threading.local()

# event names
TARGET_ATTENTION = "target_attention"  # attention-sublayer evaluations x images
FROZEN_ATTENTION = "frozen_attention"
FROZEN_FORWARD = "frozen_forward"  # calls (one per batch)
FROZEN_IMAGES = "frozen_images"
IMAGES = "images"


def record(event: str, n: int = 1) -> None:
    c = getattr(_local, "counter", None)
    if c is not None:
        c[event] += n


@contextmanager
def counting():
    """Collect events raised inside the block into a fresh :class:`Counter`."""
    prev = getattr(_local, "counter", None)
    c: Counter = Counter()
    _local.counter = c
    try:
        yield c
    finally:
        _local.counter = prev
        if prev is not None:
            prev.update(c)
