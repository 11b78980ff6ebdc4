"""Analytic FLOP tally, fed by the ops as they execute.

Convention: one multiply-accumulate counts as 2 FLOPs (conv, linear and
attention matmuls), elementwise ops count 1 FLOP per output element,
softmax 5 per element, and normalizations 4 per element.
"""
from __future__ import annotations

import contextlib

_active = []


class FlopTally:
    def __init__(self):
        self.flops = 0
        self.bytes_moved = 0

    def add(self, flops: int, nbytes: int = 0) -> None:
        self.flops += int(flops)
        self.bytes_moved += int(nbytes)


@contextlib.contextmanager
def tally():
    """Collect FLOPs of every op executed inside the block."""
    t = FlopTally()
    _active.append(t)
    try:
        yield t
    finally:
        _active.pop()


def add(flops: int, nbytes: int = 0) -> None:
    if _active:
        _active[-1].add(flops, nbytes)


def counting() -> bool:
    return bool(_active)
