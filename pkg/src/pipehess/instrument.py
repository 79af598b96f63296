"""Flop and live-byte accounting for the structured solvers.

Counters are explicit objects pushed onto a module-level stack; library
kernels charge whatever counters are active and do nothing otherwise.
Flops are charged from block shapes with the standard dense-kernel
formulas, so both compute backends report identical counts.
"""

from __future__ import annotations

from contextlib import contextmanager


_flop_stack: list["FlopCounter"] = []
_mem_stack: list["MemoryMeter"] = []


class FlopCounter:
    """Accumulates floating point operation counts."""

    def __init__(self) -> None:
        self.flops = 0

    def add(self, n: int) -> None:
        self.flops += int(n)


class MemoryMeter:
    """Tracks currently live instrumented bytes and their peak."""

    def __init__(self) -> None:
        self.current = 0
        self.peak = 0

    def alloc(self, nbytes: int) -> None:
        self.current += int(nbytes)
        if self.current > self.peak:
            self.peak = self.current

    def free(self, nbytes: int) -> None:
        self.current -= int(nbytes)


@contextmanager
def flop_scope(counter: FlopCounter | None = None):
    """Activate a flop counter for the duration of the block."""
    counter = counter if counter is not None else FlopCounter()
    _flop_stack.append(counter)
    try:
        yield counter
    finally:
        _flop_stack.remove(counter)


@contextmanager
def memory_scope(meter: MemoryMeter | None = None):
    """Activate a live-byte meter for the duration of the block."""
    meter = meter if meter is not None else MemoryMeter()
    _mem_stack.append(meter)
    try:
        yield meter
    finally:
        _mem_stack.remove(meter)


def add_flops(n: int) -> None:
    for counter in _flop_stack:
        counter.add(n)


def alloc_bytes(n: int) -> None:
    for meter in _mem_stack:
        meter.alloc(n)


def free_bytes(n: int) -> None:
    for meter in _mem_stack:
        meter.free(n)


def counting() -> bool:
    """True when at least one flop counter is active."""
    return bool(_flop_stack)


# Shape-based flop formulas for the dense kernels used throughout.

def gemv_flops(m: int, n: int) -> int:
    return 2 * m * n


def gemm_flops(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


def axpy_flops(n: int) -> int:
    return 2 * n


def lu_flops(d: int) -> int:
    # partial-pivoting LU of a d x d block
    return (2 * d * d * d) // 3


def lu_solve_flops(d: int, nrhs: int = 1) -> int:
    return 2 * d * d * nrhs
