"""Multiply-accumulate counters used to instrument a forward pass.

Counting is off by default. Inside ``counting()`` every matmul adds
``m*k*n`` to the category named by the innermost ``scope(...)``, and the
attention / indexer / top-k paths add their own logical counts.
"""

from __future__ import annotations

import contextlib
from collections import defaultdict

_active: "MacCounter | None" = None
_scope_stack: list[str] = []


class CountingDisabledError(RuntimeError):
    pass


class MacCounter:
    def __init__(self):
        self.counts: dict[str, int] = defaultdict(int)
        self.used = False

    def add(self, category: str, n: int) -> None:
        self.counts[category] += int(n)

    def snapshot(self) -> dict[str, int]:
        if not self.used:
            raise CountingDisabledError("counter was never activated; wrap the forward pass in counting()")
        return dict(self.counts)


@contextlib.contextmanager
def counting():
    global _active
    prev = _active
    counter = MacCounter()
    counter.used = True
    _active = counter
    try:
        yield counter
    finally:
        _active = prev


@contextlib.contextmanager
def scope(category: str):
    _scope_stack.append(category)
    try:
        yield
    finally:
        _scope_stack.pop()


def enabled() -> bool:
    return _active is not None


def add(n: int, category: str | None = None) -> None:
    if _active is None:
        return
    if category is None:
        category = _scope_stack[-1] if _scope_stack else "other"
    _active.add(category, n)
