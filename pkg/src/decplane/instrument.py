"""Lightweight counters used to verify structural cost claims in tests/benches."""

from __future__ import annotations


class VisitCounter:
    """Counts candidate elements streamed into the decision pipeline.

    Incremented once per element per stage entry (hot slice -> H, tail slice
    -> V - H, full pass -> V), so O(H) vs O(V) behavior is checkable without
    relying on wall clock.
    """

    __slots__ = ("total", "tokens")

    def __init__(self):
        self.total = 0
        self.tokens = 0

    def add(self, n: int) -> None:
        self.total += int(n)

    def count_token(self) -> None:
        self.tokens += 1

    def per_token(self) -> float:
        if self.tokens == 0:
            raise ZeroDivisionError("no tokens recorded")
        return self.total / self.tokens

    def reset(self) -> None:
        self.total = 0
        self.tokens = 0


class CopyCounter:
    """Counts consumer-side element copies made while assembling logits views."""

    __slots__ = ("elements",)

    def __init__(self):
        self.elements = 0

    def add(self, n: int) -> None:
        self.elements += int(n)

    def reset(self) -> None:
        self.elements = 0
