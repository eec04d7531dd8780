"""Lock-backed indivisible integer operations.

CPython makes single loads and stores of an attribute atomic already; the lock
is only there so read-modify-write operations stay indivisible when producers
run on real threads.
"""

from __future__ import annotations

import threading


class AtomicInt:
    __slots__ = ("_value", "_lock")

    def __init__(self, value: int = 0):
        self._value = value
        self._lock = threading.Lock()

    def load(self) -> int:
        return self._value

    def store(self, value: int) -> None:
        self._value = value

    def fetch_add(self, delta: int = 1) -> int:
        with self._lock:
            old = self._value
            self._value = old + delta
            return old

    def add_fetch(self, delta: int = 1) -> int:
        with self._lock:
            self._value += delta
            return self._value

    def compare_exchange(self, expected: int, desired: int) -> bool:
        with self._lock:
            if self._value != expected:
                return False
            self._value = desired
            return True

    def exchange(self, value: int) -> int:
        with self._lock:
            old, self._value = self._value, value
            return old

    def __repr__(self) -> str:
        return f"AtomicInt({self._value})"


def fence() -> None:
    """Full ordering fence. A no-op under the GIL; kept to mark fence points."""
