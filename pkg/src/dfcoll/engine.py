"""Round-based cooperative scheduler for every simulated context.

Each round ticks every registered actor once, in an order shuffled by the
engine's seeded RNG. Daemon lanes, supervisors, pollers and host programs are
all actors, so a seed fixes one interleaving and different seeds explore
different ones. Deadlock shows up as rounds that never satisfy the caller's
predicate; the wall-clock watchdog turns that into ``WatchdogTimeout``.
"""

from __future__ import annotations

import random
import time
from typing import Callable, Generator

from .errors import WatchdogTimeout


class Engine:
    def __init__(self, seed: int = 0, shuffle: bool = True):
        self.rng = random.Random(seed)
        self.shuffle = shuffle
        self.round = 0
        self.actors: list = []

    def add(self, actor) -> None:
        self.actors.append(actor)

    def step(self) -> None:
        actors = self.actors
        if self.shuffle:
            actors = actors[:]
            self.rng.shuffle(actors)
        for a in actors:
            a.tick()
        self.round += 1

    def run_until(
        self,
        done: Callable[[], bool],
        watchdog: float | None = 60.0,
        describe: Callable[[], str] | None = None,
        events: Callable[[], list] | None = None,
    ) -> int:
        """Step until ``done()``; returns the number of rounds taken."""
        start_round = self.round
        deadline = None if watchdog is None else time.monotonic() + watchdog
        while not done():
            for _ in range(64):
                self.step()
                if done():
                    return self.round - start_round
            if deadline is not None and time.monotonic() > deadline:
                msg = f"watchdog expired after {watchdog:g}s at round {self.round}"
                if describe is not None:
                    msg += f": {describe()}"
                raise WatchdogTimeout(msg, events() if events else None)
        return self.round - start_round


class Sleep:
    __slots__ = ("rounds",)

    def __init__(self, rounds: int):
        self.rounds = rounds


HostGen = Generator[object, None, None]


class HostProgram:
    """Drives a generator that models one host thread.

    The generator yields ``None`` (resume next round), ``Sleep(n)``, or a
    zero-argument predicate (resume once it returns true).
    """

    def __init__(self, gen: HostGen, name: str = ""):
        self.gen = gen
        self.name = name
        self.done = False
        self.error: BaseException | None = None
        self._wait: Callable[[], bool] | None = None
        self._sleep = 0

    def tick(self) -> None:
        if self.done:
            return
        if self._sleep:
            self._sleep -= 1
            return
        if self._wait is not None:
            if not self._wait():
                return
            self._wait = None
        try:
            req = next(self.gen)
        except StopIteration:
            self.done = True
            return
        except BaseException as exc:  # surfaced by World.run
            self.done = True
            self.error = exc
            return
        if isinstance(req, Sleep):
            self._sleep = max(req.rounds - 1, 0)
        elif callable(req):
            self._wait = req
