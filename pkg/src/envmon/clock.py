"""Wall-clock and simulated clocks shared by devices and the broker.

Both expose ``now_ms()`` and ``await sleep_until(deadline_ms)``. The simulated
clock never sleeps for real: once every task in the event loop is blocked, it
jumps straight to the earliest pending deadline.
"""

from __future__ import annotations

import asyncio
import heapq
import itertools
import time


class RealClock:
    def now_ms(self) -> int:
        return int(time.time() * 1000)

    async def sleep_until(self, deadline_ms: int) -> None:
        delay = deadline_ms - self.now_ms()
        await asyncio.sleep(max(delay, 0) / 1000)


class SimulatedClock:
    """Virtual time for one asyncio event loop.

    Time advances only from inside :meth:`sleep_until`, after the loop has
    settled: a few bare yields plus a short real select so bytes in flight on
    loopback sockets get delivered first. Timestamps observed by the broker
    and devices are therefore reproducible across runs.
    """

    def __init__(self, start_ms: int = 0, *, settle_rounds: int = 3, settle_yields: int = 8) -> None:
        self._now = start_ms
        self._sleepers: list[tuple[int, int, asyncio.Future]] = []
        self._seq = itertools.count()
        self._driver: asyncio.Task | None = None
        self._settle_rounds = settle_rounds
        self._settle_yields = settle_yields

    def now_ms(self) -> int:
        return self._now

    async def sleep_until(self, deadline_ms: int) -> None:
        if deadline_ms <= self._now:
            await asyncio.sleep(0)
            return
        loop = asyncio.get_running_loop()
        fut = loop.create_future()
        heapq.heappush(self._sleepers, (deadline_ms, next(self._seq), fut))
        if self._driver is None or self._driver.done():
            self._driver = loop.create_task(self._drive())
        try:
            await fut
        finally:
            if not fut.done():
                fut.cancel()

    async def sleep(self, delay_ms: int) -> None:
        await self.sleep_until(self._now + delay_ms)

    async def _settle(self) -> None:
        for _ in range(self._settle_rounds):
            for _ in range(self._settle_yields):
                await asyncio.sleep(0)
            await asyncio.sleep(0.001)

    def _prune(self) -> None:
        while self._sleepers and self._sleepers[0][2].done():
            heapq.heappop(self._sleepers)

    async def _drive(self) -> None:
        while True:
            await self._settle()
            self._prune()
            if not self._sleepers:
                return
            self._now = max(self._now, self._sleepers[0][0])
            while self._sleepers and self._sleepers[0][0] <= self._now:
                _, _, fut = heapq.heappop(self._sleepers)
                if not fut.done():
                    fut.set_result(None)
