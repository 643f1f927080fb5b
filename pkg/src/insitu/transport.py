"""Abstract rank transport plus an in-process implementation.

Ranks only ever talk through this interface, so simulated in-process ranks
and a real message-passing backend are interchangeable.  The in-process
fabric runs one thread per rank over FIFO queues: reliable, ordered per
sender-receiver pair, with byte counters for the compositing balance checks.
"""

from __future__ import annotations

import queue
import threading
from typing import Callable, Optional, Protocol


class TransportError(Exception):
    pass


class Transport(Protocol):
    rank: int
    size: int

    def send(self, to: int, data: bytes) -> None: ...

    def receive(self, from_rank: int, timeout: Optional[float] = None) -> bytes: ...

    def broadcast_from_root(self, data: Optional[bytes]) -> bytes: ...


class LocalFabric:
    """Queue fabric shared by the rank endpoints of one simulated cluster."""

    def __init__(self, size: int, default_timeout: float = 120.0):
        self.size = size
        self.default_timeout = default_timeout
        self._channels = {
            (src, dst): queue.Queue() for src in range(size) for dst in range(size)
        }
        self._lock = threading.Lock()
        self.sent_bytes = [0] * size
        self.received_bytes = [0] * size

    def endpoint(self, rank: int) -> "LocalTransport":
        return LocalTransport(self, rank)

    def endpoints(self) -> list["LocalTransport"]:
        return [self.endpoint(r) for r in range(self.size)]

    def reset_counters(self) -> None:
        with self._lock:
            self.sent_bytes = [0] * self.size
            self.received_bytes = [0] * self.size

    def _send(self, src: int, dst: int, data: bytes) -> None:
        if not 0 <= dst < self.size:
            raise TransportError(f"destination rank {dst} out of range")
        with self._lock:
            self.sent_bytes[src] += len(data)
        self._channels[(src, dst)].put(data)

    def _receive(self, src: int, dst: int, timeout: Optional[float]) -> bytes:
        try:
            data = self._channels[(src, dst)].get(
                timeout=timeout if timeout is not None else self.default_timeout
            )
        except queue.Empty:
            raise TransportError(f"rank {dst} timed out waiting for rank {src}") from None
        with self._lock:
            self.received_bytes[dst] += len(data)
        return data


class LocalTransport:
    def __init__(self, fabric: LocalFabric, rank: int):
        self.fabric = fabric
        self.rank = rank
        self.size = fabric.size

    def send(self, to: int, data: bytes) -> None:
        self.fabric._send(self.rank, to, data)

    def receive(self, from_rank: int, timeout: Optional[float] = None) -> bytes:
        return self.fabric._receive(from_rank, self.rank, timeout)

    def broadcast_from_root(self, data: Optional[bytes] = None) -> bytes:
        if self.rank == 0:
            if data is None:
                raise TransportError("root must provide broadcast data")
            for other in range(1, self.size):
                self.send(other, data)
            return data
        return self.receive(0)

    def gather_to_root(self, data: bytes) -> Optional[list[bytes]]:
        """Root returns every rank's contribution in rank order."""
        if self.rank == 0:
            docs = [data]
            for other in range(1, self.size):
                docs.append(self.receive(other))
            return docs
        self.send(0, data)
        return None


def run_ranks(size: int, body: Callable[[LocalTransport], object],
              timeout: float = 300.0) -> list[object]:
    """Run ``body(transport)`` on one thread per rank; returns per-rank results.

    The first rank failure is re-raised after all threads stop, so tests see
    the real exception rather than a timeout cascade.
    """
    fabric = LocalFabric(size)
    results: list[object] = [None] * size
    errors: list[tuple[int, BaseException]] = []

    def runner(rank: int):
        try:
            results[rank] = body(fabric.endpoint(rank))
        except BaseException as exc:  # noqa: BLE001 - propagated below
            errors.append((rank, exc))

    threads = [threading.Thread(target=runner, args=(r,), daemon=True) for r in range(size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout)
        if t.is_alive():
            raise TransportError("rank thread did not finish (deadlock?)")
    if errors:
        rank, exc = errors[0]
        raise RuntimeError(f"rank {rank} failed: {exc}") from exc
    return results
