"""Token-bucket rate limiting and bounded exponential-backoff retries.

Shared by the imagery fetcher and the LLM gateway; both talk to remote
services that throttle.
"""

from __future__ import annotations

import random
import threading
import time
from dataclasses import dataclass
from typing import Callable, TypeVar

from .errors import TransportError, UpstreamError

T = TypeVar("T")


class TokenBucket:
    """Classic token bucket; acquire() blocks until a token is available.

    rate is tokens per second; capacity defaults to one burst-second.
    Thread-safe. A rate of None disables limiting entirely.
    """

    def __init__(self, rate: float | None, capacity: float | None = None,
                 monotonic: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.rate = rate
        self.capacity = capacity if capacity is not None else (rate or 1.0)
        self._tokens = self.capacity
        self._last = monotonic()
        self._monotonic = monotonic
        self._sleep = sleep
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if self.rate is None:
            return
        while True:
            with self._lock:
                now = self._monotonic()
                self._tokens = min(self.capacity,
                                   self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            self._sleep(wait)


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff: base * factor**attempt with jitter."""

    max_attempts: int = 5
    base_delay: float = 1.0
    factor: float = 2.0
    jitter: bool = True

    def delay(self, attempt: int, rng: random.Random | None = None) -> float:
        d = self.base_delay * (self.factor ** attempt)
        if self.jitter:
            d *= (rng or random).uniform(0.5, 1.0)
        return d


def is_retryable(exc: Exception) -> bool:
    """Retry transport faults and throttling/server-side upstream errors."""
    if isinstance(exc, TransportError):
        return True
    if isinstance(exc, UpstreamError):
        code = exc.status_code
        return code is not None and (code == 429 or code >= 500)
    return False


def with_retries(fn: Callable[[], T], policy: RetryPolicy = RetryPolicy(),
                 sleep: Callable[[float], None] = time.sleep,
                 rng: random.Random | None = None) -> tuple[T, int]:
    """Run fn, retrying retryable errors up to policy.max_attempts.

    Returns (result, attempts). The final error is re-raised once the
    attempt budget is spent.
    """
    last: Exception | None = None
    for attempt in range(policy.max_attempts):
        try:
            return fn(), attempt + 1
        except Exception as exc:  # noqa: BLE001 - filtered below
            if not is_retryable(exc) or attempt == policy.max_attempts - 1:
                raise
            last = exc
            sleep(policy.delay(attempt, rng))
    raise last  # pragma: no cover - loop always returns or raises
