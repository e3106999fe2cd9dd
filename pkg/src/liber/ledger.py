"""Accounting of language-model calls, prompt tokens and wall time."""

from __future__ import annotations

import threading
from dataclasses import dataclass, asdict
from typing import Hashable

from .errors import PreconditionError


@dataclass
class UserCounters:
    llm_calls: int = 0
    prompt_tokens: int = 0
    llm_wall_time: float = 0.0


@dataclass(frozen=True)
class EfficiencyReport:
    calls_per_user: float
    tokens_per_prompt: float
    time_per_user: float

    def as_dict(self) -> dict:
        return asdict(self)


class EfficiencyLedger:
    """Thread-safe per-user call counters.

    Counters only ever grow within a run.
    """

    def __init__(self, label: str = ""):
        self.label = label
        self._users: dict[Hashable, UserCounters] = {}
        self._lock = threading.Lock()
        self.failures = 0

    def record_call(self, user_id: Hashable, tokens: int, seconds: float) -> None:
        if tokens < 0 or seconds < 0:
            raise PreconditionError("ledger increments must be non-negative")
        with self._lock:
            c = self._users.setdefault(user_id, UserCounters())
            c.llm_calls += 1
            c.prompt_tokens += tokens
            c.llm_wall_time += seconds

    def record_failure(self) -> None:
        with self._lock:
            self.failures += 1

    def user(self, user_id: Hashable) -> UserCounters:
        with self._lock:
            c = self._users.get(user_id, UserCounters())
            return UserCounters(c.llm_calls, c.prompt_tokens, c.llm_wall_time)

    def users(self) -> list[Hashable]:
        with self._lock:
            return list(self._users)

    @property
    def llm_calls(self) -> int:
        with self._lock:
            return sum(c.llm_calls for c in self._users.values())

    @property
    def prompt_tokens(self) -> int:
        with self._lock:
            return sum(c.prompt_tokens for c in self._users.values())

    @property
    def llm_wall_time(self) -> float:
        with self._lock:
            return sum(c.llm_wall_time for c in self._users.values())


def ledger_report(ledger: EfficiencyLedger, user_count: int) -> EfficiencyReport:
    """Average calls and time over users, tokens over calls."""
    if user_count < 1:
        raise PreconditionError("user_count must be >= 1")
    calls = ledger.llm_calls
    return EfficiencyReport(
        calls_per_user=calls / user_count,
        tokens_per_prompt=ledger.prompt_tokens / calls if calls else 0.0,
        time_per_user=ledger.llm_wall_time / user_count,
    )
