"""Per-user streaming partition state machine.

Incoming behaviors are buffered in a short-term cache.  When the partition
condition fires, the whole cache is sealed into an immutable long-term
partition and the cache is emptied.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable, Optional, Sequence, Union

from .errors import DegenerateInputError, IdentityError, PreconditionError

DEFAULT_K = 20


@dataclass(frozen=True)
class Behavior:
    """One timestamped user-item interaction."""

    user_id: Hashable
    item_id: Hashable
    title: str
    attributes: tuple[tuple[str, str], ...] = ()
    rating: Optional[int] = None
    timestamp: int = 0

    def __post_init__(self):
        if not self.title:
            raise PreconditionError("behavior title must be non-empty")
        if self.timestamp < 0:
            raise PreconditionError(f"negative timestamp {self.timestamp}")
        if self.rating is not None and not 1 <= self.rating <= 5:
            raise PreconditionError(f"rating {self.rating} outside 1..5")
        attrs = tuple((str(k), str(v)) for k, v in self.attributes)
        object.__setattr__(self, "attributes", attrs)


@dataclass(frozen=True)
class Partition:
    """A sealed, immutable block of consecutive behaviors."""

    index: int
    behaviors: tuple[Behavior, ...]
    sealed_at: int

    def __post_init__(self):
        if self.index < 1:
            raise PreconditionError("partition index starts at 1")
        if not self.behaviors:
            raise DegenerateInputError("a partition must contain at least one behavior")
        object.__setattr__(self, "behaviors", tuple(self.behaviors))

    def __len__(self) -> int:
        return len(self.behaviors)


@dataclass(frozen=True)
class PartitionConfig:
    """Partition rule settings.

    ``k`` is the balance coefficient of the length rule.  A custom
    ``condition`` callable replaces the length rule entirely.
    """

    k: int = DEFAULT_K
    condition: Optional[Callable[[Sequence[Behavior]], bool]] = None

    def __post_init__(self):
        if self.k < 1:
            raise PreconditionError(f"K must be >= 1, got {self.k}")


@dataclass
class UserState:
    user_id: Hashable
    short_term_cache: list[Behavior] = field(default_factory=list)
    partitions: list[Partition] = field(default_factory=list)

    @property
    def partition_count(self) -> int:
        return len(self.partitions)

    def last_timestamp(self) -> Optional[int]:
        if self.short_term_cache:
            return self.short_term_cache[-1].timestamp
        if self.partitions:
            return self.partitions[-1].behaviors[-1].timestamp
        return None

    def behaviors(self) -> list[Behavior]:
        """All ingested behaviors in arrival order (partitions, then cache)."""
        out: list[Behavior] = []
        for p in self.partitions:
            out.extend(p.behaviors)
        out.extend(self.short_term_cache)
        return out


@dataclass(frozen=True)
class CacheAppended:
    cache_size: int


@dataclass(frozen=True)
class PartitionSealed:
    partition: Partition


IngestOutcome = Union[CacheAppended, PartitionSealed]


def check_partition_condition(cache: Sequence[Behavior], config: PartitionConfig) -> bool:
    if config.condition is not None:
        return bool(config.condition(cache))
    return len(cache) >= config.k


def seal_partition(state: UserState) -> Partition:
    """Move the whole cache into a new partition with index ``j + 1``."""
    if not state.short_term_cache:
        raise DegenerateInputError("cannot seal an empty short-term cache")
    behaviors = tuple(state.short_term_cache)
    partition = Partition(
        index=state.partition_count + 1,
        behaviors=behaviors,
        sealed_at=behaviors[-1].timestamp,
    )
    state.partitions.append(partition)
    state.short_term_cache = []
    return partition


def ingest(state: UserState, behavior: Behavior, config: PartitionConfig) -> IngestOutcome:
    if behavior.user_id != state.user_id:
        raise IdentityError(
            f"behavior for user {behavior.user_id!r} sent to state of {state.user_id!r}"
        )
    last = state.last_timestamp()
    # equal timestamps keep arrival order; going backwards would break partition ordering
    if last is not None and behavior.timestamp < last:
        raise PreconditionError(
            f"out-of-order behavior for user {state.user_id!r}: {behavior.timestamp} < {last}"
        )
    state.short_term_cache.append(behavior)
    if check_partition_condition(state.short_term_cache, config):
        return PartitionSealed(seal_partition(state))
    return CacheAppended(len(state.short_term_cache))


def ingest_all(
    state: UserState,
    behaviors: Sequence[Behavior],
    config: PartitionConfig,
    flush: bool = False,
) -> list[Partition]:
    """Ingest a batch and return the partitions sealed along the way.

    ``flush`` force-seals a non-empty leftover cache at the end.  It exists
    for tests; in normal operation the leftover stays in the cache and feeds
    the short-term history feature instead.
    """
    sealed = []
    for b in behaviors:
        outcome = ingest(state, b, config)
        if isinstance(outcome, PartitionSealed):
            sealed.append(outcome.partition)
    if flush and state.short_term_cache:
        sealed.append(seal_partition(state))
    return sealed
