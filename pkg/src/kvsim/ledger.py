"""Memory and link bookkeeping for the simulation engine."""

from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Iterator, List, Optional, Tuple

from kvsim.logger import get_logger

logger = get_logger(__name__)


class SimulationError(RuntimeError):
    """Raised on capacity violations, bookkeeping bugs and invariant failures."""


class KVRole(str, Enum):
    """Whether a KV copy is the one decoding reads or a mirrored replica."""

    PRIMARY = "primary"
    REDUNDANT = "redundant"


class TrafficCategory(str, Enum):
    """What a link transfer carries."""

    PREFILL_TRANSFER = "prefill_transfer"
    MIRROR = "mirror"
    LEVELING = "leveling"


@dataclass
class KVEntry:
    """
    One request's KV copy on one instance.

    `allocated` is the reserved token count, `tokens_present` what has been computed
    or has landed, and `target` the token count the copy reaches once every transfer
    already enqueued for it lands. `incoming` marks a copy whose initial transfer
    is still in flight.
    """

    request_id: int
    role: KVRole
    tokens_present: int
    allocated: int
    target: int
    incoming: bool = False


class MemoryLedger:
    """KV token accounting for a single instance."""

    def __init__(self, instance_id: int, capacity_tokens: int):
        if capacity_tokens < 0:
            raise ValueError(f"capacity_tokens must be non-negative, got {capacity_tokens}")
        self.instance_id = instance_id
        self.capacity_tokens = capacity_tokens
        self.used_tokens = 0
        self.peak_tokens = 0
        self._entries: Dict[int, KVEntry] = {}

    @property
    def free_tokens(self) -> int:
        return self.capacity_tokens - self.used_tokens

    def __contains__(self, request_id: int) -> bool:
        return request_id in self._entries

    def entry(self, request_id: int) -> Optional[KVEntry]:
        return self._entries.get(request_id)

    def entries(self) -> Iterator[KVEntry]:
        return iter(self._entries.values())

    def _charge(self, tokens: int) -> None:
        self.used_tokens += tokens
        if self.used_tokens > self.peak_tokens:
            self.peak_tokens = self.used_tokens

    def allocate_kv(
        self,
        request_id: int,
        tokens: int,
        role: KVRole,
        *,
        present: int = 0,
        incoming: bool = False,
    ) -> Optional[KVEntry]:
        """
        Reserve space for a request's KV copy.

        Args:
            request_id: Request the copy belongs to
            tokens: Tokens to reserve
            role: Primary or redundant
            present: Tokens already materialized
            incoming: Copy still arriving over a link

        Returns:
            The new entry, or None when the reservation would exceed capacity

        Raises:
            SimulationError: If the request already has a copy on this instance
        """
        if tokens < 0 or present < 0 or present > tokens:
            raise ValueError(f"invalid allocation: tokens={tokens} present={present}")
        if request_id in self._entries:
            raise SimulationError(
                f"request {request_id} already has KV on instance {self.instance_id}"
            )
        if tokens > self.free_tokens:
            return None
        entry = KVEntry(
            request_id=request_id,
            role=role,
            tokens_present=present,
            allocated=tokens,
            target=tokens,
            incoming=incoming,
        )
        self._entries[request_id] = entry
        self._charge(tokens)
        return entry

    def reserve(self, request_id: int, total_tokens: int) -> bool:
        """Make sure the entry has at least total_tokens allocated. False if it does not fit."""
        entry = self._require(request_id)
        extra = total_tokens - entry.allocated
        if extra <= 0:
            return True
        if extra > self.free_tokens:
            return False
        entry.allocated += extra
        self._charge(extra)
        return True

    def grow_kv(self, request_id: int, tokens: int = 1) -> bool:
        """Append tokens to a copy, using existing reservation first. False if it does not fit."""
        entry = self._require(request_id)
        if not self.reserve(request_id, entry.tokens_present + tokens):
            return False
        entry.tokens_present += tokens
        entry.target = max(entry.target, entry.tokens_present)
        return True

    def evict_redundant(self, request_id: int) -> int:
        """
        Drop a redundant copy.

        Returns:
            Tokens freed; 0 when the copy is still arriving

        Raises:
            SimulationError: If the entry is a primary copy
        """
        entry = self._require(request_id)
        if entry.role is KVRole.PRIMARY:
            raise SimulationError(
                f"refusing to evict primary KV of request {request_id} "
                f"on instance {self.instance_id}"
            )
        if entry.incoming:
            return 0
        return self.release(request_id)

    def release(self, request_id: int) -> int:
        """Free a copy regardless of role. Returns tokens freed (0 if absent)."""
        entry = self._entries.pop(request_id, None)
        if entry is None:
            return 0
        self.used_tokens -= entry.allocated
        return entry.allocated

    def redundant_entries(self) -> List[KVEntry]:
        return [e for e in self._entries.values() if e.role is KVRole.REDUNDANT]

    def _require(self, request_id: int) -> KVEntry:
        entry = self._entries.get(request_id)
        if entry is None:
            raise SimulationError(f"request {request_id} has no KV on instance {self.instance_id}")
        return entry


@dataclass(frozen=True)
class Transfer:
    """A transfer queued on a directed link."""

    src: int
    dst: int
    num_bytes: int
    category: TrafficCategory
    enqueue_time: float
    finish_time: float


class LinkLedger:
    """
    FIFO queues on directed instance links.

    A transfer finishes at max(now, previous finish on the link) + its latency.
    Cumulative bytes are tracked per category and mirror bytes per link in
    one-second buckets.
    """

    def __init__(self, latency_fn: Callable[[int, int], float]):
        """
        Args:
            latency_fn: Maps (source instance, bytes) to transfer seconds
        """
        self._latency_fn = latency_fn
        self._busy_until: Dict[Tuple[int, int], float] = {}
        self.bytes_by_category: Dict[str, int] = {c.value: 0 for c in TrafficCategory}
        self.mirror_buckets: Dict[Tuple[int, int], Dict[int, int]] = defaultdict(dict)
        self.transfer_count = 0

    def busy_until(self, src: int, dst: int) -> float:
        return self._busy_until.get((src, dst), 0.0)

    def enqueue(
        self,
        src: int,
        dst: int,
        num_bytes: int,
        category: TrafficCategory,
        now: float,
    ) -> Transfer:
        """Queue bytes on link src->dst and return the scheduled transfer."""
        if src == dst:
            raise SimulationError(f"transfer from instance {src} to itself")
        if num_bytes < 0:
            raise SimulationError(f"negative transfer size {num_bytes}")
        start = max(now, self.busy_until(src, dst))
        finish = start + self._latency_fn(src, num_bytes)
        self._busy_until[(src, dst)] = finish
        self.bytes_by_category[category.value] += num_bytes
        self.transfer_count += 1
        if category is TrafficCategory.MIRROR:
            bucket = self.mirror_buckets[(src, dst)]
            second = int(now)
            bucket[second] = bucket.get(second, 0) + num_bytes
        return Transfer(
            src=src,
            dst=dst,
            num_bytes=num_bytes,
            category=category,
            enqueue_time=now,
            finish_time=finish,
        )

    def mirror_series(self) -> List[Tuple[int, int, int, int]]:
        """(src, dst, second, bytes) rows in deterministic order."""
        rows = []
        for (src, dst), buckets in sorted(self.mirror_buckets.items()):
            for second in sorted(buckets):
                rows.append((src, dst, second, buckets[second]))
        return rows

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes_by_category.values())
