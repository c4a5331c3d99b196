"""Tests for memory and link bookkeeping."""

import pytest

from kvsim.ledger import KVRole, LinkLedger, MemoryLedger, SimulationError, TrafficCategory


@pytest.fixture
def ledger():
    return MemoryLedger(instance_id=0, capacity_tokens=1000)


def test_allocate_up_to_capacity(ledger):
    """Test that allocation succeeds exactly up to capacity and fails beyond it."""
    assert ledger.allocate_kv(1, 600, KVRole.PRIMARY) is not None
    assert ledger.allocate_kv(2, 400, KVRole.REDUNDANT) is not None
    assert ledger.free_tokens == 0
    assert ledger.allocate_kv(3, 1, KVRole.PRIMARY) is None
    assert 3 not in ledger
    assert ledger.used_tokens == 1000


def test_allocate_twice_is_an_error(ledger):
    """Test that a request cannot hold two copies on one instance."""
    ledger.allocate_kv(1, 10, KVRole.PRIMARY)
    with pytest.raises(SimulationError):
        ledger.allocate_kv(1, 10, KVRole.REDUNDANT)


def test_grow_uses_reservation_then_capacity(ledger):
    """Test that growth consumes free tokens and fails when none are left."""
    ledger.allocate_kv(1, 998, KVRole.PRIMARY, present=998)
    assert ledger.grow_kv(1)
    assert ledger.grow_kv(1)
    assert not ledger.grow_kv(1)
    entry = ledger.entry(1)
    assert entry.tokens_present == 1000
    assert entry.allocated == 1000
    assert ledger.used_tokens == 1000


def test_grow_within_reservation(ledger):
    """Test that growing into already reserved space does not charge again."""
    ledger.allocate_kv(1, 100, KVRole.PRIMARY, present=50)
    assert ledger.grow_kv(1, 10)
    assert ledger.used_tokens == 100
    assert ledger.entry(1).tokens_present == 60


def test_reserve(ledger):
    """Test reserving extra tokens for an entry."""
    ledger.allocate_kv(1, 100, KVRole.REDUNDANT, present=100)
    assert ledger.reserve(1, 50)
    assert ledger.used_tokens == 100
    assert ledger.reserve(1, 1000)
    assert ledger.free_tokens == 0
    assert not ledger.reserve(1, 1001)


def test_evict_redundant(ledger):
    """Test eviction frees redundant copies only."""
    ledger.allocate_kv(1, 100, KVRole.PRIMARY, present=100)
    ledger.allocate_kv(2, 200, KVRole.REDUNDANT, present=200)
    ledger.allocate_kv(3, 300, KVRole.REDUNDANT, incoming=True)

    assert ledger.evict_redundant(2) == 200
    assert 2 not in ledger
    assert ledger.evict_redundant(3) == 0
    assert 3 in ledger
    with pytest.raises(SimulationError):
        ledger.evict_redundant(1)
    assert ledger.used_tokens == 400


def test_release_and_peak(ledger):
    """Test release returns the allocation and peak usage is remembered."""
    ledger.allocate_kv(1, 700, KVRole.PRIMARY)
    assert ledger.release(1) == 700
    assert ledger.release(1) == 0
    assert ledger.used_tokens == 0
    assert ledger.peak_tokens == 700


def test_operations_on_missing_entry(ledger):
    """Test that growing an absent request is a bookkeeping error."""
    with pytest.raises(SimulationError):
        ledger.grow_kv(42)


def test_redundant_entries(ledger):
    """Test listing of redundant copies."""
    ledger.allocate_kv(1, 10, KVRole.PRIMARY)
    ledger.allocate_kv(2, 10, KVRole.REDUNDANT)
    assert [e.request_id for e in ledger.redundant_entries()] == [2]


def test_link_fifo_queueing():
    """Test that transfers on one link queue behind each other."""
    links = LinkLedger(lambda src, nbytes: nbytes / 1000.0)
    first = links.enqueue(0, 1, 1000, TrafficCategory.PREFILL_TRANSFER, now=0.0)
    second = links.enqueue(0, 1, 500, TrafficCategory.MIRROR, now=0.5)
    other = links.enqueue(1, 0, 500, TrafficCategory.MIRROR, now=0.5)

    assert first.finish_time == pytest.approx(1.0)
    assert second.finish_time == pytest.approx(1.5)
    assert other.finish_time == pytest.approx(1.0)
    assert links.busy_until(0, 1) == pytest.approx(1.5)
    assert links.busy_until(2, 3) == 0.0


def test_link_accounting():
    """Test per-category totals and per-second mirror buckets."""
    links = LinkLedger(lambda src, nbytes: 0.0)
    links.enqueue(0, 1, 100, TrafficCategory.MIRROR, now=0.2)
    links.enqueue(0, 1, 50, TrafficCategory.MIRROR, now=0.9)
    links.enqueue(0, 1, 70, TrafficCategory.MIRROR, now=1.1)
    links.enqueue(1, 0, 1000, TrafficCategory.LEVELING, now=1.1)

    assert links.bytes_by_category == {"prefill_transfer": 0, "mirror": 220, "leveling": 1000}
    assert links.total_bytes == 1220
    assert links.mirror_series() == [(0, 1, 0, 150), (0, 1, 1, 70)]


def test_link_rejects_self_transfer():
    """Test that an instance cannot send to itself."""
    links = LinkLedger(lambda src, nbytes: 0.0)
    with pytest.raises(SimulationError):
        links.enqueue(2, 2, 10, TrafficCategory.MIRROR, now=0.0)
