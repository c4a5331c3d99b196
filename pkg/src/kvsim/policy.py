"""Scheduling policies and the decision vocabulary they use to drive the engine.

Policies never mutate simulation state. They read the cluster through a
`ClusterView` (which hides every request's decode length) and return decisions
that the engine validates and applies.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Collection, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from kvsim.logger import get_logger

if TYPE_CHECKING:
    from kvsim.config import PolicyConfig
    from kvsim.engine import ClusterView

logger = get_logger(__name__)


class InstanceRole(str, Enum):
    """What an instance is currently dedicated to."""

    PREFILL = "prefill"
    DECODE = "decode"
    IDLE = "idle"


class RequestState(str, Enum):
    """Request lifecycle; transitions only move forward."""

    QUEUED = "queued"
    PREFILLING = "prefilling"
    DECODING = "decoding"
    COMPLETE = "complete"


@dataclass(frozen=True)
class RequestView:
    """What a policy may know about a request. There is deliberately no decode length."""

    id: int
    arrival_time: float
    prompt_len: int
    context_len: int
    tokens_emitted: int
    state: RequestState
    primary: Optional[int]
    batch_instance: Optional[int]
    queued_on: Optional[int]
    in_transit: bool


@dataclass(frozen=True)
class AssignPrefill:
    """Queue waiting requests for prefill on an instance, moving them if queued elsewhere."""

    instance: int
    request_ids: Tuple[int, ...]


@dataclass(frozen=True)
class SetRole:
    instance: int
    role: InstanceRole


@dataclass(frozen=True)
class AddToBatch:
    """Let a request whose primary KV lives on the instance join its decode batch."""

    instance: int
    request_id: int


@dataclass(frozen=True)
class RebalanceMove:
    """Swap primary/redundant labels so the request decodes on `dst`. Moves no bytes."""

    request_id: int
    src: int
    dst: int


@dataclass(frozen=True)
class CreateRedundant:
    """Copy a request's KV to another instance in the background."""

    request_id: int
    instance: int


@dataclass(frozen=True)
class EvictRedundant:
    request_id: int
    instance: int


Decision = Union[AssignPrefill, SetRole, AddToBatch, RebalanceMove, CreateRedundant, EvictRedundant]


class Policy:
    """
    Callback interface invoked by the engine at decision points.

    Every callback returns a (possibly empty) list of decisions. The defaults do
    nothing except where noted.
    """

    name = "policy"
    cobatch_prefill = False
    timer_period_s: Optional[float] = None

    def validate_cluster(self, num_instances: int) -> None:
        """Raise ValueError if the policy cannot run on this many instances."""
        if num_instances < 1:
            raise ValueError("cluster must contain at least one instance")

    def on_start(self, view: "ClusterView") -> List[Decision]:
        return []

    def on_arrival(self, view: "ClusterView", request_ids: Sequence[int]) -> List[Decision]:
        raise NotImplementedError

    def select_destination(self, view: "ClusterView", src: int, request_id: int) -> Optional[int]:
        """Instance that will decode a request prefilled on `src`; None keeps it local."""
        return None

    def retain_prefill_copy(
        self, view: "ClusterView", src: int, dst: int, request_id: int
    ) -> bool:
        """Whether the prefill instance keeps its KV as a redundant copy after transfer."""
        return False

    def on_prefill_complete(
        self, view: "ClusterView", instance_id: int, request_ids: Sequence[int]
    ) -> List[Decision]:
        """Default: requests that stay on the prefill instance join its batch."""
        decisions: List[Decision] = []
        for rid in request_ids:
            req = view.request(rid)
            if (
                req.state is RequestState.DECODING
                and req.primary == instance_id
                and not req.in_transit
                and req.batch_instance is None
            ):
                decisions.append(AddToBatch(instance_id, rid))
        return decisions

    def on_step_boundary(self, view: "ClusterView", instance_id: int) -> List[Decision]:
        return []

    def on_request_complete(self, view: "ClusterView", request_id: int) -> List[Decision]:
        return []

    def on_idle(self, view: "ClusterView", instance_id: int) -> List[Decision]:
        return []

    def on_timer(self, view: "ClusterView") -> List[Decision]:
        return []

    def on_memory_pressure(
        self, view: "ClusterView", instance_id: int, tokens_needed: int
    ) -> List[Decision]:
        """Default: evict redundant copies on the instance, largest first."""
        decisions: List[Decision] = []
        freed = 0
        copies = sorted(view.redundant_copies(instance_id), key=lambda c: (-c[1], c[0]))
        for rid, tokens in copies:
            if freed >= tokens_needed:
                break
            decisions.append(EvictRedundant(rid, instance_id))
            freed += tokens
        return decisions

    def synchronized_peers(self, view: "ClusterView", instance_id: int) -> Sequence[int]:
        """Instances whose decode steps this instance's decode steps line up with."""
        return ()

    def on_preempted(self, view: "ClusterView", request_id: int) -> List[Decision]:
        """Default: route the preempted request like a fresh arrival."""
        return self.on_arrival(view, [request_id])

    def stats(self) -> Dict[str, float]:
        return {}


def rebalance_pair(
    a: int,
    a_load: Mapping[int, int],
    b: int,
    b_load: Mapping[int, int],
    movable: Collection[int],
    max_moves: int = 8,
    token_tolerance: int = 0,
) -> List[RebalanceMove]:
    """
    Balance two decode batches using zero-cost moves.

    First equalizes batch counts to within one, each time moving the request that
    leaves the smallest token difference. Then applies single moves and swaps that
    strictly shrink the token difference (largest improvement first, longer requests
    on ties) while the difference exceeds `token_tolerance`. Neither objective ever
    gets worse. Each request moves at most once.

    Args:
        a: First instance id
        a_load: KV tokens of each request decoding on `a`
        b: Second instance id
        b_load: KV tokens of each request decoding on `b`
        movable: Requests that may change sides
        max_moves: Cap on moves made while balancing tokens
        token_tolerance: Token difference considered balanced

    Returns:
        Moves in application order
    """
    tokens: Dict[int, int] = {**a_load, **b_load}
    side: Dict[int, int] = {rid: a for rid in a_load}
    side.update({rid: b for rid in b_load})
    count = {a: len(a_load), b: len(b_load)}
    total = {a: sum(a_load.values()), b: sum(b_load.values())}
    free = {rid for rid in movable if rid in side}
    moves: List[RebalanceMove] = []

    def other(inst: int) -> int:
        return b if inst == a else a

    def move(rid: int) -> None:
        src = side[rid]
        dst = other(src)
        side[rid] = dst
        count[src] -= 1
        count[dst] += 1
        total[src] -= tokens[rid]
        total[dst] += tokens[rid]
        free.discard(rid)
        moves.append(RebalanceMove(rid, src, dst))

    while abs(count[a] - count[b]) > 1:
        big = a if count[a] > count[b] else b
        small = other(big)
        candidates = [rid for rid in free if side[rid] == big]
        if not candidates:
            break
        best = min(
            candidates,
            key=lambda r: (
                abs((total[big] - tokens[r]) - (total[small] + tokens[r])),
                -tokens[r],
                r,
            ),
        )
        move(best)

    budget = max_moves
    while budget > 0:
        gap = abs(total[a] - total[b])
        if gap <= token_tolerance:
            break
        heavy = a if total[a] > total[b] else b
        light = other(heavy)
        count_gap = abs(count[a] - count[b])

        best_key: Optional[Tuple[int, int, int, int]] = None
        best_plan: Tuple[int, ...] = ()

        if abs((count[heavy] - 1) - (count[light] + 1)) <= count_gap:
            for rid in free:
                if side[rid] != heavy:
                    continue
                new_gap = abs(gap - 2 * tokens[rid])
                if new_gap < gap:
                    key = (new_gap, 0, -tokens[rid], rid)
                    if best_key is None or key < best_key:
                        best_key, best_plan = key, (rid,)

        if budget >= 2:
            light_side = sorted((tokens[q], q) for q in free if side[q] == light)
            for rid in free:
                if side[rid] != heavy:
                    continue
                # best partner q has tokens close to tokens[rid] - gap / 2
                want = tokens[rid] - gap / 2.0
                lo, hi = 0, len(light_side)
                while lo < hi:
                    mid = (lo + hi) // 2
                    if light_side[mid][0] < want:
                        lo = mid + 1
                    else:
                        hi = mid
                for idx in (lo - 1, lo):
                    if 0 <= idx < len(light_side):
                        q_tokens, q = light_side[idx]
                        delta = tokens[rid] - q_tokens
                        if delta <= 0:
                            continue
                        new_gap = abs(gap - 2 * delta)
                        if new_gap < gap:
                            key = (new_gap, 1, -tokens[rid], rid)
                            if best_key is None or key < best_key:
                                best_key, best_plan = key, (rid, q)

        if best_key is None:
            break
        for rid in best_plan:
            move(rid)
        budget -= len(best_plan)

    return moves


def _pair_partner(instance_id: int) -> int:
    return instance_id ^ 1


@dataclass
class _GroupState:
    """Degraded-mode bookkeeping for one group of four instances."""

    members: Tuple[int, ...]
    degraded: bool = False
    dual: Optional[int] = None
    low_ticks: int = 0
    high_ticks: int = 0
    entries: int = 0
    degraded_time_s: float = 0.0


class AccellmPolicy(Policy):
    """
    Paired dynamic instances with redundant KV caches.

    Instances (2i, 2i+1) form a pair. Either member can prefill or decode, never
    both at once. A prefill member streams the new KV to its partner, which decodes
    the request, and keeps its own copy as a redundant one. Decode work moves
    between holders of fresh copies by relabeling primary and redundant copies, so
    batches can be evened out and a member can hand its batch to the partner before
    prefilling.
    """

    name = "accellm"
    cobatch_prefill = False

    def __init__(self, config: "PolicyConfig"):
        self.config = config
        self.redundancy = config.redundancy
        self.synchronized_pairs = config.synchronized_pairs
        self.max_moves = config.max_rebalance_moves
        self.token_tolerance_fraction = 0.05
        self.timer_period_s = (
            config.timer_period_s if (config.degraded_mode or config.leveling) else None
        )
        self._groups: List[_GroupState] = []
        self._group_of: Dict[int, _GroupState] = {}
        self.leveling_copies = 0

    def validate_cluster(self, num_instances: int) -> None:
        super().validate_cluster(num_instances)
        if num_instances % 2:
            raise ValueError("even instance count required")

    def on_start(self, view: "ClusterView") -> List[Decision]:
        n = view.num_instances
        self.validate_cluster(n)
        self._groups = [
            _GroupState(members=tuple(range(g * 4, g * 4 + 4))) for g in range(n // 4)
        ]
        self._group_of = {m: g for g in self._groups for m in g.members}
        return [SetRole(i, InstanceRole.DECODE) for i in range(n)]

    # -- helpers -----------------------------------------------------------

    def _degraded_group(self, instance_id: int) -> Optional[_GroupState]:
        group = self._group_of.get(instance_id)
        if group is not None and group.degraded:
            return group
        return None

    def _is_decode_only(self, instance_id: int) -> bool:
        group = self._degraded_group(instance_id)
        return group is not None and group.dual != instance_id

    def _prefill_candidates(self, pair: int) -> List[int]:
        members = [2 * pair, 2 * pair + 1]
        group = self._degraded_group(members[0])
        if group is not None:
            return [m for m in members if m == group.dual]
        return members

    def _choose_prefill_instance(
        self, view: "ClusterView", pending: Dict[int, int]
    ) -> Optional[int]:
        best_pair_key = None
        best_members: List[int] = []
        for pair in range(view.num_instances // 2):
            members = self._prefill_candidates(pair)
            if not members:
                continue
            a, b = 2 * pair, 2 * pair + 1
            # free KV net of prompts already queued on the pair
            room = view.free_tokens(a) + view.free_tokens(b) - pending[a] - pending[b]
            key = (-room, pair)
            if best_pair_key is None or key < best_pair_key:
                best_pair_key, best_members = key, members
        if not best_members:
            return None
        return min(best_members, key=lambda m: (view.decode_tokens(m), pending[m], m))

    def _handoff(self, view: "ClusterView", member: int) -> List[Decision]:
        """Move the member's decode work to instances holding fresh copies.

        Holders whose current step ends now come first: requests moved there join
        the next step without waiting out one already running.
        """
        decisions: List[Decision] = []
        partner = _pair_partner(member)
        for rid in view.batch(member):
            holders = view.fresh_holders(rid)
            if not holders:
                continue
            targets = sorted(
                (
                    h
                    for h in holders
                    if view.role(h) is not InstanceRole.PREFILL or not view.queue(h)
                ),
                key=lambda h: (view.busy_until(h) > view.now, h != partner, h),
            )
            if targets and view.can_move(rid, member, targets[0]):
                decisions.append(RebalanceMove(rid, member, targets[0]))
        return decisions

    def _rebalance_with(self, view: "ClusterView", me: int, other: int) -> List[Decision]:
        a_load = {rid: view.kv_tokens(rid) for rid in view.batch(me)}
        b_load = {rid: view.kv_tokens(rid) for rid in view.batch(other)}
        # only move onto an instance whose step ends now
        movable: List[int] = []
        if view.busy_until(other) <= view.now:
            movable += [rid for rid in a_load if view.can_move(rid, me, other)]
        if view.busy_until(me) <= view.now:
            movable += [rid for rid in b_load if view.can_move(rid, other, me)]
        if not movable:
            return []
        pair_tokens = sum(a_load.values()) + sum(b_load.values())
        tolerance = int(self.token_tolerance_fraction * pair_tokens)
        return list(
            rebalance_pair(me, a_load, other, b_load, movable, self.max_moves, tolerance)
        )

    def _cross_holders(self, view: "ClusterView", me: int) -> List[int]:
        partner = _pair_partner(me)
        found = set()
        for rid in view.batch(me):
            found.update(view.fresh_holders(rid))
        for rid, _tokens in view.redundant_copies(me):
            req = view.request(rid)
            if req.primary is not None and view.is_fresh_copy(rid, me):
                found.add(req.primary)
        found.discard(me)
        found.discard(partner)
        return sorted(found)

    def _balance(self, view: "ClusterView", me: int) -> List[Decision]:
        partner = _pair_partner(me)
        if view.role(partner) is InstanceRole.PREFILL and view.queue(partner):
            pulled = self._handoff(view, partner)
            if pulled:
                return pulled
        elif view.role(partner) is not InstanceRole.PREFILL:
            moves = self._rebalance_with(view, me, partner)
            if moves:
                return moves
        for other in self._cross_holders(view, me):
            if view.role(other) is InstanceRole.PREFILL:
                continue
            moves = self._rebalance_with(view, me, other)
            if moves:
                return moves
        return []

    # -- callbacks ---------------------------------------------------------

    def on_arrival(self, view: "ClusterView", request_ids: Sequence[int]) -> List[Decision]:
        pending = {i: view.pending_prefill_tokens(i) for i in range(view.num_instances)}
        assigned: Dict[int, List[int]] = {}
        for rid in request_ids:
            member = self._choose_prefill_instance(view, pending)
            if member is None:
                continue
            pending[member] += view.request(rid).context_len
            assigned.setdefault(member, []).append(rid)

        decisions: List[Decision] = []
        for member, ids in assigned.items():
            decisions.append(AssignPrefill(member, tuple(ids)))
            decisions.append(SetRole(member, InstanceRole.PREFILL))
            if not view.is_busy(member):
                decisions.extend(self._handoff(view, member))
        return decisions

    def select_destination(self, view: "ClusterView", src: int, request_id: int) -> Optional[int]:
        length = view.request(request_id).context_len
        group = self._degraded_group(src)
        if group is not None and group.dual == src:
            targets = [m for m in group.members if m != src]
            best = max(targets, key=lambda m: (view.free_tokens(m), -m))
            return best if view.free_tokens(best) >= length else None
        partner = _pair_partner(src)
        room = view.free_tokens(partner) + sum(t for _r, t in view.redundant_copies(partner))
        return partner if room >= length else None

    def retain_prefill_copy(
        self, view: "ClusterView", src: int, dst: int, request_id: int
    ) -> bool:
        return self.redundancy

    def synchronized_peers(self, view: "ClusterView", instance_id: int) -> Sequence[int]:
        # a decoding member steps together with its partner
        partner = _pair_partner(instance_id)
        if not self.synchronized_pairs or partner >= view.num_instances:
            return ()
        if view.role(instance_id) is not InstanceRole.DECODE:
            return ()
        return (partner,)

    def on_prefill_complete(
        self, view: "ClusterView", instance_id: int, request_ids: Sequence[int]
    ) -> List[Decision]:
        decisions = super().on_prefill_complete(view, instance_id, request_ids)
        if not view.queue(instance_id):
            decisions.append(SetRole(instance_id, InstanceRole.DECODE))
        return decisions

    def on_step_boundary(self, view: "ClusterView", instance_id: int) -> List[Decision]:
        if view.role(instance_id) is InstanceRole.PREFILL:
            if view.queue(instance_id):
                return self._handoff(view, instance_id)
            return [SetRole(instance_id, InstanceRole.DECODE)] + self._balance(view, instance_id)
        return self._balance(view, instance_id)

    def on_idle(self, view: "ClusterView", instance_id: int) -> List[Decision]:
        decisions: List[Decision] = []
        if view.role(instance_id) is InstanceRole.PREFILL and not view.queue(instance_id):
            decisions.append(SetRole(instance_id, InstanceRole.DECODE))
        moves = self._balance(view, instance_id)
        if moves:
            return decisions + moves
        if view.batch(instance_id) or view.queue(instance_id):
            return decisions
        if not self.config.steal_prefill or self._is_decode_only(instance_id):
            return decisions
        free = view.free_tokens(instance_id)
        for rid in view.waiting_requests():
            req = view.request(rid)
            owner = req.queued_on
            if owner == instance_id or req.context_len > free:
                continue
            if owner is None or view.is_busy(owner):
                decisions.append(AssignPrefill(instance_id, (rid,)))
                decisions.append(SetRole(instance_id, InstanceRole.PREFILL))
                break
        return decisions

    def on_timer(self, view: "ClusterView") -> List[Decision]:
        decisions: List[Decision] = []
        if self.config.degraded_mode:
            for group in self._groups:
                decisions.extend(self._degraded_tick(view, group))
        if self.config.leveling:
            decisions.extend(self._level_pairs(view))
        return decisions

    # -- degraded mode -----------------------------------------------------

    def _redundancy_fraction(self, view: "ClusterView", group: _GroupState) -> float:
        live = [rid for m in group.members for rid in view.primaries(m)]
        if not live:
            return 1.0
        covered = sum(1 for rid in live if view.fresh_holders(rid))
        return covered / len(live)

    def _free_fraction(self, view: "ClusterView", group: _GroupState) -> float:
        capacity = sum(view.capacity_tokens(m) for m in group.members)
        if capacity <= 0:
            return 0.0
        return sum(view.free_tokens(m) for m in group.members) / capacity

    def _degraded_tick(self, view: "ClusterView", group: _GroupState) -> List[Decision]:
        cfg = self.config
        if not group.degraded:
            if self._redundancy_fraction(view, group) < cfg.degraded_trigger_fraction:
                group.low_ticks += 1
            else:
                group.low_ticks = 0
            if group.low_ticks >= cfg.degraded_ticks:
                return self._enter_degraded(view, group)
            return []

        group.degraded_time_s += self.timer_period_s or 0.0
        if self._free_fraction(view, group) >= cfg.degraded_exit_free_fraction:
            group.high_ticks += 1
        else:
            group.high_ticks = 0
        if group.high_ticks >= cfg.degraded_ticks:
            logger.info(f"Group {group.members} leaves degraded mode at t={view.now:.3f}s")
            group.degraded = False
            group.dual = None
            group.low_ticks = group.high_ticks = 0
            return []
        return self._trim_dual_copies(view, group)

    def _enter_degraded(self, view: "ClusterView", group: _GroupState) -> List[Decision]:
        dual = min(group.members, key=lambda m: (view.decode_tokens(m), m))
        group.degraded = True
        group.dual = dual
        group.entries += 1
        group.low_ticks = group.high_ticks = 0
        logger.info(
            f"Group {group.members} enters degraded mode at t={view.now:.3f}s "
            f"with dual-phase instance {dual}"
        )
        decisions: List[Decision] = []
        moved: List[int] = []
        for m in group.members:
            if m == dual:
                continue
            decisions.append(SetRole(m, InstanceRole.DECODE))
            moved.extend(view.queue(m))
        if moved:
            decisions.append(AssignPrefill(dual, tuple(moved)))
            decisions.append(SetRole(dual, InstanceRole.PREFILL))
        return decisions

    def _trim_dual_copies(self, view: "ClusterView", group: _GroupState) -> List[Decision]:
        dual = group.dual
        if dual is None:
            return []
        held = {rid for rid, _t in view.redundant_copies(dual)}
        decisions: List[Decision] = []
        for m in group.members:
            if m == dual:
                continue
            primaries = view.primaries(m)
            keep = math.ceil(len(primaries) * self.config.dual_retain_fraction)
            copies = [rid for rid in primaries if rid in held]
            copies.sort(key=lambda r: (-view.request(r).arrival_time, -r))
            decisions.extend(EvictRedundant(rid, dual) for rid in copies[keep:])
        return decisions

    # -- inter-pair leveling -----------------------------------------------

    def _level_pairs(self, view: "ClusterView") -> List[Decision]:
        pairs = [
            p
            for p in range(view.num_instances // 2)
            if self._degraded_group(2 * p) is None
        ]
        if len(pairs) < 2:
            return []
        load = {p: view.decode_tokens(2 * p) + view.decode_tokens(2 * p + 1) for p in pairs}
        mean = sum(load.values()) / len(load)
        if mean <= 0:
            return []
        heavy = min(pairs, key=lambda p: (-load[p], p))
        light = min(pairs, key=lambda p: (load[p], p))
        spread = load[heavy] - load[light]
        if spread <= self.config.leveling_imbalance_threshold * mean:
            return []

        target = max((2 * light, 2 * light + 1), key=lambda m: (view.free_tokens(m), -m))
        room = view.free_tokens(target)
        wanted = spread / 2.0
        kvb = view.kv_bytes_per_token
        budgets: Dict[int, float] = {}
        decisions: List[Decision] = []
        candidates = []
        for src in (2 * heavy, 2 * heavy + 1):
            for rid in view.batch(src):
                if target in view.holders(rid) or view.request(rid).in_transit:
                    continue
                candidates.append((view.kv_tokens(rid), rid, src))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        for tokens, rid, src in candidates:
            if wanted <= 0:
                break
            if src not in budgets:
                if view.link_busy_until(src, target) > view.now:
                    budgets[src] = 0.0
                else:
                    budgets[src] = (
                        self.config.leveling_budget_fraction
                        * view.link_capacity(src)
                        * (self.timer_period_s or 1.0)
                    )
            nbytes = tokens * kvb
            if tokens > wanted or tokens > room or nbytes > budgets[src]:
                continue
            budgets[src] -= nbytes
            room -= tokens
            wanted -= tokens
            decisions.append(CreateRedundant(rid, target))
        self.leveling_copies += len(decisions)
        return decisions

    def stats(self) -> Dict[str, float]:
        return {
            "degraded_entries": float(sum(g.entries for g in self._groups)),
            "degraded_time_s": sum(g.degraded_time_s for g in self._groups),
            "leveling_copies": float(self.leveling_copies),
        }


def default_num_prefill(num_instances: int) -> int:
    """Prefill instance count for the disaggregated baseline: 1/2/4 for 4/8/16 instances."""
    table = {4: 1, 8: 2, 16: 4}
    return table.get(num_instances, max(1, num_instances // 4))


class SplitwiseStaticPolicy(Policy):
    """
    Fixed disaggregation: instances 0..k-1 prefill, the rest decode.

    Prompts queue FCFS on the prefill instances; finished prefills ship their full
    KV to the decode instance with the most free tokens. No redundancy and no role
    changes. With `high_load_cobatch`, prompts that arrive while every prefill
    instance is backed up past the threshold are co-batched onto a decode instance.
    """

    name = "splitwise_static"

    def __init__(
        self,
        num_prefill_instances: Optional[int] = None,
        high_load_cobatch: bool = False,
        overflow_threshold_tokens: int = 16384,
        steal_prefill: bool = True,
    ):
        self.num_prefill_instances = num_prefill_instances
        self.high_load_cobatch = high_load_cobatch
        self.cobatch_prefill = high_load_cobatch
        self.overflow_threshold_tokens = overflow_threshold_tokens
        self.steal_prefill = steal_prefill
        self._prefill_ids: List[int] = []
        self._decode_ids: List[int] = []
        self.overflow_count = 0

    def _k(self, num_instances: int) -> int:
        return self.num_prefill_instances or default_num_prefill(num_instances)

    def validate_cluster(self, num_instances: int) -> None:
        super().validate_cluster(num_instances)
        if num_instances < 2:
            raise ValueError("splitwise_static needs at least 2 instances")
        if self._k(num_instances) >= num_instances:
            raise ValueError("splitwise requires fewer prefill instances than instances")

    def on_start(self, view: "ClusterView") -> List[Decision]:
        n = view.num_instances
        self.validate_cluster(n)
        k = self._k(n)
        self._prefill_ids = list(range(k))
        self._decode_ids = list(range(k, n))
        return [SetRole(i, InstanceRole.PREFILL) for i in self._prefill_ids] + [
            SetRole(i, InstanceRole.DECODE) for i in self._decode_ids
        ]

    @property
    def prefill_instances(self) -> List[int]:
        return list(self._prefill_ids)

    def on_arrival(self, view: "ClusterView", request_ids: Sequence[int]) -> List[Decision]:
        pending = {i: view.pending_prefill_tokens(i) for i in range(view.num_instances)}
        headroom = {i: view.free_tokens(i) - pending[i] for i in self._decode_ids}
        assigned: Dict[int, List[int]] = {}
        for rid in request_ids:
            length = view.request(rid).context_len
            target = min(self._prefill_ids, key=lambda i: (pending[i], i))
            if self.high_load_cobatch and all(
                pending[i] > self.overflow_threshold_tokens for i in self._prefill_ids
            ):
                target = max(self._decode_ids, key=lambda i: (headroom[i], -i))
                headroom[target] -= length
                self.overflow_count += 1
            pending[target] += length
            assigned.setdefault(target, []).append(rid)
        return [AssignPrefill(i, tuple(ids)) for i, ids in assigned.items()]

    def select_destination(self, view: "ClusterView", src: int, request_id: int) -> Optional[int]:
        if src not in self._prefill_ids:
            return None
        return max(self._decode_ids, key=lambda i: (view.free_tokens(i), -i))

    def on_idle(self, view: "ClusterView", instance_id: int) -> List[Decision]:
        if not self.steal_prefill or instance_id not in self._prefill_ids:
            return []
        if view.queue(instance_id):
            return []
        for rid in view.waiting_requests():
            owner = view.request(rid).queued_on
            if owner is None or (
                owner != instance_id and owner in self._prefill_ids and view.is_busy(owner)
            ):
                return [AssignPrefill(instance_id, (rid,))]
        return []

    def stats(self) -> Dict[str, float]:
        return {"overflow_prefills": float(self.overflow_count)}


class UnifiedPolicy(Policy):
    """
    Independent instances that co-batch new prefills into their next decode step.

    Arrivals go to the instance with the most free tokens net of prompts already
    waiting there. No KV ever crosses a link.
    """

    name = "unified"
    cobatch_prefill = True

    def on_arrival(self, view: "ClusterView", request_ids: Sequence[int]) -> List[Decision]:
        headroom = {
            i: view.free_tokens(i) - view.pending_prefill_tokens(i)
            for i in range(view.num_instances)
        }
        assigned: Dict[int, List[int]] = {}
        for rid in request_ids:
            target = max(headroom, key=lambda i: (headroom[i], -i))
            headroom[target] -= view.request(rid).context_len
            assigned.setdefault(target, []).append(rid)
        return [AssignPrefill(i, tuple(ids)) for i, ids in assigned.items()]


def accellm_policy(config: "PolicyConfig") -> AccellmPolicy:
    return AccellmPolicy(config)


def splitwise_static_policy(
    num_prefill_instances: Optional[int] = None,
    high_load_cobatch: bool = False,
    overflow_threshold_tokens: int = 16384,
) -> SplitwiseStaticPolicy:
    return SplitwiseStaticPolicy(
        num_prefill_instances=num_prefill_instances,
        high_load_cobatch=high_load_cobatch,
        overflow_threshold_tokens=overflow_threshold_tokens,
    )


def unified_policy() -> UnifiedPolicy:
    return UnifiedPolicy()


def create_policy(config: "PolicyConfig") -> Policy:
    """Build the policy a config names."""
    if config.name == "accellm":
        return accellm_policy(config)
    if config.name == "splitwise_static":
        policy = splitwise_static_policy(
            num_prefill_instances=config.num_prefill_instances,
            high_load_cobatch=config.high_load_cobatch,
            overflow_threshold_tokens=config.overflow_threshold_tokens,
        )
        policy.steal_prefill = config.steal_prefill
        return policy
    if config.name == "unified":
        return unified_policy()
    raise ValueError(f"Unknown policy: {config.name}")
