"""
Continuous batching over discrete iterations.

Every iteration forms one token-batch by fetching from three queues in order: decoding requests
(one token each), distinct prompts of requests whose group prefix is already computed, and
common prefixes of the next groups. Under the `batchllm` policy a prefill chunk is admitted as long
as the reserved KV memory stays under `mem_threshold`, however many requests the batch already
holds. The `fcfs_cap` baselines schedule requests one by one in arrival order and additionally cap
the number of requests per batch; `fcfs_cap_lru` also reuses prompt blocks found in an LRU cache.

A request reserves its worst-case KV footprint (distinct prompt plus every decode token) when it
is admitted, so an admitted request always runs to completion and nothing is ever swapped out.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, NamedTuple

from prefixbatch.allocator import KVAllocator
from prefixbatch.constants import DEFAULT_BLOCK_SIZE, DEFAULT_CHUNK_SIZE, DEFAULT_REQUEST_CAP, DEFAULT_TOTAL_BLOCKS
from prefixbatch.errors import ConfigurationError, PrefixBatchError, ValidationError
from prefixbatch.logger import logger
from prefixbatch.lru_cache import LRUBlockCache, block_hashes
from prefixbatch.trace import IterationTrace, SimulationTrace
from prefixbatch.types import GroupMember, PrefixSharingGroup, Workload
from prefixbatch.utils import ceil_div, requests_digest

if TYPE_CHECKING:
    from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union


class Policy(str, Enum):
    BATCHLLM = 'batchllm'
    FCFS_CAP = 'fcfs_cap'
    FCFS_CAP_LRU = 'fcfs_cap_lru'


class Phase(str, Enum):
    WAITING = 'waiting'
    PREFIX_PENDING = 'prefill_prefix_pending'
    PREFILLING = 'prefilling'
    DECODING = 'decoding'
    DONE = 'done'


class EntryKind(str, Enum):
    PREFIX_CHUNK = 'prefix_chunk'
    DISTINCT_CHUNK = 'distinct_chunk'
    DECODE = 'decode'


class UnschedulableRequestError(PrefixBatchError):
    """Raised when a request cannot fit under the memory threshold even on its own."""

    def __init__(self, request_id: str, needed_blocks: int, threshold: int) -> None:
        self.request_id = request_id
        self.needed_blocks = needed_blocks
        self.threshold = threshold
        super().__init__(
            f'request {request_id!r} needs {needed_blocks} KV blocks but the memory threshold is {threshold}'
        )


class SchedulerStallError(AssertionError):
    """Raised when a simulation exceeds its iteration bound; always a scheduler bug."""

    pass


@dataclass(frozen=True)
class SchedulerConfig:
    """Knobs of the simulated engine.

    `mem_threshold` defaults to `total_blocks`. `lru_blocks` only matters for `fcfs_cap_lru`.
    `request_cap` binds the fcfs policies always and `batchllm` only when `memory_centric` is off;
    turning off both `memory_centric` and `reorder` disables grouped token batching while keeping
    prefix sharing.
    """

    total_blocks: int = DEFAULT_TOTAL_BLOCKS
    chunk_size: int = DEFAULT_CHUNK_SIZE
    block_size: int = DEFAULT_BLOCK_SIZE
    mem_threshold: Optional[int] = None
    policy: Policy = Policy.BATCHLLM
    request_cap: int = DEFAULT_REQUEST_CAP
    lru_blocks: int = 0
    reorder: bool = True
    memory_centric: bool = True
    max_new_groups_per_iteration: Optional[int] = None

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, 'policy', Policy(self.policy))
        except ValueError as error:
            raise ConfigurationError(f'unknown policy {self.policy!r}') from error
        if self.mem_threshold is None:
            object.__setattr__(self, 'mem_threshold', self.total_blocks)
        if self.total_blocks < 1 or self.block_size < 1:
            raise ConfigurationError('total_blocks and block_size must be positive')
        if self.chunk_size < 1:
            raise ConfigurationError(f'chunk_size must be >= 1, got {self.chunk_size}')
        if not 1 <= self.threshold <= self.total_blocks:
            raise ConfigurationError(f'mem_threshold must be in [1, {self.total_blocks}], got {self.mem_threshold}')
        if self.request_cap < 1:
            raise ConfigurationError(f'request_cap must be >= 1, got {self.request_cap}')
        if self.lru_blocks < 0:
            raise ConfigurationError(f'lru_blocks must be >= 0, got {self.lru_blocks}')
        if self.max_new_groups_per_iteration is not None and self.max_new_groups_per_iteration < 1:
            raise ConfigurationError('max_new_groups_per_iteration must be >= 1 when set')

    @property
    def threshold(self) -> int:
        return self.mem_threshold if self.mem_threshold is not None else self.total_blocks

    @property
    def capped(self) -> bool:
        return self.policy is not Policy.BATCHLLM or not self.memory_centric


class BatchEntry(NamedTuple):
    owner: str
    kind: EntryKind
    tokens: int


class Admission(NamedTuple):
    request_id: str
    reused_tokens: int


@dataclass(frozen=True)
class TokenBatch:
    """The tokens one iteration processes, plus the admissions decided while forming it."""

    iteration: int
    entries: Tuple[BatchEntry, ...]
    admitted_groups: Tuple[str, ...] = ()
    admissions: Tuple[Admission, ...] = ()

    @property
    def total_tokens(self) -> int:
        return sum(entry.tokens for entry in self.entries)

    @property
    def decode_tokens(self) -> int:
        return sum(entry.tokens for entry in self.entries if entry.kind is EntryKind.DECODE)

    @property
    def prefill_tokens(self) -> int:
        return self.total_tokens - self.decode_tokens

    @property
    def request_count(self) -> int:
        """Distinct requests in the batch; prefix chunks belong to groups, not requests."""
        return len({entry.owner for entry in self.entries if entry.kind is not EntryKind.PREFIX_CHUNK})


@dataclass(eq=False)
class RequestState:
    id: str
    group_id: str
    prefix_len: int
    prompt_len: int
    output_len: int
    own_blocks: int
    phase: Phase = Phase.WAITING
    prefill_done: int = 0
    decode_done: int = 0
    block_hashes: List[int] = field(default_factory=list)
    cache_refs: List[int] = field(default_factory=list)
    cached_blocks: int = 0

    @property
    def remaining_prefill(self) -> int:
        return self.prompt_len - self.prefill_done

    @property
    def own_tokens(self) -> int:
        return self.prefill_done - self.prefix_len + self.decode_done


@dataclass(eq=False)
class GroupState:
    group: PrefixSharingGroup
    prefix_blocks: int
    max_own_blocks: int
    prefix_done: int = 0
    next_member: int = 0
    finished: int = 0

    @property
    def id(self) -> str:
        return self.group.group_id

    @property
    def prefix_len(self) -> int:
        return self.group.prefix_len

    @property
    def members(self) -> Tuple[GroupMember, ...]:
        return self.group.members


def order_groups(groups: Iterable[PrefixSharingGroup]) -> List[PrefixSharingGroup]:
    """Put groups with the fewest prefill tokens (prefix once plus every suffix) first.

    Output lengths are taken as constant, so they play no part. The sort is stable.
    """
    return sorted(groups, key=lambda group: group.prefill_tokens)


def singleton_groups(workload: Workload) -> List[PrefixSharingGroup]:
    """Wrap every request into a prefix-less group, keeping arrival order."""
    return [
        PrefixSharingGroup(
            prefix=(),
            members=(GroupMember(request.id, request.tokens, request.output_len),),
            group_id=f'r{index}',
        )
        for index, request in enumerate(workload.requests)
    ]


def _unique_group_ids(groups: Sequence[PrefixSharingGroup]) -> List[PrefixSharingGroup]:
    ids = [group.group_id for group in groups]
    if all(ids) and len(set(ids)) == len(ids):
        return list(groups)
    return [PrefixSharingGroup(group.prefix, group.members, f'g{index}') for index, group in enumerate(groups)]


class SchedulerState:
    """Mutable state of one simulation: queues, per-request phases, KV memory and reservations."""

    def __init__(self, groups: Sequence[PrefixSharingGroup], config: SchedulerConfig) -> None:
        self.config = config
        groups = _unique_group_ids(groups)
        if config.policy is Policy.BATCHLLM and config.reorder:
            groups = order_groups(groups)
        self.groups: List[GroupState] = []
        self.requests: Dict[str, RequestState] = {}
        block_size = config.block_size
        for group in groups:
            states = []
            for member in group.members:
                if member.id in self.requests:
                    raise ValidationError(f'request {member.id!r} appears in more than one group')
                state = RequestState(
                    id=member.id,
                    group_id=group.group_id,
                    prefix_len=group.prefix_len,
                    prompt_len=group.prefix_len + len(member.suffix),
                    output_len=member.output_len,
                    own_blocks=ceil_div(len(member.suffix) + member.output_len, block_size),
                )
                if config.policy is Policy.FCFS_CAP_LRU:
                    state.block_hashes = block_hashes(group.prompt(member), block_size)
                self.requests[member.id] = state
                states.append(state)
            self.groups.append(
                GroupState(
                    group=group,
                    prefix_blocks=ceil_div(group.prefix_len, block_size),
                    max_own_blocks=max(state.own_blocks for state in states),
                )
            )
        self.group_by_id = {group.id: group for group in self.groups}
        self.allocator = KVAllocator(config.total_blocks)
        self.cache = LRUBlockCache(config.lru_blocks) if config.policy is Policy.FCFS_CAP_LRU else None
        self.committed_blocks = 0
        self.next_group = 0
        self.open_groups: List[GroupState] = []
        self.prefilling: Dict[str, RequestState] = {}
        self.decoding: Dict[str, RequestState] = {}
        self.iteration = 0
        self.done_count = 0
        self.rows: List[IterationTrace] = []
        self.last_batch: Optional[TokenBatch] = None
        self.n_logical_prefill_tokens = sum(group.logical_tokens for group in groups)
        self.n_processed_prefill_tokens = 0
        self.n_reused_prefill_tokens = 0
        self.workload_digest = requests_digest(request for group in groups for request in group.requests())

    @property
    def finished(self) -> bool:
        return self.done_count == len(self.requests)

    @property
    def active_requests(self) -> int:
        return len(self.prefilling) + len(self.decoding)


class _BatchBuilder:
    """Forms one token-batch without touching the scheduler state."""

    def __init__(self, state: SchedulerState, config: SchedulerConfig) -> None:
        self.state = state
        self.config = config
        self.budget = config.chunk_size
        self.cap = config.request_cap if config.capped else None
        self.entries: List[BatchEntry] = []
        self.requests_in_batch = 0
        self.committed = state.committed_blocks
        self.blocked = False
        self.admitted_groups: List[GroupState] = []
        self.admissions: List[Admission] = []
        self.next_member: Dict[str, int] = {}
        self.prefix_progress: Dict[str, int] = {}

    def _room(self) -> bool:
        return self.budget > 0 and (self.cap is None or self.requests_in_batch < self.cap)

    def _add(self, owner: str, kind: EntryKind, tokens: int) -> None:
        self.entries.append(BatchEntry(owner, kind, tokens))
        self.budget -= tokens
        if kind is not EntryKind.PREFIX_CHUNK:
            self.requests_in_batch += 1

    def fetch_decodes(self) -> None:
        for request in self.state.decoding.values():
            if not self._room():
                return
            self._add(request.id, EntryKind.DECODE, 1)

    def fetch_distinct(self) -> None:
        for request in self.state.prefilling.values():
            if not self._room():
                return
            self._add(request.id, EntryKind.DISTINCT_CHUNK, min(self.budget, request.remaining_prefill))
        for group in self.state.open_groups:
            # the prefix must have been completed by an earlier iteration
            if group.prefix_done < group.prefix_len:
                continue
            if not self._admit_members(group):
                return

    def fetch_prefixes(self) -> None:
        # prefixes of admitted groups are already reserved and need no memory check
        for group in self.state.open_groups:
            if group.prefix_done < group.prefix_len and not self._prefix_chunk(group):
                return
        if self.blocked:
            return
        limit = self.config.max_new_groups_per_iteration
        index = self.state.next_group
        while index < len(self.state.groups) and self._room():
            if limit is not None and len(self.admitted_groups) >= limit:
                return
            group = self.state.groups[index]
            if not self._admit_group(group):
                return
            index += 1
            proceed = self._prefix_chunk(group) if group.prefix_len else self._admit_members(group)
            if not proceed:
                return

    def _pending_groups(self) -> List[GroupState]:
        pending = [
            group
            for group in self.state.open_groups
            if self.next_member.get(group.id, group.next_member) < len(group.members)
        ]
        return pending + self.admitted_groups

    def _admit_group(self, group: GroupState) -> bool:
        threshold = self.config.threshold
        needed = group.prefix_blocks + group.max_own_blocks
        if needed > threshold:
            largest = max(group.members, key=lambda member: self.state.requests[member.id].own_blocks)
            raise UnschedulableRequestError(largest.id, needed, threshold)
        # Every group still waiting for member admissions keeps its prefix reserved; the waiting
        # prefixes plus the largest waiting member must fit on their own or the queue can deadlock.
        pending = self._pending_groups() + [group]
        waiting_prefixes = sum(item.prefix_blocks for item in pending)
        largest_member = max(item.max_own_blocks for item in pending)
        if (
            self.committed + group.prefix_blocks + group.max_own_blocks > threshold
            or waiting_prefixes + largest_member > threshold
        ):
            self.blocked = True
            logger.debug('Group %s waits for KV memory (%d blocks committed)', group.id, self.committed)
            return False
        self.committed += group.prefix_blocks
        self.admitted_groups.append(group)
        return True

    def _admit_members(self, group: GroupState) -> bool:
        """Admit members in order; False once the fetch has to stop."""
        index = self.next_member.get(group.id, group.next_member)
        try:
            while index < len(group.members):
                if not self._room():
                    return False
                member = group.members[index]
                request = self.state.requests[member.id]
                if self.committed + request.own_blocks > self.config.threshold:
                    self.blocked = True
                    logger.debug('Request %s waits for KV memory', request.id)
                    return False
                self.committed += request.own_blocks
                reused = self._cached_tokens(request)
                self.admissions.append(Admission(request.id, reused))
                remaining = len(member.suffix) - reused
                if remaining:
                    self._add(request.id, EntryKind.DISTINCT_CHUNK, min(self.budget, remaining))
                else:
                    # the finished prefix is the whole prompt
                    self._add(request.id, EntryKind.DECODE, 1)
                index += 1
            return True
        finally:
            self.next_member[group.id] = index

    def _cached_tokens(self, request: RequestState) -> int:
        if self.state.cache is None:
            return 0
        block_size = self.config.block_size
        # the final prompt block is always recomputed so at least one token is processed
        limit = (request.prompt_len - 1) // block_size
        return self.state.cache.peek(request.block_hashes, limit) * block_size

    def _prefix_chunk(self, group: GroupState) -> bool:
        """Schedule the next prefix chunk, ending on a block boundary unless it is the last one."""
        if self.budget <= 0:
            return False
        done = self.prefix_progress.get(group.id, group.prefix_done)
        remaining = group.prefix_len - done
        if remaining <= self.budget:
            tokens = remaining
        else:
            end = done + self.budget
            tokens = end - end % self.config.block_size - done
            if tokens <= 0:
                if self.entries:
                    return False
                tokens = self.budget
        self._add(group.id, EntryKind.PREFIX_CHUNK, tokens)
        self.prefix_progress[group.id] = done + tokens
        return self.budget > 0

    def build(self) -> TokenBatch:
        return TokenBatch(
            iteration=self.state.iteration,
            entries=tuple(self.entries),
            admitted_groups=tuple(group.id for group in self.admitted_groups),
            admissions=tuple(self.admissions),
        )


def form_token_batch(state: SchedulerState, config: SchedulerConfig) -> TokenBatch:
    """Decide what the next iteration processes; the state is not modified."""
    if state.finished:
        raise ValidationError('every request is done; there is nothing left to batch')
    builder = _BatchBuilder(state, config)
    builder.fetch_decodes()
    builder.fetch_distinct()
    builder.fetch_prefixes()
    return builder.build()


def _grow_request(state: SchedulerState, request: RequestState) -> None:
    blocks = ceil_div(request.own_tokens, state.config.block_size)
    state.allocator.grow(request.id, blocks)


def _cache_new_blocks(state: SchedulerState, request: RequestState) -> None:
    if state.cache is None:
        return
    full = min(request.prefill_done // state.config.block_size, len(request.block_hashes))
    for block_hash in request.block_hashes[request.cached_blocks : full]:
        if state.cache.insert(block_hash):
            request.cache_refs.append(block_hash)
    request.cached_blocks = max(request.cached_blocks, full)


def _apply_admissions(state: SchedulerState, batch: TokenBatch) -> None:
    for group_id in batch.admitted_groups:
        group = state.groups[state.next_group]
        if group.id != group_id:
            raise SchedulerStallError(f'group {group_id} admitted out of order')
        state.next_group += 1
        state.committed_blocks += group.prefix_blocks
        state.open_groups.append(group)
        if group.prefix_len:
            state.allocator.pin_shared(group.id, len(group.members))
        for member in group.members:
            state.requests[member.id].phase = Phase.PREFIX_PENDING
    for admission in batch.admissions:
        request = state.requests[admission.request_id]
        group = state.group_by_id[request.group_id]
        group.next_member += 1
        state.committed_blocks += request.own_blocks
        request.phase = Phase.PREFILLING
        request.prefill_done = request.prefix_len
        if state.cache is not None and admission.reused_tokens:
            matched = state.cache.match(request.block_hashes, admission.reused_tokens // state.config.block_size)
            request.cache_refs.extend(request.block_hashes[:matched])
            request.cached_blocks = matched
            request.prefill_done += admission.reused_tokens
            state.n_reused_prefill_tokens += admission.reused_tokens
            _grow_request(state, request)
        state.prefilling[request.id] = request


def _finish(state: SchedulerState, request: RequestState) -> None:
    request.phase = Phase.DONE
    del state.decoding[request.id]
    state.allocator.free(request.id)
    state.committed_blocks -= request.own_blocks
    if state.cache is not None:
        state.cache.release(request.cache_refs)
        request.cache_refs = []
    group = state.group_by_id[request.group_id]
    group.finished += 1
    if group.prefix_len:
        state.allocator.release_shared(group.id)
    if group.finished == len(group.members):
        state.committed_blocks -= group.prefix_blocks
    state.done_count += 1


def step(state: SchedulerState, config: SchedulerConfig) -> IterationTrace:
    """Run one iteration: form the batch, process it, move requests between phases, free memory."""
    batch = form_token_batch(state, config)
    _apply_admissions(state, batch)
    block_size = config.block_size
    finishing = []
    for entry in batch.entries:
        if entry.kind is EntryKind.PREFIX_CHUNK:
            group = state.group_by_id[entry.owner]
            group.prefix_done += entry.tokens
            state.allocator.grow_shared(group.id, ceil_div(group.prefix_done, block_size))
        elif entry.kind is EntryKind.DISTINCT_CHUNK:
            request = state.requests[entry.owner]
            request.prefill_done += entry.tokens
            _grow_request(state, request)
            _cache_new_blocks(state, request)
        else:
            request = state.requests[entry.owner]
            request.decode_done += 1
            _grow_request(state, request)
            if request.decode_done == request.output_len:
                finishing.append(request)
    state.n_processed_prefill_tokens += batch.prefill_tokens
    state.open_groups = [group for group in state.open_groups if group.next_member < len(group.members)]
    for request in [request for request in state.prefilling.values() if not request.remaining_prefill]:
        del state.prefilling[request.id]
        request.phase = Phase.DECODING
        state.decoding[request.id] = request
    for request in finishing:
        _finish(state, request)

    row = IterationTrace(
        iteration=state.iteration,
        total_tokens=batch.total_tokens,
        decode_tokens=batch.decode_tokens,
        prefill_tokens=batch.prefill_tokens,
        blocks_used=state.allocator.used_blocks,
        active_requests=state.active_requests,
    )
    state.rows.append(row)
    state.last_batch = batch
    state.iteration += 1
    return row


def _as_groups(
    source: Union[Workload, Sequence[PrefixSharingGroup]], config: SchedulerConfig
) -> List[PrefixSharingGroup]:
    if config.policy is Policy.BATCHLLM:
        if isinstance(source, Workload):
            raise ValidationError('the batchllm policy schedules prefix-sharing groups; plan the workload first')
        return list(source)
    if not isinstance(source, Workload):
        raise ValidationError(f'the {config.policy.value} policy schedules a raw workload in arrival order')
    return singleton_groups(source)


def simulate(
    source: Union[Workload, Sequence[PrefixSharingGroup]],
    config: SchedulerConfig,
    observer: Optional[Callable[[TokenBatch, IterationTrace, SchedulerState], None]] = None,
) -> SimulationTrace:
    """Run iterations until every request is done and return the trace.

    `observer`, if given, is called after every iteration with the batch, its trace row and the
    state.
    """
    state = SchedulerState(_as_groups(source, config), config)
    bound = sum(request.prompt_len + request.output_len for request in state.requests.values())
    while not state.finished:
        if state.iteration >= bound:
            raise SchedulerStallError(f'simulation did not finish within {bound} iterations')
        row = step(state, config)
        if observer is not None and state.last_batch is not None:
            observer(state.last_batch, row, state)
    trace = SimulationTrace(
        policy=config.policy.value,
        workload_digest=state.workload_digest,
        chunk_size=config.chunk_size,
        rows=tuple(state.rows),
        n_logical_prefill_tokens=state.n_logical_prefill_tokens,
        n_processed_prefill_tokens=state.n_processed_prefill_tokens,
        n_reused_prefill_tokens=state.n_reused_prefill_tokens,
    )
    logger.info(
        'Simulated %d requests with %s in %d iterations (%d of %d prefill tokens processed)',
        len(state.requests),
        config.policy.value,
        trace.iterations,
        trace.n_processed_prefill_tokens,
        trace.n_logical_prefill_tokens,
    )
    return trace
