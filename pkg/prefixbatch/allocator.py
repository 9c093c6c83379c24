"""Blocked KV memory: a free list of fixed-size blocks handed out to requests and to shared prefixes."""
from __future__ import annotations

from collections import deque
from typing import TYPE_CHECKING

from prefixbatch.logger import logger

if TYPE_CHECKING:
    from typing import Deque, Dict, List


class AllocatorInvariantError(AssertionError):
    """Raised when the allocator is asked for more than it has; admission should make this unreachable."""

    pass


class KVAllocator:
    """Hand out KV blocks to owners (requests) and to ref-counted shared prefixes."""

    def __init__(self, total_blocks: int) -> None:
        self.total_blocks = total_blocks
        self._free: Deque[int] = deque(range(total_blocks))
        self._owned: Dict[str, List[int]] = {}
        self._shared: Dict[str, List[int]] = {}
        self._refs: Dict[str, int] = {}
        self.allocated_total = 0
        self.freed_total = 0

    @property
    def free_blocks(self) -> int:
        return len(self._free)

    @property
    def used_blocks(self) -> int:
        return self.total_blocks - len(self._free)

    def _take(self, count: int) -> List[int]:
        if count > len(self._free):
            raise AllocatorInvariantError(f'requested {count} blocks with only {len(self._free)} free')
        self.allocated_total += count
        return [self._free.popleft() for _ in range(count)]

    def _give_back(self, blocks: List[int]) -> int:
        self._free.extend(blocks)
        self.freed_total += len(blocks)
        return len(blocks)

    def blocks_of(self, owner: str) -> List[int]:
        return list(self._owned.get(owner, ()))

    def shared_blocks_of(self, key: str) -> List[int]:
        return list(self._shared.get(key, ()))

    def grow(self, owner: str, blocks: int) -> List[int]:
        """Make `owner` hold at least `blocks` blocks; return the newly added ones."""
        held = self._owned.setdefault(owner, [])
        added = self._take(max(0, blocks - len(held)))
        held.extend(added)
        return added

    def free(self, owner: str) -> int:
        """Return every block held by `owner` to the free list."""
        return self._give_back(self._owned.pop(owner, []))

    def pin_shared(self, key: str, references: int) -> None:
        """Register a shared prefix that `references` owners will release one by one."""
        if key in self._refs:
            raise AllocatorInvariantError(f'shared prefix {key!r} registered twice')
        self._refs[key] = references
        self._shared[key] = []

    def grow_shared(self, key: str, blocks: int) -> List[int]:
        held = self._shared[key]
        added = self._take(max(0, blocks - len(held)))
        held.extend(added)
        return added

    def release_shared(self, key: str) -> int:
        """Drop one reference; the blocks are freed when the last one goes."""
        self._refs[key] -= 1
        if self._refs[key] > 0:
            return 0
        del self._refs[key]
        freed = self._give_back(self._shared.pop(key))
        logger.debug('Freed %d blocks of shared prefix %s', freed, key)
        return freed

    def reference_count(self, key: str) -> int:
        return self._refs.get(key, 0)

    def is_empty(self) -> bool:
        return not self._owned_blocks() and not self._shared and len(self._free) == self.total_blocks

    def _owned_blocks(self) -> int:
        return sum(len(blocks) for blocks in self._owned.values())
