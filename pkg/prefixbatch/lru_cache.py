"""
Implicit prefix caching over hashed KV blocks, the way request-at-a-time engines reuse prefixes.

A block is identified by the hash of its tokens chained with its predecessor's hash, so a block
only matches when the whole prompt up to and including it matches.
"""
from __future__ import annotations

from collections import OrderedDict
from typing import TYPE_CHECKING

from prefixbatch.logger import logger

if TYPE_CHECKING:
    from typing import Dict, Iterable, List, Sequence


def block_hashes(tokens: Sequence[int], block_size: int) -> List[int]:
    """Return the chained hashes of every full block of `tokens`."""
    hashes = []
    parent = 0
    for start in range(0, len(tokens) - block_size + 1, block_size):
        parent = hash((parent, tuple(tokens[start : start + block_size])))
        hashes.append(parent)
    return hashes


class LRUBlockCache:
    """Fixed-capacity block cache; only blocks no running request references can be evicted.

    Referenced blocks live in `_pinned` with their reference count. Unreferenced ones sit in
    `_idle`, oldest first.
    """

    def __init__(self, capacity: int) -> None:
        self.capacity = capacity
        self._pinned: Dict[int, int] = {}
        self._idle: OrderedDict[int, None] = OrderedDict()
        self.hits = 0
        self.evictions = 0

    def __len__(self) -> int:
        return len(self._pinned) + len(self._idle)

    def __contains__(self, block_hash: int) -> bool:
        return block_hash in self._pinned or block_hash in self._idle

    def peek(self, hashes: Sequence[int], limit: int) -> int:
        """Count the leading cached blocks (at most `limit`) without touching recency."""
        matched = 0
        for block_hash in hashes[:limit]:
            if block_hash not in self:
                break
            matched += 1
        return matched

    def _acquire(self, block_hash: int) -> None:
        if block_hash in self._idle:
            del self._idle[block_hash]
            self._pinned[block_hash] = 1
        else:
            self._pinned[block_hash] += 1

    def match(self, hashes: Sequence[int], limit: int) -> int:
        """Reference the leading cached blocks and return how many there were."""
        matched = self.peek(hashes, limit)
        for block_hash in hashes[:matched]:
            self._acquire(block_hash)
        self.hits += matched
        return matched

    def insert(self, block_hash: int) -> bool:
        """Cache a freshly computed block and reference it; False if there is no evictable room."""
        if block_hash in self:
            self._acquire(block_hash)
            return True
        while len(self) >= self.capacity and self._idle:
            self._idle.popitem(last=False)
            self.evictions += 1
        if len(self) >= self.capacity:
            return False
        self._pinned[block_hash] = 1
        return True

    def release(self, hashes: Iterable[int]) -> None:
        """Drop one reference per hash; blocks reaching zero become the most recently used idle ones."""
        for block_hash in hashes:
            count = self._pinned.get(block_hash)
            if count is None:
                logger.debug('Releasing block %x that is not referenced', block_hash)
                continue
            if count > 1:
                self._pinned[block_hash] = count - 1
            else:
                del self._pinned[block_hash]
                self._idle[block_hash] = None
