from __future__ import annotations

import hashlib
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from typing import Iterable, Sequence

    from prefixbatch.types import Request


def common_prefix_length(a: Sequence[int], b: Sequence[int], start: int = 0) -> int:
    """Return the length of the common prefix of a[start:] and b[start:].

    The slice comparison runs in C, so long shared prefixes are cheap; only
    the mismatching tail is scanned token by token.
    """
    end = min(len(a), len(b))
    if a[start:end] == b[start:end]:
        return end - start
    lo, hi = start, end
    # invariant: a[start:lo] == b[start:lo] and a[start:hi] != b[start:hi]
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if a[lo:mid] == b[lo:mid]:
            lo = mid
        else:
            hi = mid
    return lo - start


def ceil_div(numerator: int, denominator: int) -> int:
    return -(-numerator // denominator)


def requests_digest(requests: Iterable[Request]) -> str:
    """Return a SHA-256 over the id-sorted (id, tokens, output_len) records."""
    digest = hashlib.sha256()
    for request in sorted(requests, key=lambda r: r.id):
        digest.update(request.id.encode('utf-8'))
        digest.update(b'\x00')
        digest.update(np.asarray(request.tokens, dtype=np.uint32).tobytes())
        digest.update(request.output_len.to_bytes(8, 'little'))
    return digest.hexdigest()
