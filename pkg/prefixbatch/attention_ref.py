"""
Double-precision reference for prefix-shared attention.

A segment of keys/values is reduced to a `PartialResult`: the unnormalised weighted sum of value
rows together with the per-row running max logit and the per-row sum of shifted exponentials.
Partials of disjoint segments merge with the online-softmax rule, so attention over a shared
prefix can be computed once for all queries of a group and combined with each request's own
distinct segment afterwards. No causal masking: every key is visible to every query row.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import TYPE_CHECKING

import numpy as np

from prefixbatch.errors import ValidationError
from prefixbatch.logger import logger

if TYPE_CHECKING:
    from typing import Any, Dict, List, Optional, Sequence, Tuple

SELFTEST_TOLERANCE = 1e-10
IDENTITY_TOLERANCE = 1e-12
EXACT_CHECKS = ('empty_identity', 'row_stochastic')


class AttentionShapeError(ValidationError):
    """Raised when matrices passed to an attention operation have incompatible shapes."""

    pass


class EmptySegmentError(AttentionShapeError):
    """Raised when a query row would attend to no keys at all."""

    pass


@dataclass(frozen=True)
class PartialResult:
    """
    Attention over one key segment, before normalisation.

    `output` is rows x d and holds sum(exp(logit - row_max) * V); `row_sum` holds
    sum(exp(logit - row_max)). An empty segment has row_max = -inf and row_sum = 0.
    """

    output: np.ndarray
    row_max: np.ndarray
    row_sum: np.ndarray

    @property
    def rows(self) -> int:
        return int(self.output.shape[0])

    @property
    def dim(self) -> int:
        return int(self.output.shape[1])

    @property
    def is_empty(self) -> bool:
        return bool(np.all(self.row_sum == 0))

    def take(self, start: int, stop: int) -> PartialResult:
        """Rows [start, stop) of this partial."""
        return PartialResult(self.output[start:stop], self.row_max[start:stop], self.row_sum[start:stop])


def _matrix(name: str, value: Any, allow_empty: bool = False) -> np.ndarray:
    matrix = np.asarray(value, dtype=np.float64)
    if matrix.ndim != 2:
        raise AttentionShapeError(f'{name} must be a matrix, got {matrix.ndim} dimensions')
    if matrix.shape[1] == 0 or (matrix.shape[0] == 0 and not allow_empty):
        raise AttentionShapeError(f'{name} has an empty dimension: {matrix.shape}')
    if not np.all(np.isfinite(matrix)):
        raise ValidationError(f'{name} contains non-finite entries')
    return matrix


def _key_values(K: Any, V: Any, dim: Optional[int]) -> Tuple[np.ndarray, np.ndarray]:
    K = _matrix('K', K, allow_empty=True)
    V = _matrix('V', V, allow_empty=True)
    if K.shape[0] != V.shape[0]:
        raise AttentionShapeError(f'K has {K.shape[0]} rows but V has {V.shape[0]}')
    if dim is not None and K.shape[1] != dim:
        raise AttentionShapeError(f'K has head dimension {K.shape[1]}, queries have {dim}')
    return K, V


def default_scale(dim: int) -> float:
    return 1 / float(np.sqrt(dim))


def _scale(scale: Optional[float], dim: int) -> float:
    if scale is None:
        return default_scale(dim)
    if not np.isfinite(scale) or scale < 0:
        raise ValidationError(f'scale must be a non-negative finite number, got {scale}')
    return float(scale)


def empty_partial(rows: int, dim: int) -> PartialResult:
    """The neutral element of `merge`."""
    return PartialResult(
        output=np.zeros((rows, dim)),
        row_max=np.full(rows, -np.inf),
        row_sum=np.zeros(rows),
    )


def partial_from_logits(logits: Any, V: Any) -> PartialResult:
    """Reduce precomputed logits (rows x L) against V (L x d)."""
    logits = np.asarray(logits, dtype=np.float64)
    V = _matrix('V', V, allow_empty=True)
    if logits.ndim != 2 or logits.shape[1] != V.shape[0]:
        raise AttentionShapeError(f'logits of shape {logits.shape} do not match V of shape {V.shape}')
    if logits.shape[1] == 0:
        return empty_partial(logits.shape[0], V.shape[1])
    row_max = logits.max(axis=1)
    weights = np.exp(logits - row_max[:, None])
    return PartialResult(output=weights @ V, row_max=row_max, row_sum=weights.sum(axis=1))


def partial_attention(Q: Any, K: Any, V: Any, scale: Optional[float] = None) -> PartialResult:
    """Attention of the query rows over one key/value segment, left unnormalised.

    `scale` defaults to 1/sqrt(d). A segment without keys yields the empty partial.
    """
    Q = _matrix('Q', Q)
    K, V = _key_values(K, V, Q.shape[1])
    return partial_from_logits(_scale(scale, Q.shape[1]) * (Q @ K.T), V)


def merge(a: PartialResult, b: PartialResult) -> PartialResult:
    """Combine the partials of two disjoint segments seen by the same query rows."""
    if a.output.shape != b.output.shape:
        raise AttentionShapeError(f'cannot merge partials of shapes {a.output.shape} and {b.output.shape}')
    row_max = np.maximum(a.row_max, b.row_max)
    # rows empty on both sides keep row_max = -inf; shift them by 0 to avoid inf - inf
    shift = np.where(np.isfinite(row_max), row_max, 0.0)
    scale_a = np.exp(a.row_max - shift)
    scale_b = np.exp(b.row_max - shift)
    return PartialResult(
        output=a.output * scale_a[:, None] + b.output * scale_b[:, None],
        row_max=row_max,
        row_sum=a.row_sum * scale_a + b.row_sum * scale_b,
    )


def merge_all(partials: Sequence[PartialResult]) -> PartialResult:
    """Left fold of `merge` over any number of partials."""
    if not partials:
        raise ValidationError('merge_all needs at least one partial')
    return reduce(merge, partials)


def finalize(partial: PartialResult) -> np.ndarray:
    if np.any(partial.row_sum == 0):
        raise EmptySegmentError('cannot normalise rows that attended to no keys')
    return partial.output / partial.row_sum[:, None]


def implied_weights(partial: PartialResult, logits: Any) -> np.ndarray:
    """Softmax weights recovered from a partial and the logits of all the keys it covers."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] != partial.rows:
        raise AttentionShapeError(f'logits of shape {logits.shape} do not cover {partial.rows} rows')
    if np.any(partial.row_sum == 0):
        raise EmptySegmentError('cannot recover weights of rows that attended to no keys')
    return np.exp(logits - partial.row_max[:, None]) / partial.row_sum[:, None]


def naive_attention(Q: Any, K: Any, V: Any, scale: Optional[float] = None) -> np.ndarray:
    """Dense softmax(scale * Q K^T) V, the oracle for everything above."""
    Q = _matrix('Q', Q)
    K, V = _key_values(K, V, Q.shape[1])
    if K.shape[0] == 0:
        raise EmptySegmentError('naive attention needs at least one key')
    logits = _scale(scale, Q.shape[1]) * (Q @ K.T)
    weights = np.exp(logits - logits.max(axis=1, keepdims=True))
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ V


@dataclass(frozen=True)
class SegmentedKV:
    """A shared prefix segment plus one distinct segment per request of the group."""

    prefix_k: np.ndarray
    prefix_v: np.ndarray
    distinct: Tuple[Tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self) -> None:
        prefix_k, prefix_v = _key_values(self.prefix_k, self.prefix_v, None)
        distinct = tuple(_key_values(k, v, prefix_k.shape[1]) for k, v in self.distinct)
        if any(v.shape[1] != prefix_v.shape[1] for _, v in distinct):
            raise AttentionShapeError('distinct value segments must match the prefix value width')
        object.__setattr__(self, 'prefix_k', prefix_k)
        object.__setattr__(self, 'prefix_v', prefix_v)
        object.__setattr__(self, 'distinct', distinct)

    @property
    def head_dim(self) -> int:
        return int(self.prefix_k.shape[1])

    @property
    def prefix_len(self) -> int:
        return int(self.prefix_k.shape[0])


def prefix_shared_attention(
    queries: Sequence[Any], segments: SegmentedKV, scale: Optional[float] = None
) -> List[np.ndarray]:
    """
    Attention of each request's queries over its shared prefix followed by its distinct segment.

    The prefix partial is computed once over the stacked queries of the whole group and sliced per
    request before being merged with that request's distinct partial.
    """
    if len(queries) != len(segments.distinct):
        raise AttentionShapeError(f'{len(queries)} query blocks for {len(segments.distinct)} distinct segments')
    blocks = [_matrix(f'Q[{index}]', block) for index, block in enumerate(queries)]
    if not blocks:
        return []
    for index, (block, (distinct_k, _)) in enumerate(zip(blocks, segments.distinct)):
        if block.shape[1] != segments.head_dim:
            raise AttentionShapeError(f'Q[{index}] has head dimension {block.shape[1]}, keys have {segments.head_dim}')
        if segments.prefix_len == 0 and distinct_k.shape[0] == 0:
            raise EmptySegmentError(f'request {index} has neither prefix nor distinct keys')

    scale = _scale(scale, segments.head_dim)
    shared = partial_attention(np.vstack(blocks), segments.prefix_k, segments.prefix_v, scale)
    bounds = np.cumsum([0] + [block.shape[0] for block in blocks])
    outputs = []
    for index, block in enumerate(blocks):
        distinct_k, distinct_v = segments.distinct[index]
        own = partial_attention(block, distinct_k, distinct_v, scale)
        outputs.append(finalize(merge(shared.take(int(bounds[index]), int(bounds[index + 1])), own)))
    return outputs


def _max_abs(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def _cuts(rng: np.random.Generator, length: int, pieces: int) -> List[int]:
    inner = sorted(int(cut) for cut in rng.choice(np.arange(1, length), size=pieces - 1, replace=False))
    return [0] + inner + [length]


def _check_instance(rng: np.random.Generator) -> Dict[str, float]:
    rows = int(rng.integers(1, 65))
    dim = int(rng.integers(1, 65))
    length = int(rng.integers(3, 513))
    Q, K, V = (rng.uniform(-10, 10, size=(size, dim)) for size in (rows, length, length))
    scale = default_scale(dim)
    expected = naive_attention(Q, K, V, scale)

    cuts = _cuts(rng, length, 3)
    parts = [partial_attention(Q, K[lo:hi], V[lo:hi], scale) for lo, hi in zip(cuts, cuts[1:])]
    a, b, c = parts
    orders = (merge(merge(a, b), c), merge(a, merge(b, c)), merge(merge(c, a), b))
    associativity = max(_max_abs(finalize(merged), expected) for merged in orders)
    two_way = merge(partial_attention(Q, K[: cuts[1]], V[: cuts[1]], scale), merge(b, c))

    whole = partial_attention(Q, K, V, scale)
    identity = _max_abs(finalize(merge(whole, empty_partial(rows, dim))), finalize(whole))

    logits = scale * (Q @ K.T)
    shift = float(rng.uniform(-500, 500))
    shifted = _max_abs(finalize(partial_from_logits(logits + shift, V)), finalize(whole))
    weights = implied_weights(whole, logits)
    stochastic = float(np.max(np.abs(weights.sum(axis=1) - 1)))

    group = int(rng.integers(1, 5))
    queries = [rng.uniform(-10, 10, size=(int(rng.integers(1, 9)), dim)) for _ in range(group)]
    distinct = [rng.uniform(-10, 10, size=(2, int(rng.integers(0, 65)), dim)) for _ in range(group)]
    segments = SegmentedKV(K, V, tuple((kv[0], kv[1]) for kv in distinct))
    grouped = prefix_shared_attention(queries, segments, scale)
    segmented = max(
        _max_abs(out, naive_attention(q, np.vstack([K, kv[0]]), np.vstack([V, kv[1]]), scale))
        for q, kv, out in zip(queries, distinct, grouped)
    )
    return {
        'two_way_merge': _max_abs(finalize(two_way), expected),
        'split_associativity': associativity,
        'empty_identity': identity,
        'shift_stability': shifted,
        'row_stochastic': stochastic,
        'prefix_shared': segmented,
    }


def run_selftest(instances: int = 100, seed: int = 0) -> Dict[str, Any]:
    """Compare every operation above with `naive_attention` on random instances.

    Returns a JSON-serialisable document with the largest error seen per check.
    """
    if instances < 1:
        raise ValidationError('the self-test needs at least one instance')
    rng = np.random.default_rng(seed)
    worst: Dict[str, float] = {}
    for _ in range(instances):
        for check, error in _check_instance(rng).items():
            worst[check] = max(worst.get(check, 0.0), error)
    limits = {check: IDENTITY_TOLERANCE if check in EXACT_CHECKS else SELFTEST_TOLERANCE for check in worst}
    failed = sorted(check for check, error in worst.items() if not error <= limits[check])
    result = {
        'passed': not failed,
        'failed_checks': failed,
        'instances': instances,
        'seed': seed,
        'tolerances': limits,
        'max_errors': worst,
    }
    logger.info('Attention self-test over %d instances %s', instances, 'passed' if not failed else 'failed')
    return result
