"""
Requests, workloads and the synthetic generators used to exercise the planner and scheduler.

Every generated group starts with a sentinel token unique to that group, so prompts of different
groups never share a leading token and the analytic saving ratios hold exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from prefixbatch.constants import (
    INDUSTRY_MEAN_DISTINCT_LEN,
    INDUSTRY_MEAN_PREFIX_LEN,
    INDUSTRY_MEAN_SHARING_DEGREE,
    INDUSTRY_NUM_REQUESTS,
    INDUSTRY_OUTPUT_LEN,
    SYNTHETIC_VOCAB_SIZE,
)
from prefixbatch.errors import ConfigurationError, ValidationError
from prefixbatch.logger import logger
from prefixbatch.types import Request, Workload
from prefixbatch.utils import requests_digest

if TYPE_CHECKING:
    from typing import Iterable, List, Union

    from prefixbatch.types import PrefixSharingGroup


class WorkloadParseError(ValidationError):
    """Raised when a workload file line cannot be turned into a request."""

    def __init__(self, path: Union[str, Path], line_number: int, reason: str) -> None:
        self.path = str(path)
        self.line_number = line_number
        self.reason = reason
        super().__init__(f'{self.path}:{line_number}: {reason}')


def _check_seed(seed: int) -> None:
    if not 0 <= seed < 2**64:
        raise ConfigurationError(f'seed must be a 64-bit unsigned integer, got {seed}')


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape of a microbenchmark: `num_groups` groups of `sharing_degree` requests each."""

    prefix_len: int
    distinct_len: int
    sharing_degree: int
    num_groups: int
    output_len: int
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ('prefix_len', 'distinct_len', 'sharing_degree', 'num_groups', 'output_len'):
            if getattr(self, name) < 1:
                raise ConfigurationError(f'{name} must be positive, got {getattr(self, name)}')
        if self.sharing_degree > SYNTHETIC_VOCAB_SIZE:
            raise ConfigurationError(f'sharing_degree cannot exceed the synthetic vocabulary ({SYNTHETIC_VOCAB_SIZE})')
        _check_seed(self.seed)

    @property
    def num_requests(self) -> int:
        return self.num_groups * self.sharing_degree


@dataclass(frozen=True)
class IndustrySpec:
    """Moment-matched stand-in for a document/query snippet-generation batch.

    Only the means are known, so prefix and distinct lengths are gamma distributed around them and
    the sharing degree is one plus a Poisson draw.
    """

    num_requests: int = INDUSTRY_NUM_REQUESTS
    mean_prefix_len: float = INDUSTRY_MEAN_PREFIX_LEN
    mean_distinct_len: float = INDUSTRY_MEAN_DISTINCT_LEN
    mean_sharing_degree: float = INDUSTRY_MEAN_SHARING_DEGREE
    output_len: int = INDUSTRY_OUTPUT_LEN
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_requests < 1 or self.output_len < 1:
            raise ConfigurationError('num_requests and output_len must be positive')
        if self.mean_prefix_len < 1 or self.mean_distinct_len < 1:
            raise ConfigurationError('mean prefix and distinct lengths must be at least 1')
        if self.mean_sharing_degree < 1:
            raise ConfigurationError('mean_sharing_degree must be at least 1')
        _check_seed(self.seed)


def _stream(*key: int) -> np.random.Generator:
    """Return a counter-based Philox stream keyed by `key`."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def _group_requests(
    rng: np.random.Generator,
    group: int,
    token_base: int,
    prefix_len: int,
    distinct_lens: List[int],
    output_len: int,
) -> List[Request]:
    token_high = token_base + SYNTHETIC_VOCAB_SIZE
    prefix = [group] + rng.integers(token_base, token_high, prefix_len - 1).tolist()
    leading = (rng.choice(SYNTHETIC_VOCAB_SIZE, size=len(distinct_lens), replace=False) + token_base).tolist()
    requests = []
    for index, (first, distinct_len) in enumerate(zip(leading, distinct_lens)):
        suffix = [first] + rng.integers(token_base, token_high, distinct_len - 1).tolist()
        requests.append(Request(f'g{group}-r{index}', tuple(prefix + suffix), output_len))
    return requests


def generate_microbenchmark(spec: SyntheticSpec) -> Workload:
    """Generate `num_groups * sharing_degree` requests in group order.

    Requests of one group share exactly `prefix_len` leading tokens; requests of different groups
    share none.
    """
    logger.debug('Generating microbenchmark %s', spec)
    requests: List[Request] = []
    for group in range(spec.num_groups):
        rng = _stream(spec.seed, group)
        requests.extend(
            _group_requests(
                rng,
                group,
                token_base=spec.num_groups,
                prefix_len=spec.prefix_len,
                distinct_lens=[spec.distinct_len] * spec.sharing_degree,
                output_len=spec.output_len,
            )
        )
    return Workload(tuple(requests))


def generate_industry_analogue(spec: IndustrySpec) -> Workload:
    """Generate a shuffled workload whose prefix, distinct and sharing-degree means match `spec`."""
    shape_rng = _stream(spec.seed)
    requests: List[Request] = []
    group = 0
    while len(requests) < spec.num_requests:
        sharing_degree = 1 + int(shape_rng.poisson(spec.mean_sharing_degree - 1))
        sharing_degree = min(sharing_degree, spec.num_requests - len(requests), SYNTHETIC_VOCAB_SIZE)
        prefix_len = max(1, int(round(shape_rng.gamma(4.0, spec.mean_prefix_len / 4.0))))
        distinct_lens = [
            max(1, int(round(value))) for value in shape_rng.gamma(2.0, spec.mean_distinct_len / 2.0, sharing_degree)
        ]
        requests.extend(
            _group_requests(
                _stream(spec.seed, group),
                group,
                token_base=spec.num_requests,
                prefix_len=prefix_len,
                distinct_lens=distinct_lens,
                output_len=spec.output_len,
            )
        )
        group += 1
    logger.debug('Generated industry analogue with %d groups for %d requests', group, len(requests))
    return shuffle_workload(Workload(tuple(requests)), spec.seed)


def shuffle_workload(workload: Workload, seed: int) -> Workload:
    """Return a deterministic permutation of the workload."""
    _check_seed(seed)
    order = _stream(seed).permutation(len(workload.requests))
    return Workload(tuple(workload.requests[index] for index in order))


def workload_from_groups(groups: Iterable[PrefixSharingGroup]) -> Workload:
    """Flatten groups back into requests, in group order."""
    return Workload(tuple(request for group in groups for request in group.requests()))


def workload_digest(workload: Workload) -> str:
    return requests_digest(workload.requests)


def write_workload(workload: Workload, path: Union[str, Path]) -> None:
    """Write one JSON record per line: `id`, `tokens`, `output_len`."""
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        for request in workload.requests:
            record = {'id': request.id, 'tokens': list(request.tokens), 'output_len': request.output_len}
            handle.write(json.dumps(record, separators=(',', ':')))
            handle.write('\n')


def _parse_request(record: object, path: Union[str, Path], line_number: int) -> Request:
    if not isinstance(record, dict):
        raise WorkloadParseError(path, line_number, 'expected a JSON object')
    for key in ('id', 'tokens', 'output_len'):
        if key not in record:
            raise WorkloadParseError(path, line_number, f'missing field {key!r}')
    request_id, tokens, output_len = record['id'], record['tokens'], record['output_len']
    if not isinstance(request_id, str):
        raise WorkloadParseError(path, line_number, 'field "id" must be a string')
    if not isinstance(tokens, list) or not all(type(token) is int for token in tokens):
        raise WorkloadParseError(path, line_number, 'field "tokens" must be an array of integers')
    if type(output_len) is not int:
        raise WorkloadParseError(path, line_number, 'field "output_len" must be an integer')
    try:
        return Request(request_id, tuple(tokens), output_len)
    except ValidationError as error:
        raise WorkloadParseError(path, line_number, str(error)) from error


def read_workload(path: Union[str, Path]) -> Workload:
    """Read a workload file written by `write_workload`, keeping file order."""
    requests = []
    seen = set()
    with open(path, encoding='utf-8') as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as error:
                raise WorkloadParseError(path, line_number, f'invalid JSON ({error.msg})') from error
            request = _parse_request(record, path, line_number)
            if request.id in seen:
                raise ValidationError(f'{path}:{line_number}: duplicate request id {request.id!r}')
            seen.add(request.id)
            requests.append(request)
    return Workload(tuple(requests))
