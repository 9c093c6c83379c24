"""Per-iteration simulation traces and their CSV form."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

from prefixbatch.constants import TRACE_COLUMNS
from prefixbatch.errors import ValidationError

if TYPE_CHECKING:
    from typing import Iterable, List, Tuple, Union


@dataclass(frozen=True)
class IterationTrace:
    """What one continuous-batching iteration processed."""

    iteration: int
    total_tokens: int
    decode_tokens: int
    prefill_tokens: int
    blocks_used: int
    active_requests: int

    def as_row(self) -> Tuple[int, ...]:
        return tuple(getattr(self, column) for column in TRACE_COLUMNS)


@dataclass(frozen=True)
class SimulationTrace:
    """All iterations of one simulation plus the cumulative prefill counters."""

    policy: str
    workload_digest: str
    chunk_size: int
    rows: Tuple[IterationTrace, ...]
    n_logical_prefill_tokens: int
    n_processed_prefill_tokens: int
    n_reused_prefill_tokens: int = 0

    def __post_init__(self) -> None:
        if not isinstance(self.rows, tuple):
            object.__setattr__(self, 'rows', tuple(self.rows))

    @property
    def iterations(self) -> int:
        return len(self.rows)

    @property
    def total_tokens(self) -> int:
        return sum(row.total_tokens for row in self.rows)

    @property
    def decode_tokens(self) -> int:
        return sum(row.decode_tokens for row in self.rows)

    @property
    def prefill_tokens(self) -> int:
        return sum(row.prefill_tokens for row in self.rows)

    def check_counters(self) -> None:
        """Raise if the cumulative counters disagree with the per-iteration rows."""
        if self.prefill_tokens != self.n_processed_prefill_tokens:
            raise ValidationError(
                f'trace rows hold {self.prefill_tokens} prefill tokens, '
                f'counter says {self.n_processed_prefill_tokens}'
            )


def write_trace_csv(trace: SimulationTrace, path: Union[str, Path]) -> None:
    with open(path, 'w', encoding='utf-8', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(TRACE_COLUMNS)
        writer.writerows(row.as_row() for row in trace.rows)


def read_trace_rows(path: Union[str, Path]) -> List[IterationTrace]:
    """Read the rows of a trace CSV written by `write_trace_csv`."""
    with open(path, encoding='utf-8', newline='') as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or tuple(header) != TRACE_COLUMNS:
            raise ValidationError(f'{path}: expected header {",".join(TRACE_COLUMNS)}')
        rows = []
        for line_number, values in enumerate(reader, start=2):
            try:
                rows.append(IterationTrace(*(int(value) for value in values)))
            except (TypeError, ValueError) as error:
                raise ValidationError(f'{path}:{line_number}: malformed trace row') from error
    return rows


def rows_from(values: Iterable[Tuple[int, int, int, int, int, int]]) -> Tuple[IterationTrace, ...]:
    """Build trace rows from plain tuples in `TRACE_COLUMNS` order."""
    return tuple(IterationTrace(*row) for row in values)
