"""
Saving ratios, valley statistics and comparison reports computed from simulation traces.

A valley is an iteration whose token-batch holds fewer than `alpha * chunk_size` tokens. The 0.5
default is a convention, not a measured cutoff; reports say so.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

from prefixbatch.constants import DEFAULT_VALLEY_ALPHA
from prefixbatch.errors import ConfigurationError, PrefixBatchError, ValidationError
from prefixbatch.trace import SimulationTrace, read_trace_rows

if TYPE_CHECKING:
    from typing import Any, Dict, Iterable, List, Sequence, Tuple, Union

    from prefixbatch.trace import IterationTrace

VALLEY_NOTE = 'valley cutoff alpha * chunk_size is a reporting convention, not a measured threshold'


class UndefinedMetricError(PrefixBatchError):
    """Raised when a metric has no meaningful value for the given input."""

    pass


@dataclass(frozen=True)
class ValleyConfig:
    alpha: float = DEFAULT_VALLEY_ALPHA

    def __post_init__(self) -> None:
        if not 0 < self.alpha <= 1:
            raise ConfigurationError(f'alpha must be in (0, 1], got {self.alpha}')


@dataclass(frozen=True)
class ValleyFraction:
    """Share of valley iterations, with the final decode-only drain excluded and included."""

    steady_state: float
    overall: float


def saving_ratio(trace: SimulationTrace) -> float:
    """Return 1 - processed / logical prefill tokens."""
    if not trace.n_logical_prefill_tokens:
        raise UndefinedMetricError('saving ratio is undefined for a trace without prefill tokens')
    return 1 - trace.n_processed_prefill_tokens / trace.n_logical_prefill_tokens


def _fraction_below(rows: Sequence[IterationTrace], cutoff: float) -> float:
    if not rows:
        return 0.0
    return sum(1 for row in rows if row.total_tokens < cutoff) / len(rows)


def steady_state_rows(rows: Sequence[IterationTrace]) -> Sequence[IterationTrace]:
    """Drop the drain tail: every iteration after the last one that processed prefill tokens."""
    last = max((index for index, row in enumerate(rows) if row.prefill_tokens), default=-1)
    return rows[: last + 1]


def valley_fraction(
    trace: Union[SimulationTrace, Sequence[IterationTrace]],
    valley_config: ValleyConfig,
    chunk_size: int,
) -> ValleyFraction:
    rows = trace.rows if isinstance(trace, SimulationTrace) else tuple(trace)
    if not rows:
        raise UndefinedMetricError('valley fraction needs at least one iteration')
    cutoff = valley_config.alpha * chunk_size
    return ValleyFraction(
        steady_state=_fraction_below(steady_state_rows(rows), cutoff),
        overall=_fraction_below(rows, cutoff),
    )


def mean_tokens_per_iteration(trace: SimulationTrace) -> float:
    return trace.total_tokens / trace.iterations if trace.iterations else 0.0


def summarize(trace: SimulationTrace, valley_config: ValleyConfig = ValleyConfig()) -> Dict[str, Any]:
    """Return the JSON summary document of one trace."""
    valleys = valley_fraction(trace, valley_config, trace.chunk_size)
    return {
        'policy': trace.policy,
        'workload_digest': trace.workload_digest,
        'chunk_size': trace.chunk_size,
        'iterations': trace.iterations,
        'n_processed_prefill_tokens': trace.n_processed_prefill_tokens,
        'n_logical_prefill_tokens': trace.n_logical_prefill_tokens,
        'n_reused_prefill_tokens': trace.n_reused_prefill_tokens,
        'decode_tokens': trace.decode_tokens,
        'saving_ratio': saving_ratio(trace),
        'mean_tokens_per_iteration': mean_tokens_per_iteration(trace),
        'valley_fraction': valleys.steady_state,
        'valley_fraction_overall': valleys.overall,
        'valley_alpha': valley_config.alpha,
        'valley_note': VALLEY_NOTE,
    }


def summary_path_for(trace_path: Union[str, Path]) -> Path:
    """`run.csv` keeps its summary in `run.summary.json`."""
    return Path(trace_path).with_suffix('.summary.json')


def write_summary(summary: Dict[str, Any], path: Union[str, Path]) -> None:
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        json.dump(summary, handle, indent=2, sort_keys=True)
        handle.write('\n')


def load_trace(trace_path: Union[str, Path]) -> SimulationTrace:
    """Rebuild a trace from its CSV and the summary JSON next to it."""
    summary_path = summary_path_for(trace_path)
    try:
        summary = json.loads(summary_path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as error:
        raise ValidationError(f'{summary_path}: invalid JSON ({error.msg})') from error
    try:
        trace = SimulationTrace(
            policy=summary['policy'],
            workload_digest=summary['workload_digest'],
            chunk_size=summary['chunk_size'],
            rows=tuple(read_trace_rows(trace_path)),
            n_logical_prefill_tokens=summary['n_logical_prefill_tokens'],
            n_processed_prefill_tokens=summary['n_processed_prefill_tokens'],
            n_reused_prefill_tokens=summary.get('n_reused_prefill_tokens', 0),
        )
    except KeyError as error:
        raise ValidationError(f'{summary_path}: missing field {error.args[0]!r}') from error
    trace.check_counters()
    return trace


@dataclass(frozen=True)
class Report:
    """Per-trace summaries plus, for two or more traces, an aligned per-iteration token table."""

    summaries: Dict[str, Dict[str, Any]]
    comparison_header: Tuple[str, ...] = ()
    comparison_rows: Tuple[Tuple[Union[int, str], ...], ...] = ()


def _names(traces: Sequence[SimulationTrace]) -> List[str]:
    names: List[str] = []
    for trace in traces:
        name, suffix = trace.policy, 2
        while name in names:
            name, suffix = f'{trace.policy}#{suffix}', suffix + 1
        names.append(name)
    return names


def report(traces: Iterable[SimulationTrace], valley_config: ValleyConfig = ValleyConfig()) -> Report:
    """Summarise traces of the same workload and line their iterations up side by side.

    Shorter traces are padded with empty cells.
    """
    traces = list(traces)
    if not traces:
        raise ValidationError('report needs at least one trace')
    digests = {trace.workload_digest for trace in traces}
    if len(digests) > 1:
        raise ValidationError('traces were produced from different workloads')
    names = _names(traces)
    summaries = {name: summarize(trace, valley_config) for name, trace in zip(names, traces)}
    if len(traces) == 1:
        return Report(summaries=summaries)
    header = ('iteration',) + tuple(f'{name}_total_tokens' for name in names)
    longest = max(trace.iterations for trace in traces)
    rows = tuple(
        (index,) + tuple(trace.rows[index].total_tokens if index < trace.iterations else '' for trace in traces)
        for index in range(longest)
    )
    return Report(summaries=summaries, comparison_header=header, comparison_rows=rows)


def write_report(result: Report, directory: Union[str, Path]) -> List[Path]:
    """Write `summary.json` and, when there is one, `comparison.csv`; return the written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = [directory / 'summary.json']
    write_summary(result.summaries, written[0])
    if result.comparison_rows:
        written.append(directory / 'comparison.csv')
        with open(written[1], 'w', encoding='utf-8', newline='') as handle:
            writer = csv.writer(handle, lineterminator='\n')
            writer.writerow(result.comparison_header)
            writer.writerows(result.comparison_rows)
    return written
