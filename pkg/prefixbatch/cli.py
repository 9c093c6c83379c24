"""Command-line entry point: gen, plan, simulate, report and attn-selftest."""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import TYPE_CHECKING

from prefixbatch.attention_ref import run_selftest
from prefixbatch.constants import (
    DEFAULT_BLOCK_SIZE,
    DEFAULT_CHUNK_SIZE,
    DEFAULT_REQUEST_CAP,
    DEFAULT_SEED,
    DEFAULT_TOTAL_BLOCKS,
    DEFAULT_VALLEY_ALPHA,
    INDUSTRY_MEAN_DISTINCT_LEN,
    INDUSTRY_MEAN_PREFIX_LEN,
    INDUSTRY_MEAN_SHARING_DEGREE,
    INDUSTRY_NUM_REQUESTS,
    INDUSTRY_OUTPUT_LEN,
    SEED_ENV_VAR,
)
from prefixbatch.errors import PrefixBatchError, ValidationError
from prefixbatch.logger import configure_cli_logging, logger, reset_cli_logging
from prefixbatch.metrics import (
    ValleyConfig,
    load_trace,
    report,
    summarize,
    summary_path_for,
    write_report,
    write_summary,
)
from prefixbatch.prefix_tree import (
    build_tree,
    is_groups_record,
    maximize_reuse,
    plan,
    read_groups,
    render_tree,
    write_groups,
)
from prefixbatch.scheduler import Policy, SchedulerConfig, simulate, singleton_groups
from prefixbatch.trace import write_trace_csv
from prefixbatch.workload import (
    IndustrySpec,
    SyntheticSpec,
    generate_industry_analogue,
    generate_microbenchmark,
    read_workload,
    shuffle_workload,
    workload_from_groups,
    write_workload,
)

if TYPE_CHECKING:
    from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

    from prefixbatch.types import PrefixSharingGroup, Workload

    Source = Union[Workload, Sequence[PrefixSharingGroup]]

MICROBENCHMARK_FLAGS = ('prefix_len', 'distinct_len', 'sharing_degree', 'num_groups', 'output_len')


def _out(text: str) -> None:
    sys.stdout.write(text + '\n')


def _is_groups_file(path: Path) -> bool:
    with open(path, encoding='utf-8') as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            kind = is_groups_record(line)
            if kind is None:
                raise ValidationError(f'{path}:{line_number}: neither a workload nor a groups record')
            return kind
    return False


def _load(path: Path) -> Tuple[Optional[Workload], Optional[List[PrefixSharingGroup]]]:
    """Read a workload or a groups file, whichever `path` holds."""
    if _is_groups_file(path):
        return None, read_groups(path)
    return read_workload(path), None


def _gen(args: argparse.Namespace) -> int:
    if args.kind == 'industry':
        workload = generate_industry_analogue(
            IndustrySpec(
                num_requests=args.num_requests,
                mean_prefix_len=args.mean_prefix_len,
                mean_distinct_len=args.mean_distinct_len,
                mean_sharing_degree=args.mean_sharing_degree,
                output_len=args.output_len if args.output_len is not None else INDUSTRY_OUTPUT_LEN,
                seed=args.seed,
            )
        )
    else:
        missing = [f'--{name.replace("_", "-")}' for name in MICROBENCHMARK_FLAGS if getattr(args, name) is None]
        if missing:
            raise ValidationError(f'a microbenchmark needs {", ".join(missing)}')
        workload = generate_microbenchmark(
            SyntheticSpec(**{name: getattr(args, name) for name in MICROBENCHMARK_FLAGS}, seed=args.seed)
        )
        if args.shuffle:
            workload = shuffle_workload(workload, args.shuffle_seed if args.shuffle_seed is not None else args.seed)
    write_workload(workload, args.output)
    _out(f'wrote {len(workload)} requests to {args.output}')
    return 0


def _plan(args: argparse.Namespace) -> int:
    workload, groups = _load(args.input)
    if workload is None:
        workload = workload_from_groups(groups or ())
    result = plan(workload)
    write_groups(result.groups, args.output)
    if args.show_tree:
        _out(render_tree(maximize_reuse(build_tree(workload))))
    _out(f'requests: {len(workload)}')
    _out(f'groups: {len(result.groups)}')
    _out(f'saved prefill tokens: {result.saved_tokens} of {result.logical_tokens}')
    _out(f'first-level saving before enlargement: {result.naive_saved_tokens}')
    _out(f'static saving ratio: {result.saving_ratio:.1%}')
    _out(f'preprocessing seconds: {result.seconds:.3f}')
    return 0


def _policy_paths(output: Path, policies: Sequence[Policy]) -> List[Path]:
    if len(policies) == 1:
        return [output]
    return [output.with_name(f'{output.stem}.{policy.value}{output.suffix}') for policy in policies]


def _simulate_to_files(source: Source, config: SchedulerConfig, alpha: float, path: Path) -> Dict[str, Any]:
    trace = simulate(source, config)
    summary = summarize(trace, ValleyConfig(alpha))
    write_trace_csv(trace, path)
    write_summary(summary, summary_path_for(path))
    return summary


def _simulate(args: argparse.Namespace) -> int:
    policies = list(dict.fromkeys(Policy(policy) for policy in (args.policy or [Policy.BATCHLLM.value])))
    alpha = ValleyConfig(args.alpha).alpha
    workload, groups = _load(args.input)
    arrival = workload if workload is not None else workload_from_groups(groups or ())
    jobs: List[Tuple[Source, SchedulerConfig, float, Path]] = []
    for policy, path in zip(policies, _policy_paths(args.output, policies)):
        config = SchedulerConfig(
            total_blocks=args.total_blocks,
            chunk_size=args.chunk_size,
            block_size=args.block_size,
            mem_threshold=args.mem_threshold,
            policy=policy,
            request_cap=args.request_cap,
            lru_blocks=args.lru_blocks,
            reorder=args.reorder,
            memory_centric=args.memory_centric,
            max_new_groups_per_iteration=args.max_new_groups,
        )
        source: Source
        if policy is not Policy.BATCHLLM:
            source = arrival
        elif not args.prefix_sharing:
            source = singleton_groups(arrival)
        else:
            source = groups if groups is not None else plan(arrival).groups
        jobs.append((source, config, alpha, path))

    if args.jobs > 1 and len(jobs) > 1:
        logger.info('Simulating %d policies in %d worker processes', len(jobs), args.jobs)
        with ProcessPoolExecutor(max_workers=args.jobs) as executor:
            summaries = list(executor.map(_simulate_to_files, *zip(*jobs)))
    else:
        summaries = [_simulate_to_files(*job) for job in jobs]

    for (_, _, _, path), summary in zip(jobs, summaries):
        _out(
            f'{summary["policy"]}: {summary["iterations"]} iterations, '
            f'saving ratio {summary["saving_ratio"]:.1%}, valley fraction {summary["valley_fraction"]:.3f} -> {path}'
        )
    return 0


def _report(args: argparse.Namespace) -> int:
    result = report([load_trace(path) for path in args.input], ValleyConfig(args.alpha))
    for path in write_report(result, args.output):
        _out(f'wrote {path}')
    for name, summary in result.summaries.items():
        _out(
            f'{name}: saving ratio {summary["saving_ratio"]:.1%}, '
            f'mean tokens/iteration {summary["mean_tokens_per_iteration"]:.1f}, '
            f'valley fraction {summary["valley_fraction"]:.3f}'
        )
    return 0


def _attn_selftest(args: argparse.Namespace) -> int:
    result = run_selftest(args.instances, args.seed)
    document = json.dumps(result, indent=2, sort_keys=True)
    if args.output is not None:
        args.output.write_text(document + '\n', encoding='utf-8')
    _out(document)
    return 0 if result['passed'] else 1


def _add_seed(parser: argparse.ArgumentParser) -> None:
    # argparse runs `type` over string defaults too, so a bad environment value is a usage error
    parser.add_argument(
        '--seed',
        type=int,
        default=os.environ.get(SEED_ENV_VAR, str(DEFAULT_SEED)),
        help=f'random seed (default: ${SEED_ENV_VAR} or {DEFAULT_SEED})',
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='prefixbatch', description='Prefix-sharing batch planning and simulation.')
    parser.add_argument('-v', '--verbose', action='store_true', help='log debug messages to stderr')
    commands = parser.add_subparsers(dest='command', required=True)

    gen = commands.add_parser('gen', help='generate a synthetic workload')
    gen.add_argument('--kind', choices=('microbenchmark', 'industry'), default='microbenchmark')
    gen.add_argument('--prefix-len', type=int)
    gen.add_argument('--distinct-len', type=int)
    gen.add_argument('--sharing-degree', type=int)
    gen.add_argument('--num-groups', type=int)
    gen.add_argument('--output-len', type=int)
    gen.add_argument('--shuffle', action=argparse.BooleanOptionalAction, default=False)
    gen.add_argument('--shuffle-seed', type=int, help='defaults to --seed')
    gen.add_argument('--num-requests', type=int, default=INDUSTRY_NUM_REQUESTS)
    gen.add_argument('--mean-prefix-len', type=float, default=INDUSTRY_MEAN_PREFIX_LEN)
    gen.add_argument('--mean-distinct-len', type=float, default=INDUSTRY_MEAN_DISTINCT_LEN)
    gen.add_argument('--mean-sharing-degree', type=float, default=INDUSTRY_MEAN_SHARING_DEGREE)
    _add_seed(gen)
    gen.add_argument('-o', '--output', type=Path, required=True)
    gen.set_defaults(handler=_gen)

    plan_ = commands.add_parser('plan', help='group a workload into prefix-sharing groups')
    plan_.add_argument('-i', '--input', type=Path, required=True)
    plan_.add_argument('-o', '--output', type=Path, required=True)
    plan_.add_argument('--show-tree', action='store_true', help='print the enlarged prefix tree')
    plan_.set_defaults(handler=_plan)

    sim = commands.add_parser('simulate', help='simulate continuous batching of a workload or groups file')
    sim.add_argument('--policy', action='append', choices=[policy.value for policy in Policy])
    sim.add_argument('-i', '--input', type=Path, required=True)
    sim.add_argument('-o', '--output', type=Path, required=True)
    sim.add_argument('--total-blocks', type=int, default=DEFAULT_TOTAL_BLOCKS)
    sim.add_argument('--chunk-size', type=int, default=DEFAULT_CHUNK_SIZE)
    sim.add_argument('--block-size', type=int, default=DEFAULT_BLOCK_SIZE)
    sim.add_argument('--mem-threshold', type=int, help='defaults to --total-blocks')
    sim.add_argument('--request-cap', type=int, default=DEFAULT_REQUEST_CAP)
    sim.add_argument('--lru-blocks', type=int, default=0)
    sim.add_argument('--reorder', action=argparse.BooleanOptionalAction, default=True)
    sim.add_argument(
        '--memory-centric',
        action=argparse.BooleanOptionalAction,
        default=True,
        help='admit by KV memory alone; when off --request-cap also binds batchllm',
    )
    sim.add_argument(
        '--prefix-sharing',
        action=argparse.BooleanOptionalAction,
        default=True,
        help='when off batchllm gives every request a group of its own',
    )
    sim.add_argument('--max-new-groups', type=int, help='cap on groups admitted per iteration')
    sim.add_argument('--alpha', type=float, default=DEFAULT_VALLEY_ALPHA, help='valley cutoff as a share of the chunk')
    sim.add_argument('--jobs', type=int, default=1, help='worker processes when several policies are given')
    sim.set_defaults(handler=_simulate)

    rep = commands.add_parser('report', help='compare simulation traces of one workload')
    rep.add_argument('-i', '--input', type=Path, nargs='+', required=True)
    rep.add_argument('-o', '--output', type=Path, required=True, help='output directory')
    rep.add_argument('--alpha', type=float, default=DEFAULT_VALLEY_ALPHA)
    rep.set_defaults(handler=_report)

    attn = commands.add_parser('attn-selftest', help='check the attention reference against naive attention')
    attn.add_argument('--instances', type=int, default=100)
    _add_seed(attn)
    attn.add_argument('-o', '--output', type=Path, help='also write the JSON report here')
    attn.set_defaults(handler=_attn_selftest)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command and return its exit status: 0 ok, 1 invalid input, 2 usage error."""
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as error:
        return error.code if isinstance(error.code, int) else 2
    handler = configure_cli_logging(args.verbose)
    try:
        return args.handler(args)
    except (PrefixBatchError, OSError) as error:
        sys.stderr.write(f'prefixbatch: error: {error}\n')
        return 1
    finally:
        reset_cli_logging(handler)


def main() -> None:
    sys.exit(run())
