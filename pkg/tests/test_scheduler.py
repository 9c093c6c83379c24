import pytest

from prefixbatch import scheduler
from prefixbatch.errors import ConfigurationError, ValidationError
from prefixbatch.metrics import mean_tokens_per_iteration, saving_ratio
from prefixbatch.prefix_tree import plan
from prefixbatch.scheduler import (
    EntryKind,
    Phase,
    Policy,
    SchedulerConfig,
    SchedulerStallError,
    SchedulerState,
    UnschedulableRequestError,
    form_token_batch,
    order_groups,
    simulate,
    singleton_groups,
    step,
)
from prefixbatch.trace import rows_from
from prefixbatch.types import GroupMember, PrefixSharingGroup, Request, Workload
from prefixbatch.workload import SyntheticSpec, generate_microbenchmark


def shared_group(prefix_len=6, group_id='g0'):
    return PrefixSharingGroup(
        tuple(range(1, prefix_len + 1)),
        (GroupMember('a', (100, 101), 1), GroupMember('b', (102,), 2)),
        group_id=group_id,
    )


def test_single_request_lifecycle():
    workload = Workload((Request('r', (1, 2, 3, 4, 5), 3),))
    config = SchedulerConfig(total_blocks=100, chunk_size=4, block_size=2, policy='fcfs_cap')
    trace = simulate(workload, config)
    assert trace.rows == rows_from(
        [
            (0, 4, 0, 4, 2, 1),
            (1, 1, 0, 1, 3, 1),
            (2, 1, 1, 0, 3, 1),
            (3, 1, 1, 0, 4, 1),
            (4, 1, 1, 0, 0, 0),
        ]
    )
    assert trace.n_processed_prefill_tokens == trace.n_logical_prefill_tokens == 5
    assert trace.n_reused_prefill_tokens == 0


def test_group_prefix_is_computed_once_before_the_members():
    config = SchedulerConfig(total_blocks=100, chunk_size=4, block_size=2)
    batches = []
    trace = simulate([shared_group()], config, observer=lambda batch, row, state: batches.append(batch))
    assert trace.rows == rows_from(
        [
            (0, 4, 0, 4, 2, 0),
            (1, 2, 0, 2, 3, 0),
            (2, 3, 0, 3, 5, 2),
            (3, 2, 2, 0, 4, 1),
            (4, 1, 1, 0, 0, 0),
        ]
    )
    assert [[entry.kind for entry in batch.entries] for batch in batches[:3]] == [
        [EntryKind.PREFIX_CHUNK],
        [EntryKind.PREFIX_CHUNK],
        [EntryKind.DISTINCT_CHUNK, EntryKind.DISTINCT_CHUNK],
    ]
    assert batches[0].admitted_groups == ('g0',)
    assert [admission.request_id for admission in batches[2].admissions] == ['a', 'b']
    assert trace.n_processed_prefill_tokens == 9
    assert trace.n_logical_prefill_tokens == 15


def test_form_token_batch_leaves_the_state_alone():
    config = SchedulerConfig(total_blocks=100, chunk_size=4, block_size=2)
    state = SchedulerState([shared_group()], config)
    first = form_token_batch(state, config)
    assert form_token_batch(state, config) == first
    assert state.iteration == 0
    assert state.committed_blocks == 0
    assert all(request.phase is Phase.WAITING for request in state.requests.values())

    step(state, config)
    assert state.iteration == 1
    assert state.committed_blocks == 3
    assert {request.phase for request in state.requests.values()} == {Phase.PREFIX_PENDING}


def test_form_token_batch_on_a_finished_state():
    config = SchedulerConfig(total_blocks=100, chunk_size=4, block_size=2)
    state = SchedulerState([shared_group()], config)
    while not state.finished:
        step(state, config)
    assert {request.phase for request in state.requests.values()} == {Phase.DONE}
    assert state.allocator.is_empty()
    assert state.committed_blocks == 0
    with pytest.raises(ValidationError):
        form_token_batch(state, config)


def test_member_without_suffix_goes_straight_to_decoding():
    group = PrefixSharingGroup((1, 2, 3, 4), (GroupMember('a', (), 2), GroupMember('b', (5,), 1)))
    trace = simulate([group], SchedulerConfig(total_blocks=100, chunk_size=8, block_size=2))
    assert trace.n_processed_prefill_tokens == 5
    assert trace.n_logical_prefill_tokens == 9
    assert trace.decode_tokens == 3
    # a decodes in the iteration it is admitted, next to b's distinct chunk
    assert [(row.decode_tokens, row.prefill_tokens) for row in trace.rows] == [(0, 4), (1, 1), (2, 0)]


def test_lone_member_without_suffix_stays_within_the_iteration_bound():
    group = PrefixSharingGroup((1, 2), (GroupMember('solo', (), 1),))
    trace = simulate([group], SchedulerConfig(total_blocks=10, chunk_size=1, block_size=1))
    assert trace.iterations == 3
    assert [row.total_tokens for row in trace.rows] == [1, 1, 1]


def test_stalled_simulation_stops_at_the_iteration_bound(monkeypatch):
    calls = []

    def stalled_step(state, config):
        calls.append(state.iteration)
        state.iteration += 1

    monkeypatch.setattr(scheduler, 'step', stalled_step)
    workload = Workload((Request('r', (1, 2, 3), 2),))
    with pytest.raises(SchedulerStallError):
        simulate(workload, SchedulerConfig(policy='fcfs_cap'))
    assert calls == [0, 1, 2, 3, 4]


def test_prefix_chunks_end_on_block_boundaries():
    group = PrefixSharingGroup(tuple(range(10)), (GroupMember('a', (50,), 1), GroupMember('b', (51,), 1)))
    batches = []
    simulate(
        [group],
        SchedulerConfig(total_blocks=100, chunk_size=7, block_size=4),
        observer=lambda batch, row, state: batches.append(batch),
    )
    assert [batch.entries[0].tokens for batch in batches[:2]] == [4, 6]


def test_prefix_chunk_smaller_than_a_block_still_progresses():
    group = PrefixSharingGroup(tuple(range(10)), (GroupMember('a', (50,), 1), GroupMember('b', (51,), 1)))
    batches = []
    simulate(
        [group],
        SchedulerConfig(total_blocks=100, chunk_size=7, block_size=8),
        observer=lambda batch, row, state: batches.append(batch),
    )
    assert [batch.entries[0].tokens for batch in batches[:2]] == [7, 3]


def test_request_cap_limits_requests_per_batch():
    workload = Workload(tuple(Request(f'r{index}', (index + 1,) * 3, 4) for index in range(6)))
    config = SchedulerConfig(total_blocks=100, chunk_size=64, block_size=2, policy='fcfs_cap', request_cap=2)
    counts = []
    simulate(workload, config, observer=lambda batch, row, state: counts.append(batch.request_count))
    assert max(counts) == 2


def decoding_backlog():
    """256 short requests that all decode after one iteration, then four long prompts still waiting."""
    short = [Request(f's{index}', (index % 7 + 1,) * 8, 100) for index in range(256)]
    long = [Request(f'l{index}', (index + 10,) * 1000, 100) for index in range(4)]
    return Workload(tuple(short + long))


@pytest.mark.parametrize(
    ('policy', 'memory_centric', 'expected'),
    [
        ('fcfs_cap', True, (256, 0, 256)),
        ('batchllm', False, (256, 0, 256)),
        ('batchllm', True, (256, 1792, 2048)),
    ],
)
def test_decodes_and_prefill_chunks_share_the_batch(policy, memory_centric, expected):
    config = SchedulerConfig(policy=policy, memory_centric=memory_centric)
    state = SchedulerState(singleton_groups(decoding_backlog()), config)
    step(state, config)
    assert len(state.decoding) == 256
    batch = form_token_batch(state, config)
    assert (batch.decode_tokens, batch.prefill_tokens, batch.total_tokens) == expected


def token_batching_configs():
    return {
        'memory_centric': SchedulerConfig(policy=Policy.BATCHLLM),
        'capped': SchedulerConfig(policy=Policy.BATCHLLM, memory_centric=False, reorder=False),
    }


def test_token_batching_with_and_without_prefix_sharing():
    workload = generate_microbenchmark(
        SyntheticSpec(prefix_len=64, distinct_len=16, sharing_degree=4, num_groups=150, output_len=64)
    )
    sources = {'shared': plan(workload).groups, 'unshared': singleton_groups(workload)}
    traces = {
        (sharing, batching): simulate(source, config)
        for sharing, source in sources.items()
        for batching, config in token_batching_configs().items()
    }
    for sharing in sources:
        memory_centric = traces[sharing, 'memory_centric']
        capped = traces[sharing, 'capped']
        assert mean_tokens_per_iteration(memory_centric) > mean_tokens_per_iteration(capped)
        assert memory_centric.iterations < capped.iterations
        assert memory_centric.n_processed_prefill_tokens == capped.n_processed_prefill_tokens
    for batching in token_batching_configs():
        assert saving_ratio(traces['shared', batching]) > 0
        assert saving_ratio(traces['unshared', batching]) == 0


def test_lru_reuses_blocks_of_a_finished_request():
    prefix = tuple(range(1, 33))
    workload = Workload((Request('a', prefix + (100,), 1), Request('b', prefix + (200,), 1)))
    config = SchedulerConfig(
        total_blocks=64, chunk_size=64, block_size=16, policy='fcfs_cap_lru', request_cap=1, lru_blocks=10
    )
    trace = simulate(workload, config)
    assert [row.total_tokens for row in trace.rows] == [33, 1, 1, 1]
    assert trace.n_reused_prefill_tokens == 32
    assert trace.n_processed_prefill_tokens == 34
    assert trace.n_logical_prefill_tokens == 66

    plain = simulate(workload, SchedulerConfig(total_blocks=64, chunk_size=64, block_size=16, policy='fcfs_cap'))
    assert plain.n_processed_prefill_tokens == 66


def test_lru_always_recomputes_the_last_prompt_block():
    prompt = tuple(range(1, 33))
    workload = Workload((Request('a', prompt, 1), Request('b', prompt, 1)))
    config = SchedulerConfig(
        total_blocks=64, chunk_size=64, block_size=16, policy='fcfs_cap_lru', request_cap=1, lru_blocks=10
    )
    trace = simulate(workload, config)
    assert trace.n_reused_prefill_tokens == 16
    assert trace.n_processed_prefill_tokens == 48


def test_lru_thrashes_when_alternating_prompts_do_not_fit():
    first = tuple(range(1, 34))
    second = tuple(range(101, 134))
    workload = Workload(
        (Request('a1', first, 1), Request('b1', second, 1), Request('a2', first, 1), Request('b2', second, 1))
    )
    config = SchedulerConfig(
        total_blocks=64, chunk_size=64, block_size=16, policy='fcfs_cap_lru', request_cap=1, lru_blocks=1
    )
    assert simulate(workload, config).n_reused_prefill_tokens == 0

    roomy = SchedulerConfig(
        total_blocks=64, chunk_size=64, block_size=16, policy='fcfs_cap_lru', request_cap=1, lru_blocks=4
    )
    assert simulate(workload, roomy).n_reused_prefill_tokens == 2 * 32


def test_unschedulable_request():
    workload = Workload((Request('huge', tuple(range(1, 40)), 10),))
    with pytest.raises(UnschedulableRequestError) as error:
        simulate(workload, SchedulerConfig(total_blocks=4, block_size=4, policy='fcfs_cap'))
    assert error.value.request_id == 'huge'
    assert error.value.needed_blocks == 13


def test_policy_and_source_must_agree():
    workload = Workload((Request('r', (1,), 1),))
    with pytest.raises(ValidationError):
        simulate(workload, SchedulerConfig(policy=Policy.BATCHLLM))
    with pytest.raises(ValidationError):
        simulate(singleton_groups(workload), SchedulerConfig(policy=Policy.FCFS_CAP))


def test_order_groups_puts_the_smallest_first():
    small = PrefixSharingGroup((1,), (GroupMember('s1', (2,), 1), GroupMember('s2', (3,), 1)), group_id='small')
    large = shared_group(prefix_len=20, group_id='large')
    assert [group.group_id for group in order_groups([large, small])] == ['small', 'large']

    reordered = SchedulerState([large, small], SchedulerConfig())
    assert [group.id for group in reordered.groups] == ['small', 'large']
    kept = SchedulerState([large, small], SchedulerConfig(reorder=False))
    assert [group.id for group in kept.groups] == ['large', 'small']


def test_duplicate_group_ids_are_renumbered():
    state = SchedulerState(
        [shared_group(group_id='x'), PrefixSharingGroup((), (GroupMember('c', (7,), 1),), group_id='x')],
        SchedulerConfig(reorder=False),
    )
    assert [group.id for group in state.groups] == ['g0', 'g1']


def test_request_in_two_groups_is_rejected():
    with pytest.raises(ValidationError):
        SchedulerState([shared_group(group_id='x'), shared_group(group_id='y')], SchedulerConfig())


def test_max_new_groups_per_iteration():
    groups = [
        PrefixSharingGroup((index + 1,), (GroupMember(f'a{index}', (50,), 1), GroupMember(f'b{index}', (51,), 1)))
        for index in range(5)
    ]
    admitted = []
    simulate(
        groups,
        SchedulerConfig(total_blocks=100, chunk_size=64, block_size=2, max_new_groups_per_iteration=1),
        observer=lambda batch, row, state: admitted.append(len(batch.admitted_groups)),
    )
    assert max(admitted) == 1
    assert sum(admitted) == 5


def test_memory_threshold_delays_groups():
    groups = [shared_group(prefix_len=8, group_id=f'g{index}') for index in range(1)] + [
        PrefixSharingGroup(tuple(range(20, 28)), (GroupMember('c', (1, 2), 3), GroupMember('d', (3,), 3)))
    ]
    config = SchedulerConfig(total_blocks=100, mem_threshold=8, chunk_size=64, block_size=2)
    trace = simulate(groups, config)
    assert max(row.blocks_used for row in trace.rows) <= 8
    assert trace.n_processed_prefill_tokens == 8 + 3 + 8 + 3


@pytest.mark.parametrize(
    'overrides',
    [
        {'chunk_size': 0},
        {'block_size': 0},
        {'total_blocks': 0},
        {'mem_threshold': 200, 'total_blocks': 100},
        {'request_cap': 0},
        {'lru_blocks': -1},
        {'max_new_groups_per_iteration': 0},
        {'policy': 'round_robin'},
    ],
)
def test_config_validation(overrides):
    with pytest.raises(ConfigurationError):
        SchedulerConfig(**overrides)


def test_threshold_defaults_to_total_blocks():
    config = SchedulerConfig(total_blocks=123)
    assert config.threshold == 123
    assert config.policy is Policy.BATCHLLM
    assert not config.capped
    assert SchedulerConfig(policy='fcfs_cap').capped
    assert SchedulerConfig(memory_centric=False).capped


def test_simulation_is_deterministic():
    groups = [shared_group(prefix_len=12, group_id='g0')]
    config = SchedulerConfig(total_blocks=100, chunk_size=5, block_size=2)
    assert simulate(groups, config) == simulate(groups, config)
