from prefixbatch.prefix_tree import build_tree, extract_groups, maximize_reuse, optimal_partition_oracle, plan
from prefixbatch.scheduler import Policy, SchedulerConfig, simulate
from prefixbatch.types import PrefixSharingGroup, Request, Workload
from prefixbatch.workload import SyntheticSpec, generate_microbenchmark, read_workload, write_workload

__all__ = [
    'Policy',
    'PrefixSharingGroup',
    'Request',
    'SchedulerConfig',
    'SyntheticSpec',
    'Workload',
    'build_tree',
    'extract_groups',
    'generate_microbenchmark',
    'maximize_reuse',
    'optimal_partition_oracle',
    'plan',
    'read_workload',
    'simulate',
    'write_workload',
]
