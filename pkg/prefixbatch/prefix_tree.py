"""
Global prefix identification.

A compact prefix tree is built over every prompt of the batch, then enlarged bottom-up so that the
first level of the tree (the children of the root) carries as many reusable tokens as possible.
Each first-level node then becomes one prefix-sharing group; deeper levels are expanded into the
members' distinct suffixes.

Forking grandchild `g` of child `c` into a new first-level node changes the first-level saving by
`(leaves(g) - 1) * tokens(g) - tokens(c)`, i.e. gain minus penalty, so the strict `gain > penalty`
test accepts exactly the forks that improve the saving.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, NamedTuple

from prefixbatch.constants import ORACLE_MAX_REQUESTS
from prefixbatch.errors import PrefixBatchError, ValidationError
from prefixbatch.logger import logger
from prefixbatch.types import GroupMember, PrefixSharingGroup
from prefixbatch.utils import common_prefix_length
from prefixbatch.workload import WorkloadParseError

if TYPE_CHECKING:
    from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

    from prefixbatch.types import Workload

    Signature = Tuple[Tuple[int, ...], Tuple[str, ...], Tuple['Signature', ...]]


class PartitionCapacityError(PrefixBatchError):
    """Raised when the exhaustive partition search is asked for too many requests."""

    pass


@dataclass(eq=False)
class TreeNode:
    """A node of the compact prefix tree.

    `tokens` is the edge label leading into the node, `leaf_ids` the requests whose prompt ends
    exactly here and `leaves` the number of requests in the whole subtree.
    """

    tokens: Tuple[int, ...]
    children: List[TreeNode] = field(default_factory=list)
    leaf_ids: Tuple[str, ...] = ()
    leaves: int = 0

    def signature(self) -> Signature:
        """Return a nested tuple describing the subtree, for structural comparison."""
        return self.tokens, self.leaf_ids, tuple(child.signature() for child in self.children)


@dataclass(eq=False)
class PrefixTree:
    """The root of a compact prefix tree plus the output lengths of the requests it spells."""

    root: TreeNode
    output_lens: Dict[str, int]
    forks: int = 0

    def nodes(self) -> Iterable[TreeNode]:
        """Yield every non-root node in pre-order."""
        stack = list(reversed(self.root.children))
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def signature(self) -> Signature:
        return self.root.signature()

    def paths(self) -> Dict[str, Tuple[int, ...]]:
        """Return the token sequence spelled from the root to each request's node."""
        spelled: Dict[str, Tuple[int, ...]] = {}
        stack: List[Tuple[TreeNode, Tuple[int, ...]]] = [(self.root, ())]
        while stack:
            node, path = stack.pop()
            path = path + node.tokens
            for request_id in node.leaf_ids:
                spelled[request_id] = path
            stack.extend((child, path) for child in node.children)
        return spelled


def _canonical(children: List[TreeNode]) -> List[TreeNode]:
    return sorted(children, key=lambda node: node.tokens)


def _count_leaves(root: TreeNode) -> None:
    order = []
    stack = [root]
    while stack:
        node = stack.pop()
        order.append(node)
        stack.extend(node.children)
    for node in reversed(order):
        node.leaves = len(node.leaf_ids) + sum(child.leaves for child in node.children)


def build_tree(workload: Workload) -> PrefixTree:
    """Build the compact prefix tree over every prompt of the workload.

    Prompts are sorted first, so each node's span is the common prefix of the first and last
    prompt of its block and the children come out in canonical (first token) order whatever the
    input order was.
    """
    entries = sorted((request.tokens, request.id) for request in workload.requests)
    root = TreeNode(tokens=())
    stack: List[Tuple[List[TreeNode], List[Tuple[Tuple[int, ...], str]], int]] = [(root.children, entries, 0)]
    while stack:
        siblings, block_entries, depth = stack.pop()
        start = 0
        while start < len(block_entries):
            first = block_entries[start][0][depth]
            stop = start + 1
            while stop < len(block_entries) and block_entries[stop][0][depth] == first:
                stop += 1
            block = block_entries[start:stop]
            end = depth + common_prefix_length(block[0][0], block[-1][0], depth)
            node = TreeNode(
                tokens=block[0][0][depth:end],
                leaf_ids=tuple(request_id for tokens, request_id in block if len(tokens) == end),
            )
            siblings.append(node)
            deeper = [entry for entry in block if len(entry[0]) > end]
            if deeper:
                stack.append((node.children, deeper, end))
            start = stop
    _count_leaves(root)
    output_lens = {request.id: request.output_len for request in workload.requests}
    logger.debug('Built prefix tree over %d requests with %d first-level nodes', len(workload), len(root.children))
    return PrefixTree(root=root, output_lens=output_lens)


def _clone(node: TreeNode) -> TreeNode:
    copy = TreeNode(tokens=node.tokens, leaf_ids=node.leaf_ids, leaves=node.leaves)
    stack = [(node, copy)]
    while stack:
        original, duplicate = stack.pop()
        for child in original.children:
            child_copy = TreeNode(tokens=child.tokens, leaf_ids=child.leaf_ids, leaves=child.leaves)
            duplicate.children.append(child_copy)
            stack.append((child, child_copy))
    return copy


def _recompact(node: TreeNode) -> None:
    if not node.leaf_ids and len(node.children) == 1:
        only = node.children[0]
        node.tokens = node.tokens + only.tokens
        node.leaf_ids = only.leaf_ids
        node.children = only.children


def _fork_children(node: TreeNode) -> int:
    """Fork every grandchild whose gain beats its parent's length into a child of `node`."""
    forks = 0
    result: List[TreeNode] = []
    for child in node.children:
        penalty = len(child.tokens)
        kept = []
        for grandchild in child.children:
            gain = (grandchild.leaves - 1) * len(grandchild.tokens)
            if gain > penalty:
                result.append(
                    TreeNode(
                        tokens=child.tokens + grandchild.tokens,
                        children=grandchild.children,
                        leaf_ids=grandchild.leaf_ids,
                        leaves=grandchild.leaves,
                    )
                )
                child.leaves -= grandchild.leaves
                forks += 1
            else:
                kept.append(grandchild)
        if len(kept) != len(child.children):
            child.children = kept
            _recompact(child)
        if child.leaves:
            result.append(child)
    node.children = _canonical(result)
    return forks


def maximize_reuse(tree: PrefixTree) -> PrefixTree:
    """Enlarge first-level prefixes bottom-up; the input tree is left untouched.

    Every node is processed after all of its descendants. Nodes created by a fork are not
    re-examined at the parent level.
    """
    root = _clone(tree.root)
    order = []
    stack = [root]
    while stack:
        node = stack.pop()
        order.append(node)
        stack.extend(node.children)
    forks = sum(_fork_children(node) for node in reversed(order))
    logger.debug('Maximized first-level reuse with %d forks', forks)
    return PrefixTree(root=root, output_lens=tree.output_lens, forks=tree.forks + forks)


def extract_groups(tree: PrefixTree) -> List[PrefixSharingGroup]:
    """Turn every first-level node into one prefix-sharing group.

    Nodes shared by at least two requests keep their span as the group prefix; single-request
    nodes become singleton groups with an empty prefix. Lower-level prefixes are expanded into
    the member suffixes.
    """
    groups = []
    for index, first_level in enumerate(tree.root.children):
        shared = first_level.leaves >= 2
        members = []
        start: Tuple[int, ...] = () if shared else first_level.tokens
        stack: List[Tuple[TreeNode, Tuple[int, ...]]] = [(first_level, start)]
        while stack:
            node, suffix = stack.pop()
            members.extend(
                GroupMember(request_id, suffix, tree.output_lens[request_id]) for request_id in node.leaf_ids
            )
            stack.extend((child, suffix + child.tokens) for child in reversed(node.children))
        prefix = first_level.tokens if shared else ()
        groups.append(PrefixSharingGroup(prefix=prefix, members=tuple(members), group_id=f'g{index}'))
    return groups


def saved_tokens(groups: Iterable[PrefixSharingGroup]) -> int:
    """Return the prefill tokens avoided by computing each group prefix once."""
    return sum(group.saved_tokens for group in groups)


def saving_ratio_static(groups: Sequence[PrefixSharingGroup]) -> float:
    """Return saved / logical prefill tokens for a set of groups covering a workload."""
    logical = sum(group.logical_tokens for group in groups)
    if not logical:
        return 0.0
    return saved_tokens(groups) / logical


def first_level_saved_tokens(tree: PrefixTree) -> int:
    return sum((child.leaves - 1) * len(child.tokens) for child in tree.root.children if child.leaves >= 2)


def multi_level_saved_tokens(tree: PrefixTree) -> int:
    """Saving if every shared node at every depth were reused, not just the first level."""
    return sum((node.leaves - 1) * len(node.tokens) for node in tree.nodes() if node.leaves >= 2)


def render_tree(tree: PrefixTree, max_tokens: int = 8) -> str:
    """Return an indented text dump of the tree."""
    lines = ['root']
    stack: List[Tuple[TreeNode, int]] = [(child, 1) for child in reversed(tree.root.children)]
    while stack:
        node, depth = stack.pop()
        shown = ','.join(str(token) for token in node.tokens[:max_tokens])
        if len(node.tokens) > max_tokens:
            shown += ',...'
        ids = f' ids={",".join(node.leaf_ids)}' if node.leaf_ids else ''
        lines.append(f'{"  " * depth}[{shown}] tokens={len(node.tokens)} leaves={node.leaves}{ids}')
        stack.extend((child, depth + 1) for child in reversed(node.children))
    return '\n'.join(lines)


class PartitionOptimum(NamedTuple):
    ratio: float
    partition: Tuple[Tuple[str, ...], ...]
    saved_tokens: int


def optimal_partition_oracle(workload: Workload) -> PartitionOptimum:
    """Find the partition of requests maximising sum((|block| - 1) * LCP(block)) exhaustively.

    Subset dynamic programming over bitmasks; only usable for tiny workloads.
    """
    requests = workload.requests
    count = len(requests)
    if count > ORACLE_MAX_REQUESTS:
        raise PartitionCapacityError(f'partition oracle handles at most {ORACLE_MAX_REQUESTS} requests, got {count}')
    if not count:
        return PartitionOptimum(0.0, (), 0)

    pair_lcp = [[common_prefix_length(a.tokens, b.tokens) for b in requests] for a in requests]
    full = (1 << count) - 1
    block_value = [0] * (full + 1)
    block_lcp = [0] * (full + 1)
    for mask in range(1, full + 1):
        low = (mask & -mask).bit_length() - 1
        high = mask.bit_length() - 1
        if low == high:
            block_lcp[mask] = requests[low].prompt_len
            continue
        block_lcp[mask] = min(block_lcp[mask ^ (1 << high)], pair_lcp[low][high])
        block_value[mask] = (bin(mask).count('1') - 1) * block_lcp[mask]

    best = [0] * (full + 1)
    choice = [0] * (full + 1)
    for mask in range(1, full + 1):
        low_bit = mask & -mask
        rest = mask ^ low_bit
        best_value, best_block = -1, low_bit
        sub = rest
        while True:
            block = sub | low_bit
            value = block_value[block] + best[mask ^ block]
            if value > best_value:
                best_value, best_block = value, block
            if not sub:
                break
            sub = (sub - 1) & rest
        best[mask], choice[mask] = best_value, best_block

    blocks = []
    mask = full
    while mask:
        block = choice[mask]
        blocks.append(tuple(requests[i].id for i in range(count) if block >> i & 1))
        mask ^= block
    return PartitionOptimum(best[full] / workload.logical_prefill_tokens, tuple(blocks), best[full])


@dataclass(frozen=True)
class PlanResult:
    """Output of the preprocessing step and the numbers reported about it."""

    groups: Tuple[PrefixSharingGroup, ...]
    saved_tokens: int
    logical_tokens: int
    naive_saved_tokens: int
    multi_level_saved_tokens: int
    forks: int
    seconds: float

    @property
    def saving_ratio(self) -> float:
        return self.saved_tokens / self.logical_tokens if self.logical_tokens else 0.0


def plan(workload: Workload) -> PlanResult:
    """Run build -> maximize_reuse -> extract_groups and time it."""
    started = time.perf_counter()
    tree = build_tree(workload)
    enlarged = maximize_reuse(tree)
    groups = tuple(extract_groups(enlarged))
    seconds = time.perf_counter() - started
    result = PlanResult(
        groups=groups,
        saved_tokens=saved_tokens(groups),
        logical_tokens=workload.logical_prefill_tokens,
        naive_saved_tokens=first_level_saved_tokens(tree),
        multi_level_saved_tokens=multi_level_saved_tokens(tree),
        forks=enlarged.forks,
        seconds=seconds,
    )
    logger.info(
        'Planned %d groups for %d requests in %.3fs (saving ratio %.4f)',
        len(groups),
        len(workload),
        seconds,
        result.saving_ratio,
    )
    return result


def write_groups(groups: Iterable[PrefixSharingGroup], path: Union[str, Path]) -> None:
    """Write one group per line: `prefix` plus `members` with `id`, `suffix` and `output_len`."""
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        for group in groups:
            record = {
                'prefix': list(group.prefix),
                'members': [
                    {'id': member.id, 'suffix': list(member.suffix), 'output_len': member.output_len}
                    for member in group.members
                ],
            }
            handle.write(json.dumps(record, separators=(',', ':')))
            handle.write('\n')


def _parse_group(record: object, index: int, path: Union[str, Path], line_number: int) -> PrefixSharingGroup:
    if not isinstance(record, dict) or 'prefix' not in record or 'members' not in record:
        raise WorkloadParseError(path, line_number, 'expected an object with "prefix" and "members"')
    prefix, members = record['prefix'], record['members']
    if not isinstance(prefix, list) or not all(type(token) is int for token in prefix):
        raise WorkloadParseError(path, line_number, 'field "prefix" must be an array of integers')
    if not isinstance(members, list):
        raise WorkloadParseError(path, line_number, 'field "members" must be an array')
    parsed = []
    for member in members:
        if not isinstance(member, dict) or not {'id', 'suffix', 'output_len'} <= member.keys():
            raise WorkloadParseError(path, line_number, 'members need "id", "suffix" and "output_len"')
        suffix = member['suffix']
        if not isinstance(suffix, list) or not all(type(token) is int for token in suffix):
            raise WorkloadParseError(path, line_number, 'field "suffix" must be an array of integers')
        if not isinstance(member['id'], str) or type(member['output_len']) is not int:
            raise WorkloadParseError(path, line_number, 'member "id" must be a string and "output_len" an integer')
        parsed.append((member['id'], tuple(suffix), member['output_len']))
    try:
        return PrefixSharingGroup(
            prefix=tuple(prefix),
            members=tuple(GroupMember(*fields) for fields in parsed),
            group_id=f'g{index}',
        )
    except ValidationError as error:
        raise WorkloadParseError(path, line_number, str(error)) from error


def read_groups(path: Union[str, Path]) -> List[PrefixSharingGroup]:
    """Read a groups file written by `write_groups`."""
    groups: List[PrefixSharingGroup] = []
    seen: Dict[str, int] = {}
    with open(path, encoding='utf-8') as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as error:
                raise WorkloadParseError(path, line_number, f'invalid JSON ({error.msg})') from error
            group = _parse_group(record, len(groups), path, line_number)
            for member in group.members:
                if member.id in seen:
                    raise ValidationError(f'{path}:{line_number}: request id {member.id!r} already in a previous group')
                seen[member.id] = line_number
            groups.append(group)
    return groups


def is_groups_record(line: str) -> Optional[bool]:
    """Tell a groups-file line from a workload-file line; None if it is neither."""
    try:
        record = json.loads(line)
    except json.JSONDecodeError:
        return None
    if not isinstance(record, dict):
        return None
    if 'prefix' in record:
        return True
    return False if 'tokens' in record else None
