from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from prefixbatch.constants import MAX_TOKEN_ID
from prefixbatch.errors import ValidationError

if TYPE_CHECKING:
    from typing import Iterator, Tuple


def _check_tokens(owner: str, tokens: Tuple[int, ...], allow_empty: bool) -> None:
    if not tokens:
        if allow_empty:
            return
        raise ValidationError(f'{owner}: token sequence must not be empty')
    if min(tokens) < 0 or max(tokens) > MAX_TOKEN_ID:
        raise ValidationError(f'{owner}: token ids must be in [0, {MAX_TOKEN_ID}]')


@dataclass(frozen=True)
class Request:
    """A prompt plus the number of tokens it will decode.

    `output_len` is ground truth for the simulator; ordering never looks at it.
    """

    id: str
    tokens: Tuple[int, ...]
    output_len: int

    def __post_init__(self) -> None:
        if not isinstance(self.tokens, tuple):
            object.__setattr__(self, 'tokens', tuple(self.tokens))
        _check_tokens(f'request {self.id!r}', self.tokens, allow_empty=False)
        if self.output_len < 1:
            raise ValidationError(f'request {self.id!r}: output_len must be >= 1, got {self.output_len}')

    @property
    def prompt_len(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class Workload:
    """An ordered collection of requests with unique ids."""

    requests: Tuple[Request, ...] = ()

    def __post_init__(self) -> None:
        if not isinstance(self.requests, tuple):
            object.__setattr__(self, 'requests', tuple(self.requests))
        seen = set()
        for request in self.requests:
            if request.id in seen:
                raise ValidationError(f'duplicate request id {request.id!r}')
            seen.add(request.id)

    def __len__(self) -> int:
        return len(self.requests)

    def __iter__(self) -> Iterator[Request]:
        return iter(self.requests)

    @property
    def logical_prefill_tokens(self) -> int:
        """Prompt tokens a scheduler without any prefix reuse would process."""
        return sum(request.prompt_len for request in self.requests)


@dataclass(frozen=True)
class GroupMember:
    """One request of a prefix-sharing group, stored as its distinct suffix."""

    id: str
    suffix: Tuple[int, ...]
    output_len: int

    def __post_init__(self) -> None:
        if not isinstance(self.suffix, tuple):
            object.__setattr__(self, 'suffix', tuple(self.suffix))
        _check_tokens(f'member {self.id!r}', self.suffix, allow_empty=True)
        if self.output_len < 1:
            raise ValidationError(f'member {self.id!r}: output_len must be >= 1, got {self.output_len}')


@dataclass(frozen=True)
class PrefixSharingGroup:
    """A shared prefix and the requests reusing it; the unit the scheduler works in.

    Singleton groups carry an empty prefix and the full prompt as the member suffix.
    """

    prefix: Tuple[int, ...]
    members: Tuple[GroupMember, ...]
    group_id: str = field(default='', compare=False)

    def __post_init__(self) -> None:
        if not isinstance(self.prefix, tuple):
            object.__setattr__(self, 'prefix', tuple(self.prefix))
        if not isinstance(self.members, tuple):
            object.__setattr__(self, 'members', tuple(self.members))
        if not self.members:
            raise ValidationError(f'group {self.group_id!r} has no members')
        _check_tokens(f'group {self.group_id!r} prefix', self.prefix, allow_empty=True)
        ids = [member.id for member in self.members]
        if len(set(ids)) != len(ids):
            raise ValidationError(f'group {self.group_id!r} has duplicate member ids')
        for member in self.members:
            if not self.prefix and not member.suffix:
                raise ValidationError(f'member {member.id!r} of group {self.group_id!r} has an empty prompt')

    @property
    def prefix_len(self) -> int:
        return len(self.prefix)

    @property
    def distinct_tokens(self) -> int:
        return sum(len(member.suffix) for member in self.members)

    @property
    def prefill_tokens(self) -> int:
        """Tokens actually processed for this group: the prefix once, every suffix once."""
        return self.prefix_len + self.distinct_tokens

    @property
    def logical_tokens(self) -> int:
        return len(self.members) * self.prefix_len + self.distinct_tokens

    @property
    def saved_tokens(self) -> int:
        return (len(self.members) - 1) * self.prefix_len

    def prompt(self, member: GroupMember) -> Tuple[int, ...]:
        return self.prefix + member.suffix

    def requests(self) -> Tuple[Request, ...]:
        return tuple(Request(member.id, self.prompt(member), member.output_len) for member in self.members)
