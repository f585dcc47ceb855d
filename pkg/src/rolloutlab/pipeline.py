"""Streaming sample intake: online filtering, staleness, replay, assembly.

Groups arrive in completion order. Uniformly-correct and uniformly-wrong
groups are filtered out on arrival (their prompts go back to the queue, the
with-replacement guarantee), kept groups accumulate until a batch's worth is
available, and a replay buffer can contribute a configured fraction of each
batch from earlier oversampled groups, subject to the staleness bound.

Filter decisions are made once, at grading time; reused buffer entries are
never re-filtered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator

from .core import Group, RewardKind, Rng


class FilterDecision(Enum):
    KEEP = "keep"
    DISCARD_ALL_CORRECT = "discard_all_correct"
    DISCARD_ALL_WRONG = "discard_all_wrong"
    DISCARD_UNGRADABLE = "discard_ungradable"


class StalenessDecision(Enum):
    REUSE = "reuse"
    REGENERATE = "regenerate"


@dataclass(frozen=True)
class StalenessPolicy:
    max_staleness: int = 2

    def __post_init__(self):
        if self.max_staleness < 0:
            raise ValueError("max_staleness must be >= 0")


def online_filter(group: Group) -> FilterDecision:
    """Keep only groups with mixed outcomes among their graded samples."""
    for s in group.samples:
        if s.reward is None:
            raise ValueError(f"ungraded sample in group for prompt {group.prompt_id}")
    kinds = {s.reward.kind for s in group.samples if s.reward.graded}
    if not kinds:
        return FilterDecision.DISCARD_UNGRADABLE
    if kinds == {RewardKind.PASS}:
        return FilterDecision.DISCARD_ALL_CORRECT
    if kinds == {RewardKind.FAIL}:
        return FilterDecision.DISCARD_ALL_WRONG
    return FilterDecision.KEEP


def staleness_check(group: Group, current_version: int, policy: StalenessPolicy) -> StalenessDecision:
    """Reuse iff the group is at most max_staleness versions behind."""
    birth = group.birth_version
    if birth > current_version:
        raise ValueError(f"group born at version {birth} is ahead of current {current_version}")
    if current_version - birth <= policy.max_staleness:
        return StalenessDecision.REUSE
    return StalenessDecision.REGENERATE


@dataclass
class ReplayBuffer:
    """FIFO-bounded store of kept groups, re-mixed into later batches."""

    capacity: int
    reuse_ratio: float
    entries: list[Group] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if not 0.0 <= self.reuse_ratio < 1.0:
            raise ValueError("reuse_ratio must be in [0, 1)")

    def insert(self, group: Group) -> None:
        self.entries.append(group)
        while len(self.entries) > self.capacity:
            self.entries.pop(0)  # FIFO eviction keeps average staleness low

    def drop_expired(self, current_version: int, policy: StalenessPolicy) -> list[Group]:
        """Remove and return entries past the staleness bound."""
        expired = [
            g
            for g in self.entries
            if staleness_check(g, current_version, policy) is StalenessDecision.REGENERATE
        ]
        if expired:
            self.entries = [g for g in self.entries if g not in expired]
        return expired

    def valid_count(self, current_version: int, policy: StalenessPolicy) -> int:
        return sum(
            1
            for g in self.entries
            if staleness_check(g, current_version, policy) is StalenessDecision.REUSE
        )


def buffer_mix(
    buffer: ReplayBuffer,
    fresh: list[Group],
    batch_groups: int,
    current_version: int,
    policy: StalenessPolicy,
    rng: Rng,
) -> list[Group] | None:
    """Compose a batch of floor(reuse_ratio * batch_groups) replayed groups
    plus fresh ones, in seeded-shuffle order.

    Drawn buffer entries are removed; fresh groups beyond what the batch needs
    are stored in the buffer. Returns None (leaving fresh groups and the
    buffer's valid entries untouched) when there are too few fresh groups.
    """
    if batch_groups < 1:
        raise ValueError("batch_groups must be >= 1")
    buffer.drop_expired(current_version, policy)

    want_reuse = math.floor(buffer.reuse_ratio * batch_groups)
    n_reuse = min(want_reuse, len(buffer.entries))
    fresh_needed = batch_groups - n_reuse
    if len(fresh) < fresh_needed:
        return None

    reused: list[Group] = []
    for _ in range(n_reuse):
        reused.append(buffer.entries.pop(rng.randrange(len(buffer.entries))))

    batch = reused + fresh[:fresh_needed]
    for overflow in fresh[fresh_needed:]:
        buffer.insert(overflow)

    rng.shuffle(batch)
    return batch


@dataclass(frozen=True)
class AssemblyResult:
    """Outcome of offering one completed group to the assembler."""

    decision: FilterDecision
    batch: list[Group] | None
    dropped_stale: tuple[Group, ...]
    reused_count: int = 0


class BatchAssembler:
    """Counts kept groups and emits a batch the moment enough are on hand.

    The staleness gate runs at emission time: pending groups that fell behind
    are dropped (their prompts are the caller's to regenerate) and the batch
    waits for more arrivals.
    """

    def __init__(
        self,
        batch_groups: int,
        policy: StalenessPolicy,
        buffer: ReplayBuffer | None = None,
        rng: Rng | None = None,
    ):
        if batch_groups < 1:
            raise ValueError("batch_groups must be >= 1")
        self.batch_groups = batch_groups
        self.policy = policy
        self.buffer = buffer
        self.rng = rng if rng is not None else Rng(0)
        self.pending: list[Group] = []

    def _drop_stale_pending(self, current_version: int) -> tuple[Group, ...]:
        stale = tuple(
            g
            for g in self.pending
            if staleness_check(g, current_version, self.policy) is StalenessDecision.REGENERATE
        )
        if stale:
            self.pending = [g for g in self.pending if g not in stale]
        return stale

    def _try_emit(self, current_version: int) -> tuple[list[Group] | None, int]:
        if self.buffer is None:
            if len(self.pending) >= self.batch_groups:
                batch = self.pending[: self.batch_groups]
                self.pending = self.pending[self.batch_groups :]
                self.rng.shuffle(batch)
                return batch, 0
            return None, 0

        self.buffer.drop_expired(current_version, self.policy)
        n_reuse = min(
            math.floor(self.buffer.reuse_ratio * self.batch_groups), len(self.buffer.entries)
        )
        if len(self.pending) < self.batch_groups - n_reuse:
            return None, 0
        batch = buffer_mix(
            self.buffer, self.pending, self.batch_groups, current_version, self.policy, self.rng
        )
        assert batch is not None  # sized above
        self.pending = []
        return batch, n_reuse

    def offer(self, group: Group, current_version: int) -> AssemblyResult:
        """Filter one arrival; emit a batch when it fills."""
        decision = online_filter(group)
        if decision is not FilterDecision.KEEP:
            return AssemblyResult(decision, None, ())
        self.pending.append(group)
        dropped = self._drop_stale_pending(current_version)
        batch, reused = self._try_emit(current_version)
        return AssemblyResult(decision, batch, dropped, reused)


def assemble_batch(
    completion_stream: Iterable[Group],
    batch_size_groups: int,
    policy: StalenessPolicy,
    current_version: int = 0,
    buffer: ReplayBuffer | None = None,
    rng: Rng | None = None,
) -> Iterator[list[Group]]:
    """Drive a BatchAssembler over a completion-ordered stream of graded
    groups, yielding each batch as it fills."""
    assembler = BatchAssembler(batch_size_groups, policy, buffer, rng)
    for group in completion_stream:
        result = assembler.offer(group, current_version)
        if result.batch is not None:
            yield result.batch
