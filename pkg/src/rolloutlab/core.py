"""Shared domain types, deterministic RNG, and sample validation.

Everything downstream (rollouts, the objective, the event simulator) shares
these value objects. They are immutable: "updating" a sample means building a
new one via the ``with_*`` helpers, so snapshots can be shared freely across
threads or worker pools.

The RNG is a counter-based SplitMix64 stream. State is a 64-bit counter that
advances by the golden-ratio increment 0x9E3779B97F4A7C15 and is scrambled by
the standard xor-shift/multiply finalizer (0xBF58476D1CE4E5B9,
0x94D049BB133111EB). All arithmetic is masked integer math, so streams are
bit-identical across platforms. Sub-streams are derived from (seed, label),
never from draw position: ``make_rng(7).split("rollout")`` is the same stream
no matter how many draws happened on the parent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import TYPE_CHECKING, Iterable, Sequence, Union

if TYPE_CHECKING:  # pragma: no cover
    from .toy_env import ParamTable

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

# Simulation time is an abstract non-negative tick count. The simulator uses
# exact rationals so event ordering never depends on float rounding.
Tick = Union[int, Fraction]

RngLabel = Union[int, str]


def _mix64(z: int) -> int:
    z &= _MASK64
    z ^= z >> 30
    z = (z * _MIX1) & _MASK64
    z ^= z >> 27
    z = (z * _MIX2) & _MASK64
    z ^= z >> 31
    return z


def _label_hash(label: RngLabel) -> int:
    h = _FNV_OFFSET
    for b in repr(label).encode("utf-8"):
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


class Rng:
    """Deterministic SplitMix64 stream with key-derived splitting."""

    __slots__ = ("seed", "_counter")

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self._counter = self.seed

    def next_u64(self) -> int:
        self._counter = (self._counter + _GAMMA) & _MASK64
        return _mix64(self._counter)

    def uniform(self) -> float:
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * 2.0**-53

    def normal(self) -> float:
        """Standard normal via Box-Muller (consumes exactly two draws)."""
        u1 = 1.0 - self.uniform()  # in (0, 1], keeps log finite
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def randrange(self, n: int) -> int:
        """Integer in [0, n). Modulo bias is negligible for n << 2**64."""
        if n <= 0:
            raise ValueError(f"randrange needs n >= 1, got {n}")
        return self.next_u64() % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randrange(i + 1)
            items[i], items[j] = items[j], items[i]

    def split(self, label: RngLabel) -> "Rng":
        """Independent child stream keyed by (this stream's seed, label)."""
        return Rng(_mix64(self.seed ^ _label_hash(label)))


def make_rng(seed: int, label: RngLabel | None = None) -> Rng:
    """Root stream for ``seed``, optionally pre-split by ``label``."""
    rng = Rng(seed)
    return rng if label is None else rng.split(label)


class SampleStatus(Enum):
    IN_FLIGHT = "in_flight"
    COMPLETE = "complete"
    TRUNCATED = "truncated"


class RewardKind(Enum):
    PASS = "pass"
    FAIL = "fail"
    GRADE_ERROR = "grade_error"


@dataclass(frozen=True)
class RewardOutcome:
    """Grading verdict. GradeError carries no usable score; consumers mask it."""

    kind: RewardKind
    raw_score: float | None = None

    @staticmethod
    def passed() -> "RewardOutcome":
        return RewardOutcome(RewardKind.PASS, 1.0)

    @staticmethod
    def failed() -> "RewardOutcome":
        return RewardOutcome(RewardKind.FAIL, 0.0)

    @staticmethod
    def grade_error() -> "RewardOutcome":
        return RewardOutcome(RewardKind.GRADE_ERROR, None)

    @property
    def graded(self) -> bool:
        """True when the verdict is usable (Pass or Fail)."""
        return self.kind is not RewardKind.GRADE_ERROR


@dataclass(frozen=True)
class Prompt:
    prompt_id: int
    payload: object  # task instance, see toy_env.TaskInstance
    ground_truth: tuple[int, ...]
    difficulty: int = 1

    def __post_init__(self):
        if len(self.ground_truth) == 0:
            raise ValueError("ground_truth must be non-empty")
        if self.difficulty < 1:
            raise ValueError("difficulty must be a positive integer")


@dataclass(frozen=True)
class Sample:
    """One rollout: tokens, engine log-probs, provenance, and grading state.

    ``infer_logps`` come from the engine that produced the tokens;
    ``train_logps`` stay None until the experience-maker recompute.
    ``gen_temperature`` records the sampling temperature so the recompute is
    self-contained.
    """

    prompt_id: int
    context_id: int
    version_id: int
    tokens: tuple[int, ...]
    infer_logps: tuple[float, ...]
    status: SampleStatus
    t_start: Tick
    t_end: Tick | None = None
    train_logps: tuple[float, ...] | None = None
    reward: RewardOutcome | None = None
    gen_temperature: float = 1.0

    def with_train_logps(self, logps: Sequence[float]) -> "Sample":
        return replace(self, train_logps=tuple(logps))

    def with_reward(self, reward: RewardOutcome) -> "Sample":
        return replace(self, reward=reward)


def validate_sample(s: Sample) -> list[str]:
    """Return every invariant violation; an empty list means ok."""
    violations: list[str] = []
    if s.status is not SampleStatus.IN_FLIGHT:
        if len(s.infer_logps) != len(s.tokens):
            violations.append("logp length mismatch")
    if s.status is SampleStatus.IN_FLIGHT:
        if s.reward is not None:
            violations.append("reward before completion")
        if s.train_logps is not None:
            violations.append("train logps before completion")
    if s.train_logps is not None and len(s.train_logps) != len(s.tokens):
        violations.append("train logp length mismatch")
    if s.t_start < 0:
        violations.append("negative start time")
    if s.t_end is not None and s.t_end < s.t_start:
        violations.append("t_end before t_start")
    if s.version_id < 0:
        violations.append("negative version id")
    if s.reward is not None and s.reward.kind is RewardKind.GRADE_ERROR and s.reward.raw_score is not None:
        violations.append("grade error carries score")
    return violations


@dataclass(frozen=True)
class Group:
    """Exactly G samples for one prompt; the unit of advantages and filtering."""

    prompt_id: int
    samples: tuple[Sample, ...]

    def __post_init__(self):
        if len(self.samples) < 2:
            raise ValueError("a group needs G >= 2 samples")
        if any(s.prompt_id != self.prompt_id for s in self.samples):
            raise ValueError("all samples in a group must share prompt_id")

    @property
    def size(self) -> int:
        return len(self.samples)

    @property
    def birth_version(self) -> int:
        return max(s.version_id for s in self.samples)

    def with_samples(self, samples: Iterable[Sample]) -> "Group":
        return Group(self.prompt_id, tuple(samples))


@dataclass(frozen=True)
class PolicyVersion:
    """A versioned parameter snapshot; the unit of staleness accounting."""

    version_id: int
    params: "ParamTable"
    created_at: Tick = 0

    def __post_init__(self):
        if self.version_id < 0:
            raise ValueError("version_id must be non-negative")
        if self.created_at < 0:
            raise ValueError("created_at must be non-negative")


class VersionRegistry:
    """Hands out strictly increasing version ids and keeps live snapshots."""

    def __init__(self):
        self._next_id = 0
        self._live: dict[int, PolicyVersion] = {}

    def register(self, params: "ParamTable", created_at: Tick = 0) -> PolicyVersion:
        version = PolicyVersion(self._next_id, params, created_at)
        self._next_id += 1
        self._live[version.version_id] = version
        return version

    def get(self, version_id: int) -> PolicyVersion:
        return self._live[version_id]

    def evict(self, version_id: int) -> None:
        del self._live[version_id]

    @property
    def newest_id(self) -> int:
        if not self._live:
            raise LookupError("no live versions")
        return self._next_id - 1

    @property
    def live_ids(self) -> list[int]:
        return sorted(self._live)
