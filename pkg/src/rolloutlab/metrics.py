"""Evaluation formulas: unbiased pass@k, tool-necessity value and selection.

pass@k for one prompt with N samples and C correct is

    1 - (N-C choose k) / (N choose k)

computed through the equivalent product  1 - prod_{i=0..k-1} (N-C-i)/(N-i).
The product is evaluated in exact rational arithmetic and converted to float
once at the end, so results match the binomial definition exactly for integer
inputs (and the product form never overflows the way raw binomials can).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

from .core import RewardKind, Sample


@dataclass(frozen=True)
class PassAtKInput:
    n_samples: int
    n_correct: int
    k: int

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not 0 <= self.n_correct <= self.n_samples:
            raise ValueError("n_correct must be in [0, n_samples]")
        if not 1 <= self.k <= self.n_samples:
            raise ValueError("k must be in [1, n_samples]")


def pass_at_k(inp: PassAtKInput) -> float:
    """Probability that at least one of k drawn samples is correct."""
    prod = Fraction(1)
    for i in range(inp.k):
        numer = inp.n_samples - inp.n_correct - i
        if numer <= 0:
            return 1.0  # cannot fill k slots with incorrect samples
        prod *= Fraction(numer, inp.n_samples - i)
    return float(1 - prod)


def mean_pass_at_k(correct_counts: Sequence[int], n_samples: int, k: int) -> float:
    """Average pass@k over prompts sharing the same sample count."""
    if not correct_counts:
        raise ValueError("need at least one prompt")
    vals = [pass_at_k(PassAtKInput(n_samples, c, k)) for c in correct_counts]
    return sum(vals) / len(vals)


@dataclass(frozen=True)
class ToolNecessityStats:
    """Pass rates with and without tool access, and their gap."""

    s_with: float
    s_without: float
    v: float

    def __post_init__(self):
        if not 0.0 <= self.s_with <= 1.0:
            raise ValueError("s_with must be in [0, 1]")
        if not 0.0 <= self.s_without <= 1.0:
            raise ValueError("s_without must be in [0, 1]")
        if not -1.0 <= self.v <= 1.0:
            raise ValueError("v must be in [-1, 1]")


def tool_necessity(s_with: float, s_without: float) -> ToolNecessityStats:
    """Performance gain from allowing tool use on a query."""
    return ToolNecessityStats(s_with, s_without, s_with - s_without)


def select_tool_queries(
    stats: Mapping[int, ToolNecessityStats], tau1: float, tau2: float, tau3: float
) -> list[int]:
    """Queries where tools are indispensable: v > tau1, s_with > tau2, and
    s_without < tau3, all strict. Output is sorted, so input order never
    matters."""
    if not -1.0 <= tau1 <= 1.0:
        raise ValueError("tau1 must be in [-1, 1]")
    if not 0.0 <= tau2 <= 1.0 or not 0.0 <= tau3 <= 1.0:
        raise ValueError("tau2 and tau3 must be in [0, 1]")
    return sorted(
        q
        for q, st in stats.items()
        if st.v > tau1 and st.s_with > tau2 and st.s_without < tau3
    )


def pass_rate(samples: Sequence[Sample]) -> float:
    """Pass fraction among graded samples; GradeError samples are excluded
    from both numerator and denominator."""
    graded = 0
    passed = 0
    for s in samples:
        if s.reward is None:
            raise ValueError(f"ungraded sample for prompt {s.prompt_id}")
        if s.reward.kind is RewardKind.GRADE_ERROR:
            continue
        graded += 1
        if s.reward.kind is RewardKind.PASS:
            passed += 1
    if graded == 0:
        raise ValueError("no graded samples")
    return passed / graded
