"""Synthetic verifiable task family and a tabular-softmax policy.

The task is modular addition: for payload (a, b) the answer is
(a + b) mod modulus, emitted digit-by-digit as decimal digits zero-padded to
the configured answer length. With modulus <= vocab_size every digit is a
valid token, the reward is exactly verifiable, and the full sequence space is
small enough to enumerate, so gradients can be checked against exact
expectations.

The policy is a logit table indexed by (context, position, token); there is
no autoregressive state, which keeps gradients analytic. Two engines evaluate
it: TrainEngine is exact softmax, InferEngine adds a deterministic
seed-derived perturbation to the logits first, standing in for the numerical
drift of a fused inference kernel. With perturb_scale = 0 the engines follow
the identical code path and agree bit-for-bit.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Sequence, Union

import numpy as np

from .core import Prompt, RewardOutcome, Rng, Sample, SampleStatus, Tick, make_rng


@dataclass(frozen=True)
class TaskConfig:
    vocab_size: int
    max_len: int
    modulus: int
    context_count: int

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.modulus < 2:
            raise ValueError("modulus must be >= 2")
        if self.context_count < 1:
            raise ValueError("context_count must be >= 1")
        if self.modulus > self.vocab_size:
            raise ValueError("modulus must not exceed vocab_size")
        if self.modulus > 10**self.max_len:
            raise ValueError("answers must fit in max_len decimal digits")


@dataclass(frozen=True)
class TaskInstance:
    """One addition problem bound to a policy-table context row."""

    context_id: int
    a: int
    b: int


@dataclass(frozen=True, eq=False)
class ParamTable:
    """Immutable logit table of shape (context_count, max_len, vocab_size)."""

    logits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.logits, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"logits must be 3-d, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("logits must be finite")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "logits", arr)

    @staticmethod
    def zeros(context_count: int, max_len: int, vocab_size: int) -> "ParamTable":
        return ParamTable(np.zeros((context_count, max_len, vocab_size)))

    @staticmethod
    def for_task(cfg: TaskConfig) -> "ParamTable":
        return ParamTable.zeros(cfg.context_count, cfg.max_len, cfg.vocab_size)

    @property
    def context_count(self) -> int:
        return self.logits.shape[0]

    @property
    def max_len(self) -> int:
        return self.logits.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.logits.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.logits.shape

    def equals(self, other: "ParamTable") -> bool:
        return self.shape == other.shape and bool(np.array_equal(self.logits, other.logits))


@dataclass(frozen=True)
class TrainEngine:
    """Exact softmax over the stored logits."""


@dataclass(frozen=True)
class InferEngine:
    """Softmax over logits plus a deterministic additive perturbation.

    The perturbation is Gaussian-like noise of magnitude perturb_scale, fixed
    by (perturb_seed, context, position), so the engine gap is reproducible.
    """

    perturb_scale: float
    perturb_seed: int = 0

    def __post_init__(self):
        if self.perturb_scale < 0:
            raise ValueError("perturb_scale must be >= 0")


Engine = Union[TrainEngine, InferEngine]


@dataclass(frozen=True)
class GraderConfig:
    """Noisy oracle: GradeError with prob error_rate, else the true verdict
    with prob accuracy and the flipped verdict otherwise."""

    accuracy: float
    error_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.accuracy <= 1.0:
            raise ValueError("accuracy must be in (0, 1]")
        if not 0.0 <= self.error_rate < 1.0:
            raise ValueError("error_rate must be in [0, 1)")


@lru_cache(maxsize=65536)
def _perturb_tuple(seed: int, scale: float, context_id: int, position: int, vocab: int) -> tuple[float, ...]:
    rng = make_rng(seed, "perturb").split(context_id).split(position)
    return tuple(scale * rng.normal() for _ in range(vocab))


def _check_indices(params: ParamTable, context_id: int, position: int) -> None:
    if not 0 <= context_id < params.context_count:
        raise IndexError(f"context_id {context_id} out of range [0, {params.context_count})")
    if not 0 <= position < params.max_len:
        raise IndexError(f"position {position} out of range [0, {params.max_len})")


def log_token_dist(
    params: ParamTable, engine: Engine, context_id: int, position: int, temperature: float = 1.0
) -> np.ndarray:
    """Log-probabilities over the vocabulary at one (context, position) slot."""
    _check_indices(params, context_id, position)
    z = params.logits[context_id, position]
    if isinstance(engine, InferEngine) and engine.perturb_scale != 0.0:
        noise = _perturb_tuple(
            engine.perturb_seed, engine.perturb_scale, context_id, position, params.vocab_size
        )
        z = z + np.asarray(noise)
    if temperature != 1.0:
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        z = z / temperature
    m = float(np.max(z))
    shifted = z - m
    lse = m + float(np.log(np.sum(np.exp(shifted))))
    return z - lse


def token_dist(params: ParamTable, engine: Engine, context_id: int, position: int) -> np.ndarray:
    """Probability vector at one slot; sums to 1 within 1e-12."""
    return np.exp(log_token_dist(params, engine, context_id, position))


def make_task_set(
    cfg: TaskConfig,
    count: int,
    rng: Rng,
    contexts: Sequence[int] | None = None,
) -> list[Prompt]:
    """Deterministic prompt set; prompts cycle over the given context ids.

    The (a, b) payload for a context is keyed by the context id alone, so two
    task sets built from the same rng seed agree on shared contexts even when
    restricted to different context windows.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if contexts is None:
        contexts = range(cfg.context_count)
    else:
        for c in contexts:
            if not 0 <= c < cfg.context_count:
                raise ValueError(f"context id {c} outside [0, {cfg.context_count})")
        if len(contexts) == 0:
            raise ValueError("contexts must be non-empty")

    payload_rng = rng.split("payloads")
    payloads: dict[int, TaskInstance] = {}
    for c in contexts:
        crng = payload_rng.split(c)
        payloads[c] = TaskInstance(c, crng.randrange(cfg.modulus), crng.randrange(cfg.modulus))

    prompts = []
    for i in range(count):
        inst = payloads[contexts[i % len(contexts)]]
        value = (inst.a + inst.b) % cfg.modulus
        prompts.append(
            Prompt(
                prompt_id=i,
                payload=inst,
                ground_truth=answer_digits(value, cfg.max_len),
                difficulty=cfg.max_len,
            )
        )
    return prompts


def answer_digits(value: int, length: int) -> tuple[int, ...]:
    """Decimal digits of value, most significant first, zero-padded to length."""
    if value < 0 or value >= 10**length:
        raise ValueError(f"value {value} not representable in {length} digits")
    digits = []
    for _ in range(length):
        digits.append(value % 10)
        value //= 10
    return tuple(reversed(digits))


def rollout(
    params: ParamTable,
    engine: Engine,
    prompt: Prompt,
    max_len: int,
    temperature: float,
    rng: Rng,
    version_id: int = 0,
    t_start: Tick = 0,
    t_end: Tick | None = None,
) -> Sample:
    """Sample an answer position-by-position via inverse-CDF draws.

    Generation ends when the full answer length (the parameter table's
    position count) is reached; a tighter max_len cuts it short and the
    sample comes back Truncated.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if max_len < 0:
        raise ValueError("max_len must be >= 0")
    context_id = prompt.payload.context_id
    n_positions = min(max_len, params.max_len)

    tokens: list[int] = []
    logps: list[float] = []
    for t in range(n_positions):
        logp_vec = log_token_dist(params, engine, context_id, t, temperature)
        cdf = np.cumsum(np.exp(logp_vec))
        u = rng.uniform()
        token = int(np.searchsorted(cdf, u, side="right"))
        token = min(token, params.vocab_size - 1)  # guard float-sum shortfall
        tokens.append(token)
        logps.append(float(logp_vec[token]))

    status = SampleStatus.COMPLETE if n_positions == params.max_len else SampleStatus.TRUNCATED
    return Sample(
        prompt_id=prompt.prompt_id,
        context_id=context_id,
        version_id=version_id,
        tokens=tuple(tokens),
        infer_logps=tuple(logps),
        status=status,
        t_start=t_start,
        t_end=t_start if t_end is None else t_end,
        gen_temperature=temperature,
    )


def logprob_trace(params: ParamTable, engine: Engine, sample: Sample) -> tuple[float, ...]:
    """Re-evaluate the sample's tokens under an engine at its recorded
    temperature. With the generating engine this reproduces infer_logps
    bit-exactly."""
    if sample.status is SampleStatus.IN_FLIGHT:
        raise ValueError("cannot recompute log-probs for an in-flight sample")
    out = []
    for t, token in enumerate(sample.tokens):
        logp_vec = log_token_dist(params, engine, sample.context_id, t, sample.gen_temperature)
        out.append(float(logp_vec[token]))
    return tuple(out)


def grade(sample: Sample, prompt: Prompt, grader: GraderConfig, rng: Rng) -> RewardOutcome:
    """Exact-match verdict corrupted per the grader config.

    Error is sampled first, then the flip, so masking (GradeError) and reward
    noise stay independent failure modes.
    """
    if sample.status is SampleStatus.IN_FLIGHT:
        raise ValueError("cannot grade an in-flight sample")
    if rng.uniform() < grader.error_rate:
        return RewardOutcome.grade_error()
    truth = sample.tokens == prompt.ground_truth
    verdict = truth if rng.uniform() < grader.accuracy else not truth
    return RewardOutcome.passed() if verdict else RewardOutcome.failed()


def detect_repetition(tokens: Sequence[int], ngram: int, min_repeats: int) -> bool:
    """True iff the tail of tokens is the same n-gram repeated >= min_repeats
    times consecutively. Repeats elsewhere do not count."""
    if ngram < 1:
        raise ValueError("ngram must be >= 1")
    if min_repeats < 2:
        raise ValueError("min_repeats must be >= 2")
    span = ngram * min_repeats
    if len(tokens) < span:
        return False
    tail = tuple(tokens[-span:])
    unit = tail[-ngram:]
    return all(tail[i * ngram : (i + 1) * ngram] == unit for i in range(min_repeats))


def enumerate_sequence_dist(
    params: ParamTable, engine: Engine, prompt: Prompt, max_len: int
) -> dict[tuple[int, ...], float]:
    """Exact probability of every length-max_len token sequence.

    The policy factorizes over positions, so each sequence's probability is
    the product of its per-position conditionals.
    """
    if params.vocab_size**max_len > 10**6:
        raise ValueError("sequence space too large to enumerate")
    context_id = prompt.payload.context_id
    per_position = [token_dist(params, engine, context_id, t) for t in range(max_len)]
    dist: dict[tuple[int, ...], float] = {}
    for seq in itertools.product(range(params.vocab_size), repeat=max_len):
        p = 1.0
        for t, token in enumerate(seq):
            p *= float(per_position[t][token])
        dist[seq] = p
    return dist


def sequence_space(vocab_size: int, max_len: int) -> Iterator[tuple[int, ...]]:
    """All length-max_len sequences, lexicographic."""
    return itertools.product(range(vocab_size), repeat=max_len)
