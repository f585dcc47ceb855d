"""Group-relative advantages and the triplet-clipped token-level objective.

The per-token term is

    min(ratio_engines, cap) * max(min(r*A, clip(r, 1-e_nl, 1+e_ph)*A), e_nh*A)

where r is the current-policy/behavior probability ratio (behavior taken on
the exact train engine) and ratio_engines is the behavior policy's
train/inference probability ratio, truncated at a constant cap to bound the
variance injected by engine mismatch. Token terms are summed and divided by
G * T_max with T_max a batch-wide constant, so a sample's length never changes
the denominator. There is no reference-policy or KL term anywhere in this
module, by design.

The outer max clamps how negative a term can get for adv < 0. Applied
literally it also pins every adv > 0 term to the constant bound (the bound
exceeds the clip ceiling by construction), killing the gradient of exactly
the terms that reinforce good samples. ClipConfig.guard_positive therefore
restricts the outer max to negative advantages and is the default; the
literal form stays available behind the flag and is covered by tests.

Gradients are exact wherever the clip/max selectors are locally constant; at
selector ties the evaluated branch is the unclipped one, so derivatives are
deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .core import Group, RewardKind, Sample, SampleStatus
from .toy_env import ParamTable, TrainEngine, detect_repetition, log_token_dist


@dataclass(frozen=True)
class ClipConfig:
    eps_neg_low: float = 0.2
    eps_pos_high: float = 0.2
    eps_neg_high: float = 3.0
    tis_cap: float = 2.0
    guard_positive: bool = True  # apply the outer max only when adv < 0

    def __post_init__(self):
        if not 0.0 < self.eps_neg_low < 1.0:
            raise ValueError("eps_neg_low must be in (0, 1)")
        if self.eps_pos_high <= 0.0:
            raise ValueError("eps_pos_high must be > 0")
        if self.eps_neg_high <= 1.0:
            raise ValueError("eps_neg_high must be > 1")
        if self.eps_neg_high < 1.0 + self.eps_pos_high:
            raise ValueError("eps_neg_high must be >= 1 + eps_pos_high")
        if self.tis_cap < 1.0:
            raise ValueError("tis_cap must be >= 1")


class NormMode(Enum):
    MEAN_STD = "mean_std"
    MEAN_ONLY = "mean_only"


@dataclass(frozen=True)
class AdvantageConfig:
    norm_mode: NormMode = NormMode.MEAN_STD
    std_floor: float = 1e-8

    def __post_init__(self):
        if self.std_floor <= 0.0:
            raise ValueError("std_floor must be > 0")


class Mask(Enum):
    USE = "use"
    MASK_GRADE_ERROR = "mask_grade_error"
    MASK_TRUNCATED = "mask_truncated"


@dataclass(frozen=True)
class RepetitionConfig:
    ngram: int = 2
    min_repeats: int = 3


@dataclass(frozen=True)
class MaskedGroup:
    group: Group
    advantages: tuple[float, ...]
    masks: tuple[Mask, ...]

    def __post_init__(self):
        if not (len(self.advantages) == len(self.masks) == self.group.size):
            raise ValueError("advantages/masks must align with the group's samples")


@dataclass(frozen=True)
class MaskedBatch:
    """Masked, advantage-annotated groups ready for a training step."""

    groups: tuple[MaskedGroup, ...]
    t_max: int

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        longest = max(
            (len(s.tokens) for mg in self.groups for s in mg.group.samples), default=0
        )
        if self.t_max < longest:
            raise ValueError(f"t_max {self.t_max} below max token length {longest}")
        sizes = {mg.group.size for mg in self.groups}
        if len(sizes) > 1:
            raise ValueError("all groups in a batch must share the same G")


def group_advantages(rewards: Sequence[float], cfg: AdvantageConfig) -> list[float]:
    """Center (and optionally standardize) rewards within one group."""
    if len(rewards) < 2:
        raise ValueError("advantage normalization needs G >= 2 rewards")
    arr = np.asarray(rewards, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("rewards must be finite")
    centered = arr - arr.mean()
    if cfg.norm_mode is NormMode.MEAN_ONLY:
        return [float(x) for x in centered]
    scale = max(float(arr.std()), cfg.std_floor)  # population std
    return [float(x / scale) for x in centered]


def _triplet_value_slope(r_theta: float, adv: float, cfg: ClipConfig) -> tuple[float, float]:
    """Value of the clipped term and d(term)/d(ratio) on the evaluated branch."""
    clipped = min(max(r_theta, 1.0 - cfg.eps_neg_low), 1.0 + cfg.eps_pos_high)
    clip_slope = 1.0 if (1.0 - cfg.eps_neg_low) <= r_theta <= (1.0 + cfg.eps_pos_high) else 0.0

    raw = r_theta * adv
    capped = clipped * adv
    if raw <= capped:
        inner, inner_slope = raw, adv
    else:
        inner, inner_slope = capped, adv * clip_slope

    if cfg.guard_positive and adv > 0.0:
        return inner, inner_slope
    floor = cfg.eps_neg_high * adv
    if inner >= floor:
        return inner, inner_slope
    return floor, 0.0


def triplet_clip_term(r_theta: float, adv: float, cfg: ClipConfig) -> float:
    """max(min(r*A, clip(r)*A), eps_neg_high*A) for one token."""
    if r_theta <= 0.0:
        raise ValueError("probability ratio must be > 0")
    value, _ = _triplet_value_slope(r_theta, adv, cfg)
    return value


def tis_weight(logp_mu_train: float, logp_mu_infer: float, cap: float) -> float:
    """Truncated train/inference importance ratio of the behavior policy."""
    if not (math.isfinite(logp_mu_train) and math.isfinite(logp_mu_infer)):
        raise ValueError("log-probs must be finite")
    return min(math.exp(logp_mu_train - logp_mu_infer), cap)


def apply_masks(
    groups: Sequence[Group],
    t_max: int,
    rep_cfg: RepetitionConfig = RepetitionConfig(),
    adv_cfg: AdvantageConfig = AdvantageConfig(),
) -> MaskedBatch:
    """Mask out unusable samples and annotate the rest with advantages.

    GradeError samples and non-repetitive truncations are masked; a truncation
    that ends in a detected repetition loop keeps its (Fail) signal. Advantages
    are computed over the usable samples of each group; masked samples get 0,
    and a group with fewer than two usable samples contributes nothing.
    """
    masked_groups = []
    for group in groups:
        masks = []
        for s in group.samples:
            if s.reward is None:
                raise ValueError(f"ungraded sample for prompt {s.prompt_id}")
            if s.reward.kind is RewardKind.GRADE_ERROR:
                masks.append(Mask.MASK_GRADE_ERROR)
            elif s.status is SampleStatus.TRUNCATED and not detect_repetition(
                s.tokens, rep_cfg.ngram, rep_cfg.min_repeats
            ):
                masks.append(Mask.MASK_TRUNCATED)
            else:
                masks.append(Mask.USE)

        usable = [i for i, m in enumerate(masks) if m is Mask.USE]
        advantages = [0.0] * group.size
        if len(usable) >= 2:
            advs = group_advantages([group.samples[i].reward.raw_score for i in usable], adv_cfg)
            for i, a in zip(usable, advs):
                advantages[i] = a
        masked_groups.append(MaskedGroup(group, tuple(advantages), tuple(masks)))
    return MaskedBatch(tuple(masked_groups), t_max)


class _LogDistCache:
    """Memoizes per-(context, position, temperature) log-dists for one call."""

    def __init__(self, params: ParamTable):
        self.params = params
        self.engine = TrainEngine()
        self._cache: dict[tuple[int, int, float], np.ndarray] = {}

    def get(self, context_id: int, position: int, temperature: float) -> np.ndarray:
        key = (context_id, position, temperature)
        if key not in self._cache:
            self._cache[key] = log_token_dist(
                self.params, self.engine, context_id, position, temperature
            )
        return self._cache[key]


def _require_logps(sample: Sample) -> None:
    if sample.train_logps is None:
        raise ValueError(f"sample for prompt {sample.prompt_id} is missing train log-probs")
    if len(sample.infer_logps) != len(sample.tokens):
        raise ValueError("infer log-probs do not align with tokens")


def objective_value(batch: MaskedBatch, params: ParamTable, clip: ClipConfig) -> float:
    """Batch objective: per group sum token terms / (G * T_max), then average
    over groups. Masked samples contribute exactly zero."""
    if not batch.groups:
        return 0.0
    dists = _LogDistCache(params)
    total = 0.0
    for mg in batch.groups:
        g_sum = 0.0
        for sample, adv, mask in zip(mg.group.samples, mg.advantages, mg.masks):
            if mask is not Mask.USE:
                continue
            _require_logps(sample)
            for t, token in enumerate(sample.tokens):
                logp_theta = float(dists.get(sample.context_id, t, sample.gen_temperature)[token])
                r_theta = math.exp(logp_theta - sample.train_logps[t])
                w = tis_weight(sample.train_logps[t], sample.infer_logps[t], clip.tis_cap)
                value, _ = _triplet_value_slope(r_theta, adv, clip)
                g_sum += w * value
        total += g_sum / (mg.group.size * batch.t_max)
    return total / len(batch.groups)


def objective_gradient(batch: MaskedBatch, params: ParamTable, clip: ClipConfig) -> np.ndarray:
    """Exact gradient of objective_value w.r.t. the logit table.

    Within the evaluated clip branch, d(term)/d(logits[c,t,v]) factors through
    d(ratio)/d(logits) = (r / temperature) * (onehot(token) - softmax), the
    tabular-softmax Jacobian applied to the ratio.
    """
    grad = np.zeros(params.shape)
    if not batch.groups:
        return grad
    dists = _LogDistCache(params)
    for mg in batch.groups:
        norm = 1.0 / (len(batch.groups) * mg.group.size * batch.t_max)
        for sample, adv, mask in zip(mg.group.samples, mg.advantages, mg.masks):
            if mask is not Mask.USE:
                continue
            _require_logps(sample)
            tau = sample.gen_temperature
            for t, token in enumerate(sample.tokens):
                logp_vec = dists.get(sample.context_id, t, tau)
                r_theta = math.exp(float(logp_vec[token]) - sample.train_logps[t])
                _, slope = _triplet_value_slope(r_theta, adv, clip)
                if slope == 0.0:
                    continue
                w = tis_weight(sample.train_logps[t], sample.infer_logps[t], clip.tis_cap)
                p_vec = np.exp(logp_vec)
                coef = norm * w * slope * r_theta / tau
                row = grad[sample.context_id, t]
                row -= coef * p_vec
                row[token] += coef
    return grad


def ascent_step(params: ParamTable, gradient: np.ndarray, lr: float) -> ParamTable:
    """New snapshot params + lr * gradient; the input table is untouched."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != params.shape:
        raise ValueError(f"gradient shape {gradient.shape} != params shape {params.shape}")
    return ParamTable(params.logits + lr * gradient)
