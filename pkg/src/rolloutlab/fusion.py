"""Task-vector fusion of domain-expert parameter tables.

An expert is represented by its delta from the shared base table. Merging
runs a fixed pipeline: rescale delta magnitudes so no domain dominates,
optionally prune elements by dropout (survivors rescaled by 1/(1-p) so the
expectation is unchanged), erase elements whose sign fights the cross-expert
majority, then add the weighted sum of the surviving deltas back onto the
base.

The majority direction for erasure is the sign of the plain sum across
experts by default; a squared-magnitude-weighted vote is available via
FusionConfig.erase_weighting. Ties keep everything.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence, Union

import numpy as np

from .core import Rng, make_rng
from .toy_env import ParamTable

MEAN_OF_INPUTS = "mean_of_inputs"


@dataclass(frozen=True, eq=False)
class TaskVector:
    """Elementwise difference between an expert table and the shared base."""

    delta: np.ndarray
    source_label: str = ""
    norm: float = field(default=0.0)

    def __post_init__(self):
        arr = np.asarray(self.delta, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError("delta must match the 3-d parameter table shape")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "delta", arr)
        object.__setattr__(self, "norm", float(np.linalg.norm(arr)))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.delta.shape

    def with_delta(self, delta: np.ndarray) -> "TaskVector":
        return TaskVector(delta, self.source_label)


@dataclass(frozen=True)
class FusionConfig:
    dropout_p: float = 0.0
    target_norm: Union[float, str, None] = MEAN_OF_INPUTS  # None disables normalization
    merge_weights: tuple[float, ...] | None = None  # None means uniform
    erase_mode: bool = True
    erase_weighting: Literal["sum", "squared"] = "sum"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if isinstance(self.target_norm, str) and self.target_norm != MEAN_OF_INPUTS:
            raise ValueError(f"target_norm string must be '{MEAN_OF_INPUTS}'")
        if isinstance(self.target_norm, (int, float)) and self.target_norm <= 0:
            raise ValueError("target_norm must be positive")
        if self.merge_weights is not None:
            if any(w < 0 for w in self.merge_weights):
                raise ValueError("merge weights must be non-negative")
            if abs(sum(self.merge_weights) - 1.0) > 1e-9:
                raise ValueError("merge weights must sum to 1")
        if self.erase_weighting not in ("sum", "squared"):
            raise ValueError("erase_weighting must be 'sum' or 'squared'")


def task_vector(theta_rl: ParamTable, theta_sft: ParamTable, label: str = "") -> TaskVector:
    """Expert-minus-base delta."""
    if theta_rl.shape != theta_sft.shape:
        raise ValueError(f"shape mismatch: {theta_rl.shape} vs {theta_sft.shape}")
    return TaskVector(theta_rl.logits - theta_sft.logits, label)


def normalize_magnitudes(taus: Sequence[TaskVector], cfg: FusionConfig) -> list[TaskVector]:
    """Rescale each non-zero vector to the target L2 norm.

    The target is cfg.target_norm, or the mean norm of the non-zero inputs
    when set to 'mean_of_inputs'. Zero vectors pass through untouched; with
    target_norm None the whole operation is the identity.
    """
    if cfg.target_norm is None:
        return list(taus)
    nonzero = [t for t in taus if t.norm > 0.0]
    if isinstance(cfg.target_norm, str):
        if not nonzero:
            raise ValueError("cannot take mean norm of all-zero task vectors")
        target = sum(t.norm for t in nonzero) / len(nonzero)
    else:
        target = float(cfg.target_norm)
    return [t if t.norm == 0.0 else t.with_delta(t.delta * (target / t.norm)) for t in taus]


def dropout_prune(tau: TaskVector, p: float, rng: Rng) -> TaskVector:
    """Zero each element independently with probability p and rescale the
    survivors by 1/(1-p), preserving the elementwise expectation."""
    if not 0.0 <= p < 1.0:
        raise ValueError("p must be in [0, 1)")
    if p == 0.0:
        return tau
    flat = tau.delta.ravel()
    kept = np.fromiter((rng.uniform() >= p for _ in range(flat.size)), dtype=bool, count=flat.size)
    pruned = np.where(kept, flat / (1.0 - p), 0.0)
    return tau.with_delta(pruned.reshape(tau.shape))


def erase_minority(taus: Sequence[TaskVector], weighting: str = "sum") -> list[TaskVector]:
    """Zero entries whose sign opposes the cross-expert majority direction.

    The majority at each index is the sign of the plain sum of entries
    ('sum') or of the squared-magnitude-weighted vote ('squared'). Zero-sum
    indices are ties and keep everything.
    """
    if len(taus) < 2:
        raise ValueError("erase needs at least 2 task vectors")
    shapes = {t.shape for t in taus}
    if len(shapes) > 1:
        raise ValueError("task vectors must share a shape")
    stack = np.stack([t.delta for t in taus])
    if weighting == "sum":
        vote = stack.sum(axis=0)
    elif weighting == "squared":
        vote = (np.sign(stack) * stack**2).sum(axis=0)
    else:
        raise ValueError("weighting must be 'sum' or 'squared'")
    majority = np.sign(vote)
    out = []
    for t in taus:
        opposes = (majority != 0) & (np.sign(t.delta) == -majority)
        out.append(t.with_delta(np.where(opposes, 0.0, t.delta)))
    return out


@dataclass(frozen=True)
class FusionStats:
    norms_before: tuple[float, ...]
    norms_after_normalize: tuple[float, ...]
    dropout_kept_fraction: tuple[float, ...]
    erased_counts: tuple[int, ...]
    weights: tuple[float, ...]


def fuse(theta_sft: ParamTable, taus: Sequence[TaskVector], cfg: FusionConfig) -> tuple[ParamTable, FusionStats]:
    """Run normalize -> dropout -> erase -> weighted sum and report stats."""
    if not taus:
        raise ValueError("need at least one task vector")
    for t in taus:
        if t.shape != theta_sft.shape:
            raise ValueError(f"task vector shape {t.shape} != base shape {theta_sft.shape}")
    if cfg.merge_weights is not None and len(cfg.merge_weights) != len(taus):
        raise ValueError("merge_weights length must match the expert count")
    weights = cfg.merge_weights or tuple(1.0 / len(taus) for _ in taus)

    norms_before = tuple(t.norm for t in taus)
    current = normalize_magnitudes(taus, cfg)
    norms_after = tuple(t.norm for t in current)

    if cfg.dropout_p > 0.0:
        rng = make_rng(cfg.seed, "fusion-dropout")
        current = [dropout_prune(t, cfg.dropout_p, rng.split(i)) for i, t in enumerate(current)]
    kept_fraction = tuple(
        float(np.count_nonzero(t.delta)) / t.delta.size for t in current
    )

    pre_erase = current
    if cfg.erase_mode and len(current) >= 2:
        current = erase_minority(current, cfg.erase_weighting)
    erased_counts = tuple(
        int(np.count_nonzero(before.delta) - np.count_nonzero(after.delta))
        for before, after in zip(pre_erase, current)
    )

    fused = theta_sft.logits.copy()
    for w, t in zip(weights, current):
        fused = fused + w * t.delta
    stats = FusionStats(norms_before, norms_after, kept_fraction, erased_counts, tuple(weights))
    return ParamTable(fused), stats


def merge(theta_sft: ParamTable, taus: Sequence[TaskVector], cfg: FusionConfig) -> ParamTable:
    """Fused table theta_sft + sum_i w_i * tau'_i."""
    fused, _ = fuse(theta_sft, taus, cfg)
    return fused
