"""Epoch index generators: natural order, inverse-class-frequency draws and
exactly balanced pair draws."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import Dataset, PairKey
from .exceptions import ConfigError, DataError


@dataclass(frozen=True)
class Natural:
    pass


@dataclass(frozen=True)
class InverseFrequency:
    """Draw with replacement, each class equally likely per draw.

    The epoch has ``cap_multiplier * smallest_present_class * n_present``
    draws unless ``num_samples`` overrides it.
    """

    cap_multiplier: float = 2.0
    num_samples: int | None = None

    def __post_init__(self):
        if not self.cap_multiplier > 0:
            raise ConfigError("cap_multiplier must be positive")
        if self.num_samples is not None and self.num_samples < 1:
            raise ConfigError("num_samples must be positive")


@dataclass(frozen=True)
class PairBalanced:
    key: PairKey


@dataclass(frozen=True)
class SamplerSpec:
    variant: Natural | InverseFrequency | PairBalanced = Natural()
    seed: int = 0


def inverse_frequency_weights(class_counts) -> np.ndarray:
    """``1 / count`` for present classes, 0 for absent ones."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if np.any(counts < 0):
        raise DataError("class counts must be non-negative")
    if not np.any(counts > 0):
        raise DataError("inverse-frequency weights need at least one non-empty class")
    w = np.zeros_like(counts)
    present = counts > 0
    w[present] = 1.0 / counts[present]
    return w


def epoch_rng(seed: int, epoch: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(epoch)]))


def draw_epoch(dataset: Dataset, spec: SamplerSpec, epoch: int = 0) -> np.ndarray:
    """Indices into ``dataset`` for one epoch.

    Output depends only on ``(dataset labels, spec, epoch)``.
    """
    n = len(dataset)
    if n == 0:
        raise DataError("cannot sample from an empty dataset")
    rng = epoch_rng(spec.seed, epoch)
    variant = spec.variant

    if isinstance(variant, Natural):
        return rng.permutation(n)

    if isinstance(variant, InverseFrequency):
        counts = dataset.class_counts
        class_w = inverse_frequency_weights(counts)
        p = class_w[dataset.expression]
        p = p / p.sum()
        present = counts[counts > 0]
        size = variant.num_samples
        if size is None:
            size = int(round(variant.cap_multiplier * int(present.min()) * present.size))
        return rng.choice(n, size=max(size, 1), replace=True, p=p)

    if isinstance(variant, PairBalanced):
        key = variant.key
        lo_idx = np.flatnonzero(dataset.expression == key.lo)
        hi_idx = np.flatnonzero(dataset.expression == key.hi)
        if lo_idx.size == 0 or hi_idx.size == 0:
            raise DataError(f"pair {key.name} has an empty class (counts {lo_idx.size}, {hi_idx.size})")
        k = min(lo_idx.size, hi_idx.size)
        picked = np.concatenate([
            rng.choice(lo_idx, size=k, replace=False),
            rng.choice(hi_idx, size=k, replace=False),
        ])
        return rng.permutation(picked)

    raise ConfigError(f"unknown sampler variant {variant!r}")


def parse_sampler(name: str, *, cap_multiplier: float = 2.0, seed: int = 0) -> SamplerSpec:
    """Build a spec from a CLI-style name (``natural``, ``inverse-frequency``)."""
    name = name.replace("_", "-").lower()
    if name == "natural":
        return SamplerSpec(Natural(), seed)
    if name in ("inverse-frequency", "inverse", "balanced"):
        return SamplerSpec(InverseFrequency(cap_multiplier), seed)
    raise ConfigError(f"unknown sampler {name!r}")
