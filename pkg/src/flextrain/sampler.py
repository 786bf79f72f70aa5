"""Depth distribution, configuration sampling and parameter-count cost model."""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from flextrain._validation import check_depth

NORMALIZATION_TOL = 1e-9


@dataclass(frozen=True)
class ActivationDistribution:
    """Probabilities ``probs[k-1]`` of training the depth-``k`` prefix.

    Inputs within ``1e-9`` of summing to one are renormalized; anything further
    off, or any negative entry, is rejected.
    """
    probs: tuple[float, ...]
    _cdf: tuple[float, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("activation distribution needs at least one depth")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError(f"activation probabilities must be finite and non-negative: {p}")
        total = p.sum()
        if abs(total - 1.0) > NORMALIZATION_TOL:
            raise ValueError(f"activation probabilities sum to {total!r}, not 1")
        object.__setattr__(self, "probs", tuple(float(v) for v in p / total))
        c = np.cumsum(self.probs)
        c[-1] = 1.0
        object.__setattr__(self, "_cdf", tuple(float(v) for v in c))

    @property
    def K(self) -> int:
        return len(self.probs)

    @property
    def support(self) -> list[int]:
        return [k for k, p in enumerate(self.probs, start=1) if p > 0]

    @property
    def cdf(self) -> np.ndarray:
        return np.array(self._cdf)

    @classmethod
    def one_hot(cls, k: int, K: int) -> "ActivationDistribution":
        check_depth(k, K)
        p = [0.0] * K
        p[k - 1] = 1.0
        return cls(tuple(p))

    @classmethod
    def from_depths(cls, depth_probs: dict[int, float], K: int) -> "ActivationDistribution":
        p = [0.0] * K
        for k, prob in depth_probs.items():
            p[check_depth(k, K) - 1] += float(prob)
        return cls(tuple(p))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.probs)


def sample_config(pi: ActivationDistribution, rng: np.random.Generator) -> int:
    """Inverse-CDF draw of a depth in ``1..K``; consumes exactly one uniform."""
    u = rng.random()
    return bisect.bisect_right(pi._cdf, u) + 1


def prefix_param_count(net, k: int) -> int:
    """Number of parameters in the depth-``k`` prefix, pre and head layers included."""
    return net.prefix_param_count(check_depth(k, net.K))


def prefix_param_counts(net) -> np.ndarray:
    return np.array([net.prefix_param_count(k) for k in range(1, net.K + 1)], dtype=np.int64)


def expected_ratio(probs: Sequence[float], sizes: Sequence[float]) -> float:
    """``sum_k probs[k] * sizes[k] / sizes[-1]`` for any per-depth size measure."""
    probs = np.asarray(probs, dtype=np.float64)
    sizes = np.asarray(sizes, dtype=np.float64)
    if probs.shape != sizes.shape:
        raise ValueError("probs and sizes must have the same length")
    return float(np.dot(probs, sizes) / sizes[-1])


def expected_param_ratio(pi: ActivationDistribution, net) -> float:
    if pi.K != net.K:
        raise ValueError(f"distribution has {pi.K} depths, net has K={net.K}")
    return expected_ratio(pi.probs, prefix_param_counts(net))


def fraction_to_depth(net, fraction: float) -> tuple[int, bool]:
    """Deepest prefix whose parameter count fits in ``fraction`` of the model.

    Returns ``(k, over_budget)``; when even the depth-1 prefix is too large the
    depth is clamped to 1 and ``over_budget`` is True.
    """
    fraction = float(fraction)
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    counts = prefix_param_counts(net)
    budget = fraction * counts[-1]
    fits = np.nonzero(counts <= budget)[0]
    if fits.size == 0:
        return 1, True
    return int(fits[-1]) + 1, False
