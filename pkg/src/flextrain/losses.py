"""Cross-entropy and the two feature auto-distillation losses.

In both distillation variants the deeper prefix's feature is the teacher and
is treated as a constant: no gradient flows into it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from flextrain._validation import check_depth, check_labels
from flextrain.nn import GradientSet, ResidualNet, backward_prefix, forward_prefix, head_logits

DISTILL_MODES = ("off", "centralized-k+1", "centralized-full-K", "federated")


@dataclass(frozen=True)
class LossValue:
    base_term: float
    distill_term: float = 0.0
    beta: float = 0.0

    @property
    def total(self) -> float:
        return self.base_term + self.beta * self.distill_term


def base_loss(logits, labels) -> tuple[LossValue, np.ndarray]:
    """Batch-mean softmax cross-entropy and its gradient at the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError(f"logits must be 2-D, got shape {logits.shape}")
    n, c = logits.shape
    labels = check_labels(labels, c, n)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean()
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    return LossValue(float(loss)), grad / n


def feature_distance(student: np.ndarray, teacher: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch mean of squared L2 distances and its gradient w.r.t. ``student``."""
    diff = student - teacher
    n = diff.shape[0]
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def centralized_distill_loss(net: ResidualNet, x, y, k: int, k_prime: int,
                             beta: float) -> tuple[LossValue, GradientSet]:
    """Cross-entropy at depth ``k`` plus ``beta`` times the distance to the detached depth-``k_prime`` feature."""
    k = check_depth(k, net.K)
    k_prime = check_depth(k_prime, net.K)
    if k_prime < k:
        raise ValueError(f"teacher depth {k_prime} is shallower than student depth {k}")
    trace = forward_prefix(net, x, k_prime)
    base, dlogits = base_loss(head_logits(net, trace.features[k]), y)
    if k_prime == k:
        return LossValue(base.base_term, 0.0, beta), backward_prefix(net, trace, dlogits, k)
    dist, dstudent = feature_distance(trace.features[k], trace.features[k_prime])
    injected = {k: beta * dstudent} if beta else None
    grads = backward_prefix(net, trace, dlogits, k, feature_grads=injected)
    return LossValue(base.base_term, dist, beta), grads


def federated_distill_loss(net: ResidualNet, x, y, k: int,
                           beta: float) -> tuple[LossValue, GradientSet]:
    """Cross-entropy at depth ``k`` plus ``beta`` times the distance from the depth ``k-1``
    feature to the detached depth-``k`` feature. The penalty is skipped at ``k == 1``.
    """
    k = check_depth(k, net.K)
    trace = forward_prefix(net, x, k)
    base, dlogits = base_loss(trace.logits, y)
    if k == 1:
        return LossValue(base.base_term, 0.0, beta), backward_prefix(net, trace, dlogits, k)
    dist, dstudent = feature_distance(trace.features[k - 1], trace.features[k])
    injected = {k - 1: beta * dstudent} if beta else None
    grads = backward_prefix(net, trace, dlogits, k, feature_grads=injected)
    return LossValue(base.base_term, dist, beta), grads


def distill_loss(net: ResidualNet, x, y, k: int, beta: float, mode: str):
    """Dispatch on the configured distillation mode."""
    if mode == "off":
        return centralized_distill_loss(net, x, y, k, k, 0.0)
    if mode == "centralized-k+1":
        return centralized_distill_loss(net, x, y, k, min(k + 1, net.K), beta)
    if mode == "centralized-full-K":
        return centralized_distill_loss(net, x, y, k, net.K, beta)
    if mode == "federated":
        return federated_distill_loss(net, x, y, k, beta)
    raise ValueError(f"unknown distill mode {mode!r}; expected one of {DISTILL_MODES}")
