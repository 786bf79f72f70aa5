"""Centralized training loops: FlexTrain, the single-model and independent-models baselines."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from flextrain._validation import check_depth, check_positive_int
from flextrain.data import Dataset
from flextrain.losses import DISTILL_MODES, base_loss, distill_loss
from flextrain.nn import SGD, DivergenceError, ResidualNet, forward_prefix, head_logits, \
    init_net, save_checkpoint
from flextrain.reporting import CostModel, ReportRecord
from flextrain.sampler import ActivationDistribution, sample_config

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Optimizer, sampling and distillation settings for one training run.

    ``pi=None`` means "always train the full model". ``sample_per`` chooses
    whether a depth is drawn per mini-batch step (default) or once per epoch.
    The learning rate is multiplied by ``lr_decay_gamma`` at each epoch listed
    in ``lr_decay_epochs``.
    """
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-3
    batch_size: int = 64
    epochs: int = 1
    beta: float = 0.2
    distill_mode: str = "centralized-k+1"
    pi: ActivationDistribution | None = None
    seed: int = 0
    eval_depths: Sequence[int] | None = None
    sample_per: str = "step"
    lr_decay_epochs: Sequence[int] = ()
    lr_decay_gamma: float = 0.1
    eval_every: int = 1

    def validate(self, K: int | None = None) -> "TrainConfig":
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        check_positive_int(self.batch_size, "batch_size")
        if isinstance(self.epochs, bool) or not isinstance(self.epochs, int) or self.epochs < 0:
            raise ValueError(f"epochs must be a non-negative integer, got {self.epochs!r}")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.distill_mode not in DISTILL_MODES:
            raise ValueError(f"distill_mode must be one of {DISTILL_MODES}")
        if self.sample_per not in ("step", "epoch"):
            raise ValueError("sample_per must be 'step' or 'epoch'")
        check_positive_int(self.eval_every, "eval_every")
        if K is not None:
            if self.pi is not None and self.pi.K != K:
                raise ValueError(f"pi has {self.pi.K} depths but the net has K={K}")
            for k in self.eval_depths or ():
                check_depth(k, K)
        return self

    def distribution(self, K: int) -> ActivationDistribution:
        return self.pi if self.pi is not None else ActivationDistribution.one_hot(K, K)

    def depths_to_eval(self, K: int) -> list[int]:
        if self.eval_depths:
            return sorted(set(self.eval_depths))
        return self.distribution(K).support

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.lr * self.lr_decay_gamma ** drops


@dataclass
class EpochLog:
    epoch: int
    depth_hist: dict[int, int]
    mean_total: float
    mean_base: float
    mean_distill: float
    cumulative_flops: int
    eval_accuracy: dict[int, float] = field(default_factory=dict)
    eval_loss: dict[int, float] = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return sum(self.depth_hist.values())

    def to_records(self, run_id: str, stage: str, eval_split: str = "test") -> list[ReportRecord]:
        e = self.epoch
        recs = [
            ReportRecord(run_id, stage, e, None, "train", "loss_total", float(self.mean_total)),
            ReportRecord(run_id, stage, e, None, "train", "loss_base", float(self.mean_base)),
            ReportRecord(run_id, stage, e, None, "train", "loss_distill", float(self.mean_distill)),
            ReportRecord(run_id, stage, e, None, "train", "flops_cumulative",
                         float(self.cumulative_flops)),
        ]
        recs += [ReportRecord(run_id, stage, e, k, "train", "steps", float(c))
                 for k, c in sorted(self.depth_hist.items())]
        recs += [ReportRecord(run_id, stage, e, k, eval_split, "accuracy", float(a))
                 for k, a in sorted(self.eval_accuracy.items())]
        recs += [ReportRecord(run_id, stage, e, k, eval_split, "loss", float(v))
                 for k, v in sorted(self.eval_loss.items())]
        return recs


def evaluate_prefix(net: ResidualNet, dataset: Dataset, k: int) -> float:
    """Argmax accuracy at depth ``k``; ties go to the lowest class index."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = forward_prefix(net, dataset.X, k).logits
    return float(np.mean(np.argmax(logits, axis=1) == dataset.y))


def evaluate_depths(net: ResidualNet, dataset: Dataset,
                    depths: Sequence[int]) -> tuple[dict[int, float], dict[int, float]]:
    """Accuracy and mean cross-entropy at several depths from one forward pass."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    trace = forward_prefix(net, dataset.X, max(depths))
    acc, loss = {}, {}
    for k in depths:
        logits = head_logits(net, trace.features[k])
        acc[k] = float(np.mean(np.argmax(logits, axis=1) == dataset.y))
        loss[k] = base_loss(logits, dataset.y)[0].base_term
    return acc, loss


class EpochRunner:
    """Runs mini-batch epochs on one net, owning its optimizer state and RNG stream.

    Per epoch the RNG first draws the sample permutation; then each step draws
    its depth (or one depth for the whole epoch when ``sample_per='epoch'``).
    The same runner backs centralized training and federated device updates.
    """

    def __init__(self, net: ResidualNet, cfg: TrainConfig, rng: np.random.Generator,
                 pi: ActivationDistribution | None = None, distill_mode: str | None = None):
        self.net = net
        self.cfg = cfg
        self.rng = rng
        self.pi = pi if pi is not None else cfg.distribution(net.K)
        self.distill_mode = distill_mode or cfg.distill_mode
        self.opt = SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
        self.cost = CostModel.from_net(net)
        self.epochs_done = 0
        self.flops = 0

    def run_epoch(self, X: np.ndarray, y: np.ndarray) -> EpochLog:
        cfg, net = self.cfg, self.net
        n = X.shape[0]
        if n == 0:
            raise ValueError("cannot train on an empty dataset")
        lr = cfg.lr_at(self.epochs_done)
        perm = self.rng.permutation(n)
        epoch_k = sample_config(self.pi, self.rng) if cfg.sample_per == "epoch" else None
        hist: dict[int, int] = {}
        sums = np.zeros(3)
        for start in range(0, n, cfg.batch_size):
            k = epoch_k if epoch_k is not None else sample_config(self.pi, self.rng)
            idx = perm[start:start + cfg.batch_size]
            loss, grads = distill_loss(net, X[idx], y[idx], k, cfg.beta, self.distill_mode)
            if not math.isfinite(loss.total):
                raise DivergenceError(
                    f"loss became {loss.total} at epoch {self.epochs_done}, depth {k}")
            self.opt.step(net, grads, k, lr=lr)
            hist[k] = hist.get(k, 0) + 1
            sums += (loss.total, loss.base_term, loss.distill_term)
            self.flops += self.cost.cost(k, idx.size, include_backward=True)
        steps = sum(hist.values())
        log = EpochLog(self.epochs_done, dict(sorted(hist.items())), *(sums / steps),
                       cumulative_flops=self.flops)
        self.epochs_done += 1
        return log


def train_flextrain(net: ResidualNet, dataset: Dataset, cfg: TrainConfig,
                    eval_data: Dataset | None = None, checkpoint_dir=None,
                    checkpoint_every: int = 0) -> tuple[ResidualNet, list[EpochLog]]:
    """Active-layers sampling with auto-distillation; trains ``net`` in place.

    Each step draws a depth from ``cfg.pi`` and a mini-batch, then updates only
    that prefix. Evaluation runs on ``eval_data`` (or the training set) every
    ``cfg.eval_every`` epochs and after the last one.
    """
    cfg.validate(net.K)
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if dataset.input_dim != net.input_dim:
        raise ValueError(f"dataset has {dataset.input_dim} features, net expects {net.input_dim}")
    runner = EpochRunner(net, cfg, np.random.default_rng(cfg.seed))
    eval_set = eval_data if eval_data is not None else dataset
    depths = cfg.depths_to_eval(net.K)
    logs = []
    for epoch in range(cfg.epochs):
        log = runner.run_epoch(dataset.X, dataset.y)
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            log.eval_accuracy, log.eval_loss = evaluate_depths(net, eval_set, depths)
        logs.append(log)
        logger.debug("epoch %d: loss=%.4f acc=%s", epoch, log.mean_total, log.eval_accuracy)
        if checkpoint_dir and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(net, Path(checkpoint_dir) / f"epoch{epoch + 1:04d}")
    return net, logs


def single_config(cfg: TrainConfig, K: int) -> TrainConfig:
    return replace(cfg, pi=ActivationDistribution.one_hot(K, K), beta=0.0, distill_mode="off",
                   eval_depths=cfg.eval_depths or [K])


def train_single(net: ResidualNet, dataset: Dataset, cfg: TrainConfig,
                 eval_data: Dataset | None = None, **kwargs) -> tuple[ResidualNet, list[EpochLog]]:
    """Plain full-depth training; evaluation still covers ``cfg.eval_depths`` prefixes."""
    return train_flextrain(net, dataset, single_config(cfg, net.K), eval_data, **kwargs)


@dataclass
class IndependentResult:
    nets: dict[int, ResidualNet]
    logs: dict[int, list[EpochLog]]

    @property
    def total_flops(self) -> int:
        return sum(logs[-1].cumulative_flops for logs in self.logs.values() if logs)


def train_independents(dataset: Dataset, cfg: TrainConfig, depths: Sequence[int],
                       hidden_dim: int, eval_data: Dataset | None = None) -> IndependentResult:
    """One freshly initialised depth-``k`` network per requested depth, each trained plainly."""
    depths = list(depths)
    if len(set(depths)) != len(depths) or not depths:
        raise ValueError("depths must be a non-empty list of distinct values")
    K = cfg.pi.K if cfg.pi is not None else max(depths)
    nets, logs = {}, {}
    for k in depths:
        check_depth(k, K)
        net = init_net(dataset.input_dim, hidden_dim, dataset.num_classes, k, cfg.seed)
        sub_cfg = replace(cfg, pi=None, eval_depths=[k])
        nets[k], logs[k] = train_single(net, dataset, sub_cfg, eval_data)
    return IndependentResult(nets, logs)
