"""Federated FlexTrain simulation plus the FedSmall and FedClass baselines.

Each device trains the prefix its capacity allows and ships it back; the
server splices the returned prefixes into the full model. All cross-device
reductions run in ascending ``device_id`` so results are bitwise reproducible
whatever order (or thread) devices ran in.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from flextrain._validation import check_depth
from flextrain.data import Dataset, PartitionPlan
from flextrain.nn import ResidualNet, block_param_names
from flextrain.reporting import ReportRecord
from flextrain.sampler import ActivationDistribution, fraction_to_depth
from flextrain.trainer import EpochRunner, TrainConfig, evaluate_depths

logger = logging.getLogger(__name__)

AGGREGATION_MODES = ("per-layer", "padded-average")
WEIGHTINGS = ("uniform", "dataset-size")
BYTES_PER_PARAM = 8

# Device capability ratios and device counts from the reference experiment (20 devices).
REFERENCE_CAPACITIES = ((0.052, 2), (0.117, 2), (0.203, 2), (0.246, 2),
                        (0.483, 2), (0.655, 2), (0.827, 2), (1.0, 6))


class DeviceError(RuntimeError):
    def __init__(self, device_id: int, cause: BaseException):
        super().__init__(f"device {device_id} failed: {cause}")
        self.device_id = device_id
        self.__cause__ = cause


@dataclass
class DeviceProfile:
    device_id: int
    capacity_ratio: float
    depth: int
    data: Dataset
    seed: int
    over_budget: bool = False

    @property
    def n_samples(self) -> int:
        return len(self.data)


def make_devices(net: ResidualNet, dataset: Dataset, plan: PartitionPlan,
                 capacities: Sequence[float], seed: int = 0) -> list[DeviceProfile]:
    """One profile per partition entry; depth is the deepest prefix fitting the capacity."""
    if len(capacities) != plan.num_devices:
        raise ValueError(f"{len(capacities)} capacities for {plan.num_devices} devices")
    seeds = np.random.SeedSequence(seed).generate_state(plan.num_devices)
    devices = []
    for j, (idx, r) in enumerate(zip(plan.indices, capacities)):
        k, over = fraction_to_depth(net, r)
        if over:
            logger.info("device %d: capacity %.3f below the smallest prefix, clamped to depth 1", j, r)
        devices.append(DeviceProfile(j, float(r), k, dataset.subset(idx), int(seeds[j]), over))
    return devices


def spread_capacities(num_devices: int,
                      table: Sequence[tuple[float, int]] = REFERENCE_CAPACITIES) -> list[float]:
    """Capacities for ``num_devices`` devices keeping the table's proportions.

    The table's device list is expanded by its counts and resampled at evenly
    spaced positions, so 8 devices get one device per table row.
    """
    expanded = [r for r, count in table for _ in range(count)]
    rows = sorted({r for r, _ in table})
    if num_devices == len(rows):
        return list(rows)
    pos = np.linspace(0, len(expanded) - 1, num_devices)
    return [expanded[int(round(p))] for p in pos]


@dataclass
class FederationConfig:
    rounds: int = 10
    local_epochs: int = 1
    devices_per_round: int | None = None
    aggregation_mode: str = "per-layer"
    weighting: str = "uniform"
    train: TrainConfig = field(default_factory=TrainConfig)
    distill_mode: str = "federated"
    reset_momentum: bool = True
    seed: int = 0
    n_jobs: int = 1

    def validate(self, num_devices: int) -> "FederationConfig":
        if self.rounds < 0:
            raise ValueError("rounds must be non-negative")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be non-negative")
        if self.devices_per_round is not None and not 1 <= self.devices_per_round <= num_devices:
            raise ValueError(f"devices_per_round must be in 1..{num_devices}")
        if self.aggregation_mode not in AGGREGATION_MODES:
            raise ValueError(f"aggregation_mode must be one of {AGGREGATION_MODES}")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")
        self.train.validate()
        return self


@dataclass
class RoundReport:
    round: int
    sampled: list[int]
    local_loss: dict[int, float]
    depth_accuracy: dict[int, float]
    mean_device_accuracy: float
    bytes_down: dict[int, int]
    bytes_up: dict[int, int]

    def to_records(self, run_id: str, stage: str, split: str = "test") -> list[ReportRecord]:
        r = self.round
        recs = [ReportRecord(run_id, stage, r, None, split, "mean_device_accuracy",
                             float(self.mean_device_accuracy)),
                ReportRecord(run_id, stage, r, None, "wire", "bytes_down",
                             float(sum(self.bytes_down.values()))),
                ReportRecord(run_id, stage, r, None, "wire", "bytes_up",
                             float(sum(self.bytes_up.values()))),
                ReportRecord(run_id, stage, r, None, "train", "devices_sampled",
                             float(len(self.sampled))),
                ReportRecord(run_id, stage, r, None, "train", "mean_local_loss",
                             float(np.mean(list(self.local_loss.values())))
                             if self.local_loss else float("nan"))]
        recs += [ReportRecord(run_id, stage, r, k, split, "accuracy", float(a))
                 for k, a in sorted(self.depth_accuracy.items())]
        return recs


@dataclass
class FederatedResult:
    net: ResidualNet
    reports: list[RoundReport]
    devices: list[DeviceProfile]

    def records(self, run_id: str, stage: str) -> list[ReportRecord]:
        return [rec for rep in self.reports for rec in rep.to_records(run_id, stage)]


# -- device side --------------------------------------------------------------------

class DeviceRuntime:
    """A device's persistent local state: its model copy, optimizer buffers and RNG stream."""

    def __init__(self, device: DeviceProfile, template: ResidualNet, cfg: TrainConfig,
                 distill_mode: str):
        self.device = device
        self.net = template.copy()
        self.runner = EpochRunner(self.net, cfg, np.random.default_rng(device.seed),
                                  pi=ActivationDistribution.one_hot(device.depth, template.K),
                                  distill_mode=distill_mode)

    def local_update(self, prefix_weights: dict[str, np.ndarray], local_epochs: int,
                     reset_momentum: bool = True) -> tuple[dict[str, np.ndarray], float]:
        k = self.device.depth
        expected = self.net.param_names(k)
        if sorted(prefix_weights) != sorted(expected):
            raise ValueError(f"device {self.device.device_id} expects the depth-{k} prefix")
        if self.device.n_samples == 0:
            raise ValueError(f"device {self.device.device_id} has no local data")
        self.net.set_weights(prefix_weights)
        if reset_momentum:
            self.runner.opt.velocity.clear()
        losses = []
        for _ in range(local_epochs):
            losses.append(self.runner.run_epoch(self.device.data.X, self.device.data.y).mean_total)
        return self.net.get_prefix(k), float(np.mean(losses)) if losses else float("nan")


def local_update(device: DeviceProfile, prefix_weights: dict[str, np.ndarray],
                 template: ResidualNet, cfg: TrainConfig, local_epochs: int,
                 distill_mode: str = "federated") -> dict[str, np.ndarray]:
    """One-shot local training of ``prefix_weights`` on a fresh device state."""
    runtime = DeviceRuntime(device, template, cfg, distill_mode)
    return runtime.local_update(prefix_weights, local_epochs)[0]


# -- server side --------------------------------------------------------------------

def _layer_groups(K: int) -> list[tuple[int, list[str]]]:
    """``(min depth needed, parameter names)`` for pre, each block and head."""
    groups = [(0, ["pre.W", "pre.b"])]
    groups += [(m, block_param_names(m)) for m in range(1, K + 1)]
    groups.append((0, ["head.W", "head.b"]))
    return groups


def aggregation_weights(contributors: Sequence[tuple[int, int]], weighting: str) -> list[float]:
    """Normalized weights for ``(device_id, n_samples)`` contributors."""
    if weighting == "uniform":
        return [1.0 / len(contributors)] * len(contributors)
    if weighting == "dataset-size":
        total = sum(n for _, n in contributors)
        return [n / total for _, n in contributors]
    raise ValueError(f"unknown weighting {weighting!r}")


def _weighted_sum(arrays: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    acc = weights[0] * arrays[0]
    for w, a in zip(weights[1:], arrays[1:]):
        acc = acc + w * a
    return acc


def aggregate(server_weights: dict[str, np.ndarray], updates: Sequence[tuple], K: int,
              mode: str = "per-layer", weighting: str = "uniform") -> dict[str, np.ndarray]:
    """Merge heterogeneous-depth prefix updates into new full-model weights.

    ``updates`` holds ``(device_id, depth, prefix_weights, n_samples)`` tuples.
    ``per-layer`` averages each layer over the devices that trained it and
    keeps server weights for layers nobody trained; ``padded-average`` pads
    every update with the server's deeper blocks and averages the padded models.
    """
    if not updates:
        raise ValueError("cannot aggregate an empty update list")
    if mode not in AGGREGATION_MODES:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    updates = sorted(updates, key=lambda u: u[0])
    new = {n: v.copy() for n, v in server_weights.items()}
    for min_depth, names in _layer_groups(K):
        if mode == "per-layer":
            contrib = [u for u in updates if u[1] >= min_depth]
        else:
            contrib = list(updates)
        if not contrib:
            continue
        weights = aggregation_weights([(u[0], u[3]) for u in contrib], weighting)
        for name in names:
            arrays = [u[2][name] if u[1] >= min_depth else server_weights[name] for u in contrib]
            new[name] = _weighted_sum(arrays, weights)
    return new


def _sample_devices(rng: np.random.Generator, num_devices: int, per_round: int | None) -> list[int]:
    if per_round is None or per_round == num_devices:
        return list(range(num_devices))
    return sorted(int(i) for i in rng.choice(num_devices, size=per_round, replace=False))


def run_federated(server: ResidualNet, devices: Sequence[DeviceProfile], fcfg: FederationConfig,
                  test_data: Dataset | None = None) -> FederatedResult:
    """Federated FlexTrain: ship prefixes, train locally, aggregate, evaluate, repeat.

    ``server`` is updated in place. Devices keep optimizer and RNG state across
    rounds. Reports use ``test_data`` (the union of device data if omitted).
    """
    devices = sorted(devices, key=lambda d: d.device_id)
    fcfg.validate(len(devices))
    for d in devices:
        check_depth(d.depth, server.K)
        if d.data.input_dim != server.input_dim:
            raise ValueError(f"device {d.device_id} data has the wrong feature count")
    eval_set = test_data if test_data is not None else _union(devices)
    rng = np.random.default_rng(fcfg.seed)
    runtimes: dict[int, DeviceRuntime] = {}
    all_depths = list(range(1, server.K + 1))
    reports = []

    def work(d: DeviceProfile, prefix):
        try:
            return runtimes[d.device_id].local_update(prefix, fcfg.local_epochs,
                                                      fcfg.reset_momentum)
        except Exception as exc:  # noqa: BLE001 - re-raised with attribution
            raise DeviceError(d.device_id, exc) from exc

    for rnd in range(fcfg.rounds):
        chosen = [devices[i] for i in _sample_devices(rng, len(devices), fcfg.devices_per_round)]
        shipped = {}
        for d in chosen:
            if d.device_id not in runtimes:
                runtimes[d.device_id] = DeviceRuntime(d, server, fcfg.train, fcfg.distill_mode)
            shipped[d.device_id] = server.get_prefix(d.depth)
        if fcfg.n_jobs > 1:
            with ThreadPoolExecutor(max_workers=fcfg.n_jobs) as pool:
                outs = list(pool.map(lambda d: work(d, shipped[d.device_id]), chosen))
        else:
            outs = [work(d, shipped[d.device_id]) for d in chosen]
        updates = [(d.device_id, d.depth, w, d.n_samples) for d, (w, _) in zip(chosen, outs)]
        server.set_weights(aggregate(server.params, updates, server.K,
                                     fcfg.aggregation_mode, fcfg.weighting))
        acc, _ = evaluate_depths(server, eval_set, all_depths)
        nbytes = {d.device_id: BYTES_PER_PARAM * server.prefix_param_count(d.depth) for d in chosen}
        reports.append(RoundReport(
            round=rnd,
            sampled=[d.device_id for d in chosen],
            local_loss={d.device_id: loss for d, (_, loss) in zip(chosen, outs)},
            depth_accuracy=acc,
            mean_device_accuracy=float(np.mean([acc[d.depth] for d in devices])),
            bytes_down=nbytes, bytes_up=dict(nbytes)))
        logger.debug("round %d: mean device accuracy %.4f", rnd, reports[-1].mean_device_accuracy)
    return FederatedResult(server, reports, list(devices))


def _union(devices: Sequence[DeviceProfile]) -> Dataset:
    first = devices[0].data
    return Dataset(np.concatenate([d.data.X for d in devices]),
                   np.concatenate([d.data.y for d in devices]), first.num_classes, "train",
                   "union of device data")


def _baseline_config(fcfg: FederationConfig) -> FederationConfig:
    return replace(fcfg, distill_mode="off", train=replace(fcfg.train, beta=0.0, distill_mode="off"))


def run_fedsmall(server: ResidualNet, devices: Sequence[DeviceProfile], fcfg: FederationConfig,
                 test_data: Dataset | None = None) -> FederatedResult:
    """FedAvg of the largest prefix the weakest device can hold; everyone trains and is scored there."""
    k_star = min(d.depth for d in devices)
    pinned = [replace(d, depth=k_star) for d in devices]
    return run_federated(server, pinned, _baseline_config(fcfg), test_data)


@dataclass
class FedClassResult:
    nets: dict[int, ResidualNet]
    class_results: dict[int, FederatedResult]
    mean_device_accuracy: list[float]

    def records(self, run_id: str, stage: str) -> list[ReportRecord]:
        recs = []
        for k, res in sorted(self.class_results.items()):
            recs += res.records(run_id, f"{stage}-class{k}")
        recs += [ReportRecord(run_id, stage, r, None, "test", "mean_device_accuracy", float(a))
                 for r, a in enumerate(self.mean_device_accuracy)]
        return recs


def run_fedclass(server: ResidualNet, devices: Sequence[DeviceProfile], fcfg: FederationConfig,
                 test_data: Dataset | None = None) -> FedClassResult:
    """One independent FedAvg run per distinct device depth, each from a copy of ``server``."""
    classes: dict[int, list[DeviceProfile]] = {}
    for d in sorted(devices, key=lambda d: d.device_id):
        classes.setdefault(d.depth, []).append(d)
    base = _baseline_config(fcfg)
    results = {}
    for k, members in sorted(classes.items()):
        if len(members) == 1:
            logger.info("class depth %d has a single device; this is plain local training", k)
        per_round = None if fcfg.devices_per_round is None else min(fcfg.devices_per_round, len(members))
        results[k] = run_federated(server.copy(), members, replace(base, devices_per_round=per_round),
                                   test_data)
    n = len(devices)
    mean_acc = []
    for r in range(fcfg.rounds):
        total = sum(res.reports[r].depth_accuracy[k] * len(classes[k]) for k, res in results.items())
        mean_acc.append(float(total / n))
    return FedClassResult({k: res.net for k, res in results.items()}, results, mean_acc)
