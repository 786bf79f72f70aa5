"""FLOP accounting, metric records and CSV/JSON persistence.

FLOP convention: a dense ``d_in -> d_out`` layer costs ``2*d_in*d_out + d_out``
per sample (multiply and add counted separately, plus the bias add); ReLU and
the residual add cost one FLOP per hidden unit; backward costs twice forward.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from flextrain._validation import check_depth
from flextrain.sampler import ActivationDistribution, prefix_param_counts

BACKWARD_MULTIPLIER = 2
REPORT_FIELDS = ("run_id", "stage", "round_or_epoch", "depth_k", "split", "metric", "value")


def dense_flops(d_in: int, d_out: int) -> int:
    return 2 * d_in * d_out + d_out


@dataclass(frozen=True)
class CostModel:
    """Per-sample forward FLOPs of each prefix depth (``forward[k-1]`` for depth ``k``)."""
    forward: tuple[int, ...]
    backward_multiplier: int = BACKWARD_MULTIPLIER

    @classmethod
    def from_net(cls, net) -> "CostModel":
        h = net.hidden_dim
        pre = dense_flops(net.input_dim, h) + h
        block = 2 * dense_flops(h, h) + 2 * h
        head = dense_flops(h, net.num_classes)
        return cls(tuple(pre + k * block + head for k in range(1, net.K + 1)))

    @property
    def K(self) -> int:
        return len(self.forward)

    def cost(self, k: int, batch_size: int = 1, include_backward: bool = False) -> int:
        k = check_depth(k, self.K)
        per_sample = self.forward[k - 1]
        if include_backward:
            per_sample *= 1 + self.backward_multiplier
        return per_sample * batch_size


def flop_count_prefix(net, k: int, batch_size: int = 1, include_backward: bool = False) -> int:
    return CostModel.from_net(net).cost(k, batch_size, include_backward)


@dataclass(frozen=True)
class TrainingCost:
    flops: float
    full_flops: float

    @property
    def ratio(self) -> float:
        return self.flops / self.full_flops


def expected_training_cost(pi: ActivationDistribution, cost, steps: int,
                           batch_size: int) -> TrainingCost:
    """Expected forward+backward FLOPs of ``steps`` sampled steps vs always training depth K.

    ``cost`` is a net, a :class:`CostModel`, or any per-depth cost sequence
    (e.g. parameter fractions).
    """
    per_depth = _per_depth_costs(cost)
    if len(per_depth) != pi.K:
        raise ValueError(f"distribution has {pi.K} depths, cost model has {len(per_depth)}")
    scale = (1 + BACKWARD_MULTIPLIER) * steps * batch_size
    return TrainingCost(float(np.dot(pi.probs, per_depth)) * scale, float(per_depth[-1]) * scale)


def independent_training_cost(cost, depths: Sequence[int], steps: int, batch_size: int) -> float:
    """FLOPs of training one separate model per depth for ``steps`` steps each."""
    per_depth = _per_depth_costs(cost)
    scale = (1 + BACKWARD_MULTIPLIER) * steps * batch_size
    return float(sum(per_depth[k - 1] for k in depths)) * scale


def _per_depth_costs(cost) -> np.ndarray:
    if isinstance(cost, CostModel):
        return np.asarray(cost.forward, dtype=np.float64)
    if hasattr(cost, "prefix_param_count"):
        return np.asarray(CostModel.from_net(cost).forward, dtype=np.float64)
    return np.asarray(cost, dtype=np.float64)


def cost_summary(pi: ActivationDistribution, net) -> dict[str, float]:
    """Parameter ratio, FLOP ratio and FlexTrain-vs-independent ratios for ``pi`` on ``net``."""
    counts = prefix_param_counts(net)
    flops = np.asarray(CostModel.from_net(net).forward, dtype=np.float64)
    support = pi.support
    r_bar = float(np.dot(pi.probs, counts) / counts[-1])
    flop_ratio = float(np.dot(pi.probs, flops) / flops[-1])
    return {
        "expected_param_ratio": r_bar,
        "flop_ratio_vs_single": flop_ratio,
        "param_ratio_vs_independent": float(np.dot(pi.probs, counts) / counts[np.array(support) - 1].sum()),
        "flop_ratio_vs_independent": float(np.dot(pi.probs, flops) / flops[np.array(support) - 1].sum()),
    }


# -- records ----------------------------------------------------------------------

@dataclass(frozen=True)
class ReportRecord:
    run_id: str
    stage: str
    round_or_epoch: int
    depth_k: int | None
    split: str
    metric: str
    value: float

    def sort_key(self):
        return (self.run_id, self.stage, self.round_or_epoch,
                -1 if self.depth_k is None else self.depth_k, self.split, self.metric)


def _render(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report(records: Iterable[ReportRecord], path, fmt: str | None = None) -> Path:
    """Persist records sorted by key; floats use the shortest round-trip repr."""
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".") or "csv"
    rows = sorted(records, key=ReportRecord.sort_key)
    for r in rows:
        if not isinstance(r, ReportRecord):
            raise TypeError(f"expected ReportRecord, got {type(r).__name__}")
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(REPORT_FIELDS)
            for r in rows:
                writer.writerow([_render(getattr(r, f)) for f in REPORT_FIELDS])
    elif fmt == "json":
        payload = [{**asdict(r), "value": float(r.value)} for r in rows]
        path.write_text(json.dumps(payload, indent=1) + "\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def read_report(path, fmt: str | None = None) -> list[ReportRecord]:
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".") or "csv"
    if fmt == "json":
        return [ReportRecord(**row) for row in json.loads(path.read_text())]
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [ReportRecord(row["run_id"], row["stage"], int(row["round_or_epoch"]),
                             int(row["depth_k"]) if row["depth_k"] else None,
                             row["split"], row["metric"], float(row["value"]))
                for row in reader]


def curve_accuracy_vs_fraction(net, dataset, depths: Sequence[int]) -> list[tuple[float, float]]:
    """``(A_k / A, accuracy at depth k)`` pairs sorted by fraction."""
    from flextrain.trainer import evaluate_prefix

    if not depths:
        raise ValueError("depths must be non-empty")
    counts = prefix_param_counts(net)
    points = [(float(counts[k - 1] / counts[-1]), evaluate_prefix(net, dataset, k))
              for k in sorted(set(depths))]
    return points
