import numpy as np
import pytest

from flextrain.data import gen_spiral
from flextrain.nn import init_net
from flextrain.reporting import (CostModel, ReportRecord, cost_summary, curve_accuracy_vs_fraction,
                                 dense_flops, expected_training_cost, flop_count_prefix,
                                 independent_training_cost, read_report, write_report)
from flextrain.sampler import ActivationDistribution


def test_dense_layer_flops():
    assert dense_flops(2, 3) == 15


def test_prefix_flops_by_hand():
    net = init_net(2, 4, 3, 2, seed=0)
    pre = 2 * 2 * 4 + 4 + 4
    block = 2 * (2 * 4 * 4 + 4) + 2 * 4
    head = 2 * 4 * 3 + 3
    assert flop_count_prefix(net, 1) == pre + block + head == 131
    assert flop_count_prefix(net, 2) == 131 + block
    assert flop_count_prefix(net, 2, include_backward=True) == 3 * flop_count_prefix(net, 2)


def test_flops_linear_in_batch():
    net = init_net(3, 8, 4, 3, seed=0)
    for k in (1, 2, 3):
        assert flop_count_prefix(net, k, batch_size=17) == 17 * flop_count_prefix(net, k)


def test_flops_strictly_increase_with_depth():
    cm = CostModel.from_net(init_net(3, 8, 4, 5, seed=0))
    assert all(a < b for a, b in zip(cm.forward, cm.forward[1:]))


def test_expected_cost_reference_ratio():
    pi = ActivationDistribution((0.25, 0.25, 0.5))
    tc = expected_training_cost(pi, (0.15, 0.35, 1.0), steps=10, batch_size=4)
    assert abs(tc.ratio - 0.625) < 1e-12
    indep = independent_training_cost((0.15, 0.35, 1.0), [1, 2, 3], steps=10, batch_size=4)
    assert abs(tc.flops / indep - 0.625 / 1.5) < 1e-12


def test_expected_cost_shape_mismatch():
    with pytest.raises(ValueError):
        expected_training_cost(ActivationDistribution((0.5, 0.5)), (0.1, 0.5, 1.0), 1, 1)


def test_cost_summary_full_depth():
    net = init_net(2, 4, 3, 3, seed=0)
    s = cost_summary(ActivationDistribution.one_hot(3, 3), net)
    assert s["expected_param_ratio"] == 1.0 and s["flop_ratio_vs_single"] == 1.0
    assert s["flop_ratio_vs_independent"] == 1.0


def rec(**kw):
    base = dict(run_id="r", stage="train", round_or_epoch=1, depth_k=2, split="test",
                metric="accuracy", value=0.5)
    base.update(kw)
    return ReportRecord(**base)


def test_empty_csv_is_header_only(tmp_path):
    p = write_report([], tmp_path / "empty.csv")
    assert p.read_text() == "run_id,stage,round_or_epoch,depth_k,split,metric,value\n"
    assert read_report(p) == []


@pytest.mark.parametrize("suffix", ["csv", "json"])
def test_report_round_trip(tmp_path, suffix):
    records = [rec(value=0.1), rec(depth_k=None, metric="loss", value=1 / 3),
               rec(round_or_epoch=0, value=1e-300)]
    p = write_report(records, tmp_path / f"r.{suffix}")
    back = read_report(p)
    assert sorted(back, key=ReportRecord.sort_key) == back
    assert set(back) == set(records)
    assert any(r.value == 0.1 for r in back)


def test_report_is_order_independent(tmp_path):
    records = [rec(depth_k=k, value=k / 7) for k in (3, 1, 2)]
    a = write_report(records, tmp_path / "a.csv").read_bytes()
    b = write_report(records[::-1], tmp_path / "b.csv").read_bytes()
    assert a == b
    assert b"0.14285714285714285" in a


def test_report_rejects_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        write_report([rec()], tmp_path / "r.xml")


def test_accuracy_curve():
    net = init_net(2, 8, 3, 3, seed=0)
    ds = gen_spiral(30, 3, seed=0)
    pts = curve_accuracy_vs_fraction(net, ds, [3, 1])
    assert [p[0] for p in pts] == sorted(p[0] for p in pts)
    assert pts[-1][0] == 1.0
    assert all(0.0 <= acc <= 1.0 for _, acc in pts)
