import json

import pytest

from flextrain.config import (ConfigError, build_datasets, build_federation, build_net, build_pi,
                              build_train_config, load_config, validate_config)


def minimal(**extra):
    raw = {"model": {"hidden_dim": 4, "K": 3}, "data": {"source": "spiral", "n_per_class": 10}}
    raw.update(extra)
    return raw


def test_minimal_config_defaults():
    cfg = validate_config(minimal())
    assert cfg.seed == 0 and cfg.train == {} and cfg.federation is None


@pytest.mark.parametrize("raw,where", [
    (minimal(extra=1), "<root>"),
    ({"model": {"hidden_dim": 4, "K": 3}}, "<root>"),
    (minimal(model={"hidden_dim": 4, "K": 3, "width": 2}), "model"),
    (minimal(model={"hidden_dim": 0, "K": 3}), "model/hidden_dim"),
    (minimal(data={"source": "spiral"}), "data"),
    (minimal(data={"source": "mnist", "n_per_class": 3}), "data/source"),
    (minimal(train={"lr": -1}), "train/lr"),
    (minimal(train={"momentum": 1.0}), "train/momentum"),
    (minimal(train={"distill_mode": "kd"}), "train/distill_mode"),
    (minimal(train={"pi": [{"prob": 1.0}]}), "train/pi/0"),
    (minimal(train={"pi": [{"depth": 1, "fraction": 0.5, "prob": 1.0}]}), "train/pi/0"),
    (minimal(train={"pi": [{"depth": 4, "prob": 1.0}]}), "train/pi"),
    (minimal(train={"eval_depths": [9]}), "train/eval_depths"),
    (minimal(federation={"aggregation_mode": "mean"}), "federation/aggregation_mode"),
    (minimal(output={"run_id": "a b"}), "output/run_id"),
])
def test_schema_violations(raw, where):
    with pytest.raises(ConfigError, match=f"at {where}"):
        validate_config(raw)


def test_blobs_require_geometry():
    with pytest.raises(ConfigError):
        validate_config(minimal(data={"source": "blobs", "n_per_class": 5}))


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(bad)


def test_overrides():
    cfg = validate_config(minimal()).with_overrides(seed=3, out="o", rounds=2, epochs=5)
    assert cfg.seed == 3 and cfg.output["dir"] == "o"
    assert cfg.federation["rounds"] == 2 and cfg.train["epochs"] == 5


def test_seeds_are_derived_and_distinct():
    s0 = validate_config(minimal()).seeds()
    s1 = validate_config(minimal(seed=1)).seeds()
    assert len(set(s0.values())) == len(s0) and s0 != s1
    assert s0 == validate_config(minimal()).seeds()


def test_pi_from_depths_and_fractions():
    cfg = validate_config(minimal(train={"pi": [{"depth": 1, "prob": 0.25},
                                                {"fraction": 1.0, "prob": 0.5},
                                                {"depth": 3, "prob": 0.25}]}))
    train, _ = build_datasets(cfg)
    pi = build_pi(cfg, build_net(cfg, train))
    assert pi.probs == (0.25, 0.0, 0.75)


def test_pi_must_sum_to_one():
    cfg = validate_config(minimal(train={"pi": [{"depth": 1, "prob": 0.5}]}))
    train, _ = build_datasets(cfg)
    with pytest.raises(ConfigError):
        build_pi(cfg, build_net(cfg, train))


def test_train_config_translation():
    cfg = validate_config(minimal(train={"lr": 0.1, "epochs": 2, "lr_decay_epochs": [1],
                                         "eval_depths": [3, 1]}))
    train, test = build_datasets(cfg)
    assert len(train) == len(test) == 30 and test.split == "test"
    tcfg = build_train_config(cfg, build_net(cfg, train))
    assert tcfg.lr == 0.1 and tcfg.epochs == 2 and tcfg.lr_decay_epochs == (1,)
    assert tcfg.seed == cfg.seeds()["train"]


def test_csv_source(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("x0,x1,x2,label\n0,1,2,0\n1,1,1,1\n")
    cfg = validate_config({"model": {"hidden_dim": 4, "K": 2},
                           "data": {"source": "csv", "train_path": str(p)}})
    train, test = build_datasets(cfg)
    assert train.input_dim == 3 and test is None


def test_federation_requires_partition():
    cfg = validate_config(minimal(federation={"rounds": 1}))
    train, _ = build_datasets(cfg)
    net = build_net(cfg, train)
    with pytest.raises(ConfigError):
        build_federation(cfg, net, train, build_train_config(cfg, net))


def test_federation_build():
    cfg = validate_config(minimal(
        data={"source": "spiral", "n_per_class": 20,
              "partition": {"method": "dirichlet", "num_devices": 3, "alpha": 0.5}},
        federation={"rounds": 2, "capacities": [0.2, 0.6, 1.0], "aggregation_mode": "padded-average"}))
    train, _ = build_datasets(cfg)
    net = build_net(cfg, train)
    fcfg, devices = build_federation(cfg, net, train, build_train_config(cfg, net))
    assert fcfg.rounds == 2 and fcfg.aggregation_mode == "padded-average"
    assert [d.depth for d in devices][-1] == 3 and sum(d.n_samples for d in devices) == 60


def test_capacities_must_match_devices():
    with pytest.raises(ConfigError):
        validate_config(minimal(
            data={"source": "spiral", "n_per_class": 5,
                  "partition": {"method": "iid", "num_devices": 2}},
            federation={"capacities": [1.0]}))


def test_shipped_configs_validate():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for path in sorted(root.glob("*.json")):
        load_config(path)
        json.loads(path.read_text())
