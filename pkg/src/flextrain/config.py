"""JSON run configuration: schema, strict validation and translation to library objects."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from flextrain.losses import DISTILL_MODES

_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}


def _obj(properties: dict, required: tuple = ()) -> dict:
    return {"type": "object", "properties": properties, "required": list(required),
            "additionalProperties": False}


_PI_ENTRY = {
    "type": "object",
    "properties": {"depth": _POS_INT, "fraction": {"type": "number", "exclusiveMinimum": 0,
                                                    "maximum": 1},
                   "prob": {"type": "number", "minimum": 0}},
    "required": ["prob"],
    "oneOf": [{"required": ["depth"]}, {"required": ["fraction"]}],
    "additionalProperties": False,
}

SCHEMA: dict[str, Any] = _obj({
    "seed": _NONNEG_INT,
    "model": _obj({"hidden_dim": _POS_INT, "K": _POS_INT}, ("hidden_dim", "K")),
    "data": {
        **_obj({
            "source": {"enum": ["spiral", "blobs", "idx", "csv"]},
            "n_per_class": _POS_INT,
            "test_n_per_class": _POS_INT,
            "num_classes": _POS_INT,
            "noise_std": {"type": "number", "minimum": 0},
            "dim": _POS_INT,
            "separation": {"type": "number", "minimum": 0},
            "train_path": {"type": "string"},
            "test_path": {"type": "string"},
            "train_images": {"type": "string"},
            "train_labels": {"type": "string"},
            "test_images": {"type": "string"},
            "test_labels": {"type": "string"},
            "partition": _obj({
                "method": {"enum": ["iid", "dirichlet", "shards"]},
                "num_devices": _POS_INT,
                "alpha": {"type": "number", "exclusiveMinimum": 0},
                "shards_per_device": _POS_INT,
            }, ("method", "num_devices")),
        }, ("source",)),
        "allOf": [
            {"if": {"properties": {"source": {"const": "spiral"}}},
             "then": {"required": ["n_per_class"]}},
            {"if": {"properties": {"source": {"const": "blobs"}}},
             "then": {"required": ["n_per_class", "num_classes", "dim", "separation"]}},
            {"if": {"properties": {"source": {"const": "csv"}}},
             "then": {"required": ["train_path"]}},
            {"if": {"properties": {"source": {"const": "idx"}}},
             "then": {"required": ["train_images", "train_labels"]}},
        ],
    },
    "train": _obj({
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "weight_decay": {"type": "number", "minimum": 0},
        "batch_size": _POS_INT,
        "epochs": _NONNEG_INT,
        "beta": {"type": "number", "minimum": 0},
        "distill_mode": {"enum": list(DISTILL_MODES)},
        "pi": {"type": "array", "items": _PI_ENTRY, "minItems": 1},
        "sample_per": {"enum": ["step", "epoch"]},
        "eval_depths": {"type": "array", "items": _POS_INT, "minItems": 1},
        "lr_decay_epochs": {"type": "array", "items": _NONNEG_INT},
        "lr_decay_gamma": {"type": "number", "exclusiveMinimum": 0},
        "eval_every": _POS_INT,
        "checkpoint_every": _NONNEG_INT,
    }),
    "federation": _obj({
        "rounds": _NONNEG_INT,
        "local_epochs": _NONNEG_INT,
        "devices_per_round": _POS_INT,
        "aggregation_mode": {"enum": ["per-layer", "padded-average"]},
        "weighting": {"enum": ["uniform", "dataset-size"]},
        "distill_mode": {"enum": list(DISTILL_MODES)},
        "reset_momentum": {"type": "boolean"},
        "n_jobs": _POS_INT,
        "capacities": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0,
                                                   "maximum": 1}},
    }),
    "output": _obj({
        "dir": {"type": "string"},
        "format": {"enum": ["csv", "json"]},
        "run_id": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "checkpoint": {"type": "string"},
    }),
}, ("model", "data"))


class ConfigError(ValueError):
    """Raised for unreadable, malformed or schema-violating run configurations."""


@dataclass
class RunConfig:
    raw: dict

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    @property
    def model(self) -> dict:
        return self.raw["model"]

    @property
    def data(self) -> dict:
        return self.raw["data"]

    @property
    def train(self) -> dict:
        return self.raw.get("train", {})

    @property
    def federation(self) -> dict | None:
        return self.raw.get("federation")

    @property
    def output(self) -> dict:
        return self.raw.get("output", {})

    def seeds(self) -> dict[str, int]:
        """Independent sub-seeds derived from the master seed."""
        names = ("data", "init", "train", "partition", "federation", "devices")
        state = np.random.SeedSequence(self.seed).generate_state(len(names))
        return {n: int(s) for n, s in zip(names, state)}

    def with_overrides(self, seed: int | None = None, out: str | None = None,
                       rounds: int | None = None, epochs: int | None = None) -> "RunConfig":
        raw = json.loads(json.dumps(self.raw))
        if seed is not None:
            raw["seed"] = seed
        if out is not None:
            raw.setdefault("output", {})["dir"] = out
        if rounds is not None:
            raw.setdefault("federation", {})["rounds"] = rounds
        if epochs is not None:
            raw.setdefault("train", {})["epochs"] = epochs
        return validate_config(raw)


def validate_config(raw: Any) -> RunConfig:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {err.message}")
    K = raw["model"]["K"]
    for entry in raw.get("train", {}).get("pi", []):
        if "depth" in entry and entry["depth"] > K:
            raise ConfigError(f"config error at train/pi: depth {entry['depth']} exceeds K={K}")
    for k in raw.get("train", {}).get("eval_depths", []):
        if k > K:
            raise ConfigError(f"config error at train/eval_depths: depth {k} exceeds K={K}")
    fed = raw.get("federation")
    part = raw["data"].get("partition")
    if fed is not None and part is not None and "capacities" in fed \
            and len(fed["capacities"]) != part["num_devices"]:
        raise ConfigError("config error at federation/capacities: need one entry per device")
    if part is not None and part["method"] == "dirichlet" and "alpha" not in part:
        raise ConfigError("config error at data/partition: dirichlet partition needs alpha")
    return RunConfig(raw)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return validate_config(raw)


# -- builders -----------------------------------------------------------------------

def build_datasets(cfg: RunConfig):
    """``(train, test)`` datasets; ``test`` is None when the config names none."""
    from flextrain.data import gen_blobs, gen_spiral, load_csv, load_idx

    d, seed = cfg.data, cfg.seeds()["data"]
    src = d["source"]
    if src == "spiral":
        kw = dict(num_classes=d.get("num_classes", 3), noise_std=d.get("noise_std", 0.2))
        train = gen_spiral(d["n_per_class"], seed=seed, split="train", **kw)
        test = gen_spiral(d.get("test_n_per_class", d["n_per_class"]), seed=seed + 1, split="test", **kw)
    elif src == "blobs":
        kw = dict(num_classes=d["num_classes"], dim=d["dim"], separation=d["separation"])
        train = gen_blobs(d["n_per_class"], seed=seed, split="train", **kw)
        test = gen_blobs(d.get("test_n_per_class", d["n_per_class"]), seed=seed, split="test", **kw)
        # same centers, fresh samples
        rng = np.random.default_rng(seed + 1)
        test.X = np.repeat(train.centers, test.class_counts(), axis=0) + rng.standard_normal(test.X.shape)
    elif src == "csv":
        train = load_csv(d["train_path"], d.get("num_classes"), "train")
        test = load_csv(d["test_path"], train.num_classes, "test") if "test_path" in d else None
    else:
        train = load_idx(d["train_images"], d["train_labels"], d.get("num_classes"), "train")
        test = (load_idx(d["test_images"], d["test_labels"], train.num_classes, "test")
                if "test_images" in d and "test_labels" in d else None)
    return train, test


def build_net(cfg: RunConfig, train):
    from flextrain.nn import init_net

    return init_net(train.input_dim, cfg.model["hidden_dim"], train.num_classes, cfg.model["K"],
                    cfg.seeds()["init"])


def build_pi(cfg: RunConfig, net):
    from flextrain.sampler import ActivationDistribution, fraction_to_depth

    entries = cfg.train.get("pi")
    if not entries:
        return None
    probs = [0.0] * net.K
    for e in entries:
        k = e["depth"] if "depth" in e else fraction_to_depth(net, e["fraction"])[0]
        probs[k - 1] += e["prob"]
    try:
        return ActivationDistribution(tuple(probs))
    except ValueError as exc:
        raise ConfigError(f"config error at train/pi: {exc}") from exc


def build_train_config(cfg: RunConfig, net):
    from flextrain.trainer import TrainConfig

    t = cfg.train
    keys = ("lr", "momentum", "weight_decay", "batch_size", "epochs", "beta", "distill_mode",
            "sample_per", "lr_decay_gamma", "eval_every")
    kw = {k: t[k] for k in keys if k in t}
    if "eval_depths" in t:
        kw["eval_depths"] = list(t["eval_depths"])
    if "lr_decay_epochs" in t:
        kw["lr_decay_epochs"] = tuple(t["lr_decay_epochs"])
    return TrainConfig(pi=build_pi(cfg, net), seed=cfg.seeds()["train"], **kw).validate(net.K)


def build_federation(cfg: RunConfig, net, train, tcfg):
    """``(FederationConfig, devices)`` from the federation and partition sections."""
    from flextrain.data import partition_dirichlet, partition_iid, partition_shards
    from flextrain.federated import FederationConfig, make_devices, spread_capacities

    f = cfg.federation
    part = cfg.data.get("partition")
    if f is None or part is None:
        raise ConfigError("config error: federated runs need a federation section and data/partition")
    seeds = cfg.seeds()
    J = part["num_devices"]
    method = part["method"]
    if method == "iid":
        plan = partition_iid(train, J, seeds["partition"])
    elif method == "dirichlet":
        plan = partition_dirichlet(train, J, part["alpha"], seeds["partition"])
    else:
        plan = partition_shards(train, J, part.get("shards_per_device", 2), seeds["partition"])
    caps = f.get("capacities") or spread_capacities(J)
    devices = make_devices(net, train, plan, caps, seeds["devices"])
    keys = ("rounds", "local_epochs", "devices_per_round", "aggregation_mode", "weighting",
            "distill_mode", "reset_momentum", "n_jobs")
    fcfg = FederationConfig(train=tcfg, seed=seeds["federation"], **{k: f[k] for k in keys if k in f})
    try:
        fcfg.validate(J)
    except ValueError as exc:
        raise ConfigError(f"config error at federation: {exc}") from exc
    return fcfg, devices
