"""Command-line entry point: one experiment per invocation, driven by a JSON config."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from flextrain.config import (ConfigError, RunConfig, build_datasets, build_federation, build_net,
                              build_train_config, load_config)
from flextrain.nn import DivergenceError, load_checkpoint, save_checkpoint
from flextrain.reporting import ReportRecord, cost_summary, write_report
from flextrain.sampler import ActivationDistribution

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
DEFAULT_OUT_DIR = "flextrain_out"
SUBCOMMANDS = ("train", "single", "independents", "fedtrain", "fedsmall", "fedclass", "flops", "eval")

logger = logging.getLogger("flextrain")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; ours reserves 2 for runtime failures.
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flextrain", description="Depth-flexible training experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True
    helps = {
        "train": "sampled-depth training with auto-distillation",
        "single": "plain full-depth training, evaluated at truncated depths",
        "independents": "one separately trained network per depth",
        "fedtrain": "federated depth-flexible training",
        "fedsmall": "FedAvg at the weakest device's depth",
        "fedclass": "one FedAvg run per device depth class",
        "flops": "expected parameter and FLOP ratios for the configured distribution",
        "eval": "evaluate a saved checkpoint at every depth",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--rounds", type=int, help="override federation rounds")
        p.add_argument("--epochs", type=int, help="override training epochs")
        if name == "eval":
            p.add_argument("--checkpoint", help="checkpoint directory (default: the train output)")
    return parser


def _out_dir(cfg: RunConfig) -> Path:
    return Path(cfg.output.get("dir") or os.environ.get("FLEXTRAIN_OUT_DIR") or DEFAULT_OUT_DIR)


def _run_id(cfg: RunConfig, command: str) -> str:
    return cfg.output.get("run_id") or f"{command}-seed{cfg.seed}"


def _report(cfg: RunConfig, command: str, records) -> Path:
    fmt = cfg.output.get("format", "csv")
    path = _out_dir(cfg) / _run_id(cfg, command) / f"{command}_report.{fmt}"
    return write_report(records, path, fmt)


def _checkpoint_path(cfg: RunConfig, command: str) -> Path:
    if "checkpoint" in cfg.output:
        return Path(cfg.output["checkpoint"])
    return _out_dir(cfg) / _run_id(cfg, command) / "model"


def _epoch_records(logs, run_id, stage, split):
    return [r for log in logs for r in log.to_records(run_id, stage, split)]


def _final_accuracy(acc: dict[int, float]) -> str:
    return " ".join(f"k={k}:{a:.4f}" for k, a in sorted(acc.items()))


def _cmd_train(cfg: RunConfig, command: str, args) -> str:
    from flextrain.trainer import train_flextrain, train_single

    train, test = build_datasets(cfg)
    net = build_net(cfg, train)
    tcfg = build_train_config(cfg, net)
    run_id = _run_id(cfg, command)
    ckpt_every = cfg.train.get("checkpoint_every", 0)
    ckpt_dir = _out_dir(cfg) / run_id / "checkpoints" if ckpt_every else None
    fn = train_flextrain if command == "train" else train_single
    net, logs = fn(net, train, tcfg, eval_data=test, checkpoint_dir=ckpt_dir,
                   checkpoint_every=ckpt_every)
    split = "test" if test is not None else "train"
    path = _report(cfg, command, _epoch_records(logs, run_id, command, split))
    save_checkpoint(net, _checkpoint_path(cfg, command))
    acc = logs[-1].eval_accuracy if logs else {}
    return f"{command}: {split} accuracy {_final_accuracy(acc) or 'n/a'} -> {path}"


def _cmd_independents(cfg: RunConfig, command: str, args) -> str:
    from flextrain.trainer import train_independents

    train, test = build_datasets(cfg)
    net = build_net(cfg, train)
    tcfg = build_train_config(cfg, net)
    depths = tcfg.depths_to_eval(net.K)
    res = train_independents(train, tcfg, depths, cfg.model["hidden_dim"], eval_data=test)
    run_id = _run_id(cfg, command)
    split = "test" if test is not None else "train"
    records = []
    for k, logs in sorted(res.logs.items()):
        records += _epoch_records(logs, run_id, f"{command}-k{k}", split)
    records.append(ReportRecord(run_id, command, tcfg.epochs, None, "train", "flops_total",
                                float(res.total_flops)))
    path = _report(cfg, command, records)
    acc = {k: logs[-1].eval_accuracy[k] for k, logs in res.logs.items() if logs}
    return f"{command}: {split} accuracy {_final_accuracy(acc) or 'n/a'} -> {path}"


def _cmd_federated(cfg: RunConfig, command: str, args) -> str:
    from flextrain.federated import run_fedclass, run_federated, run_fedsmall

    train, test = build_datasets(cfg)
    net = build_net(cfg, train)
    tcfg = build_train_config(cfg, net)
    fcfg, devices = build_federation(cfg, net, train, tcfg)
    run_id = _run_id(cfg, command)
    if command == "fedclass":
        res = run_fedclass(net, devices, fcfg, test)
        records = res.records(run_id, command)
        final = res.mean_device_accuracy[-1] if res.mean_device_accuracy else float("nan")
    else:
        fn = run_federated if command == "fedtrain" else run_fedsmall
        res = fn(net, devices, fcfg, test)
        records = res.records(run_id, command)
        final = res.reports[-1].mean_device_accuracy if res.reports else float("nan")
        save_checkpoint(res.net, _checkpoint_path(cfg, command))
    path = _report(cfg, command, records)
    return f"{command}: mean device accuracy {final:.4f} -> {path}"


def _cmd_flops(cfg: RunConfig, command: str, args) -> str:
    from flextrain.nn import init_net

    d = cfg.data
    # accounting only needs shapes, so avoid generating or loading data when possible
    if d["source"] in ("spiral", "blobs"):
        in_dim = 2 if d["source"] == "spiral" else d["dim"]
        n_cls = d.get("num_classes", 3)
        net = init_net(in_dim, cfg.model["hidden_dim"], n_cls, cfg.model["K"], 0)
    else:
        train, _ = build_datasets(cfg)
        net = build_net(cfg, train)
    tcfg = build_train_config(cfg, net)
    pi = tcfg.pi or ActivationDistribution.one_hot(net.K, net.K)
    summary = cost_summary(pi, net)
    run_id = _run_id(cfg, command)
    records = [ReportRecord(run_id, command, 0, None, "model", metric, float(v))
               for metric, v in summary.items()]
    path = _report(cfg, command, records)
    body = " ".join(f"{k}={v:.6f}" for k, v in summary.items())
    return f"flops: {body} -> {path}"


def _cmd_eval(cfg: RunConfig, command: str, args) -> str:
    from flextrain.trainer import evaluate_depths

    ckpt = Path(args.checkpoint) if args.checkpoint else _checkpoint_path(cfg, "train")
    net = load_checkpoint(ckpt)
    train, test = build_datasets(cfg)
    ds = test if test is not None else train
    if ds.input_dim != net.input_dim:
        raise ConfigError(f"checkpoint expects {net.input_dim} features, data has {ds.input_dim}")
    acc, loss = evaluate_depths(net, ds, list(range(1, net.K + 1)))
    run_id = _run_id(cfg, command)
    records = [ReportRecord(run_id, command, 0, k, ds.split, "accuracy", a) for k, a in acc.items()]
    records += [ReportRecord(run_id, command, 0, k, ds.split, "loss", v) for k, v in loss.items()]
    path = _report(cfg, command, records)
    return f"eval: {ds.split} accuracy {_final_accuracy(acc)} -> {path}"


_HANDLERS = {
    "train": _cmd_train, "single": _cmd_train, "independents": _cmd_independents,
    "fedtrain": _cmd_federated, "fedsmall": _cmd_federated, "fedclass": _cmd_federated,
    "flops": _cmd_flops, "eval": _cmd_eval,
}


def run_cli(argv=None) -> int:
    """Parse ``argv``, run one experiment and return the process exit code."""
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config).with_overrides(args.seed, args.out, args.rounds, args.epochs)
        summary = _HANDLERS[args.command](cfg, args.command, args)
    except ConfigError as exc:
        print(f"flextrain: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FloatingPointError) as exc:
        print(f"flextrain: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"flextrain: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(summary)
    return EXIT_OK


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
