"""Command line entry point: ``python -m fedsemi <command> ...``.

Exit status: 0 on success, 1 for usage or configuration errors, 2 for
runtime errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import orchestrator as orch
from .aggregate import STRATEGIES
from .data_sim import save_partition
from .errors import ConfigurationError, DataError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedsemi", description="Federated semi-supervised aggregation simulator")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("config", help="experiment config (JSON)")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--out-dir", help="override the output directory")
        sp.add_argument("--strategy", choices=STRATEGIES, help="override the aggregation strategy")
        return sp

    common(sub.add_parser("run", help="run a single experiment"))
    common(sub.add_parser("loo", help="leave-one-out valuation of unlabeled clients"))
    sw = common(sub.add_parser("sweep", help="run one experiment per value of a config field"))
    sw.add_argument("--param", required=True, help="dotted config path, e.g. partition.alpha")
    sw.add_argument("--values", required=True, help="comma separated JSON values, e.g. 0.1,0.8,2.0")
    pt = common(sub.add_parser("partition", help="write the generated partition to a JSON file"))
    pt.add_argument("--out", required=True, help="destination file")
    return p


def _load(args) -> orch.ExperimentConfig:
    cfg = orch.load_config(args.config)
    if args.seed is not None:
        cfg = orch.set_config_value(cfg, "seed", args.seed)
    if args.strategy is not None:
        cfg = orch.set_config_value(cfg, "strategy", args.strategy)
    if args.out_dir is not None:
        cfg = orch.set_config_value(cfg, "out_dir", args.out_dir)
    return cfg


def _parse_values(text: str):
    out = []
    for item in text.split(","):
        item = item.strip()
        try:
            out.append(json.loads(item))
        except json.JSONDecodeError:
            out.append(item)
    return out


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _load(args)
        if args.command == "sweep":
            cfgs = [(v, orch.set_config_value(cfg, args.param, v)) for v in _parse_values(args.values)]
    except (ConfigurationError, DataError) as exc:
        print(f"fedsemi: config error in {args.config}: {exc}", file=sys.stderr)
        return 1
    try:
        if args.command == "run":
            state = orch.run_experiment(cfg)
            print(json.dumps(orch.summary_dict(state)["final_metrics"]))
        elif args.command == "loo":
            for row in orch.leave_one_out(cfg):
                print(f"{row.client_id}\t{row.data_size}\t{row.delta_error:+.4f}")
        elif args.command == "sweep":
            for value, sub_cfg in cfgs:
                out = Path(cfg.out_dir) / f"{args.param}={value}"
                state = orch.run_experiment(sub_cfg, out)
                print(f"{args.param}={value}\t{state.metrics[-1].b_acc:.4f}\t{out}")
        elif args.command == "partition":
            clients, test = orch.build_data(cfg)
            path = save_partition(args.out, clients, cfg.dataset.num_classes, test)
            print(path)
    except (ConfigurationError, DataError) as exc:
        print(f"fedsemi: config error in {args.config}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"fedsemi: runtime error ({args.config}): {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
