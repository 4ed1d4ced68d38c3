"""Command-line entry point.

    fedchain simulate --config cfg.yaml [--seed N] [--metrics out.jsonl]
                      [--dump-chain chain.bin] [--figures DIR]
    fedchain verify-chain chain.bin
    fedchain gen-data --out data.csv --clusters 4 --per-cluster 50 --dim 2
    fedchain sweep --devices 2,10,20,30,40 --config cfg.yaml [--figure sweep.png]

Exit codes: 0 ok, 2 config or I/O error, 3 integrity failure, 4 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from fedchain.config import SimConfig, load_config
from fedchain.errors import ChainFormatError, ConfigError, DivergenceError, IntegrityError
from fedchain.ledger import dump_chain, load_chain, verify_chain
from fedchain.metrics import emit_metrics
from fedchain.params import gen_synthetic

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INTEGRITY = 3
EXIT_DIVERGED = 4


def _err(msg):
    print(msg, file=sys.stderr)


def cmd_simulate(args) -> int:
    from fedchain.sim import run_simulation

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    result = run_simulation(cfg)

    if args.metrics == "-":
        emit_metrics(result.metrics, sys.stdout, args.timings)
    elif args.metrics:
        with open(args.metrics, "w") as fh:
            emit_metrics(result.metrics, fh, args.timings)
    if args.dump_chain:
        if "{node}" in args.dump_chain:
            for j, chain in result.chains.items():
                dump_chain(chain, args.dump_chain.format(node=j))
        else:
            dump_chain(result.chains[args.node], args.dump_chain)
    if args.figures:
        from fedchain.plots import plot_learning_curve

        out = Path(args.figures)
        out.mkdir(parents=True, exist_ok=True)
        plot_learning_curve(result.metrics, out / "learning_curve.png")

    committed = sum(m.committed for m in result.metrics)
    last = result.metrics[-1]
    _err(f"rounds={len(result.metrics)} committed={committed} "
         f"test_accuracy={last.test_accuracy:.4f} height={last.chain_heights}")
    return EXIT_OK


def cmd_verify_chain(path) -> int:
    """Exit status for verifying the chain dump at ``path``."""
    try:
        chain = load_chain(path)
    except OSError as exc:
        _err(f"{path}: {exc.strerror}")
        return EXIT_CONFIG
    except ChainFormatError as exc:
        where = "header" if exc.height is None else exc.height
        print(f"FAIL height={where} cause=format: {exc}")
        return EXIT_INTEGRITY
    check = verify_chain(chain)
    if not check:
        print(f"FAIL height={check.height} cause={check.cause}")
        return EXIT_INTEGRITY
    print(f"OK blocks={len(chain)} tip={chain.tip.header_hash.hex()}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    train = gen_synthetic(args.clusters, args.per_cluster, args.dim, args.seed,
                          args.skew, args.std)
    test = gen_synthetic(1, args.test_size, args.dim, args.seed + 1, 0.0, args.std)[0]
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "cluster", "label"] + [f"x{k}" for k in range(args.dim)])
        for d in train:
            for x, y in zip(d.features, d.labels):
                w.writerow(["train", d.cluster_id, int(y)] + [repr(float(v)) for v in x])
        for x, y in zip(test.features, test.labels):
            w.writerow(["test", -1, int(y)] + [repr(float(v)) for v in x])
    _err(f"wrote {sum(len(d) for d in train)} train and {len(test)} test rows to {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from fedchain.sim import count_inversions, timing_sweep

    cfg = load_config(args.config) if args.config else SimConfig()
    try:
        counts = [int(c) for c in args.devices.split(",") if c.strip()]
    except ValueError:
        raise ConfigError(f"bad --devices list {args.devices!r}") from None
    rows = timing_sweep(counts, cfg, args.repeats)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["devices", "mean_seconds", "min_seconds", "repeats"])
        for r in rows:
            w.writerow([r.devices, f"{r.mean_seconds:.9f}", f"{r.min_seconds:.9f}", r.repeats])
    finally:
        if out is not sys.stdout:
            out.close()
    if args.figure:
        from fedchain.plots import plot_sweep

        plot_sweep(rows, args.figure)
    _err(f"inversions={count_inversions([r.mean_seconds for r in rows])}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedchain", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a full simulation")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--metrics", help="JSONL output path, or - for stdout")
    s.add_argument("--dump-chain", help="chain dump path; '{node}' expands per node")
    s.add_argument("--node", type=int, default=0, help="node whose chain is dumped")
    s.add_argument("--figures", help="directory for PNG figures")
    s.add_argument("--timings", action="store_true",
                   help="include wall-clock aggregation time in metrics")

    v = sub.add_parser("verify-chain", help="check a chain dump")
    v.add_argument("path")

    g = sub.add_parser("gen-data", help="write synthetic clusters as CSV")
    g.add_argument("--out", required=True)
    g.add_argument("--clusters", type=int, default=4)
    g.add_argument("--per-cluster", type=int, default=50)
    g.add_argument("--dim", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--skew", type=float, default=0.0)
    g.add_argument("--std", type=float, default=0.2)
    g.add_argument("--test-size", type=int, default=400)

    w = sub.add_parser("sweep", help="time enclave aggregation vs device count")
    w.add_argument("--devices", default="2,10,20,30,40")
    w.add_argument("--config")
    w.add_argument("--repeats", type=int, default=20)
    w.add_argument("--out", help="CSV path (default stdout)")
    w.add_argument("--figure", help="PNG path")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "verify-chain":
            return cmd_verify_chain(args.path)
        if args.command == "gen-data":
            return cmd_gen_data(args)
        return cmd_sweep(args)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    except DivergenceError as exc:
        _err(f"training diverged: {exc}")
        return EXIT_DIVERGED
    except IntegrityError as exc:
        _err(str(exc))
        return EXIT_INTEGRITY
    except OSError as exc:
        _err(f"{exc.filename}: {exc.strerror}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
