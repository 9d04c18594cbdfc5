"""Command-line entry points.

``fedmatch run`` executes a config-driven experiment (flags override config
keys); ``fedmatch bench`` times the matching stage on adversarial no-match
inputs. Exit codes: 0 success, 1 some or all seeds failed, 2 bad
configuration or arguments.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .experiment import ExperimentConfig, benchmark_matching, emit_results, \
    loglog_slope, run_experiment


def _csv_ints(text: str):
    return tuple(int(x) for x in text.split(",") if x != "")


def _csv_floats(text: str):
    return tuple(float(x) for x in text.split(",") if x != "")


def _csv_names(text: str):
    return tuple(x.strip() for x in text.split(",") if x.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedmatch",
        description="Federated fusion of independently trained MLPs by neuron matching",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a config-driven experiment")
    run.add_argument("--config", help="JSON config file; flags override its keys")
    run.add_argument("--dataset", choices=["mnist", "synthetic"])
    run.add_argument("--data-dir", dest="data_dir")
    run.add_argument("--subset", type=int, help="cap on training examples")
    run.add_argument("--subset-test", dest="subset_test", type=int)
    run.add_argument("--partition", choices=["homogeneous", "heterogeneous"])
    run.add_argument("--batches", type=int, help="number of data silos J")
    run.add_argument("--concentration", type=float,
                     help="Dirichlet concentration for heterogeneous partitions")
    run.add_argument("--method", dest="methods", type=_csv_names,
                     help="comma-separated: pfnm,pfnm_rounds,fedavg,ensemble,kmeans,local")
    run.add_argument("--layers", type=int, help="number of hidden layers")
    run.add_argument("--neurons", type=int, help="neurons per hidden layer")
    run.add_argument("--rounds", type=int, help="communication rounds")
    run.add_argument("--sigma0-sq", dest="sigma0_sq", type=float)
    run.add_argument("--sigma-sq", dest="sigma_sq", type=float)
    run.add_argument("--gamma0", type=float)
    run.add_argument("--sigma-sq-grid", dest="sigma_sq_grid", type=_csv_floats)
    run.add_argument("--seeds", "--seed", dest="seeds", type=_csv_ints,
                     help="comma-separated trial seeds")
    run.add_argument("--out", help="output directory for results/rounds/model files")
    run.add_argument("--record-wall-clock", dest="record_wall_clock",
                     action="store_true", default=None,
                     help="write real timings into rounds.csv (breaks byte determinism)")

    bench = sub.add_parser("bench", help="time matching on adversarial inputs")
    bench.add_argument("--sizes", type=_csv_ints, default=(25, 50, 100),
                       help="per-batch neuron counts, comma-separated")
    bench.add_argument("--batches", type=int, default=4)
    bench.add_argument("--dim", type=int, default=256)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--out", help="optional JSON output path")
    return parser


_RUN_KEYS = (
    "dataset", "data_dir", "subset", "subset_test", "partition", "batches",
    "concentration", "methods", "layers", "neurons", "rounds", "sigma0_sq",
    "sigma_sq", "gamma0", "sigma_sq_grid", "seeds", "out", "record_wall_clock",
)


def _load_config(args) -> ExperimentConfig:
    data = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ValueError(f"config file {path} does not exist")
        data = json.loads(path.read_text())
        if not isinstance(data, dict):
            raise ValueError("config file must hold a JSON object")
    for key in _RUN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    cfg = ExperimentConfig.from_dict(data)
    cfg.validate()
    return cfg


def _cmd_run(args) -> int:
    try:
        cfg = _load_config(args)
    except (ValueError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    record = run_experiment(cfg)
    for row in record.rows:
        print(f"seed={row['seed']} round={row['round']} method={row['method']} "
              f"accuracy={row['accuracy']:.4f} size={row['global_size']} "
              f"log_size_ratio={row['log_size_ratio']:.4f}")
    for failure in record.failures:
        print(f"seed={failure['seed']} FAILED: {failure['error']}", file=sys.stderr)
    if cfg.out:
        paths = emit_results(record, cfg.out)
        print("wrote " + ", ".join(str(p) for p in paths.values()))
    return 1 if record.failures else 0


def _cmd_bench(args) -> int:
    rows = benchmark_matching(args.sizes, num_batches=args.batches,
                              dim=args.dim, seed=args.seed)
    for r in rows:
        print(f"n={r['n_total']} cost_seconds={r['cost_seconds']:.4f} "
              f"solve_seconds={r['solve_seconds']:.4f} solves={r['num_solves']}")
    if len(rows) >= 2:
        ns = [r["n_total"] for r in rows]
        print(f"cost slope ~ {loglog_slope(ns, [r['cost_seconds'] for r in rows]):.2f}, "
              f"solve slope ~ {loglog_slope(ns, [r['solve_seconds'] for r in rows]):.2f}")
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=1))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    return _cmd_bench(args)


if __name__ == "__main__":
    sys.exit(main())
