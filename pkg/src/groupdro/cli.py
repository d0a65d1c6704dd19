"""Command-line entry point: ``groupdro {generate,train,benchmark,theory,report}``.

Every subcommand reads one JSON config; flags override its values. Output
goes under ``--out``, else the config's ``output_dir``, else
``$GROUPDRO_OUTPUT_ROOT``, else ``./runs``.

Exit codes: 0 success, 1 usage or config error, 2 runtime or numerical
error (including a failed theory check), 3 benchmark finished with some
failed cells.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from groupdro import theory
from groupdro.datagen import SyntheticSpec, generate_splits, write_csv
from groupdro.errors import ConfigError, InvalidArgument, NumericalError, SchemaError
from groupdro.experiment import (
    OUTPUT_ROOT_ENV,
    Cell,
    ExperimentConfig,
    build_arch,
    default_output_root,
    load_splits,
    run_benchmark,
    write_run_dir,
)
from groupdro.optimizer import MODES, VARIANTS, early_stop_select, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3

# flag name -> key in the optimizer section of the config
OPTIMIZER_FLAGS = {
    "mode": "mode", "variant": "variant", "eta_theta": "eta_theta", "eta_q": "eta_q",
    "momentum": "momentum", "lam": "lambda", "C": "C", "batch_size": "batch_size",
    "epochs": "epochs", "seed": "seed",
}


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def _out_dir(args, leaf: str) -> Path:
    return Path(args.out) if args.out else default_output_root() / leaf


def cmd_generate(args) -> int:
    data = _read_json(args.config)
    spec_data = data.get("dataset", data)
    if not isinstance(spec_data, dict):
        raise ConfigError("generate needs a synthetic dataset spec")
    spec_data = dict(spec_data)
    if args.seed is not None:
        spec_data["seed"] = args.seed
    spec = SyntheticSpec.from_dict(spec_data)
    n_val = args.n_val if args.n_val is not None else data.get("n_val", 1000)
    n_test = args.n_test if args.n_test is not None else data.get("n_test", 2000)
    out = _out_dir(args, "data")
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in zip(("train", "val", "test"), generate_splits(spec, n_val, n_test)):
        write_csv(ds, out / f"{name}.csv")
        print(f"{out / (name + '.csv')}: n={ds.n} group sizes={ds.group_sizes.tolist()}")
    sidecar = {"spec": spec.to_dict(), "n_val": n_val, "n_test": n_test}
    (out / "spec.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _apply_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    opt = dict(config.optimizer)
    for flag, key in OPTIMIZER_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            opt[key] = value
    changes = {"optimizer": opt}
    if getattr(args, "dataset", None):
        changes["dataset"] = args.dataset
    if getattr(args, "out", None):
        changes["output_dir"] = args.out
    return replace(config, **changes)


def cmd_train(args) -> int:
    config = _apply_overrides(ExperimentConfig.load(args.config), args)
    opt = config.base_optimizer()
    if args.dry_run:
        print(config.to_json())
        return EXIT_OK
    train_set, val_set, test_set = load_splits(config, opt.seed)
    arch = build_arch(config, train_set)
    params, history = train(opt, train_set, val_set, arch, eval_sets={"test": test_set})
    run_id = Cell(opt.mode, opt.lam, opt.adjustment_c, opt.epochs).run_id(opt.seed)
    out = Path(args.out) / run_id if args.out else config.output_root() / run_id
    write_run_dir(out, config, opt, history, params)
    best = early_stop_select(history)
    last = history.checkpoints[-1]
    print(f"run {run_id} -> {out}")
    print(f"final worst-group val acc {last.splits['val'].worst_acc:.4f}, "
          f"test {last.splits['test'].worst_acc:.4f}; best checkpoint {best}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    config = _apply_overrides(ExperimentConfig.load(args.config), args)
    if args.dry_run:
        print(config.to_json())
        for cell in config.cells(include_adjusted=True, designated=config.adjust_at_lambda or config.lambdas[0]):
            print(cell.run_id(config.seeds[0]).rsplit("_s", 1)[0])
        return EXIT_OK
    out = Path(args.out) if args.out else config.output_root() / "benchmark"
    bench = run_benchmark(config, out, jobs=args.jobs)
    print(bench.table_markdown(), end="")
    print(f"results in {out}")
    if bench.failures:
        for r in bench.failures:
            print(f"cell failed: {r.run_id}: {r.error}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_theory(args) -> int:
    data = _read_json(args.config) if args.config else {}
    only = args.only or data.get("only")
    tol = args.tol if args.tol is not None else data.get("tol", 1e-10)
    seeds = range(args.seeds if args.seeds is not None else data.get("seeds", 20))
    horizons = tuple(data.get("horizons", (100, 1000, 10000)))
    results, artifacts = theory.run_suite(only=only, tol=tol, seeds=seeds, horizons=horizons)
    out = _out_dir(args, "theory")
    out.mkdir(parents=True, exist_ok=True)
    report = {"tol": tol, "results": [{"name": r.name, "passed": r.passed, "measured": r.measured} for r in results]}
    if "convergence" in artifacts:
        (out / "convergence.csv").write_text(artifacts["convergence"].to_csv())
        report["convergence"] = artifacts["convergence"].to_dict()
    if "counterexample" in artifacts:
        report["counterexample"] = artifacts["counterexample"].to_dict()
    (out / "theory.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.measured}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def cmd_report(args) -> int:
    path = Path(args.path)
    if (path / "table.md").exists():
        print((path / "table.md").read_text(), end="")
        failures = json.loads((path / "failures.json").read_text()) if (path / "failures.json").exists() else []
        for f in failures:
            print(f"failed: {f['run_id']}: {f['error']}")
        return EXIT_OK
    if (path / "summary.json").exists():
        summary = json.loads((path / "summary.json").read_text())
        print("checkpoint  worst_train  worst_val  worst_test")
        for row in summary["checkpoints"]:
            cols = [row.get(f"worst_group_{s}_acc") for s in ("train", "val", "test")]
            print(f"{row['checkpoint']:>10}  " + "  ".join("      -" if c is None else f"{c:9.4f}" for c in cols))
        if "best_checkpoint" in summary:
            print(f"best checkpoint by worst-group val acc: {summary['best_checkpoint']}")
        return EXIT_OK
    if (path / "theory.json").exists():
        for r in json.loads((path / "theory.json").read_text())["results"]:
            print(f"{'PASS' if r['passed'] else 'FAIL'} {r['name']}: {r['measured']}")
        return EXIT_OK
    raise ConfigError(f"{path} is not a run, benchmark or theory directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="groupdro", description="Worst-group robust training: synthetic data, training runs, benchmarks and theory checks.",
        epilog=f"default output root: ${OUTPUT_ROOT_ENV} or ./runs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write synthetic train/val/test CSVs")
    gen.add_argument("config", help="synthetic spec JSON, or an experiment config with a 'dataset' spec")
    gen.add_argument("--out")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--n-val", type=int)
    gen.add_argument("--n-test", type=int)
    gen.set_defaults(func=cmd_generate)

    def add_optimizer_flags(p):
        p.add_argument("config", help="experiment config JSON")
        p.add_argument("--dataset", help="dataset path, overriding the config")
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--eta-theta", dest="eta_theta", type=float)
        p.add_argument("--eta-q", dest="eta_q", type=float)
        p.add_argument("--momentum", type=float)
        p.add_argument("--lambda", dest="lam", type=float)
        p.add_argument("--C", dest="C", type=float)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")

    tr = sub.add_parser("train", help="train one configuration")
    add_optimizer_flags(tr)
    tr.set_defaults(func=cmd_train)

    bench = sub.add_parser("benchmark", help="grid search ERM, upweighting and group DRO")
    add_optimizer_flags(bench)
    bench.add_argument("--jobs", type=int, default=1, help="grid cells to run in parallel")
    bench.set_defaults(func=cmd_benchmark)

    th = sub.add_parser("theory", help="run the convex-case verification suite")
    th.add_argument("config", nargs="?", help="optional JSON with only/tol/seeds/horizons")
    th.add_argument("--only", nargs="+", choices=theory.SUITES)
    th.add_argument("--tol", type=float, help="reference saddle tolerance")
    th.add_argument("--seeds", type=int)
    th.add_argument("--out")
    th.set_defaults(func=cmd_theory)

    rep = sub.add_parser("report", help="print the results stored in a run, benchmark or theory directory")
    rep.add_argument("path")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SchemaError, InvalidArgument) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        detail = ", ".join(f"{k}={v}" for k, v in exc.diagnostics.items())
        print(f"numerical error: {exc} ({detail})", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
