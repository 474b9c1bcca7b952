"""Command-line interface.

Subcommands: gen-data, train-baseline, run, eval, audit, report. Logs go to
stderr; machine-readable output goes to files and stdout. Exit codes: 0 on
success, 1 on configuration errors, 2 on runtime failures.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import harness, strategies, synthetic
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DataError, write_pgm
from .harness import ConfigError

log = logging.getLogger("forgetlab")


class _Parser(argparse.ArgumentParser):
    def error(self, message):                     # argparse exits 2; we want 1
        raise ConfigError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="forgetlab",
                description="Cross-dataset CNN transfer runs with forgetting metrics")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic domain parameter files")
    g.add_argument("--shift", type=float, default=0.6, help="domain shift magnitude in [0,1]")
    g.add_argument("--out", default=".", help="output directory")
    g.add_argument("--render", type=int, default=0, metavar="N",
                   help="also render N samples per class per domain as PGM + manifest")

    t = sub.add_parser("train-baseline", help="train the source baseline for one seed")
    t.add_argument("--config", help="experiment config JSON (defaults apply if omitted)")
    t.add_argument("--seed", type=int, help="override: train only this seed")
    t.add_argument("--out", help="override: output directory")
    t.add_argument("--arch", choices=("paper", "desk"), help="override: architecture variant")

    r = sub.add_parser("run", help="run the full strategy x fraction x seed matrix")
    r.add_argument("--config", help="experiment config JSON (defaults apply if omitted)")
    r.add_argument("--out", help="override: output directory")
    r.add_argument("--arch", choices=("paper", "desk"), help="override: architecture variant")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset spec JSON file")
    e.add_argument("--subset", choices=("train", "val", "test"), default="test")
    e.add_argument("--shift", type=float, default=0.6,
                   help="shift for default synthetic domains in the spec")

    a = sub.add_parser("audit", help="freeze audit between two checkpoints")
    a.add_argument("--before", required=True)
    a.add_argument("--after", required=True)
    a.add_argument("--plan", required=True, help="plan JSON file")

    rep = sub.add_parser("report", help="aggregate a results directory")
    rep.add_argument("--results", required=True, help="run output directory or results.csv")
    rep.add_argument("--out", help="where to write plot-ready CSV (default: alongside results)")
    return p


def _load_config(args) -> harness.ExperimentConfig:
    cfg = harness.config_from_file(args.config) if args.config else harness.ExperimentConfig()
    overrides = {}
    if getattr(args, "out", None):
        overrides["out"] = args.out
    if getattr(args, "arch", None):
        overrides["arch"] = args.arch
    if getattr(args, "seed", None) is not None:
        overrides["seeds"] = (args.seed,)
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _cmd_gen_data(args) -> int:
    source, target = synthetic.default_domain_pair(args.shift)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    synthetic.save_params(source, out / "source_domain.json")
    synthetic.save_params(target, out / "target_domain.json")
    log.info("wrote %s and %s", out / "source_domain.json", out / "target_domain.json")
    if args.render > 0:
        for params in (source, target):
            ddir = out / "render" / params.name
            ddir.mkdir(parents=True, exist_ok=True)
            ds = synthetic.gen_synthetic_domain(params, args.render, seed=0)
            with open(ddir / "manifest.tsv", "w") as fh:
                for i, s in enumerate(ds):
                    fname = f"{i:04d}_{ds.class_names[s.label]}.pgm"
                    write_pgm(ddir / fname, s.image)
                    fh.write(f"{fname}\t{ds.class_names[s.label]}\t{s.subject_id}\n")
            log.info("rendered %d images under %s", len(ds), ddir)
    return 0


def _cmd_train_baseline(args) -> int:
    config = _load_config(args)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    source = harness.resolve_dataset(config.source, "source", config.shift)
    target = harness.resolve_dataset(config.target, "target", config.shift)
    bundle = strategies.DataBundle(source.train, source.val, target.train, target.val)
    reports = {}
    for seed in config.seeds:
        plan = strategies.make_plan("BL", seed=seed, hyper=config.hyper)
        result = strategies.execute(plan, bundle, arch=config.arch)
        path = out / harness._checkpoint_name("BL", 1.0, seed)
        save_checkpoint(result.network, str(path))
        reports[str(seed)] = {
            "checkpoint": str(path),
            "epochs_run": result.epochs_run,
            "source_test_acc": evaluate_acc(result.network, source.test),
            "target_test_acc": evaluate_acc(result.network, target.test),
        }
        log.info("baseline seed=%d done (%d epochs)", seed, result.epochs_run)
    print(json.dumps(reports, indent=2, sort_keys=True))
    return 0


def evaluate_acc(net, ds) -> float:
    return round(harness.evaluate(net, ds).accuracy, 6)


def _cmd_run(args) -> int:
    config = _load_config(args)
    run = harness.run_matrix(config)
    summary = harness.aggregate(run.results)
    print(json.dumps(summary, indent=2, sort_keys=True))
    if run.failures:
        log.error("%d cell(s) failed: %s", len(run.failures), run.failures)
        return 2
    log.info("matrix complete: %d rows (%d computed now) in %s",
             len(run.results), len(run.executed), run.out_dir)
    return 0


def _cmd_eval(args) -> int:
    try:
        spec = json.loads(Path(args.data).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read dataset spec {args.data}: {exc}") from None
    harness._validate_dataset_spec(spec, "data")
    domain = harness.resolve_dataset(spec, "data", args.shift)
    ds = getattr(domain, args.subset)
    net = load_checkpoint(args.checkpoint)
    result = harness.evaluate(net, ds)
    print(json.dumps({
        "checkpoint": args.checkpoint,
        "dataset": ds.name,
        "n": result.n,
        "accuracy": round(result.accuracy, 6),
        "confusion": result.confusion.tolist(),
    }, indent=2))
    return 0


def _cmd_audit(args) -> int:
    plan = strategies.load_plan(args.plan)
    audit = strategies.freeze_audit(args.before, args.after, plan)
    print(audit.to_text())
    return 0


def _cmd_report(args) -> int:
    results_path = Path(args.results)
    if results_path.is_dir():
        results_path = results_path / harness.RESULTS_FILE
    if not results_path.exists():
        raise ConfigError(f"no results file at {results_path}")
    results = harness.read_results_csv(results_path)
    out = Path(args.out) if args.out else results_path.parent
    out.mkdir(parents=True, exist_ok=True)
    harness.write_plot_data(out / "plotdata.csv", results)
    print(json.dumps(harness.aggregate(results), indent=2, sort_keys=True))
    log.info("wrote %s", out / "plotdata.csv")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-baseline": _cmd_train_baseline,
    "run": _cmd_run,
    "eval": _cmd_eval,
    "audit": _cmd_audit,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, strategies.PlanError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:                      # noqa: BLE001 - CLI boundary
        log.exception("unhandled failure")
        return 2


if __name__ == "__main__":
    sys.exit(main())
