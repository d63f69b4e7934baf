"""Command-line interface.

Subcommands:
  run      one experiment from a config file -> trace.csv + summary.json
  sweep    random hyperparameter search -> sweep_report.json + sweep_trials.csv
  oracle   offline schedule optimization -> schedule.csv + history.csv + summary
  compare  scheduler grid comparison -> compare.csv + compare_summary.json
  verify   self-check suite; exits 1 on any tolerance violation

Exit codes: 0 success, 1 verification failure, 2 usage or config errors.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .harness import (ConfigError, compare_methods, emit_compare_csv,
                      emit_history_csv, emit_schedule_csv, emit_summary_json,
                      emit_sweep_csv, emit_trace_csv, parse_compare_config,
                      parse_experiment_config, parse_schedule_search_config,
                      parse_sweep_config, random_sweep, run_experiment,
                      run_schedule_search, version_string)
from .verify import run_all


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hyperlr",
        description="Online learning-rate schedules from hypergradients, "
                    "with exact offline oracles.")
    parser.add_argument("--version", action="version", version=version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_help):
        p.add_argument("--config", required=True, help="path to a JSON config file")
        p.add_argument("--out", default=".", help="output directory (created if missing)")
        p.add_argument("--seed", type=int, default=None, help=seed_help)
        p.add_argument("--quiet", action="store_true", help="suppress progress output")

    common(sub.add_parser("run", help="run one configured experiment"),
           "override the experiment seed")
    common(sub.add_parser("sweep", help="random hyperparameter search"),
           "override the sweep draw seed")
    common(sub.add_parser("oracle", help="offline schedule optimization"),
           "override the experiment seed")
    common(sub.add_parser("compare", help="scheduler grid comparison"),
           "override the experiment seed")
    vp = sub.add_parser("verify", help="run the verification suite")
    vp.add_argument("--quiet", action="store_true", help="only report overall status")
    return parser


def _load_json(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args) -> int:
    cfg = parse_experiment_config(_load_json(args.config))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    trace, summary = run_experiment(cfg)
    out = _outdir(args)
    emit_trace_csv(trace, out / "trace.csv")
    emit_summary_json(summary, out / "summary.json")
    if not args.quiet:
        print(f"wrote {out / 'trace.csv'} and {out / 'summary.json'}")
        print(f"steps {summary['steps_run']}, diverged {summary['diverged']}, "
              f"final eta {summary['final_eta']}, "
              f"best val loss {summary['best_val_loss']}, "
              f"best val acc {summary['best_val_accuracy']}")
    return 0


def cmd_sweep(args) -> int:
    scfg = parse_sweep_config(_load_json(args.config))
    if args.seed is not None:
        scfg = replace(scfg, sweep_seed=args.seed)
    report = random_sweep(scfg)
    out = _outdir(args)
    emit_summary_json(report, out / "sweep_report.json")
    emit_sweep_csv(report, out / "sweep_trials.csv")
    if not args.quiet:
        for method, block in report["methods"].items():
            best = block["best"]
            print(f"{method}: {block['n_trials']} trials, best metric "
                  f"{best['best_so_far_metric']:.6g} (trial {best['index']})")
        print(f"wrote {out / 'sweep_report.json'} and {out / 'sweep_trials.csv'}")
    return 0


def cmd_oracle(args) -> int:
    ocfg = parse_schedule_search_config(_load_json(args.config))
    if args.seed is not None:
        ocfg = replace(ocfg, experiment=replace(ocfg.experiment, seed=args.seed))
    result = run_schedule_search(ocfg)
    out = _outdir(args)
    emit_schedule_csv(result["schedule"], out / "schedule.csv")
    emit_history_csv(result["history"], out / "history.csv")
    emit_summary_json(result, out / "search_summary.json")
    if not args.quiet:
        print(f"final val loss {result['final_val_loss']:.6g}, "
              f"diverged iterations {result['diverged_iterations']}")
        print(f"wrote {out / 'schedule.csv'}, {out / 'history.csv'}, "
              f"{out / 'search_summary.json'}")
    return 0


def cmd_compare(args) -> int:
    ccfg = parse_compare_config(_load_json(args.config))
    if args.seed is not None:
        ccfg = replace(ccfg, seeds=(args.seed,))
    rows = compare_methods(ccfg)
    out = _outdir(args)
    emit_compare_csv(rows, out / "compare.csv")
    emit_summary_json({"schema": "compare-v1", "version": version_string(),
                       "config": ccfg.to_dict(), "rows": rows},
                      out / "compare_summary.json")
    if not args.quiet:
        for method in ccfg.methods:
            sub = [r for r in rows if r["method"] == method and not r["diverged"]]
            if sub:
                best = min(sub, key=lambda r: r["best_objective"])
                print(f"{method}: best objective {best['best_objective']:.6g} "
                      f"at beta {best['beta']}")
            else:
                print(f"{method}: all runs diverged")
        print(f"wrote {out / 'compare.csv'} and {out / 'compare_summary.json'}")
    return 0


def cmd_verify(args) -> int:
    ok, _ = run_all(quiet=args.quiet)
    if args.quiet:
        print("verification passed" if ok else "verification FAILED")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 0
    handlers = {"run": cmd_run, "sweep": cmd_sweep, "oracle": cmd_oracle,
                "compare": cmd_compare, "verify": cmd_verify}
    try:
        return handlers[args.command](args)
    except ConfigError as err:
        for problem in err.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as err:
        print(f"error: config is not valid JSON: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
