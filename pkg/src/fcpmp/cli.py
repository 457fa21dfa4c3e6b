"""Command-line entry point.

Every command writes ``config.json`` (the resolved configuration) next to its
outputs. Exit codes: 0 success, 2 configuration or input error, 3 divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .chebyshev import identify_domain, reference_matrix
from .config import ConfigError, RunConfig, load_config
from .experiment import METHODS, DivergenceError, evaluate_method, loops_table, trace_csv
from .fusion import IterationSchedule
from .gnn.mlp import WeightFileError, load_weights, save_weights
from .gnn.train import TrainHyper, TrainingDiverged, train
from .metrics import summarize, write_summary
from .sim import TrajectoryDataset, build_dataset, monte_carlo_loops, read_dataset, simulate_realization

log = logging.getLogger("fcpmp")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


class InputError(Exception):
    """A referenced file is missing or unreadable."""


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def _write_config(out: Path, cfg: RunConfig | None, extra: dict) -> None:
    doc = {"command": extra} if cfg is None else {**cfg.to_dict(), "command": extra}
    _write(out / "config.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _workers(cfg: RunConfig, flag: int | None) -> int:
    w = flag if flag is not None else cfg.workers
    return w if w is not None else (os.cpu_count() or 1)


def _load_weights(path: str):
    if not Path(path).is_file():
        raise InputError(f"weights: file not found: {path}")
    return load_weights(path)


def cmd_fit_cheb(args) -> int:
    out = _out_dir(args.out)
    match = identify_domain(reference_matrix())
    _write(out / "coeffs.json", match.fitted.to_json())
    rows = [["domain", "max_abs_deviation"]] + [[label, repr(dev)] for label, dev in match.table]
    _write(out / "domain_table.csv", "".join(",".join(r) + "\n" for r in rows))
    _write_config(out, None, {"name": "fit-cheb", "best_domain": match.domain.label(),
                              "deviation": match.deviation, "reproduced": match.reproduced})
    print(f"best domain {match.domain.label()} deviation {match.deviation:.4g}")
    return EXIT_OK


def cmd_loops(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args.out)
    counts = args.agents or [cfg.scenario.n_agents]
    with open(out / "loops.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n_agents", "trials", "mean_triangles", "std_triangles"])
        for n in counts:
            mean, std = monte_carlo_loops(replace(cfg.scenario, n_agents=n), args.trials)
            w.writerow([n, args.trials, repr(mean), repr(std)])
            print(f"{n} agents: mean triangles {mean:.2f}")
    _write_config(out, cfg, {"name": "loops", "trials": args.trials, "agents": counts})
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args.out)
    build_dataset(cfg.scenario, cfg.n_realizations, cfg.n_slots, out / "dataset.jsonl")
    _write_config(out, cfg, {"name": "simulate"})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.dataset:
        if not Path(args.dataset).is_file():
            raise InputError(f"dataset: file not found: {args.dataset}")
        scenario, ds = read_dataset(args.dataset)
    else:
        scenario = cfg.scenario
        ds = build_dataset(scenario, cfg.n_realizations, cfg.n_slots)
    # validation realizations continue the dataset's realization numbering, so they never overlap it
    n_val = cfg.train.validation_realizations
    val = TrajectoryDataset([list(simulate_realization(scenario, len(ds) + k, ds.n_slots)) for k in range(n_val)]) if n_val else None
    t = cfg.train
    hyper = TrainHyper(epochs=args.epochs or t.epochs, lr_start=t.lr_start, lr_end=t.lr_end,
                       batch=t.batch, seed=cfg.seed, all_iterations=t.all_iterations)
    init = _load_weights(cfg.enhancer.weights) if cfg.enhancer.enabled else None
    out = _out_dir(args.out)
    res = train(ds, scenario, cfg.schedule, hyper, cfg.engine.build(), init=init,
                log_path=out / "train_log.csv", validation=val,
                progress=lambda e, lr, r, v: print(f"epoch {e} lr {lr:.3g} train rmse {r:.4f} val rmse {v:.4f}"))
    save_weights(res.weights, out / "weights.json")
    print(f"kept weights from epoch {res.best_epoch}")
    _write_config(out, cfg, {"name": "train", "dataset": args.dataset, "epochs": hyper.epochs,
                             "best_epoch": res.best_epoch})
    return EXIT_OK


def _run_methods(cfg: RunConfig, methods: list[str], weights, workers: int, out: Path) -> dict:
    results = {}
    for m in methods:
        sched = IterationSchedule(cfg.scenario.l_max, cfg.fusion_mode, weights if m == "gnn_fcpmp" else None)
        res = evaluate_method(m, cfg.scenario, cfg.n_realizations, cfg.n_slots, sched, cfg.engine.build(),
                              cfg.particle.n_particles, cfg.particle.full, workers)
        prefix = out / m
        prefix.mkdir(exist_ok=True)
        with open(prefix / "errors.csv", "w", newline="", encoding="utf-8") as fh:
            res.errors.write_csv(fh)
        _write(prefix / "trace.csv", trace_csv(res.trace_rows))
        rows = ["loops,agent_slots,rmse\n"] + [f"{l},{n},{r!r}\n" for l, n, r in loops_table(res.loops)]
        _write(prefix / "loops.csv", "".join(rows))
        summary = summarize(res.errors)
        summary["mean_ops_per_agent_iteration"] = float(np.mean([o.mean() for o in res.op_counts]))
        write_summary(summary, prefix / "summary.json")
        results[m] = summary
        print(f"{m}: rmse {summary['rmse']:.4f} P(err<=2m) {summary['prob_within_2m']:.4f}")
    return results


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    path = args.weights or (cfg.enhancer.weights if cfg.enhancer.enabled else None)
    weights = _load_weights(path) if path else None
    out = _out_dir(args.out)
    method = "gnn_fcpmp" if weights is not None else "fcpmp"
    res = _run_methods(cfg, [method], weights, _workers(cfg, args.workers), out)
    write_summary(res[method], out / "summary.json")
    _write_config(out, cfg, {"name": "evaluate", "method": method, "weights": path})
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    methods = args.methods or (["fcpmp"] + (["gnn_fcpmp"] if cfg.enhancer.enabled else []) + list(cfg.baselines))
    for m in methods:
        if m not in METHODS:
            raise ConfigError("methods", f"unknown method {m!r}; expected one of {list(METHODS)}")
    weights = None
    if "gnn_fcpmp" in methods:
        if not cfg.enhancer.weights:
            raise ConfigError("enhancer.weights", "gnn_fcpmp needs a weight file")
        weights = _load_weights(cfg.enhancer.weights)
    out = _out_dir(args.out)
    res = _run_methods(cfg, methods, weights, _workers(cfg, args.workers), out)
    with open(out / "comparison.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "rmse", "mean_abs_error", "median_error", "prob_within_2m"])
        for m in methods:
            s = res[m]
            w.writerow([m, repr(s["rmse"]), repr(s["mean_abs_error"]), repr(s["median_error"]), repr(s["prob_within_2m"])])
    _write_config(out, cfg, {"name": "compare", "methods": methods})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fcpmp", description="Cooperative localization by closed-form message passing.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fit-cheb", help="fit the distance surface and identify its domain")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_cheb)

    s = sub.add_parser("loops", help="Monte-Carlo triangle-loop census")
    s.add_argument("--config", required=True)
    s.add_argument("--trials", type=int, default=1000)
    s.add_argument("--agents", type=int, nargs="*", help="agent counts (default: the config's)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_loops)

    s = sub.add_parser("simulate", help="generate a trajectory dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train the message enhancer")
    s.add_argument("--config", required=True)
    s.add_argument("--dataset", help="dataset.jsonl from simulate (default: generate from the config)")
    s.add_argument("--epochs", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (("evaluate", cmd_evaluate, "run the engine and score it"),
                                 ("compare", cmd_compare, "score several methods on the same scenario")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True)
        if name == "evaluate":
            s.add_argument("--weights")
        else:
            s.add_argument("--methods", nargs="+", choices=METHODS)
        s.add_argument("--workers", type=int, help="parallel processes (default: all cores)")
        s.add_argument("--out", required=True)
        s.set_defaults(func=func)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if getattr(args, "trials", 1) < 1 or (getattr(args, "epochs", None) or 1) < 1:
        print("error: trials and epochs must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, WeightFileError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, TrainingDiverged) as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
