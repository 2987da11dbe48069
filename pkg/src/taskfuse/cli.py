"""Command-line interface.

Subcommands: gen-tasks, finetune, channel-sim, fuse, run, ablate,
lambda-sweep, plot. All take --config (JSON, schema documented in the
README); --out overrides the config's output_dir, as does the TASKFUSE_OUT
environment variable.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import adversary, analysis, channel, defense, fusion, harness, params, taskbench, tinyvit
from .seeding import derive_seed


def _say(msg):
    print(msg, flush=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taskfuse",
        description="Resilient multi-task model fusion over an adversarial "
                    "MIMO multiple-access channel, at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config,
                       help="path to the experiment config (JSON)")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="restrict the sweep to one seed index")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel worker processes")

    p = sub.add_parser("gen-tasks", help="materialize the task datasets")
    common(p)

    p = sub.add_parser("finetune",
                       help="build base + per-task checkpoints and task vectors")
    common(p)

    p = sub.add_parser("channel-sim", help="emit per-regime link metrics")
    common(p)
    p.add_argument("--regime", choices=harness.REGIMES, default=None)

    p = sub.add_parser("fuse", help="run a single fusion cell")
    common(p)
    p.add_argument("--regime", choices=harness.REGIMES, default="ideal")
    p.add_argument("--tasks", default=None,
                   help="comma-separated task ids (default: first 2)")

    p = sub.add_parser("run", help="full sweep: regimes x combinations x seeds")
    common(p)
    p.add_argument("--regime", choices=harness.REGIMES, default=None,
                   help="restrict to one regime")
    p.add_argument("--no-figures", action="store_true",
                   help="skip figure rendering")

    p = sub.add_parser("ablate",
                       help="defense-mode x few-shot-size grid at fixed regime")
    common(p)
    p.add_argument("--regime", choices=harness.REGIMES, default="worst_sum_rate")
    p.add_argument("--fewshot-grid", default="1,5,10,20",
                   help="comma-separated few-shot sizes per class")

    p = sub.add_parser("lambda-sweep",
                       help="clean-fusion sweep of the scaling coefficient")
    common(p)
    p.add_argument("--grid", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")

    p = sub.add_parser("plot", help="re-render figures from emitted CSVs")
    p.add_argument("--config", required=False)
    p.add_argument("--out", default=None,
                   help="directory holding the CSVs (default: config output_dir)")
    return parser


def _load(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, sweep=replace(cfg.sweep, seeds=(args.seed,)))
    if getattr(args, "regime", None):
        cfg = replace(cfg, sweep=replace(cfg.sweep, regimes=(args.regime,)))
    return cfg


def cmd_gen_tasks(args) -> int:
    cfg = _load(args)
    outdir = os.path.join(cfg.resolved_output_dir(), "tasks")
    for spec in cfg.tasks:
        data = taskbench.generate_task(spec, cfg.model)
        taskbench.save_task_data(os.path.join(outdir, spec.task_id), spec, data)
        _say(f"wrote {spec.task_id}: train {data.train.images.shape[0]}, "
             f"test {data.test.images.shape[0]}, fewshot {data.fewshot.images.shape[0]}")
    _say(f"datasets cached under {outdir}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load(args)
    bundle = harness.build_bundle(cfg, log=_say)
    outdir = os.path.join(cfg.resolved_output_dir(), "checkpoints")
    os.makedirs(outdir, exist_ok=True)
    params.save_checkpoint(os.path.join(outdir, "base.ckpt"), bundle.base)
    meta = {"ref_accuracy": {}, "task_vectors": {}}
    for tid, model in bundle.finetuned.items():
        params.save_checkpoint(os.path.join(outdir, f"{tid}.ckpt"), model)
        tau = bundle.task_vectors[tid]
        params.save_checkpoint(os.path.join(outdir, f"{tid}.taskvec.ckpt"), tau.delta)
        meta["ref_accuracy"][tid] = bundle.ref_acc[tid]
        meta["task_vectors"][tid] = {"task_id": tau.task_id,
                                     "source_user": tau.source_user}
    with open(os.path.join(outdir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    _say(f"checkpoints written to {outdir}")
    return 0


def cmd_channel_sim(args) -> int:
    cfg = _load(args)
    outdir = cfg.resolved_output_dir()
    os.makedirs(outdir, exist_ok=True)
    rows = []
    designs = {}
    for regime in cfg.sweep.regimes:
        for seed_index in cfg.sweep.seeds:
            positions, H = harness.draw_channel(cfg, seed_index)
            design = harness.design_for_regime(regime, H, cfg)
            state = harness.channel_state(cfg, H, positions, design)
            m = channel.link_metrics(state)
            designs[f"{regime}/seed{seed_index}"] = design.summary()
            for q, tid in enumerate(cfg.task_ids()):
                rows.append((regime, seed_index, q, tid, positions[q],
                             m.rates[q], m.mus[q], m.sum_rate,
                             m.sum_rate_single_log, m.snr_db, m.snr_eff_db))
    path = os.path.join(outdir, "channel_metrics.csv")
    harness.write_csv(path, ["regime", "seed", "user", "task_id", "distance_m",
                             "rate_nats", "mu", "sum_rate",
                             "sum_rate_single_log", "snr_db", "snr_eff_db"],
                      rows)
    with open(os.path.join(outdir, "noise_designs.json"), "w") as fh:
        json.dump(designs, fh, indent=2, sort_keys=True)
    _say(f"wrote {path}")
    return 0


def cmd_fuse(args) -> int:
    cfg = _load(args)
    bundle = harness.build_bundle(cfg, log=_say)
    ids = cfg.task_ids()
    combo = tuple(sorted(args.tasks.split(","))) if args.tasks else tuple(sorted(ids[:2]))
    unknown = set(combo) - set(ids)
    if unknown:
        _say(f"error: unknown task ids {sorted(unknown)}")
        return 2
    seed_index = cfg.sweep.seeds[0]
    rows, record = harness.run_cell(bundle, args.regime, len(combo), combo,
                                    seed_index)
    print(",".join(harness.RESULT_COLUMNS))
    for row in rows:
        print(",".join(harness._fmt(getattr(row, c))
                       for c in harness.RESULT_COLUMNS))
    return 0


def cmd_run(args) -> int:
    cfg = _load(args)
    outdir = cfg.resolved_output_dir()
    rows, records, failures = harness.run_sweep(cfg, jobs=args.jobs, log=_say)
    if not rows:
        _say("error: no cells produced rows")
        return 1
    bundle = harness.build_bundle(cfg)
    written = harness.emit_outputs(rows, records, failures, bundle, outdir,
                                   render_figures=not args.no_figures)
    for path in written:
        _say(f"wrote {path}")
    if failures:
        _say(f"warning: {len(failures)} cell(s) failed, see failures.csv")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load(args)
    outdir = cfg.resolved_output_dir()
    os.makedirs(outdir, exist_ok=True)
    try:
        grid = [int(x) for x in args.fewshot_grid.split(",")]
    except ValueError:
        _say("error: --fewshot-grid must be comma-separated integers")
        return 2
    max_avail = min(t.samples_fewshot_per_class for t in cfg.tasks)
    if max(grid) > max_avail:
        _say(f"error: grid value {max(grid)} exceeds generated few-shot "
             f"budget {max_avail} per class")
        return 2
    bundle = harness.build_bundle(cfg, log=_say)
    combo = tuple(sorted(cfg.task_ids()))
    n = len(combo)
    rows = []
    for fewshot in grid:
        dcfg_base = replace(cfg.defense, fewshot_per_class=fewshot)
        cfg_fs = replace(cfg, defense=dcfg_base)
        bundle.config = cfg_fs
        for mode in harness.DEFENSE_MODES:
            for seed_index in cfg.sweep.seeds:
                cell_rows, _rec = harness.run_cell(bundle, args.regime, n,
                                                   combo, seed_index, modes=[mode])
                for row in cell_rows:
                    rows.append((args.regime, mode, fewshot, seed_index,
                                 row.mean_norm_acc))
    bundle.config = cfg
    path = os.path.join(outdir, "ablation.csv")
    harness.write_csv(path, ["regime", "defense_mode", "fewshot_per_class",
                             "seed", "mean_norm_acc"], rows)
    _say(f"wrote {path}")
    from . import plots
    for fig in plots.render_ablation(outdir):
        _say(f"wrote {fig}")
    return 0


def cmd_lambda_sweep(args) -> int:
    cfg = _load(args)
    outdir = cfg.resolved_output_dir()
    os.makedirs(outdir, exist_ok=True)
    try:
        grid = [float(x) for x in args.grid.split(",")]
    except ValueError:
        _say("error: --grid must be comma-separated reals")
        return 2
    bundle = harness.build_bundle(cfg, log=_say)
    ids = sorted(cfg.task_ids())
    rows, best = [], {}
    for n in sorted(cfg.sweep.task_counts):
        combos = list(itertools.combinations(ids, n))
        if len(combos) > 6:
            step = max(1, len(combos) // 6)
            combos = combos[::step][:6]
        for lam in grid:
            vals = []
            for combo in combos:
                merged = params.add_scaled(bundle.base, bundle.members(combo), lam)
                for tid in combo:
                    acc = tinyvit.evaluate(merged, cfg.model,
                                           bundle.datasets[tid].test)
                    vals.append(acc / bundle.ref_acc[tid])
            mean = float(np.mean(vals))
            rows.append((n, lam, mean))
            if n not in best or mean > best[n][1]:
                best[n] = (lam, mean)
    path = os.path.join(outdir, "lambda_sweep.csv")
    harness.write_csv(path, ["n_tasks", "lambda", "mean_norm_acc"], rows)
    table = {str(n): best[n][0] for n in sorted(best)}
    with open(os.path.join(outdir, "lambda_table.json"), "w") as fh:
        json.dump(table, fh, indent=2, sort_keys=True)
    for n in sorted(best):
        _say(f"N={n}: best lambda {best[n][0]} (mean normalized accuracy "
             f"{best[n][1]:.3f})")
    _say(f"wrote {path}")
    return 0


def cmd_plot(args) -> int:
    if args.out:
        outdir = args.out
    elif args.config:
        outdir = _load(args).resolved_output_dir()
    else:
        outdir = os.environ.get("TASKFUSE_OUT", "out")
    from . import plots
    written = plots.render_all(outdir)
    if not written:
        _say(f"error: no plottable CSVs found in {outdir}")
        return 1
    for path in written:
        _say(f"wrote {path}")
    return 0


_COMMANDS = {
    "gen-tasks": cmd_gen_tasks,
    "finetune": cmd_finetune,
    "channel-sim": cmd_channel_sim,
    "fuse": cmd_fuse,
    "run": cmd_run,
    "ablate": cmd_ablate,
    "lambda-sweep": cmd_lambda_sweep,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except harness.ConfigError as exc:
        _say(f"config error: {exc}")
        return 2
    except (ValueError, KeyError, OSError) as exc:
        _say(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
