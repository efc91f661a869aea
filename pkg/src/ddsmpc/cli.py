"""Command-line interface: offline collection, synthesis, closed-loop runs,
Monte-Carlo campaigns, and summary reporting.

Exit codes: 0 on success, 1 on infeasibility or synthesis failure, 2 on bad
arguments.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import controller, data, experiments, terminal


def _scenario_from_args(args) -> experiments.Scenario:
    if args.scenario:
        sc = experiments.Scenario.from_json(args.scenario)
    else:
        sc = experiments.preset(args.preset)
    over = {}
    if getattr(args, "variant", None):
        over["variant"] = experiments.VARIANT_ALIASES[args.variant]
    if getattr(args, "samples", None) is not None:
        over["samples"] = args.samples
    if getattr(args, "steps", None) is not None:
        over["steps"] = args.steps
    if args.seed is not None:
        over["seed"] = args.seed
    if over:
        from dataclasses import replace

        sc = replace(sc, **over)
    return sc


def _add_common(p: argparse.ArgumentParser, samples_steps: bool = False) -> None:
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--preset", choices=["scalar_case1", "scalar_case2", "scalar_case2_wide", "batch_reactor"])
    g.add_argument("--scenario", help="scenario JSON file")
    p.add_argument("--variant", choices=sorted(experiments.VARIANT_ALIASES), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="out", help="output directory")
    if samples_steps:
        p.add_argument("--samples", type=int, default=None)
        p.add_argument("--steps", type=int, default=None)


def cmd_collect(args) -> int:
    sc = _scenario_from_args(args)
    art = experiments.run_offline(sc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    art.record.to_csv(out / "record.csv")
    art.record.to_json(out / "record.json")
    for i, rec in enumerate(art.boot_records):
        rec.to_json(out / f"boot_{i}.json")
    print(f"collected T={art.record.T} record ({art.record.flag}) -> {out}")
    return 0


def cmd_synth(args) -> int:
    sc = _scenario_from_args(args)
    art = experiments.run_offline(sc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    art.ingredients.to_json(out / "ingredients.json")
    ing = art.ingredients
    print(f"P diag: {np.diag(ing.P)}")
    print(f"K: {ing.K}")
    print(f"Gamma diag: {np.diag(ing.Gamma)}")
    print(f"gamma level: {ing.gamma_level}, alpha: {ing.alpha:.6g}")
    return 0


def cmd_run(args) -> int:
    sc = _scenario_from_args(args)
    art = experiments.run_offline(sc)
    run = experiments.run_single(sc, art, run_id=0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = experiments.Metrics(scenario=sc, runs=[run], alpha=art.ingredients.alpha)
    experiments.write_outputs(metrics, art, out)
    if run.error:
        print(f"run failed: {run.error}", file=sys.stderr)
        return 1
    print(f"steps={len(run.rows)} J_cl={run.J_cl:.6g} -> {out}")
    return 0


def cmd_campaign(args) -> int:
    sc = _scenario_from_args(args)
    art = experiments.run_offline(sc)
    metrics = experiments.run_campaign(sc, art, out_dir=args.out, progress=True)
    failed = [r for r in metrics.runs if r.error]
    mean, se = metrics.post_transient_mean()
    print(f"campaign: {len(metrics.runs) - len(failed)}/{len(metrics.runs)} runs ok")
    print(f"post-transient stage mean {mean:.6g} (se {se:.2g}), alpha {metrics.alpha:.6g}")
    if failed:
        print(f"{len(failed)} runs errored", file=sys.stderr)
        return 1
    return 0


def cmd_report(args) -> int:
    path = Path(getattr(args, "indir"))
    summary = path / "summary.json"
    if summary.exists():
        print(summary.read_text())
    if not (path / "metrics.csv").exists():
        print(f"no metrics.csv under {path}", file=sys.stderr)
        return 2
    with open(path / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    runs = sorted({int(r["run_id"]) for r in rows})
    stage = np.array([float(r["stage_cost"]) for r in rows])
    viol = np.array([int(r["violations"]) for r in rows])
    print(f"{len(runs)} runs, {len(rows)} steps total")
    print(f"mean stage cost {stage.mean():.6g}; violation rate {np.mean(viol > 0):.4f}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ddsmpc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="offline data collection")
    _add_common(p)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("synth", help="terminal-ingredient synthesis")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="single closed-loop run")
    _add_common(p, samples_steps=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("campaign", help="Monte-Carlo closed-loop campaign")
    _add_common(p, samples_steps=True)
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("report", help="summarize a campaign output directory")
    p.add_argument("--in", dest="indir", required=True)
    p.set_defaults(func=cmd_report)

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (terminal.SynthesisError, data.ExcitationError, controller.InfeasibleStepError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
