"""Figure renderers for ddsmpc campaign output directories.

Every renderer is a pure consumer of the documented output schemas
(metrics.csv, histograms.csv, ingredients.json, scenario.json,
diagnostics.jsonl); nothing is recomputed, only drawn.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

KINDS = ("trajectories", "xu_scatter", "avg_cost", "histogram", "slack")


class SchemaError(RuntimeError):
    """An input file is missing or does not match the documented schema."""


@dataclass
class FigureSpec:
    kind: str
    in_dir: Path
    max_runs: int = 10
    coord: int = 0  # state coordinate (0-based) for scatter/histogram figures
    style: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown figure kind {self.kind!r}; choose from {KINDS}")
        self.in_dir = Path(self.in_dir)
        if not self.in_dir.is_dir():
            raise SchemaError(f"input directory {self.in_dir} does not exist")


def _require(path: Path) -> Path:
    if not path.exists():
        raise SchemaError(f"required input file {path} is missing")
    return path


def _load_metrics(spec: FigureSpec) -> list[dict]:
    with open(_require(spec.in_dir / "metrics.csv")) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise SchemaError("metrics.csv has no data rows")
    needed = {"run_id", "k", "x1", "u1", "cum_avg_cost", "stage_cost"}
    missing = needed - set(rows[0])
    if missing:
        raise SchemaError(f"metrics.csv missing columns {sorted(missing)}")
    return rows


def _load_ingredients(spec: FigureSpec) -> dict:
    payload = json.loads(_require(spec.in_dir / "ingredients.json").read_text())
    for key in ("K", "alpha"):
        if key not in payload:
            raise SchemaError(f"ingredients.json missing key {key!r}")
    return payload


def _load_scenario(spec: FigureSpec) -> dict | None:
    path = spec.in_dir / "scenario.json"
    return json.loads(path.read_text()) if path.exists() else None


def _by_run(rows: list[dict]) -> dict[int, list[dict]]:
    runs: dict[int, list[dict]] = {}
    for r in rows:
        runs.setdefault(int(r["run_id"]), []).append(r)
    for rs in runs.values():
        rs.sort(key=lambda r: int(r["k"]))
    return runs


def _box_bounds(scenario: dict | None, which: str, coord: int):
    if scenario is None or scenario.get(which) is None:
        return None
    box = scenario[which]
    if not box["enabled"][coord]:
        return None
    return box["lower"][coord], box["upper"][coord]


def render(spec: FigureSpec, out_path: str | Path) -> Path:
    """Render one figure kind to ``out_path`` and return the path."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig = _RENDERERS[spec.kind](spec)
    fig.savefig(out_path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return out_path


def _fig_trajectories(spec: FigureSpec):
    rows = _load_metrics(spec)
    scenario = _load_scenario(spec)
    runs = _by_run(rows)
    xc, uc = f"x{spec.coord + 1}", f"u{spec.coord + 1}"
    if uc not in rows[0]:
        uc = "u1"

    fig, (ax_x, ax_u) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    for rid in sorted(runs)[: spec.max_runs]:
        ks = [int(r["k"]) for r in runs[rid]]
        ax_x.plot(ks, [float(r[xc]) for r in runs[rid]], lw=0.9)
        ax_u.plot(ks, [float(r[uc]) for r in runs[rid]], lw=0.9)
    for ax, which, label in ((ax_x, "X_box", xc), (ax_u, "U_box", uc)):
        b = _box_bounds(scenario, which, spec.coord if which == "X_box" else 0)
        if b is not None:
            ax.axhline(b[0], color="k", ls="--", lw=1)
            ax.axhline(b[1], color="k", ls="--", lw=1)
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    ax_u.set_xlabel("k")
    ax_x.set_title(f"closed-loop realizations ({min(len(runs), spec.max_runs)} runs)")
    return fig


def _fig_xu_scatter(spec: FigureSpec):
    rows = _load_metrics(spec)
    ing = _load_ingredients(spec)
    scenario = _load_scenario(spec)
    xc = f"x{spec.coord + 1}"
    xs = np.array([float(r[xc]) for r in rows])
    us = np.array([float(r["u1"]) for r in rows])

    fig, ax = plt.subplots(figsize=(6, 5))
    ax.scatter(xs, us, s=4, alpha=0.35, edgecolors="none", label="realizations")
    K = np.atleast_2d(np.array(ing["K"]))
    k_gain = float(K[0, spec.coord])
    grid = np.linspace(xs.min(), xs.max(), 50)
    ax.plot(grid, k_gain * grid, "r-", lw=1.5, label=f"u = Kx (K={k_gain:.3f})")
    bx = _box_bounds(scenario, "X_box", spec.coord)
    bu = _box_bounds(scenario, "U_box", 0)
    if bx is not None:
        ax.axvline(bx[0], color="k", ls="--", lw=1)
        ax.axvline(bx[1], color="k", ls="--", lw=1)
    if bu is not None:
        ax.axhline(bu[0], color="k", ls="--", lw=1)
        ax.axhline(bu[1], color="k", ls="--", lw=1)
    ax.set_xlabel(xc)
    ax.set_ylabel("u1")
    ax.legend(loc="best")
    ax.grid(alpha=0.3)
    return fig


def _fig_avg_cost(spec: FigureSpec):
    rows = _load_metrics(spec)
    ing = _load_ingredients(spec)
    runs = _by_run(rows)
    ks = sorted({int(r["k"]) for r in rows})
    curve = []
    for k in ks:
        vals = [float(runs[rid][k]["cum_avg_cost"]) for rid in runs if len(runs[rid]) > k]
        curve.append(np.mean(vals))

    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.plot(ks, curve, lw=1.5, label="running average stage cost")
    alpha = float(ing["alpha"])
    ax.axhline(alpha, color="r", ls="--", lw=1.2, label=f"alpha = {alpha:.4g}")
    ax.set_xlabel("k")
    ax.set_ylabel("average cost")
    ax.set_yscale("log")
    ax.legend(loc="best")
    ax.grid(alpha=0.3, which="both")
    return fig


def _fig_histogram(spec: FigureSpec):
    path = _require(spec.in_dir / "histograms.csv")
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows or {"step", "bin_lo", "bin_hi", "density"} - set(rows[0]):
        raise SchemaError("histograms.csv does not match the documented schema")
    steps = sorted({int(r["step"]) for r in rows})

    fig, axes = plt.subplots(1, len(steps), figsize=(2.2 * len(steps), 3), sharey=True)
    axes = np.atleast_1d(axes)
    for ax, step in zip(axes, steps):
        sub = [r for r in rows if int(r["step"]) == step]
        lo = np.array([float(r["bin_lo"]) for r in sub])
        hi = np.array([float(r["bin_hi"]) for r in sub])
        dens = np.array([float(r["density"]) for r in sub])
        ax.bar(lo, dens, width=hi - lo, align="edge")
        ax.set_title(f"k = {step}")
        ax.set_xlabel("x1")
    axes[0].set_ylabel("density")
    fig.suptitle("state histograms over time")
    return fig


def _fig_slack(spec: FigureSpec):
    path = _require(spec.in_dir / "diagnostics.jsonl")
    runs: list[list[tuple[int, float]]] = []
    for line in path.read_text().splitlines():
        d = json.loads(line)
        if "k" not in d or "slack_inf" not in d:
            raise SchemaError("diagnostics.jsonl records need 'k' and 'slack_inf'")
        if d["k"] == 0:
            runs.append([])
        runs[-1].append((d["k"], d["slack_inf"]))

    fig, ax = plt.subplots(figsize=(6.5, 4))
    floor = 1e-18
    for series in runs[: spec.max_runs]:
        ks = [k for k, _ in series]
        vals = [max(v, floor) for _, v in series]
        ax.semilogy(ks, vals, lw=0.9)
    ax.set_xlabel("k")
    ax.set_ylabel("|c|_inf")
    ax.set_title("initial-condition slack magnitude")
    ax.grid(alpha=0.3, which="both")
    return fig


_RENDERERS = {
    "trajectories": _fig_trajectories,
    "xu_scatter": _fig_xu_scatter,
    "avg_cost": _fig_avg_cost,
    "histogram": _fig_histogram,
    "slack": _fig_slack,
}
