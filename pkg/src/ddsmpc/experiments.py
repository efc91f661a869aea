"""Scenario configuration, offline data collection, and closed-loop campaigns.

A scenario bundles the simulated plant, the disturbance and initial-state
distributions, horizon and weights, constraint boxes with risk levels, the
data-collection policy, and the representation variant:

* ``measured`` (I): recorded disturbances enter the Hankel stack directly;
* ``estimated`` (II): disturbances are least-squares estimates, offline and
  online;
* ``identified_model`` (III): the Hankel equality is replaced by coefficient
  dynamics with the identified matrices (terminal ingredients as in II).

The unstable plants make open-loop collection explosive, so records are
gathered in short restarted batches first (enough to synthesize a crude
stabilizing gain from pooled transitions) and the contiguous record that
feeds the Hankel stack is collected under that gain plus excitation.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import controller as ctrl
from . import data, ocp, pce, terminal

REACTOR_A = np.array(
    [
        [1.178, 0.001, 0.511, -0.403],
        [-0.051, 0.661, -0.011, 0.061],
        [0.076, 0.335, 0.560, 0.382],
        [0.0, 0.335, 0.089, 0.849],
    ]
)
REACTOR_B = np.array(
    [[0.004, -0.087], [0.467, 0.001], [0.213, -0.235], [0.213, -0.016]]
)

VARIANT_ALIASES = {
    "I": "measured", "II": "estimated", "III": "identified_model",
    "measured": "measured", "estimated": "estimated",
    "identified_model": "identified_model",
}

HISTOGRAM_STEPS = (0, 5, 10, 15, 20, 25, 30)
HISTOGRAM_BINS = 50


@dataclass(frozen=True)
class InitSpec:
    kind: str               # uniform | beta | point
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    a: float = 0.5
    b: float = 0.5
    value: np.ndarray | None = None

    def sample(self, rng: np.random.Generator, dim: int) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(self.lo, self.hi, size=dim)
        if self.kind == "beta":
            return rng.beta(self.a, self.b, size=dim)
        if self.kind == "point":
            return np.asarray(self.value, dtype=float).reshape(dim)
        raise ValueError(f"unknown init kind {self.kind!r}")


@dataclass(frozen=True)
class CollectionSpec:
    """How the offline record is gathered."""

    boot_batches: int          # restarted open-loop batches for the bootstrap gain
    boot_length: int
    run_length: int            # prestabilized record length (beyond the boot when continued)
    amplitude: float = 1.0     # excitation v ~ U(-amplitude, amplitude)
    pe_retries: int = 20
    # continue the prestabilized run from the last boot batch's end state and
    # keep the boot samples as the record's head: the open-loop blow-up of an
    # unstable plant is the strongest identification signal in the data
    continue_from_boot: bool = False


@dataclass(frozen=True)
class Scenario:
    name: str
    A: np.ndarray
    B: np.ndarray
    dist_kind: str             # gaussian | uniform
    dist_scale: np.ndarray     # covariance (gaussian) or halfwidths (uniform)
    init: InitSpec
    N: int
    Q: np.ndarray
    R: np.ndarray
    X_box: terminal.Box | None
    U_box: terminal.Box | None
    eps_x: float
    eps_u: float
    sigma_mode: str            # gaussian | distribution_free
    collection: CollectionSpec
    hankel_window: int | None = None
    variant: str = "measured"
    steps: int = 60
    samples: int = 1000
    seed: int = 0
    gamma_level: float | None = None
    beta: float = 1e4
    transient: int = 10

    @property
    def n_x(self) -> int:
        return np.atleast_2d(self.A).shape[0]

    @property
    def n_u(self) -> int:
        return np.atleast_2d(self.B).shape[1]

    def disturbance(self) -> pce.DisturbanceModel:
        if self.dist_kind == "gaussian":
            return pce.gaussian_disturbance(self.dist_scale)
        if self.dist_kind == "uniform":
            return pce.uniform_disturbance(self.dist_scale)
        raise ValueError(f"unknown disturbance kind {self.dist_kind!r}")

    def plant(self) -> data.Plant:
        return data.Plant(self.A, self.B, self.disturbance(), rng_seed=self.seed)

    @property
    def sigma_x(self) -> float:
        return ocp.chance_sigma(self.sigma_mode, self.eps_x)

    @property
    def sigma_u(self) -> float:
        return ocp.chance_sigma(self.sigma_mode, self.eps_u)

    def to_json(self, path: str | Path) -> None:
        def box(b):
            if b is None:
                return None
            return {"lower": b.lower.tolist(), "upper": b.upper.tolist(),
                    "enabled": b.enabled.tolist()}

        payload = {
            "name": self.name,
            "A": np.atleast_2d(self.A).tolist(),
            "B": np.atleast_2d(self.B).tolist(),
            "dist_kind": self.dist_kind,
            "dist_scale": np.asarray(self.dist_scale).tolist(),
            "init": {
                "kind": self.init.kind,
                "lo": None if self.init.lo is None else np.asarray(self.init.lo).tolist(),
                "hi": None if self.init.hi is None else np.asarray(self.init.hi).tolist(),
                "a": self.init.a, "b": self.init.b,
                "value": None if self.init.value is None else np.asarray(self.init.value).tolist(),
            },
            "N": self.N,
            "Q": np.atleast_2d(self.Q).tolist(),
            "R": np.atleast_2d(self.R).tolist(),
            "X_box": box(self.X_box),
            "U_box": box(self.U_box),
            "eps_x": self.eps_x, "eps_u": self.eps_u,
            "sigma_mode": self.sigma_mode,
            "collection": {
                "boot_batches": self.collection.boot_batches,
                "boot_length": self.collection.boot_length,
                "run_length": self.collection.run_length,
                "amplitude": self.collection.amplitude,
                "pe_retries": self.collection.pe_retries,
            },
            "hankel_window": self.hankel_window,
            "variant": self.variant,
            "steps": self.steps,
            "samples": self.samples,
            "seed": self.seed,
            "gamma_level": self.gamma_level,
            "beta": self.beta,
            "transient": self.transient,
        }
        Path(path).write_text(json.dumps(payload, indent=1))

    @staticmethod
    def from_json(path: str | Path) -> "Scenario":
        d = json.loads(Path(path).read_text())

        def box(b):
            if b is None:
                return None
            return terminal.Box(np.array(b["lower"]), np.array(b["upper"]),
                                np.array(b["enabled"], dtype=bool))

        init = d["init"]
        return Scenario(
            name=d["name"], A=np.array(d["A"]), B=np.array(d["B"]),
            dist_kind=d["dist_kind"], dist_scale=np.array(d["dist_scale"]),
            init=InitSpec(
                kind=init["kind"],
                lo=None if init["lo"] is None else np.array(init["lo"]),
                hi=None if init["hi"] is None else np.array(init["hi"]),
                a=init["a"], b=init["b"],
                value=None if init["value"] is None else np.array(init["value"]),
            ),
            N=d["N"], Q=np.array(d["Q"]), R=np.array(d["R"]),
            X_box=box(d["X_box"]), U_box=box(d["U_box"]),
            eps_x=d["eps_x"], eps_u=d["eps_u"], sigma_mode=d["sigma_mode"],
            collection=CollectionSpec(**d["collection"]),
            hankel_window=d["hankel_window"], variant=d["variant"],
            steps=d["steps"], samples=d["samples"], seed=d["seed"],
            gamma_level=d["gamma_level"], beta=d["beta"],
            transient=d.get("transient", 10),
        )


def preset(name: str, **overrides) -> Scenario:
    if name in ("scalar_case1", "scalar_case2", "scalar_case2_wide"):
        if name == "scalar_case1":
            dist_kind, scale = "gaussian", np.array([[0.01]])
            init = InitSpec("uniform", lo=np.array([0.0]), hi=np.array([2.0]))
            sigma_mode = "gaussian"
        else:
            halfw = 0.173 if name == "scalar_case2" else 0.346
            dist_kind, scale = "uniform", np.array([halfw])
            init = InitSpec("beta", a=0.5, b=0.5)
            sigma_mode = "distribution_free"
        sc = Scenario(
            name=name, A=np.array([[2.0]]), B=np.array([[1.0]]),
            dist_kind=dist_kind, dist_scale=scale, init=init,
            N=25, Q=np.array([[1.0]]), R=np.array([[1.0]]),
            X_box=terminal.Box.symmetric(2.0, 1), U_box=terminal.Box.symmetric(3.0, 1),
            eps_x=0.1, eps_u=0.1, sigma_mode=sigma_mode,
            collection=CollectionSpec(boot_batches=4, boot_length=5, run_length=100),
            steps=60, samples=1000,
        )
    elif name == "batch_reactor":
        sc = Scenario(
            name=name, A=REACTOR_A, B=REACTOR_B,
            dist_kind="gaussian", dist_scale=1e-4 * np.eye(4),
            init=InitSpec("uniform", lo=-5.0 * np.ones(4), hi=5.0 * np.ones(4)),
            N=10, Q=np.eye(4), R=np.eye(2),
            X_box=None, U_box=terminal.Box.single(0, -2.0, 2.0, 2),
            eps_x=0.1, eps_u=0.1, sigma_mode="gaussian",
            collection=CollectionSpec(boot_batches=1, boot_length=20, run_length=980,
                                      continue_from_boot=True),
            hankel_window=120, steps=30, samples=10, gamma_level=1e-2,
        )
    else:
        raise ValueError(f"unknown preset {name!r}")
    return replace(sc, **overrides) if overrides else sc


# ---------------------------------------------------------------------------
# offline phase
# ---------------------------------------------------------------------------

@dataclass
class OfflineArtifacts:
    boot_records: list[data.DataRecord]
    record: data.DataRecord             # contiguous, variant-appropriate disturbances
    stack: data.HankelStack | None      # variants I/II
    model: tuple[np.ndarray, np.ndarray] | None  # variant III
    ingredients: terminal.TerminalIngredients
    prestabilizer: np.ndarray

    def engine(self, scenario: Scenario) -> ocp.OcpEngine:
        ing = self.ingredients
        return ocp.OcpEngine(
            stack=self.stack, model=self.model,
            w_model=scenario.disturbance(), N=scenario.N,
            Q=scenario.Q, R=scenario.R, P=ing.P,
            sigma_x=scenario.sigma_x, sigma_u=scenario.sigma_u,
            X_box=scenario.X_box, U_box=scenario.U_box,
            Gamma=ing.Gamma, gamma_level=ing.gamma_level, beta=scenario.beta,
            feedback=ing.K, closed_loop=ing.closed_loop,
        )


def run_offline(scenario: Scenario, rng: np.random.Generator | None = None) -> OfflineArtifacts:
    """Collect data, estimate disturbances per variant, synthesize terminal
    ingredients, and build the Hankel stack (or identify the model)."""
    plant = scenario.plant()
    rng = np.random.default_rng([scenario.seed, 0xD47A]) if rng is None else rng
    col = scenario.collection
    variant = VARIANT_ALIASES[scenario.variant]

    # restarted open-loop batches; short enough to stay bounded on unstable plants
    boot_records = []
    for _ in range(col.boot_batches):
        u = rng.uniform(-col.amplitude, col.amplitude, (col.boot_length, scenario.n_u))
        x0 = scenario.init.sample(rng, scenario.n_x)
        x, w = data.simulate(plant, u, x0, rng=rng)
        boot_records.append(data.DataRecord(x, u, w))

    def variant_record(rec: data.DataRecord) -> data.DataRecord:
        if variant == "measured":
            return rec
        w_hat = data.estimate_disturbances(rec.x_traj, rec.u_traj)
        return data.DataRecord(rec.x_traj, rec.u_traj, w_hat, flag="estimated")

    boot_for_synth = [variant_record(r) for r in boot_records]
    K_pre, _ = terminal.synthesize_K_H(
        data.TransitionData.from_records(boot_for_synth), scenario.Q, scenario.R
    )

    # contiguous prestabilized record with excitation, retried until the
    # (u, w) signal is persistently exciting of order N + n_x + 1; the
    # identified-model variant never forms the disturbance Hankel, so it only
    # needs the [x; u] data matrix to have full row rank (checked downstream)
    needs_pe = VARIANT_ALIASES[scenario.variant] != "identified_model"
    record = None
    boot_tail = boot_records[-1]
    for _ in range(col.pe_retries):
        T_run = col.run_length
        x = np.zeros((T_run + 1, scenario.n_x))
        u = np.zeros((T_run, scenario.n_u))
        if col.continue_from_boot:
            x[0] = boot_tail.x_traj[-1]
        else:
            x[0] = scenario.init.sample(rng, scenario.n_x)
        w = plant.disturbance.germ_to_w(plant.disturbance.sample_germs(rng, T_run))
        for k in range(T_run):
            u[k] = K_pre @ x[k] + rng.uniform(-col.amplitude, col.amplitude, scenario.n_u)
            x[k + 1] = plant.A @ x[k] + plant.B @ u[k] + w[k]
        if col.continue_from_boot:
            # one contiguous trajectory: open-loop head, prestabilized tail
            x = np.vstack([boot_tail.x_traj[:-1], x])
            u = np.vstack([boot_tail.u_traj, u])
            w = np.vstack([boot_tail.w_traj, w])
        cand = data.DataRecord(x, u, w)
        cand = variant_record(cand)
        window = cand if scenario.hankel_window is None else data.DataRecord(
            cand.x_traj[: scenario.hankel_window + 1],
            cand.u_traj[: scenario.hankel_window],
            cand.w_traj[: scenario.hankel_window],
            flag=cand.flag,
        )
        if not needs_pe or data.is_persistently_exciting(
            window.uw_stacked(), scenario.n_x + scenario.N + 1
        ):
            record = cand
            break
    if record is None:
        raise data.ExcitationError(
            f"no persistently exciting record after {col.pe_retries} attempts"
        )

    window = record if scenario.hankel_window is None else data.DataRecord(
        record.x_traj[: scenario.hankel_window + 1],
        record.u_traj[: scenario.hankel_window],
        record.w_traj[: scenario.hankel_window],
        flag=record.flag,
    )

    # terminal synthesis uses the contiguous record only: estimated
    # disturbances are self-consistent within one record (one implicit
    # model), while pooling separately-estimated pieces would mix models
    sigma_bar = plant.disturbance.covariance()
    ingredients = terminal.data_driven_ingredients(
        record, scenario.Q, scenario.R, sigma_bar,
        gamma_level=scenario.gamma_level,
        X_box=scenario.X_box, U_box=scenario.U_box,
        sigma_x=scenario.sigma_x, sigma_u=scenario.sigma_u,
    )

    stack = model = None
    if variant == "identified_model":
        model = data.identify_model(record.x_traj, record.u_traj)
    else:
        stack = data.build_stack(window, scenario.N)

    return OfflineArtifacts(
        boot_records=boot_records, record=record, stack=stack, model=model,
        ingredients=ingredients, prestabilizer=K_pre,
    )


# ---------------------------------------------------------------------------
# closed-loop campaign
# ---------------------------------------------------------------------------

@dataclass
class RunMetrics:
    run_id: int
    rows: list[dict]
    diagnostics: list[ctrl.StepDiagnostics]
    J_cl: float                 # half-norm convention
    J_cl_unscaled: float
    error: str | None = None


@dataclass
class Metrics:
    scenario: Scenario
    runs: list[RunMetrics]
    alpha: float

    def stage_costs(self) -> np.ndarray:
        """steps x runs matrix of half-convention stage costs."""
        ok = [r for r in self.runs if r.error is None]
        return np.array([[row["stage_cost"] for row in r.rows] for r in ok]).T

    def violation_rate(self, after: int = 0) -> float:
        ok = [r for r in self.runs if r.error is None]
        flags = np.array([[row["violations"] > 0 for row in r.rows] for r in ok]).T
        return float(flags[after:].mean()) if flags[after:].size else 0.0

    def per_step_violation_rates(self) -> np.ndarray:
        ok = [r for r in self.runs if r.error is None]
        flags = np.array([[row["violations"] > 0 for row in r.rows] for r in ok]).T
        return flags.mean(axis=1)

    def per_coordinate_violation_rates(self) -> dict[str, float]:
        """State-box violation frequency per coordinate over all runs/steps."""
        sc = self.scenario
        out: dict[str, float] = {}
        if sc.X_box is None:
            return out
        ok = [r for r in self.runs if r.error is None]
        for i in np.flatnonzero(sc.X_box.enabled):
            col = f"x{i + 1}"
            vals = np.array([row[col] for r in ok for row in r.rows])
            out[col] = float(np.mean(
                (vals > sc.X_box.upper[i]) | (vals < sc.X_box.lower[i])
            ))
        return out

    def average_cost_curve(self) -> np.ndarray:
        """Running average over samples and time of the stage costs (the
        statistical estimate of the asymptotic average cost)."""
        sc = self.stage_costs()
        cum = np.cumsum(sc.mean(axis=1))
        return cum / np.arange(1, sc.shape[0] + 1)

    def post_transient_mean(self) -> tuple[float, float]:
        """Mean and standard error (over run means) of stage costs after the
        scenario's transient window; NaN when no post-transient steps exist."""
        sc = self.stage_costs()[self.scenario.transient :]
        if sc.size == 0:
            return math.nan, math.nan
        run_means = sc.mean(axis=0)
        se = run_means.std(ddof=1) / math.sqrt(run_means.size) if run_means.size > 1 else 0.0
        return float(run_means.mean()), float(se)


def run_single(
    scenario: Scenario,
    artifacts: OfflineArtifacts,
    run_id: int,
    engine: ocp.OcpEngine | None = None,
) -> RunMetrics:
    """One seeded closed-loop run; the disturbance stream and initial state
    depend only on (seed, run_id) so variants can share them."""
    plant = scenario.plant()
    w_model = plant.disturbance
    stream = np.random.default_rng([scenario.seed, run_id])
    x0 = scenario.init.sample(stream, scenario.n_x)
    germs = w_model.sample_germs(stream, scenario.steps)

    engine = artifacts.engine(scenario) if engine is None else engine
    variant = VARIANT_ALIASES[scenario.variant]
    measured = variant == "measured"
    state = ctrl.make_controller(
        engine, artifacts.ingredients, w_model,
        offline_record=artifacts.record, start_time=0,
    )

    rows: list[dict] = []
    diags: list[ctrl.StepDiagnostics] = []
    x = x0.copy()
    w_prev = None
    cum = 0.0
    error = None
    Q, R = np.atleast_2d(scenario.Q), np.atleast_2d(scenario.R)
    for k in range(scenario.steps):
        t0 = time.perf_counter()
        try:
            u_cl, diag = ctrl.step(state, x, w_prev if measured else None)
        except (ctrl.InfeasibleStepError, data.ExcitationError) as exc:
            error = f"step {k}: {exc}"
            break
        elapsed = time.perf_counter() - t0
        stage = 0.5 * float(x @ Q @ x + u_cl @ R @ u_cl)
        cum += stage
        viol = 0
        if scenario.X_box is not None:
            en = scenario.X_box.enabled
            viol += int(np.sum((x[en] > scenario.X_box.upper[en]) | (x[en] < scenario.X_box.lower[en])))
        if scenario.U_box is not None:
            en = scenario.U_box.enabled
            viol += int(np.sum((u_cl[en] > scenario.U_box.upper[en]) | (u_cl[en] < scenario.U_box.lower[en])))
        row = {"run_id": run_id, "k": k}
        row.update({f"x{i + 1}": x[i] for i in range(scenario.n_x)})
        row.update({f"u{i + 1}": u_cl[i] for i in range(scenario.n_u)})
        row.update({
            "path": diag.path, "V_N": diag.V_N, "J_tilde": diag.J_tilde,
            "stage_cost": stage, "cum_avg_cost": cum / (k + 1),
            "violations": viol,
        })
        row["_solve_time"] = elapsed  # kept out of the (bit-deterministic) CSV
        rows.append(row)
        diags.append(diag)
        w_now = w_model.germ_to_w(germs[k]).ravel()
        x = plant.A @ x + plant.B @ u_cl + w_now
        w_prev = w_now
    J_half = sum(r["stage_cost"] for r in rows)
    return RunMetrics(
        run_id=run_id, rows=rows, diagnostics=diags,
        J_cl=J_half, J_cl_unscaled=2.0 * J_half, error=error,
    )


def run_campaign(
    scenario: Scenario,
    artifacts: OfflineArtifacts,
    out_dir: str | Path | None = None,
    progress: bool = False,
) -> Metrics:
    engine = artifacts.engine(scenario)
    runs = []
    for m in range(scenario.samples):
        runs.append(run_single(scenario, artifacts, m, engine=engine))
        if progress and (m + 1) % 50 == 0:
            print(f"  run {m + 1}/{scenario.samples}")
    metrics = Metrics(scenario=scenario, runs=runs, alpha=artifacts.ingredients.alpha)
    if out_dir is not None:
        write_outputs(metrics, artifacts, Path(out_dir))
    return metrics


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------

def write_outputs(metrics: Metrics, artifacts: OfflineArtifacts, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    sc = metrics.scenario

    header = (
        ["run_id", "k"]
        + [f"x{i + 1}" for i in range(sc.n_x)]
        + [f"u{i + 1}" for i in range(sc.n_u)]
        + ["path", "V_N", "J_tilde", "stage_cost", "cum_avg_cost", "violations"]
    )
    with open(out_dir / "metrics.csv", "w") as fh:
        fh.write(",".join(header) + "\n")
        for run in metrics.runs:
            for row in run.rows:
                fh.write(",".join(_fmt(row[h]) for h in header) + "\n")

    with open(out_dir / "diagnostics.jsonl", "w") as fh:
        for run in metrics.runs:
            for d in run.diagnostics:
                fh.write(d.to_json_line() + "\n")

    artifacts.ingredients.to_json(out_dir / "ingredients.json")
    _write_histograms(metrics, out_dir / "histograms.csv")

    ok = [r for r in metrics.runs if r.error is None]
    mean, se = metrics.post_transient_mean()
    curve = metrics.average_cost_curve()
    summary = {
        "scenario": sc.name,
        "variant": VARIANT_ALIASES[sc.variant],
        "samples": sc.samples,
        "steps": sc.steps,
        "seed": sc.seed,
        "completed_runs": len(ok),
        "errors": [r.error for r in metrics.runs if r.error],
        "alpha": metrics.alpha,
        "J_cl_mean": float(np.mean([r.J_cl for r in ok])) if ok else None,
        "J_cl_sd": float(np.std([r.J_cl for r in ok], ddof=1)) if len(ok) > 1 else None,
        "J_cl_unscaled_mean": float(np.mean([r.J_cl_unscaled for r in ok])) if ok else None,
        "post_transient_stage_mean": mean,
        "post_transient_stage_se": se,
        "avg_cost_final": float(curve[-1]) if curve.size else None,
        "avg_cost_final_unscaled": float(2.0 * curve[-1]) if curve.size else None,
        "violation_rate_post_transient": metrics.violation_rate(after=sc.transient),
        "violation_rate_per_coordinate": metrics.per_coordinate_violation_rates(),
        "backup_fraction": float(np.mean(
            [d.path == "backup" for r in ok for d in r.diagnostics]
        )) if ok else None,
        "mean_solve_time": float(np.mean([row["_solve_time"] for r in ok for row in r.rows])) if ok else None,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1))
    sc.to_json(out_dir / "scenario.json")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.12g}"
    return str(v)


def _write_histograms(metrics: Metrics, path: Path) -> None:
    sc = metrics.scenario
    if sc.X_box is not None and sc.X_box.enabled[0]:
        lo, hi = sc.X_box.lower[0], sc.X_box.upper[0]
    else:
        lo, hi = (float(sc.init.lo[0]), float(sc.init.hi[0])) if sc.init.lo is not None else (-5.0, 5.0)
    edges = np.linspace(lo, hi, HISTOGRAM_BINS + 1)
    ok = [r for r in metrics.runs if r.error is None]
    with open(path, "w") as fh:
        fh.write("step,bin_lo,bin_hi,density\n")
        for step in HISTOGRAM_STEPS:
            if step >= sc.steps or not ok:
                continue
            vals = np.array([r.rows[step]["x1"] for r in ok if len(r.rows) > step])
            dens, _ = np.histogram(vals, bins=edges, density=True)
            for b in range(HISTOGRAM_BINS):
                fh.write(f"{step},{edges[b]:.8g},{edges[b + 1]:.8g},{dens[b]:.10g}\n")
