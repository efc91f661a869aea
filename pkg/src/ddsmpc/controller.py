"""Online control loop: initial-condition selection, backup-basis growth,
shifted-candidate bookkeeping, and feedback realization.

Each step first tries the measured initial condition (current state in the
mean column, fresh basis).  The result is accepted only if it is feasible and
does not cost more than the shifted candidate kept from the previous step;
otherwise the controller falls back to the candidate's own initial condition
in a grown basis, which is feasible by construction.  The candidate is also a
certified feasible point for the backup program, so the backup cost never
exceeds the candidate cost in the bookkeeping.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import pce
from .data import DataRecord, estimate_disturbance_online
from .ocp import OcpEngine, OcpSolution, evaluate_cost
from .terminal import TerminalIngredients

log = logging.getLogger(__name__)

CANDIDATE_RESIDUAL_TOL = 1e-6


class InfeasibleStepError(RuntimeError):
    """Neither the measured nor the backup path produced a usable solution;
    under the standing assumptions this signals data or tolerance problems."""


@dataclass
class Candidate:
    """Shifted coefficient trajectory, stored in the grown basis."""

    basis: pce.PceBasis
    x_coeffs: list[np.ndarray]
    u_coeffs: list[np.ndarray]


@dataclass
class StepDiagnostics:
    k: int
    path: str                      # "measured" | "backup"
    q: int
    V_N: float
    J_tilde: float                 # candidate cost the step compared against
    J_tilde_next: float            # candidate cost prepared for the next step
    stage0: float                  # step-0 stage cost of the accepted solution
    slack_inf: float
    u_cl: np.ndarray
    x: np.ndarray
    solver_status: str
    candidate_residuals: dict | None = None
    measured_value: float = math.inf
    backup_value: float = math.inf

    def to_json_line(self) -> str:
        payload = {
            "k": self.k,
            "path": self.path,
            "q": self.q,
            "V_N": self.V_N,
            "J_tilde": self.J_tilde,
            "J_tilde_next": self.J_tilde_next,
            "stage0": self.stage0,
            "slack_inf": self.slack_inf,
            "u_cl": np.asarray(self.u_cl).tolist(),
            "x": np.asarray(self.x).tolist(),
            "solver_status": self.solver_status,
        }
        if self.candidate_residuals is not None:
            payload["candidate_residuals"] = {
                k: float(v) for k, v in self.candidate_residuals.items()
            }
        return json.dumps(payload)


@dataclass
class ControllerState:
    """Internal memory of the dynamic feedback law."""

    engine: OcpEngine
    ingredients: TerminalIngredients
    w_model: pce.DisturbanceModel
    offline_record: DataRecord | None = None   # used when disturbances are unmeasured
    implicit_model: tuple[np.ndarray, np.ndarray] | None = None
    k: int = 0
    q: int = 0
    basis: pce.PceBasis | None = None          # basis of the next backup OCP
    shifted_candidate: Candidate | None = None
    J_tilde: float = math.inf
    predicted_init: np.ndarray | None = None
    past_w: dict[int, np.ndarray] = field(default_factory=dict)
    prev_x: np.ndarray | None = None
    prev_u: np.ndarray | None = None

    @property
    def N(self) -> int:
        return self.engine.N

    @property
    def L_w(self) -> int:
        return self.w_model.n_germ + 1

    def fresh_basis(self) -> pce.PceBasis:
        return pce.make_basis(
            1, self.L_w, self.N, w_start_tag=self.k, family=self.w_model.family
        )


def realize_feedback(
    u_coeffs_first: np.ndarray,
    basis: pce.PceBasis,
    past_w: Mapping[int, np.ndarray],
    w_model: pce.DisturbanceModel,
) -> np.ndarray:
    """Evaluate the first predicted input at the germ realizations fitted from
    the recorded past disturbances.

    Only the x-block coefficients can be nonzero (causality), so the sum runs
    over the constant plus the q absorbed disturbance blocks.
    """
    u = np.atleast_2d(u_coeffs_first)
    u_cl = u[:, 0].copy()
    x_tags = [f.tag for f in basis.functions[1 : basis.L_x]]
    germs: dict[int, np.ndarray] = {}
    for tag in dict.fromkeys(x_tags):
        if tag not in past_w:
            raise ValueError(f"no recorded disturbance for germ tag {tag}")
        w1 = w_model.pce_coeffs[:, 1:]
        dead = np.linalg.norm(w1, axis=0) <= 1e-12
        if dead.any() and np.linalg.norm(past_w[tag]) > 1e-12:
            log.warning("germ fit: %d disturbance coordinate(s) carry no information", dead.sum())
        germs[tag] = w_model.fit_germ(past_w[tag])
    for j in range(1, basis.L_x):
        f = basis.functions[j]
        u_cl += u[:, j] * f(germs[f.tag][f.component])
    return u_cl


def shift_candidate(
    solution: OcpSolution,
    ingredients: TerminalIngredients,
    w_model: pce.DisturbanceModel,
    basis: pce.PceBasis,
    new_tag: int,
    Q: np.ndarray,
    R: np.ndarray,
    P: np.ndarray,
    closed_loop: np.ndarray | None = None,
) -> tuple[Candidate, float]:
    """Advance the optimal solution one step and complete it with the terminal
    feedback: inputs get the terminal gain appended, states get the closed-
    loop map, and the freshly appended disturbance block carries the terminal
    state's new uncertainty.  Returns the candidate and its cost."""
    grown = pce.grow_basis_for_backup(basis, new_tag)
    L, Lp = basis.L, grown.L
    A_cl = ingredients.closed_loop if closed_loop is None else closed_loop
    N = basis.N

    def padded(block: np.ndarray) -> np.ndarray:
        out = np.zeros((block.shape[0], Lp))
        out[:, :L] = block
        return out

    x_new = [padded(solution.x_coeffs[i]) for i in range(1, N + 1)]
    xN = padded(A_cl @ solution.x_coeffs[N])
    xN[:, grown.block_columns(N - 1)] += w_model.pce_coeffs[:, 1:]
    x_new.append(xN)
    u_new = [padded(solution.u_coeffs[i]) for i in range(1, N)]
    u_new.append(padded(ingredients.K @ solution.x_coeffs[N]))

    cand = Candidate(grown, x_new, u_new)
    return cand, evaluate_cost(x_new, u_new, grown, Q, R, P)


def make_controller(
    engine: OcpEngine,
    ingredients: TerminalIngredients,
    w_model: pce.DisturbanceModel,
    offline_record: DataRecord | None = None,
    start_time: int = 0,
) -> ControllerState:
    from .data import identify_model

    implicit = None
    if offline_record is not None:
        implicit = identify_model(offline_record.x_traj, offline_record.u_traj)
    return ControllerState(
        engine=engine, ingredients=ingredients, w_model=w_model,
        offline_record=offline_record, implicit_model=implicit, k=start_time,
    )


def step(
    state: ControllerState,
    x_measured: np.ndarray,
    w_prev: np.ndarray | None = None,
) -> tuple[np.ndarray, StepDiagnostics]:
    """One pass of the online loop; returns the applied input and diagnostics."""
    eng = state.engine
    k = state.k
    x_measured = np.asarray(x_measured, dtype=float).reshape(eng.n_x)

    if k > 0:
        if w_prev is None:
            if state.offline_record is None:
                raise ValueError("unmeasured disturbances require the offline record")
            w_prev = estimate_disturbance_online(
                state.offline_record, state.prev_x, state.prev_u, x_measured,
                model=state.implicit_model,
            )
        state.past_w[k - 1] = np.asarray(w_prev, dtype=float).reshape(eng.n_x)

    # measured initial condition in a fresh basis
    fresh = state.fresh_basis()
    init_m = np.zeros((eng.n_x, fresh.L))
    init_m[:, 0] = x_measured
    sol_m = eng.solve(fresh, init_m)
    measured_ok = sol_m.feasible and sol_m.value <= state.J_tilde

    candidate_residuals = None
    if measured_ok:
        path, sol, basis_used = "measured", sol_m, fresh
        state.q = 0
        state.past_w.clear()
        V_N = sol_m.value
    else:
        if state.shifted_candidate is None:
            raise InfeasibleStepError(
                f"step {k}: measured path unusable ({sol_m.status}) and no candidate exists"
            )
        cand = state.shifted_candidate
        candidate_residuals = eng.check_candidate(cand.basis, cand.x_coeffs, cand.u_coeffs)
        cand_ok = all(v <= CANDIDATE_RESIDUAL_TOL for v in candidate_residuals.values())

        sol_b = eng.solve(cand.basis, state.predicted_init)
        if sol_b.feasible and sol_b.value <= state.J_tilde:
            sol = sol_b
        elif cand_ok:
            # the candidate is a certified feasible point with cost J_tilde;
            # fall back to it when the solver cost exceeds the bookkeeping
            # bound or the solver fails outright
            if not sol_b.feasible:
                log.warning("step %d: backup solve %s; using shifted candidate", k, sol_b.status)
            sol = OcpSolution(
                x_coeffs=[b.copy() for b in cand.x_coeffs],
                u_coeffs=[b.copy() for b in cand.u_coeffs],
                g_coeffs=None, slack=np.zeros((eng.n_x, cand.basis.L)),
                value=state.J_tilde, slack_penalty=0.0, status="optimal",
                solver_status="shifted_candidate",
            )
        else:
            raise InfeasibleStepError(
                f"step {k}: backup path {sol_b.status} and candidate residuals "
                f"{candidate_residuals} exceed tolerance"
            )
        path, basis_used = "backup", cand.basis
        state.q += 1
        V_N = min(sol_m.value, sol.value) if sol_m.feasible else sol.value

    u_cl = realize_feedback(sol.u_coeffs[0], basis_used, state.past_w, state.w_model)

    # prepare the shifted candidate and next backup initial condition; the
    # closed-loop map must match the representation the engine enforces
    A_cl = eng._Acl_sc if eng._Acl_sc is not None else state.ingredients.closed_loop
    cand_next, J_next = shift_candidate(
        sol, state.ingredients, state.w_model, basis_used, new_tag=k + state.N,
        Q=eng.Q, R=eng.R, P=eng.P, closed_loop=A_cl,
    )

    norms = basis_used.norms
    x0 = sol.x_coeffs[0]
    u0 = sol.u_coeffs[0]
    stage0 = 0.5 * float(np.sum((x0 * (eng.Q @ x0)).sum(axis=0) * norms))
    stage0 += 0.5 * float(np.sum((u0 * (eng.R @ u0)).sum(axis=0) * norms))

    diag = StepDiagnostics(
        k=k, path=path, q=state.q, V_N=V_N, J_tilde=state.J_tilde,
        J_tilde_next=J_next, stage0=stage0, slack_inf=sol.slack_norm,
        u_cl=u_cl, x=x_measured, solver_status=sol.solver_status,
        candidate_residuals=candidate_residuals,
        measured_value=sol_m.value if sol_m.feasible else math.inf,
        backup_value=sol.value if path == "backup" else math.inf,
    )

    state.shifted_candidate = cand_next
    state.J_tilde = J_next
    state.predicted_init = cand_next.x_coeffs[0]
    state.basis = cand_next.basis
    state.prev_x = x_measured
    state.prev_u = u_cl
    state.k += 1
    return u_cl, diag
