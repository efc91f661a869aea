"""Assembly and solution of the chance-constrained coefficient-space OCP.

The program optimizes PCE coefficient trajectories for states and inputs over
the horizon.  Two interchangeable trajectory representations back the equality
constraints:

* ``hankel``: coefficients must be reproducible by the recorded-data Hankel
  stack (no system matrices anywhere), with a slack on the initial-condition
  rows and a one-norm penalty;
* ``model``: explicit coefficient dynamics ``x+ = A x + B u + w`` with given
  (identified or true) matrices; used by the identified-model variant and as
  the oracle for equivalence testing.

The Hankel equality ``H g = rhs`` is enforced in reduced form: ``rhs`` must
lie in ``range(H)``, i.e. ``Z' rhs = 0`` for an orthonormal basis ``Z`` of the
left null space.  This removes the ``g`` block from the solver (it is
recovered minimum-norm afterwards) and is exactly equivalent.

All costs use the half-norm convention ``|x|^2_Q = (1/2) x' Q x``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import cvxpy as cp
import numpy as np
from scipy.stats import norm as _stdnorm

from .data import HankelStack
from .pce import DisturbanceModel, PceBasis, causality_zero_indices
from .terminal import Box

_STATUS_MAP = {
    cp.OPTIMAL: "optimal",
    cp.OPTIMAL_INACCURATE: "optimal",
    cp.INFEASIBLE: "infeasible",
    cp.INFEASIBLE_INACCURATE: "infeasible",
}


def chance_sigma(dist_kind: str, epsilon: float) -> float:
    """Scaling of the standard deviation in the box chance constraints.

    ``gaussian`` uses the two-sided normal quantile (1.645 at eps = 0.1);
    ``distribution_free`` uses the conservative ``sqrt((2 - eps) / eps)``.
    """
    if not 0.0 < epsilon <= 1.0:
        raise ValueError("epsilon must lie in (0, 1]")
    if dist_kind == "gaussian":
        return float(_stdnorm.ppf(1.0 - epsilon / 2.0))
    if dist_kind == "distribution_free":
        return float(np.sqrt((2.0 - epsilon) / epsilon))
    raise ValueError(f"unknown chance-constraint kind {dist_kind!r}")


def evaluate_cost(
    x_coeffs: Sequence[np.ndarray],
    u_coeffs: Sequence[np.ndarray],
    basis: PceBasis,
    Q: np.ndarray,
    R: np.ndarray,
    P: np.ndarray,
) -> float:
    """Slack-free objective: norm-weighted stage costs over the horizon plus
    the terminal cost, all under the half-norm convention."""
    norms = basis.norms
    Q, R, P = np.atleast_2d(Q), np.atleast_2d(R), np.atleast_2d(P)
    total = 0.0
    N = len(u_coeffs)
    for i in range(N):
        x, u = np.atleast_2d(x_coeffs[i]), np.atleast_2d(u_coeffs[i])
        total += 0.5 * float(np.sum((x * (Q @ x)).sum(axis=0) * norms))
        total += 0.5 * float(np.sum((u * (R @ u)).sum(axis=0) * norms))
    xN = np.atleast_2d(x_coeffs[N])
    total += 0.5 * float(np.sum((xN * (P @ xN)).sum(axis=0) * norms))
    return total


@dataclass(frozen=True)
class OcpSolution:
    x_coeffs: list[np.ndarray]          # steps 0..N, each n_x x L
    u_coeffs: list[np.ndarray]          # steps 0..N-1, each n_u x L
    g_coeffs: np.ndarray | None         # (T - N + 1) x L, hankel mode only
    slack: np.ndarray | None            # n_x x L
    value: float                        # slack-free V_N
    slack_penalty: float
    status: str                         # optimal | infeasible | numerical_failure
    hankel_residual: float = np.nan
    solver_status: str = ""

    @property
    def feasible(self) -> bool:
        return self.status == "optimal"

    @property
    def slack_norm(self) -> float:
        return float(np.max(np.abs(self.slack))) if self.slack is not None else 0.0


def _sqrtm_psd(M: np.ndarray) -> np.ndarray:
    evals, evecs = np.linalg.eigh(np.atleast_2d(M))
    return evecs @ np.diag(np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T


@dataclass
class _Compiled:
    prob: cp.Problem
    init_param: cp.Parameter
    X_free: list
    X_term: cp.Variable
    V_free: list
    free_cols: list[np.ndarray]
    C: cp.Variable | None
    W_mat: np.ndarray


class OcpEngine:
    """Compiled, parameter-driven OCP solver, cached per basis signature.

    One engine is bound to fixed horizon data (stack or model matrices,
    weights, boxes, terminal ingredients); repeated solves only swap the
    initial-condition coefficients, so closed-loop stepping stays cheap.
    The compiled-problem cache makes an engine stateful: share one engine
    across sequential runs, but give each parallel worker its own.
    """

    def __init__(
        self,
        *,
        stack: HankelStack | None = None,
        model: tuple[np.ndarray, np.ndarray] | None = None,
        w_model: DisturbanceModel,
        N: int,
        Q: np.ndarray,
        R: np.ndarray,
        P: np.ndarray,
        sigma_x: float,
        sigma_u: float,
        X_box: Box | None,
        U_box: Box | None,
        Gamma: np.ndarray | None,
        gamma_level: float | None,
        beta: float = 1e4,
        cov_mode: str = "psd",
        solver: str = "CLARABEL",
        solver_tol: float = 1e-8,
        slack_enabled: bool = True,
        slack_tol: float = 1e-6,
        feedback: np.ndarray | None = None,
        closed_loop: np.ndarray | None = None,
    ):
        if (stack is None) == (model is None):
            raise ValueError("provide exactly one of stack or model")
        if cov_mode not in ("psd", "diagonal"):
            raise ValueError("cov_mode must be 'psd' or 'diagonal'")
        self.stack = stack
        self.model = None if model is None else (np.atleast_2d(model[0]), np.atleast_2d(model[1]))
        self.w_model = w_model
        self.N = N
        self.Q, self.R, self.P = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (Q, R, P))
        self.sigma_x, self.sigma_u = float(sigma_x), float(sigma_u)
        self.X_box, self.U_box = X_box, U_box
        self.Gamma = None if Gamma is None else np.atleast_2d(np.asarray(Gamma, dtype=float))
        self.gamma_level = None if gamma_level is None else float(gamma_level)
        self.beta = float(beta)
        self.cov_mode = cov_mode
        self.solver = solver
        self.solver_tol = float(solver_tol)
        self.slack_enabled = slack_enabled
        # the slack exists to absorb numerical-scale inconsistency in the
        # initial coefficients; a solution that needs more slack than this is
        # a relaxation artifact and counts as infeasible
        self.slack_tol = float(slack_tol)

        if stack is not None:
            self.n_x, self.n_u = stack.n_x, stack.n_u
            H = stack.full()
            u_svd, s, vt = np.linalg.svd(H, full_matrices=True)
            rank = int(np.sum(s > 1e-9 * s[0]))
            self._null = u_svd[:, rank:].T.copy()        # rows span left null space
            self._pinv = vt[:rank].T @ np.diag(1.0 / s[:rank]) @ u_svd[:, :rank].T
        else:
            self.n_x, self.n_u = self.model[0].shape[0], self.model[1].shape[1]
            self._null = None
            self._pinv = None

        self._qhalf = _sqrtm_psd(self.Q)
        self._rhalf = _sqrtm_psd(self.R)
        self._phalf = _sqrtm_psd(self.P)
        self._compiled: dict[tuple[int, int], _Compiled] = {}

        # closed-loop rollout shortcut: when the unconstrained optimum (the
        # stationary feedback rollout, optimal because P solves the matching
        # Lyapunov equation) satisfies every inequality, it is the solution
        # and no conic solve is needed
        self._K_sc = None
        self._Acl_sc = None
        if feedback is not None:
            K = np.atleast_2d(np.asarray(feedback, dtype=float))
            if self.model is not None:
                A_cl = self.model[0] + self.model[1] @ K
            else:
                A_cl = np.atleast_2d(np.asarray(closed_loop, dtype=float))
            lyap_res = A_cl.T @ self.P @ A_cl - self.P + self.Q + K.T @ self.R @ K
            if np.max(np.abs(lyap_res)) <= 1e-6 * max(1.0, float(np.max(np.abs(self.P)))):
                self._K_sc, self._Acl_sc = K, A_cl

    # -- compilation -------------------------------------------------------

    def _disturbance_rows(self, basis: PceBasis) -> np.ndarray:
        W = np.zeros((self.N * self.n_x, basis.L))
        block = self.w_model.pce_coeffs[:, 1:]
        for i in range(self.N):
            W[i * self.n_x : (i + 1) * self.n_x, basis.block_columns(i)] = block
        return W

    def _free_columns(self, basis: PceBasis) -> list[np.ndarray]:
        cols = []
        for i in range(self.N):
            pinned = causality_zero_indices(i, basis.L_x, basis.L_w, basis.L)
            cols.append(np.array([j for j in range(basis.L) if j not in pinned], dtype=int))
        return cols

    def _compile(self, basis: PceBasis) -> _Compiled:
        n_x, n_u, N, L = self.n_x, self.n_u, self.N, basis.L
        sqrt_norms = np.sqrt(basis.norms)

        init = cp.Parameter((n_x, L), name="init")
        # Slack lives on the x-block columns only: those carry the (possibly
        # numerically inconsistent) initial condition and their inputs are
        # never causality-pinned, so the slack cannot ride the uncontrolled
        # open-loop dynamics of later disturbance columns to cheat the
        # terminal covariance.  Columns >= L_x have exactly-representable
        # right-hand sides and need no slack.
        C = cp.Variable((n_x, basis.L_x), name="c") if self.slack_enabled else None
        C_full = None if C is None else cp.hstack([C, np.zeros((n_x, L - basis.L_x))])
        free_cols = self._free_columns(basis)

        # State-causality zeros (the step-shifted image of the input pinning)
        # are imposed structurally: column j of a later disturbance block is a
        # hard zero before its block's step.  Together with the stabilizing
        # input substitution u = K x + v below, this removes the unstable
        # open-loop directions along which solver-tolerance equality slop
        # would otherwise be amplified by the horizon dynamics.
        X_free = [cp.Variable((n_x, free_cols[i].size), name=f"x{i}") for i in range(1, N)]
        X_term = cp.Variable((n_x, L), name="xN")
        V_free = [cp.Variable((n_u, cols.size), name=f"v{i}") for i, cols in enumerate(free_cols)]

        def pad(expr, n_free):
            if n_free == L:
                return expr
            return cp.hstack([expr, np.zeros((expr.shape[0], L - n_free))])

        def x_step(i):
            if i == 0:
                return init + C_full if C_full is not None else init
            if i == N:
                return X_term
            return pad(X_free[i - 1], free_cols[i].size)

        def x_raw(i):
            # step-i state restricted to its free (non-pinned) columns
            if i == 0:
                head = init[:, : free_cols[0].size]
                return head + C if (C is not None and C.shape[1] == free_cols[0].size) else head
            if i == N:
                return X_term
            return X_free[i - 1]

        if self._K_sc is not None:
            def u_full(i):
                return pad(self._K_sc @ x_raw(i) + V_free[i], free_cols[i].size)
        else:
            def u_full(i):
                return pad(V_free[i], free_cols[i].size)

        W_mat = self._disturbance_rows(basis)
        constraints = []
        if self.stack is not None:
            rhs = cp.vstack(
                [x_step(i) for i in range(N + 1)] + [u_full(i) for i in range(N)] + [W_mat]
            )
            constraints.append(self._null @ rhs == 0)
        else:
            A, B = self.model
            for i in range(N):
                w_rows = W_mat[i * n_x : (i + 1) * n_x, :]
                nxt = free_cols[i + 1].size if i + 1 < N else L
                pred = A @ x_step(i) + B @ u_full(i) + w_rows
                constraints.append(x_step(i + 1)[:, :nxt] == pred[:, :nxt])

        # box chance constraints: mean +/- sigma * std inside the box,
        # coordinate by coordinate, sharing one epigraph variable per std
        # (step-0 state rows are handled as a pre-check on the constant
        # initial coefficients)
        if self.X_box is not None:
            coords = np.flatnonzero(self.X_box.enabled)
            for m in coords:
                t = cp.Variable(N - 1)
                for i in range(1, N):
                    xi = x_step(i)
                    constraints.append(cp.norm(cp.multiply(sqrt_norms[1:], xi[m, 1:]), 2) <= t[i - 1])
                    constraints.append(xi[m, 0] + self.sigma_x * t[i - 1] <= self.X_box.upper[m])
                    constraints.append(xi[m, 0] - self.sigma_x * t[i - 1] >= self.X_box.lower[m])
        if self.U_box is not None:
            coords = np.flatnonzero(self.U_box.enabled)
            for m in coords:
                t = cp.Variable(N)
                for i in range(N):
                    ui = u_full(i)
                    nz = free_cols[i][free_cols[i] > 0]
                    if nz.size:
                        constraints.append(cp.norm(cp.multiply(sqrt_norms[nz], ui[m, nz]), 2) <= t[i])
                    else:
                        constraints.append(t[i] >= 0)
                    constraints.append(ui[m, 0] + self.sigma_u * t[i] <= self.U_box.upper[m])
                    constraints.append(ui[m, 0] - self.sigma_u * t[i] >= self.U_box.lower[m])

        # terminal set on the mean and terminal covariance bound
        xN = x_step(N)
        if self.gamma_level is not None:
            constraints.append(cp.norm(self._phalf @ xN[:, 0], 2) <= np.sqrt(2.0 * self.gamma_level))
            if self.X_box is not None:
                for m in np.flatnonzero(self.X_box.enabled):
                    constraints.append(xN[m, 0] <= self.X_box.upper[m])
                    constraints.append(xN[m, 0] >= self.X_box.lower[m])
        if self.Gamma is not None:
            Cblk = cp.multiply(np.tile(sqrt_norms[1:], (n_x, 1)), xN[:, 1:])
            if n_x == 1 or self.cov_mode == "diagonal":
                for m in range(n_x):
                    constraints.append(cp.sum_squares(Cblk[m, :]) <= self.Gamma[m, m])
            else:
                constraints.append(
                    cp.bmat([[self.Gamma, Cblk], [Cblk.T, np.eye(L - 1)]]) >> 0
                )

        # norm-weighted quadratic stage costs (step-0 state cost is a
        # constant and is added back when the value is reported)
        D = np.diag(sqrt_norms)
        obj = 0
        for i in range(N):
            if i > 0:
                obj = obj + 0.5 * cp.sum_squares(self._qhalf @ x_step(i) @ D)
            obj = obj + 0.5 * cp.sum_squares(self._rhalf @ u_full(i) @ D)
        obj = obj + 0.5 * cp.sum_squares(self._phalf @ xN @ D)
        if C is not None:
            obj = obj + self.beta * cp.sum(cp.abs(C))

        prob = cp.Problem(cp.Minimize(obj), constraints)
        return _Compiled(prob, init, X_free, X_term, V_free, free_cols, C, W_mat)

    def _get_compiled(self, basis: PceBasis) -> _Compiled:
        key = (basis.L_x, basis.L)
        if key not in self._compiled:
            if basis.N != self.N or basis.L_w - 1 != self.w_model.n_germ:
                raise ValueError("basis horizon/block size does not match the engine")
            self._compiled[key] = self._compile(basis)
        return self._compiled[key]

    # -- solving -----------------------------------------------------------

    def _precheck_init(self, init: np.ndarray, basis: PceBasis, tol: float = 1e-6) -> bool:
        """Step-0 state chance constraint on the (constant) initial coefficients."""
        if self.X_box is None:
            return True
        mean = init[:, 0]
        var = (init[:, 1:] ** 2 * basis.norms[1:]).sum(axis=1)
        std = np.sqrt(np.maximum(var, 0.0))
        en = self.X_box.enabled
        hi_ok = np.all(mean[en] + self.sigma_x * std[en] <= self.X_box.upper[en] + tol)
        lo_ok = np.all(mean[en] - self.sigma_x * std[en] >= self.X_box.lower[en] - tol)
        return bool(hi_ok and lo_ok)

    def _try_shortcut(self, basis: PceBasis, init: np.ndarray) -> OcpSolution | None:
        """Roll the stationary feedback out column by column and accept it as
        the optimum if it satisfies every inequality.

        The rollout is the unconstrained minimizer because the terminal weight
        solves the feedback's Lyapunov equation, so feasibility certifies
        optimality (to well below solver tolerance).
        """
        if self._K_sc is None:
            return None
        W = self._disturbance_rows(basis)
        x = init.copy()
        x_list = [x]
        u_list = []
        for i in range(self.N):
            u_list.append(self._K_sc @ x)
            x = self._Acl_sc @ x + W[i * self.n_x : (i + 1) * self.n_x, :]
            x_list.append(x)

        tol = 1e-9
        norms = basis.norms
        if self.X_box is not None:
            en = self.X_box.enabled
            for i in range(1, self.N):
                xi = x_list[i]
                std = np.sqrt(((xi[:, 1:] ** 2) * norms[1:]).sum(axis=1))
                if np.any(xi[en, 0] + self.sigma_x * std[en] > self.X_box.upper[en] + tol):
                    return None
                if np.any(xi[en, 0] - self.sigma_x * std[en] < self.X_box.lower[en] - tol):
                    return None
        if self.U_box is not None:
            en = self.U_box.enabled
            for i in range(self.N):
                ui = u_list[i]
                std = np.sqrt(((ui[:, 1:] ** 2) * norms[1:]).sum(axis=1))
                if np.any(ui[en, 0] + self.sigma_u * std[en] > self.U_box.upper[en] + tol):
                    return None
                if np.any(ui[en, 0] - self.sigma_u * std[en] < self.U_box.lower[en] - tol):
                    return None
        xN = x_list[self.N]
        if self.gamma_level is not None:
            if 0.5 * xN[:, 0] @ self.P @ xN[:, 0] > self.gamma_level + tol:
                return None
            if self.X_box is not None:
                en = self.X_box.enabled
                if np.any(xN[en, 0] > self.X_box.upper[en] + tol) or np.any(
                    xN[en, 0] < self.X_box.lower[en] - tol
                ):
                    return None
        if self.Gamma is not None:
            cov = (xN[:, 1:] * norms[1:]) @ xN[:, 1:].T
            scale = max(1.0, float(np.max(np.abs(self.Gamma))))
            if self.cov_mode == "diagonal" or self.n_x == 1:
                if np.any(np.diag(cov) > np.diag(self.Gamma) + 1e-8 * scale):
                    return None
            elif np.max(np.linalg.eigvalsh(cov - self.Gamma)) > 1e-8 * scale:
                return None

        g = None
        residual = 0.0
        if self.stack is not None:
            rhs = np.vstack([init, np.vstack(x_list[1:]), np.vstack(u_list), W])
            g = self._pinv @ rhs
            residual = float(np.linalg.norm(self.stack.full() @ g - rhs, ord=np.inf))
            if residual > 1e-7 * max(1.0, float(np.max(np.abs(rhs)))):
                return None
        value = evaluate_cost(x_list, u_list, basis, self.Q, self.R, self.P)
        return OcpSolution(
            x_coeffs=x_list, u_coeffs=u_list, g_coeffs=g,
            slack=np.zeros((self.n_x, basis.L)), value=value, slack_penalty=0.0,
            status="optimal", hankel_residual=residual, solver_status="rollout_shortcut",
        )

    def solve(self, basis: PceBasis, init_coeffs: np.ndarray) -> OcpSolution:
        init = np.atleast_2d(np.asarray(init_coeffs, dtype=float))
        if init.shape != (self.n_x, basis.L):
            raise ValueError(f"init coefficients must be {(self.n_x, basis.L)}, got {init.shape}")

        if not self._precheck_init(init, basis):
            return OcpSolution([], [], None, None, np.inf, 0.0, "infeasible",
                               solver_status="precheck_init_violation")

        shortcut = self._try_shortcut(basis, init)
        if shortcut is not None:
            return shortcut

        comp = self._get_compiled(basis)
        comp.init_param.value = init
        try:
            comp.prob.solve(solver=self.solver)
        except cp.error.SolverError:
            try:
                comp.prob.solve(solver="SCS", eps=1e-9, max_iters=100_000)
            except cp.error.SolverError:
                return OcpSolution([], [], None, None, np.inf, 0.0, "numerical_failure",
                                   solver_status="solver_exception")
        status = _STATUS_MAP.get(comp.prob.status, "numerical_failure")
        if status != "optimal":
            return OcpSolution([], [], None, None, np.inf, 0.0, status,
                               solver_status=str(comp.prob.status))

        slack = np.zeros((self.n_x, basis.L))
        if comp.C is not None:
            slack[:, : basis.L_x] = np.atleast_2d(comp.C.value)
        x_list = [init.copy()]
        for i in range(1, self.N):
            xi = np.zeros((self.n_x, basis.L))
            xi[:, comp.free_cols[i]] = np.atleast_2d(comp.X_free[i - 1].value)
            x_list.append(xi)
        x_list.append(np.atleast_2d(comp.X_term.value).copy())
        u_list = []
        for i in range(self.N):
            u = np.zeros((self.n_u, basis.L))
            nf = comp.free_cols[i].size
            v = np.atleast_2d(comp.V_free[i].value)
            if self._K_sc is not None:
                head = (init + slack)[:, :nf] if i == 0 else x_list[i][:, :nf]
                u[:, :nf] = self._K_sc @ head + v
            else:
                u[:, :nf] = v
            u_list.append(u)

        g = None
        residual = 0.0
        if self.stack is not None:
            rhs = np.vstack([init + slack, np.vstack(x_list[1:]), np.vstack(u_list), comp.W_mat])
            g = self._pinv @ rhs
            residual = float(np.linalg.norm(self.stack.full() @ g - rhs, ord=np.inf))

        value = evaluate_cost(x_list, u_list, basis, self.Q, self.R, self.P)
        status = "optimal"
        if float(np.max(np.abs(slack))) > self.slack_tol:
            status = "infeasible"
        return OcpSolution(
            x_coeffs=x_list,
            u_coeffs=u_list,
            g_coeffs=g,
            slack=slack,
            value=value,
            slack_penalty=self.beta * float(np.sum(np.abs(slack))),
            status=status,
            hankel_residual=residual,
            solver_status=str(comp.prob.status),
        )

    # -- candidate verification --------------------------------------------

    def check_candidate(
        self, basis: PceBasis, x_coeffs: Sequence[np.ndarray], u_coeffs: Sequence[np.ndarray]
    ) -> dict[str, float]:
        """Worst-case constraint residuals of an explicit coefficient
        trajectory (nonpositive margins mean satisfied); used to certify the
        shifted candidate before a backup solve."""
        norms = basis.norms
        res: dict[str, float] = {}
        if self.stack is not None:
            rhs = np.vstack([np.atleast_2d(x_coeffs[0]), np.vstack(x_coeffs[1:]),
                             np.vstack(u_coeffs), self._disturbance_rows(basis)])
            res["hankel"] = float(np.max(np.abs(self._null @ rhs))) if self._null.size else 0.0
        else:
            A, B = self.model
            worst = 0.0
            W = self._disturbance_rows(basis)
            for i in range(self.N):
                pred = A @ x_coeffs[i] + B @ u_coeffs[i] + W[i * self.n_x : (i + 1) * self.n_x, :]
                worst = max(worst, float(np.max(np.abs(pred - x_coeffs[i + 1]))))
            res["dynamics"] = worst

        chance = -np.inf
        if self.X_box is not None:
            for i in range(1, self.N):
                x = np.atleast_2d(x_coeffs[i])
                std = np.sqrt(((x[:, 1:] ** 2) * norms[1:]).sum(axis=1))
                for m in np.flatnonzero(self.X_box.enabled):
                    chance = max(chance, x[m, 0] + self.sigma_x * std[m] - self.X_box.upper[m])
                    chance = max(chance, self.X_box.lower[m] - (x[m, 0] - self.sigma_x * std[m]))
        if self.U_box is not None:
            for i in range(self.N):
                u = np.atleast_2d(u_coeffs[i])
                std = np.sqrt(((u[:, 1:] ** 2) * norms[1:]).sum(axis=1))
                for m in np.flatnonzero(self.U_box.enabled):
                    chance = max(chance, u[m, 0] + self.sigma_u * std[m] - self.U_box.upper[m])
                    chance = max(chance, self.U_box.lower[m] - (u[m, 0] - self.sigma_u * std[m]))
        res["chance"] = chance

        xN = np.atleast_2d(x_coeffs[self.N])
        if self.gamma_level is not None:
            res["terminal_mean"] = float(0.5 * xN[:, 0] @ self.P @ xN[:, 0] - self.gamma_level)
        if self.Gamma is not None:
            cov = (xN[:, 1:] * norms[1:]) @ xN[:, 1:].T
            if self.cov_mode == "diagonal" or self.n_x == 1:
                res["terminal_cov"] = float(np.max(np.diag(cov) - np.diag(self.Gamma)))
            else:
                res["terminal_cov"] = float(np.max(np.linalg.eigvalsh(cov - self.Gamma)))

        causality = 0.0
        for i in range(self.N):
            pinned = sorted(causality_zero_indices(i, basis.L_x, basis.L_w, basis.L))
            if pinned:
                causality = max(causality, float(np.max(np.abs(np.atleast_2d(u_coeffs[i])[:, pinned]))))
        res["causality"] = causality
        return res

    def dump_program(self, basis: PceBasis, path: str | Path) -> None:
        """Sparse-triplet JSON dump of the compiled program (debug aid)."""
        comp = self._get_compiled(basis)
        dat, chain, _ = comp.prob.get_problem_data(self.solver)
        out = {"variables": int(dat["n_var"]) if "n_var" in dat else None, "blocks": {}}
        for key in ("A", "P", "F"):
            M = dat.get(key)
            if M is None:
                continue
            M = M.tocoo()
            out["blocks"][key] = {
                "shape": list(M.shape),
                "rows": M.row.tolist(),
                "cols": M.col.tolist(),
                "vals": M.data.tolist(),
            }
        for key in ("b", "c", "q"):
            v = dat.get(key)
            if v is not None:
                out["blocks"][key] = np.asarray(v).ravel().tolist()
        Path(path).write_text(json.dumps(out))


@dataclass
class OcpProblem:
    """Assembled OCP: engine plus the per-instance basis and initial condition."""

    engine: OcpEngine
    basis: PceBasis
    init_coeffs: np.ndarray

    def nominal_variable_counts(self) -> dict[str, int]:
        """Decision-variable block sizes of the written-out program (the
        solver works on the reduced form)."""
        L, N = self.basis.L, self.engine.N
        counts = {
            "x": self.engine.n_x * (N + 1) * L,
            "u": self.engine.n_u * N * L,
            "c": self.engine.n_x * L,
        }
        if self.engine.stack is not None:
            counts["g"] = self.engine.stack.n_cols * L
        return counts


def assemble(
    *,
    stack: HankelStack | None = None,
    model: tuple[np.ndarray, np.ndarray] | None = None,
    basis: PceBasis,
    init_coeffs: np.ndarray,
    w_model: DisturbanceModel,
    Q: np.ndarray,
    R: np.ndarray,
    P: np.ndarray,
    sigma_x: float = 0.0,
    sigma_u: float = 0.0,
    X_box: Box | None = None,
    U_box: Box | None = None,
    Gamma: np.ndarray | None = None,
    gamma_level: float | None = None,
    beta: float = 1e4,
    cov_mode: str = "psd",
    solver: str = "CLARABEL",
    solver_tol: float = 1e-8,
    slack_enabled: bool = True,
) -> OcpProblem:
    """Build the conic program for one horizon; see :class:`OcpEngine` for the
    reusable form."""
    engine = OcpEngine(
        stack=stack, model=model, w_model=w_model, N=basis.N, Q=Q, R=R, P=P,
        sigma_x=sigma_x, sigma_u=sigma_u, X_box=X_box, U_box=U_box,
        Gamma=Gamma, gamma_level=gamma_level, beta=beta, cov_mode=cov_mode,
        solver=solver, solver_tol=solver_tol, slack_enabled=slack_enabled,
    )
    init = np.atleast_2d(np.asarray(init_coeffs, dtype=float))
    return OcpProblem(engine, basis, init)


def solve(problem: OcpProblem) -> OcpSolution:
    return problem.engine.solve(problem.basis, problem.init_coeffs)
