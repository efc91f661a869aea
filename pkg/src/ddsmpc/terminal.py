"""Terminal ingredients: feedback, cost-to-go, covariance bound, and level set.

Two synthesis routes produce the same objects.  The data-driven route solves a
semidefinite program over depth-1 data matrices and never touches ``(A, B)``;
the model-based route (Riccati iteration) exists as the oracle to compare
against.  Everything downstream consumes the closed-loop map ``M H`` and the
matrices ``K, P, Gamma`` plus the level ``gamma`` of the terminal ellipsoid
``{x : (1/2) x' P x <= gamma}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cvxpy as cp
import numpy as np

from .data import DataRecord, TransitionData


class SynthesisError(RuntimeError):
    """Terminal-ingredient synthesis failed (infeasible SDP, unstable loop, ...)."""


@dataclass(frozen=True)
class Box:
    """Per-coordinate interval constraints with an enable mask."""

    lower: np.ndarray
    upper: np.ndarray
    enabled: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        en = np.atleast_1d(np.asarray(self.enabled, dtype=bool))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "enabled", en)
        if not (lo.shape == hi.shape == en.shape):
            raise ValueError("box bounds and mask must share the shape")
        if np.any(lo[en] >= hi[en]):
            raise ValueError("lower bounds must be strictly below upper bounds")

    @property
    def dim(self) -> int:
        return self.lower.size

    @staticmethod
    def symmetric(bound: float | np.ndarray, dim: int) -> "Box":
        b = np.broadcast_to(np.asarray(bound, dtype=float), (dim,))
        return Box(-b, b, np.ones(dim, dtype=bool))

    @staticmethod
    def unbounded(dim: int) -> "Box":
        return Box(-np.inf * np.ones(dim), np.inf * np.ones(dim), np.zeros(dim, dtype=bool))

    @staticmethod
    def single(coord: int, lo: float, hi: float, dim: int) -> "Box":
        lower = -np.inf * np.ones(dim)
        upper = np.inf * np.ones(dim)
        mask = np.zeros(dim, dtype=bool)
        lower[coord], upper[coord], mask[coord] = lo, hi, True
        return Box(lower, upper, mask)


@dataclass(frozen=True)
class TerminalIngredients:
    K: np.ndarray
    H: np.ndarray
    P: np.ndarray
    Gamma: np.ndarray
    gamma_level: float
    M: np.ndarray
    sigma_bar: np.ndarray

    @property
    def closed_loop(self) -> np.ndarray:
        """The map ``M H``, the data-driven stand-in for ``A + B K``."""
        return self.M @ self.H

    @property
    def n_x(self) -> int:
        return self.P.shape[0]

    @property
    def alpha(self) -> float:
        """Average-cost bound ``0.5 trace(Cov[W] P)`` under the half-norm convention."""
        return 0.5 * float(np.trace(self.sigma_bar @ self.P))

    def to_json(self, path: str | Path) -> None:
        payload = {
            "K": self.K.tolist(),
            "H": self.H.tolist(),
            "P": self.P.tolist(),
            "Gamma": self.Gamma.tolist(),
            "gamma_level": self.gamma_level,
            "M": self.M.tolist(),
            "sigma_bar": self.sigma_bar.tolist(),
            "alpha": self.alpha,
        }
        Path(path).write_text(json.dumps(payload, indent=1))

    @staticmethod
    def from_json(path: str | Path) -> "TerminalIngredients":
        d = json.loads(Path(path).read_text())
        return TerminalIngredients(
            K=np.array(d["K"]), H=np.array(d["H"]), P=np.array(d["P"]),
            Gamma=np.array(d["Gamma"]), gamma_level=float(d["gamma_level"]),
            M=np.array(d["M"]), sigma_bar=np.array(d["sigma_bar"]),
        )


def _spectral_radius(A: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def _dlyap(A: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Solve ``X = A X A' + Q`` by Kronecker vectorization (small n only)."""
    n = A.shape[0]
    if _spectral_radius(A) >= 1.0:
        raise SynthesisError("closed loop is not Schur stable; Lyapunov equation unsolvable")
    lhs = np.eye(n * n) - np.kron(A, A)
    X = np.linalg.solve(lhs, Q.reshape(n * n)).reshape(n, n)
    return 0.5 * (X + X.T)


def solve_P(K: np.ndarray, H: np.ndarray, M: np.ndarray, Q: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Cost-to-go from ``P = (MH)' P (MH) + Q + K'RK``."""
    K = np.atleast_2d(K)
    A_cl = np.atleast_2d(M) @ np.atleast_2d(H)
    return _dlyap(A_cl.T, np.atleast_2d(Q) + K.T @ np.atleast_2d(R) @ K)


def solve_Gamma(MH: np.ndarray, Sigma_bar: np.ndarray) -> np.ndarray:
    """Stationary covariance bound from ``Gamma = (MH) Gamma (MH)' + Sigma_bar``."""
    return _dlyap(np.atleast_2d(MH), np.atleast_2d(Sigma_bar))


def synthesize_K_H(
    record: DataRecord | TransitionData | list,
    Q: np.ndarray,
    R: np.ndarray,
    solver: str = "CLARABEL",
) -> tuple[np.ndarray, np.ndarray]:
    """Data-driven LQR synthesis: solve the convexified trace-minimization SDP
    over ``(X1, X2)`` and recover ``K = U X2 (X X2)^-1``, ``H = X2 (X X2)^-1``.

    ``X H = I`` and ``U H = K`` then hold by construction.
    """
    td = record if isinstance(record, TransitionData) else TransitionData.from_records(record)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n_x, n_u, m = td.X.shape[0], td.U.shape[0], td.n_samples

    s = np.linalg.svd(np.vstack([td.X, td.U]), compute_uv=False)
    if s.size < n_x + n_u or s[n_x + n_u - 1] <= 1e-9 * s[0]:
        raise SynthesisError("data not exciting enough for terminal synthesis")

    evals, evecs = np.linalg.eigh(R)
    R_half = evecs @ np.diag(np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T

    X1 = cp.Variable((n_u, n_u), symmetric=True)
    X2 = cp.Variable((m, n_x))
    P_t = td.X @ X2
    MX2 = td.M @ X2
    constraints = [
        P_t == P_t.T,
        cp.bmat([[P_t - np.eye(n_x), MX2], [MX2.T, P_t]]) >> 0,
        cp.bmat([[X1, R_half @ td.U @ X2], [(R_half @ td.U @ X2).T, P_t]]) >> 0,
    ]
    prob = cp.Problem(cp.Minimize(cp.trace(Q @ P_t) + cp.trace(X1)), constraints)
    try:
        prob.solve(solver=solver)
    except cp.error.SolverError:
        prob.solve(solver="SCS", eps=1e-9, max_iters=200_000)
    if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise SynthesisError(f"terminal SDP terminated with status {prob.status}")

    XX2 = td.X @ X2.value
    cond = np.linalg.cond(XX2)
    if not np.isfinite(cond) or cond > 1e12:
        raise SynthesisError("X @ X2 numerically singular in K/H recovery")
    H = np.linalg.solve(XX2.T, X2.value.T).T
    K = td.U @ H
    return K, H


def dare(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray,
         tol: float = 1e-13, max_iter: int = 100_000) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-point iteration of the discrete-time Riccati equation; returns
    ``(P, K)``."""
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    Q, R = np.atleast_2d(Q), np.atleast_2d(R)
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        gain = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = A.T @ P @ A - (A.T @ P @ B) @ gain + Q
        P_next = 0.5 * (P_next + P_next.T)
        if np.max(np.abs(P_next - P)) <= tol * max(1.0, np.max(np.abs(P_next))):
            K = -np.linalg.solve(R + B.T @ P_next @ B, B.T @ P_next @ A)
            return P_next, K
        P = P_next
    raise SynthesisError("Riccati iteration did not converge")


def model_based_ingredients(
    A: np.ndarray,
    B: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
    Sigma_bar: np.ndarray,
    gamma_level: float | None = None,
    X_box: Box | None = None,
    U_box: Box | None = None,
    sigma_x: float = 0.0,
    sigma_u: float = 0.0,
) -> TerminalIngredients:
    """Oracle route: Riccati ``(P, K)``, then the Lyapunov covariance bound.

    ``M = A + BK`` with ``H = I`` so that ``closed_loop`` matches the
    data-driven object layout.
    """
    A, B = np.atleast_2d(np.asarray(A, dtype=float)), np.atleast_2d(np.asarray(B, dtype=float))
    P, K = dare(A, B, Q, R)
    A_cl = A + B @ K
    Gamma = solve_Gamma(A_cl, np.atleast_2d(Sigma_bar))
    ing = TerminalIngredients(
        K=K, H=np.eye(A.shape[0]), P=P, Gamma=Gamma, gamma_level=1.0,
        M=A_cl, sigma_bar=np.atleast_2d(np.asarray(Sigma_bar, dtype=float)),
    )
    return _finalize_gamma(ing, gamma_level, X_box, U_box, sigma_x, sigma_u)


def data_driven_ingredients(
    record: DataRecord | TransitionData | list,
    Q: np.ndarray,
    R: np.ndarray,
    Sigma_bar: np.ndarray,
    gamma_level: float | None = None,
    X_box: Box | None = None,
    U_box: Box | None = None,
    sigma_x: float = 0.0,
    sigma_u: float = 0.0,
    solver: str = "CLARABEL",
) -> TerminalIngredients:
    """Full data-driven synthesis: SDP feedback, Lyapunov solves, level selection."""
    td = record if isinstance(record, TransitionData) else TransitionData.from_records(record)
    K, H = synthesize_K_H(td, Q, R, solver=solver)
    P = solve_P(K, H, td.M, Q, R)
    Gamma = solve_Gamma(td.M @ H, np.atleast_2d(Sigma_bar))
    ing = TerminalIngredients(
        K=K, H=H, P=P, Gamma=Gamma, gamma_level=1.0, M=td.M,
        sigma_bar=np.atleast_2d(np.asarray(Sigma_bar, dtype=float)),
    )
    return _finalize_gamma(ing, gamma_level, X_box, U_box, sigma_x, sigma_u)


def _finalize_gamma(ing, gamma_level, X_box, U_box, sigma_x, sigma_u):
    if gamma_level is not None:
        return _with_gamma(ing, gamma_level)
    if X_box is None and U_box is None:
        return ing
    return select_gamma(ing, X_box, U_box, sigma_x, sigma_u)


def _with_gamma(ing: TerminalIngredients, gamma: float) -> TerminalIngredients:
    return TerminalIngredients(ing.K, ing.H, ing.P, ing.Gamma, float(gamma), ing.M, ing.sigma_bar)


@dataclass(frozen=True)
class TerminalCheck:
    """Numeric report for the terminal-ingredient conditions.

    ``contraction`` is the worst growth factor of the P-weighted norm under
    the closed loop; invariance also needs the ellipsoid inside the state box.
    Margins are 'slack until violation' (nonnegative means satisfied).
    """

    passed: bool
    invariance_ok: bool
    state_chance_ok: bool
    input_chance_ok: bool
    contraction: float
    state_margins: np.ndarray
    input_margins: np.ndarray


def check_terminal_assumption(
    ing: TerminalIngredients,
    X_box: Box | None,
    U_box: Box | None,
    sigma_x: float,
    sigma_u: float,
) -> TerminalCheck:
    """Verify invariance of the terminal ellipsoid and the chance-constraint
    coverage of every random variable it can host (mean in the set, per-
    coordinate variance below ``Gamma``'s diagonal).

    Ellipsoid coordinate extrema use the half-norm convention:
    ``max |x_i| over {(1/2) x'Px <= gamma}`` is ``sqrt(2 gamma (P^-1)_ii)``.
    """
    n_x = ing.n_x
    A_cl = ing.closed_loop
    gamma = ing.gamma_level
    P_inv = np.linalg.inv(ing.P)

    S = A_cl.T @ ing.P @ A_cl
    contraction = float(np.max(np.linalg.eigvals(np.linalg.solve(ing.P, S)).real))

    ell_x = np.sqrt(np.maximum(2.0 * gamma * np.diag(P_inv), 0.0))
    KPK = ing.K @ P_inv @ ing.K.T
    ell_u = np.sqrt(np.maximum(2.0 * gamma * np.diag(KPK), 0.0))
    std_x = np.sqrt(np.maximum(np.diag(ing.Gamma), 0.0))
    std_u = np.sqrt(np.maximum(np.diag(ing.K @ ing.Gamma @ ing.K.T), 0.0))

    state_margins = np.full(n_x, np.inf)
    inside_box = True
    if X_box is not None:
        for i in np.flatnonzero(X_box.enabled):
            hi = X_box.upper[i] - (ell_x[i] + sigma_x * std_x[i])
            lo = -X_box.lower[i] - (ell_x[i] + sigma_x * std_x[i])
            state_margins[i] = min(hi, lo)
            if ell_x[i] > min(X_box.upper[i], -X_box.lower[i]):
                inside_box = False
    input_margins = np.full(ing.K.shape[0], np.inf)
    if U_box is not None:
        for i in np.flatnonzero(U_box.enabled):
            hi = U_box.upper[i] - (ell_u[i] + sigma_u * std_u[i])
            lo = -U_box.lower[i] - (ell_u[i] + sigma_u * std_u[i])
            input_margins[i] = min(hi, lo)

    invariance_ok = contraction <= 1.0 + 1e-9 and inside_box
    state_ok = bool(np.all(state_margins >= 0))
    input_ok = bool(np.all(input_margins >= 0))
    return TerminalCheck(
        passed=invariance_ok and state_ok and input_ok,
        invariance_ok=invariance_ok,
        state_chance_ok=state_ok,
        input_chance_ok=input_ok,
        contraction=contraction,
        state_margins=state_margins,
        input_margins=input_margins,
    )


def select_gamma(
    ing: TerminalIngredients,
    X_box: Box | None,
    U_box: Box | None,
    sigma_x: float,
    sigma_u: float,
    gamma0: float = 1.0,
    max_halvings: int = 60,
) -> TerminalIngredients:
    """Deterministic level selection: halve from ``gamma0`` until the terminal
    check passes."""
    gamma = gamma0
    for _ in range(max_halvings + 1):
        cand = _with_gamma(ing, gamma)
        if check_terminal_assumption(cand, X_box, U_box, sigma_x, sigma_u).passed:
            return cand
        gamma *= 0.5
    raise SynthesisError("no terminal level found after 60 halvings")
