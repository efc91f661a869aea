"""Data collection and Hankel-matrix system representation.

The plant simulator is the only place where the true ``(A, B)`` matrices are
read; the controller side consumes recorded state/input/disturbance
trajectories, their block-Hankel matrices, and least-squares disturbance
estimates.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pce import DisturbanceModel

# Singular values below RANK_RTOL * sigma_max count as zero in rank checks
# and pseudo-inverses.
RANK_RTOL = 1e-9


class ExcitationError(RuntimeError):
    """Recorded data is not exciting enough for the requested construction."""


@dataclass(frozen=True)
class Plant:
    """Simulated reality: ``x+ = A x + B u + w`` with i.i.d. disturbances."""

    A: np.ndarray
    B: np.ndarray
    disturbance: DisturbanceModel
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "A", np.atleast_2d(np.asarray(self.A, dtype=float)))
        object.__setattr__(self, "B", np.atleast_2d(np.asarray(self.B, dtype=float)))
        if self.A.shape[0] != self.A.shape[1]:
            raise ValueError("A must be square")
        if self.B.shape[0] != self.A.shape[0]:
            raise ValueError("B row count must match A")
        if self.disturbance.dim != self.A.shape[0]:
            raise ValueError("disturbance dimension must match the state")

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class DataRecord:
    """One contiguous recorded trajectory with measured or estimated disturbances."""

    x_traj: np.ndarray  # (T+1) x n_x
    u_traj: np.ndarray  # T x n_u
    w_traj: np.ndarray  # T x n_x
    flag: str = "measured"  # "measured" | "estimated"

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x_traj, dtype=float))
        u = np.atleast_2d(np.asarray(self.u_traj, dtype=float))
        w = np.atleast_2d(np.asarray(self.w_traj, dtype=float))
        object.__setattr__(self, "x_traj", x)
        object.__setattr__(self, "u_traj", u)
        object.__setattr__(self, "w_traj", w)
        if self.flag not in ("measured", "estimated"):
            raise ValueError("flag must be 'measured' or 'estimated'")
        if x.shape[0] != u.shape[0] + 1 or w.shape != (u.shape[0], x.shape[1]):
            raise ValueError("trajectory lengths inconsistent (need x: T+1, u: T, w: T)")

    @property
    def T(self) -> int:
        return self.u_traj.shape[0]

    @property
    def n_x(self) -> int:
        return self.x_traj.shape[1]

    @property
    def n_u(self) -> int:
        return self.u_traj.shape[1]

    def uw_stacked(self) -> np.ndarray:
        """(u, w) samples side by side, T x (n_u + n_x); the excitation signal."""
        return np.hstack([self.u_traj, self.w_traj])

    def to_json(self, path: str | Path) -> None:
        payload = {
            "n_x": self.n_x,
            "n_u": self.n_u,
            "T": self.T,
            "flag": self.flag,
            "x": self.x_traj.tolist(),
            "u": self.u_traj.tolist(),
            "w": self.w_traj.tolist(),
        }
        Path(path).write_text(json.dumps(payload))

    @staticmethod
    def from_json(path: str | Path) -> "DataRecord":
        payload = json.loads(Path(path).read_text())
        return DataRecord(
            np.array(payload["x"]), np.array(payload["u"]), np.array(payload["w"]),
            flag=payload["flag"],
        )

    def to_csv(self, path: str | Path) -> None:
        """Columns: k, x1..x_nx, u1..u_nu, w1..w_nx; the final row holds x_T only."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = (
                ["k"]
                + [f"x{i + 1}" for i in range(self.n_x)]
                + [f"u{i + 1}" for i in range(self.n_u)]
                + [f"w{i + 1}" for i in range(self.n_x)]
            )
            writer.writerow(header)
            for k in range(self.T):
                writer.writerow(
                    [k, *self.x_traj[k], *self.u_traj[k], *self.w_traj[k]]
                )
            writer.writerow([self.T, *self.x_traj[self.T]] + [""] * (self.n_u + self.n_x))

    @staticmethod
    def from_csv(path: str | Path, flag: str = "measured") -> "DataRecord":
        rows = list(csv.reader(open(path)))
        header = rows[0]
        n_x = sum(1 for h in header if h.startswith("x"))
        n_u = sum(1 for h in header if h.startswith("u"))
        body = rows[1:]
        x = np.array([[float(v) for v in r[1 : 1 + n_x]] for r in body])
        uw = [r[1 + n_x :] for r in body[:-1]]
        u = np.array([[float(v) for v in r[:n_u]] for r in uw])
        w = np.array([[float(v) for v in r[n_u:]] for r in uw])
        return DataRecord(x, u, w, flag=flag)


def simulate(
    plant: Plant,
    u_seq: np.ndarray,
    x0: np.ndarray,
    steps: int | None = None,
    rng: np.random.Generator | None = None,
    germs: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Roll the realization dynamics forward under ``u_seq``.

    Disturbances are drawn through the plant's germ model unless explicit
    ``germs`` (steps x n_germ) are supplied; returns ``(x_traj, w_traj)``.
    """
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
    if u_seq.shape[1] != plant.n_u:
        u_seq = u_seq.reshape(-1, plant.n_u)
    steps = u_seq.shape[0] if steps is None else steps
    if rng is None:
        rng = np.random.default_rng(plant.rng_seed)
    if germs is None:
        germs = plant.disturbance.sample_germs(rng, steps)
    w_traj = plant.disturbance.germ_to_w(germs)

    x = np.zeros((steps + 1, plant.n_x))
    x[0] = np.asarray(x0, dtype=float).reshape(plant.n_x)
    for k in range(steps):
        x[k + 1] = plant.A @ x[k] + plant.B @ u_seq[k] + w_traj[k]
    return x, w_traj


def hankel(signal: np.ndarray, depth: int) -> np.ndarray:
    """Block-Hankel matrix with ``depth`` block rows and ``T - depth + 1``
    columns from a ``T x n`` signal."""
    signal = np.atleast_2d(np.asarray(signal, dtype=float))
    if signal.shape[0] < signal.shape[1] and signal.ndim == 2 and signal.shape[0] == 1:
        signal = signal.T
    T, n = signal.shape
    if depth < 1 or T < depth:
        raise ValueError(f"need 1 <= depth <= T, got depth={depth}, T={T}")
    cols = T - depth + 1
    H = np.empty((depth * n, cols))
    for i in range(depth):
        H[i * n : (i + 1) * n, :] = signal[i : i + cols, :].T
    return H


def is_persistently_exciting(u_w: np.ndarray, order: int, tol: float = RANK_RTOL) -> bool:
    """Full-row-rank test of the depth-``order`` block Hankel of the stacked
    input-disturbance signal, judged by singular values above ``tol * s_max``."""
    if order < 1:
        raise ValueError("order must be >= 1")
    u_w = np.atleast_2d(np.asarray(u_w, dtype=float))
    if u_w.shape[0] < order:
        return False
    H = hankel(u_w, order)
    if H.shape[0] > H.shape[1]:
        return False
    s = np.linalg.svd(H, compute_uv=False)
    return bool(s[-1] > tol * s[0])


def _pinv(M: np.ndarray) -> np.ndarray:
    return np.linalg.pinv(M, rcond=RANK_RTOL)


def _data_matrices(x_traj: np.ndarray, u_traj: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(D, Xplus): stacked [x; u] samples over 0..T-1 and the shifted states."""
    x_traj = np.atleast_2d(np.asarray(x_traj, dtype=float))
    u_traj = np.atleast_2d(np.asarray(u_traj, dtype=float))
    T = u_traj.shape[0]
    D = np.vstack([x_traj[:T].T, u_traj.T])
    return D, x_traj[1 : T + 1].T


def _require_full_row_rank(D: np.ndarray, what: str) -> None:
    s = np.linalg.svd(D, compute_uv=False)
    if s.size < D.shape[0] or s[D.shape[0] - 1] <= RANK_RTOL * s[0]:
        raise ExcitationError(f"{what}: stacked [x; u] data matrix is rank deficient")


@dataclass(frozen=True)
class TransitionData:
    """Pooled single-step transitions (columns are samples): the depth-1 data
    matrices used in terminal-ingredient synthesis.  Pooling across restarted
    batches is what keeps open-loop data from an unstable plant bounded."""

    X: np.ndarray   # n_x x M
    U: np.ndarray   # n_u x M
    Xp: np.ndarray  # n_x x M
    W: np.ndarray   # n_x x M

    @staticmethod
    def from_records(records: "DataRecord | list[DataRecord]") -> "TransitionData":
        if isinstance(records, DataRecord):
            records = [records]
        X = np.hstack([r.x_traj[:-1].T for r in records])
        U = np.hstack([r.u_traj.T for r in records])
        Xp = np.hstack([r.x_traj[1:].T for r in records])
        W = np.hstack([r.w_traj.T for r in records])
        return TransitionData(X, U, Xp, W)

    @property
    def M(self) -> np.ndarray:
        """The shifted-state-minus-disturbance block ``Xp - W``."""
        return self.Xp - self.W

    @property
    def n_samples(self) -> int:
        return self.X.shape[1]


def estimate_disturbances(x_traj: np.ndarray, u_traj: np.ndarray) -> np.ndarray:
    """Least-squares disturbance estimate ``W = Xplus (I - pinv(D) D)``.

    The estimate satisfies ``(Xplus - W)(I - pinv(D) D) = 0`` exactly, which
    is what makes the Hankel representation built on it internally consistent.
    For Gaussian disturbances this coincides with the maximum-likelihood
    estimate; the general density-constrained program is not implemented.
    """
    D, Xp = _data_matrices(x_traj, u_traj)
    _require_full_row_rank(D, "disturbance estimation")
    proj = np.eye(D.shape[1]) - _pinv(D) @ D
    return (Xp @ proj).T


def estimate_disturbance_online(
    record: DataRecord,
    x_prev: np.ndarray,
    u_prev: np.ndarray,
    x_curr: np.ndarray,
    model: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """Estimate the latest disturbance realization as the residual of the new
    transition under the offline data's implicit model.

    This is the fresh-column entry of the batch least-squares estimate with
    the transition appended, except that the appended column is not allowed
    to re-weight the model fit: online queries far outside the recorded
    state range would otherwise carry enough leverage to bias the estimate
    by multiples of the disturbance scale.  Using the fixed implicit model
    also makes the estimate exactly consistent with the Hankel stack built
    from the same record.
    """
    A_hat, B_hat = identify_model(record.x_traj, record.u_traj) if model is None else model
    x_prev = np.asarray(x_prev, dtype=float).reshape(-1)
    u_prev = np.asarray(u_prev, dtype=float).reshape(-1)
    return np.asarray(x_curr, dtype=float).reshape(-1) - A_hat @ x_prev - B_hat @ u_prev


def identify_model(x_traj: np.ndarray, u_traj: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Implicit model from the data: ``[A_hat B_hat] = Xplus pinv([x; u])``."""
    D, Xp = _data_matrices(x_traj, u_traj)
    _require_full_row_rank(D, "model identification")
    AB = Xp @ _pinv(D)
    n_x = Xp.shape[0]
    return AB[:, :n_x], AB[:, n_x:]


@dataclass(frozen=True)
class HankelStack:
    """Aligned Hankel blocks: states at depth N+1, inputs and disturbances at
    depth N, sharing ``T - N + 1`` columns."""

    Hx: np.ndarray
    Hu: np.ndarray
    Hw: np.ndarray
    N: int
    n_x: int
    n_u: int

    def __post_init__(self):
        if not (self.Hx.shape[1] == self.Hu.shape[1] == self.Hw.shape[1]):
            raise ValueError("Hankel blocks must share the column count")
        if self.Hx.shape[0] != (self.N + 1) * self.n_x:
            raise ValueError("state block must have (N+1) n_x rows")
        if self.Hu.shape[0] != self.N * self.n_u or self.Hw.shape[0] != self.N * self.n_x:
            raise ValueError("input/disturbance blocks must have N block rows")

    @property
    def n_cols(self) -> int:
        return self.Hx.shape[1]

    def full(self) -> np.ndarray:
        return np.vstack([self.Hx, self.Hu, self.Hw])

    def membership_residual(self, x_traj: np.ndarray, u_traj: np.ndarray, w_traj: np.ndarray) -> float:
        """Least-squares residual of one length-N window against the stack,
        relative to the stacked signal norm."""
        rhs = np.concatenate(
            [
                np.asarray(x_traj, dtype=float).reshape(-1),
                np.asarray(u_traj, dtype=float).reshape(-1),
                np.asarray(w_traj, dtype=float).reshape(-1),
            ]
        )
        H = self.full()
        g, *_ = np.linalg.lstsq(H, rhs, rcond=None)
        return float(np.linalg.norm(H @ g - rhs) / max(np.linalg.norm(rhs), 1e-12))


def build_stack(record: DataRecord, N: int) -> HankelStack:
    """Assemble the depth-(N+1)/N Hankel stack after checking persistency of
    excitation of order ``n_x + N + 1`` on the (u, w) signal."""
    if not is_persistently_exciting(record.uw_stacked(), record.n_x + N + 1):
        raise ExcitationError(
            f"(u, w) data not persistently exciting of order {record.n_x + N + 1}"
        )
    return HankelStack(
        Hx=hankel(record.x_traj, N + 1),
        Hu=hankel(record.u_traj, N),
        Hw=hankel(record.w_traj, N),
        N=N,
        n_x=record.n_x,
        n_u=record.n_u,
    )
