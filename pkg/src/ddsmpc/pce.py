"""Orthogonal polynomial chaos machinery.

Random variables are expanded in a finite orthogonal basis whose non-constant
functions are tagged by the germ instance they act on (the initial-condition
germ or the disturbance germ of a given time step).  Independence of germs
across tags makes the basis orthogonal, so means and covariances fall out of
the coefficients and the stored norms ``<phi_j, phi_j>``.

Conventions:

* Hermite polynomials are the probabilists' family, orthogonal under the
  standard normal measure with ``<He_d, He_d> = d!``.
* Legendre polynomials live on ``[-1, 1]`` under the uniform probability
  measure, so ``<P_d, P_d> = 1/(2d + 1)``.
* Basis functions are kept symbolically as (family, degree, tag, component);
  inner products never require sampling.

Only Hermite and Legendre families are built in: they give exact two-term
encodings of Gaussian and uniform disturbances.  Any other L2 random variable
also admits a two-term exact expansion by taking ``phi^1 = Z - E[Z]`` as the
(Gram-Schmidt) first orthogonal function; supplying such a family is out of
scope here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np


class PolyFamily(Enum):
    CONSTANT = "constant"
    HERMITE = "hermite"
    LEGENDRE = "legendre"


CONSTANT_TAG = -1


@dataclass(frozen=True)
class BasisFunction:
    """One basis polynomial: ``family`` of ``degree`` in germ ``tag``, coordinate ``component``."""

    family: PolyFamily
    degree: int
    tag: int
    component: int = 0

    def __post_init__(self):
        if self.family is PolyFamily.CONSTANT:
            if self.degree != 0:
                raise ValueError("constant basis function must have degree 0")
        elif self.degree < 1:
            raise ValueError("non-constant basis function needs degree >= 1")

    @property
    def norm(self) -> float:
        """Squared norm ``<phi, phi>`` under the germ's probability measure."""
        if self.family is PolyFamily.CONSTANT:
            return 1.0
        if self.family is PolyFamily.HERMITE:
            return float(math.factorial(self.degree))
        return 1.0 / (2 * self.degree + 1)

    def __call__(self, value: float) -> float:
        if self.family is PolyFamily.CONSTANT:
            return 1.0
        coeffs = [0.0] * self.degree + [1.0]
        if self.family is PolyFamily.HERMITE:
            return float(np.polynomial.hermite_e.hermeval(value, coeffs))
        return float(np.polynomial.legendre.legval(value, coeffs))


@dataclass(frozen=True)
class PceBasis:
    """Ordered finite basis: constant, initial-condition block, then one
    disturbance block per predicted step.

    ``L = L_x + N * (L_w - 1)`` always holds; block ``i`` of the horizon
    occupies columns ``L_x + i*(L_w-1) .. L_x + (i+1)*(L_w-1) - 1``.
    """

    functions: tuple[BasisFunction, ...]
    L_x: int
    L_w: int
    N: int

    def __post_init__(self):
        if self.L_x < 1 or self.L_w < 2 or self.N < 1:
            raise ValueError("need L_x >= 1, L_w >= 2, N >= 1")
        if len(self.functions) != self.L_x + self.N * (self.L_w - 1):
            raise ValueError(
                f"basis has {len(self.functions)} functions, expected "
                f"L_x + N(L_w-1) = {self.L_x + self.N * (self.L_w - 1)}"
            )
        if self.functions[0].family is not PolyFamily.CONSTANT:
            raise ValueError("functions[0] must be the constant")
        if any(f.family is PolyFamily.CONSTANT for f in self.functions[1:]):
            raise ValueError("constant function must be unique")

    @property
    def L(self) -> int:
        return len(self.functions)

    @property
    def norms(self) -> np.ndarray:
        return np.array([f.norm for f in self.functions])

    @property
    def tags(self) -> tuple[int, ...]:
        """Distinct germ tags in column order (constant excluded)."""
        seen: list[int] = []
        for f in self.functions[1:]:
            if f.tag not in seen:
                seen.append(f.tag)
        return tuple(seen)

    def block_columns(self, i: int) -> np.ndarray:
        """Column indices of horizon disturbance block ``i`` (0-based)."""
        if not 0 <= i < self.N:
            raise ValueError(f"block index {i} outside horizon 0..{self.N - 1}")
        lo = self.L_x + i * (self.L_w - 1)
        return np.arange(lo, lo + self.L_w - 1)

    def columns_of_tag(self, tag: int) -> np.ndarray:
        return np.array([j for j, f in enumerate(self.functions) if f.tag == tag and j > 0], dtype=int)


def make_basis(
    L_x: int,
    L_w: int,
    N: int,
    x_tags: Sequence[int] = (),
    w_start_tag: int = 0,
    family: PolyFamily = PolyFamily.HERMITE,
) -> PceBasis:
    """Build the horizon basis: constant, x-block from ``x_tags``, then
    ``N`` disturbance blocks tagged ``w_start_tag .. w_start_tag + N - 1``.

    Each tagged block contributes ``L_w - 1`` degree-one functions, one per
    germ coordinate, so ``L_x`` must equal ``1 + len(x_tags) * (L_w - 1)``.
    """
    if L_x < 1 or L_w < 2 or N < 1:
        raise ValueError("need L_x >= 1, L_w >= 2, N >= 1")
    if L_x != 1 + len(x_tags) * (L_w - 1):
        raise ValueError(
            f"L_x = {L_x} inconsistent with {len(x_tags)} x-block tags of size {L_w - 1}"
        )
    w_tags = [w_start_tag + i for i in range(N)]
    all_tags = list(x_tags) + w_tags
    if len(set(all_tags)) != len(all_tags):
        raise ValueError(f"duplicate germ tags in {all_tags}")

    funcs = [BasisFunction(PolyFamily.CONSTANT, 0, CONSTANT_TAG)]
    for tag in all_tags:
        for comp in range(L_w - 1):
            funcs.append(BasisFunction(family, 1, tag, comp))
    return PceBasis(tuple(funcs), L_x=L_x, L_w=L_w, N=N)


def grow_basis_for_backup(basis: PceBasis, new_tag: int) -> PceBasis:
    """Append a fresh disturbance block and absorb the oldest one into the
    x-block, as required when the backup initial condition is selected.

    The successor has ``L' = L + L_w - 1`` and ``L_x' = L_x + L_w - 1``;
    existing functions keep their positions.
    """
    if new_tag in basis.tags:
        raise ValueError(f"tag {new_tag} already present in basis")
    ref = basis.functions[-1]
    block = tuple(
        BasisFunction(ref.family, 1, new_tag, comp) for comp in range(basis.L_w - 1)
    )
    return PceBasis(
        basis.functions + block,
        L_x=basis.L_x + basis.L_w - 1,
        L_w=basis.L_w,
        N=basis.N,
    )


def causality_zero_indices(k: int, L_x: int, L_w: int, L: int) -> frozenset[int]:
    """Input-coefficient columns pinned to zero at predicted step ``k``:
    ``{j : L_x + k(L_w - 1) <= j <= L - 1}``."""
    if k < 0:
        raise ValueError("step offset must be nonnegative")
    return frozenset(range(L_x + k * (L_w - 1), L))


@dataclass(frozen=True)
class PceVector:
    """Coefficient block of a vector-valued random variable: ``coeffs[:, j]``
    multiplies basis function ``j``."""

    coeffs: np.ndarray

    def __post_init__(self):
        arr = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        object.__setattr__(self, "coeffs", arr)

    @property
    def dim(self) -> int:
        return self.coeffs.shape[0]

    @property
    def n_terms(self) -> int:
        return self.coeffs.shape[1]


def moments(z: PceVector | np.ndarray, basis: PceBasis) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance from PCE coefficients: mean is column 0 and
    ``cov = sum_{j>=1} z_j z_j^T <phi_j, phi_j>``."""
    coeffs = z.coeffs if isinstance(z, PceVector) else np.atleast_2d(np.asarray(z, dtype=float))
    if coeffs.shape[1] != basis.L:
        raise ValueError(f"coefficient columns {coeffs.shape[1]} != basis L {basis.L}")
    mean = coeffs[:, 0].copy()
    weighted = coeffs[:, 1:] * basis.norms[1:]
    cov = weighted @ coeffs[:, 1:].T
    return mean, 0.5 * (cov + cov.T)


def eval_basis_at(basis: PceBasis, germ_values: Mapping[int, np.ndarray | float]) -> np.ndarray:
    """Evaluate every basis polynomial at the supplied germ realizations.

    ``germ_values`` maps each tag to the germ vector (length ``L_w - 1``)
    realized for that instance.
    """
    out = np.empty(basis.L)
    out[0] = 1.0
    for j, f in enumerate(basis.functions[1:], start=1):
        if f.tag not in germ_values:
            raise ValueError(f"no germ value supplied for tag {f.tag}")
        vec = np.atleast_1d(np.asarray(germ_values[f.tag], dtype=float))
        if f.component >= vec.size:
            raise ValueError(
                f"germ for tag {f.tag} has {vec.size} components, need {f.component + 1}"
            )
        out[j] = f(vec[f.component])
    return out


@dataclass(frozen=True)
class DisturbanceModel:
    """Zero-mean i.i.d. disturbance with an exact two-term PCE per coordinate.

    ``pce_coeffs`` is ``dim x L_w`` with a zero mean column; column ``1 + c``
    weights the degree-one polynomial in germ coordinate ``c``.
    """

    family: PolyFamily
    pce_coeffs: np.ndarray
    _params: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        arr = np.atleast_2d(np.asarray(self.pce_coeffs, dtype=float))
        object.__setattr__(self, "pce_coeffs", arr)
        if np.any(arr[:, 0] != 0.0):
            raise ValueError("disturbance mean column must be exactly zero")
        if self.family not in (PolyFamily.HERMITE, PolyFamily.LEGENDRE):
            raise ValueError("disturbance family must be Hermite or Legendre")

    @property
    def dim(self) -> int:
        return self.pce_coeffs.shape[0]

    @property
    def L_w(self) -> int:
        return self.pce_coeffs.shape[1]

    @property
    def n_germ(self) -> int:
        return self.L_w - 1

    @property
    def germ_norm(self) -> float:
        return BasisFunction(self.family, 1, 0).norm

    def covariance(self) -> np.ndarray:
        w1 = self.pce_coeffs[:, 1:]
        return self.germ_norm * (w1 @ w1.T)

    def sample_germs(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw ``n`` i.i.d. germ vectors, shape ``(n, L_w - 1)``."""
        if self.family is PolyFamily.HERMITE:
            return rng.standard_normal((n, self.n_germ))
        return rng.uniform(-1.0, 1.0, size=(n, self.n_germ))

    def germ_to_w(self, germs: np.ndarray) -> np.ndarray:
        """Map germ realizations (n x n_germ) to disturbance realizations (n x dim)."""
        return np.atleast_2d(germs) @ self.pce_coeffs[:, 1:].T

    def fit_germ(self, w: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        """Recover the germ realization that produced ``w`` (least squares).

        Coordinates whose coefficient column is numerically zero carry no
        information and are set to 0.
        """
        w = np.asarray(w, dtype=float).reshape(-1)
        w1 = self.pce_coeffs[:, 1:]
        keep = np.linalg.norm(w1, axis=0) > tol
        germ = np.zeros(self.n_germ)
        if keep.any():
            germ[keep], *_ = np.linalg.lstsq(w1[:, keep], w, rcond=None)
        return germ


def gaussian_disturbance(cov: np.ndarray | float) -> DisturbanceModel:
    """Gaussian ``N(0, cov)`` encoded with degree-one Hermite functions and a
    Cholesky-type factor as coefficient columns (PSD covariances allowed)."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    try:
        factor = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        evals, evecs = np.linalg.eigh(cov)
        if np.any(evals < -1e-12 * max(evals.max(), 1.0)):
            raise ValueError("covariance must be positive semidefinite") from None
        factor = evecs @ np.diag(np.sqrt(np.clip(evals, 0.0, None)))
    coeffs = np.hstack([np.zeros((cov.shape[0], 1)), factor])
    return DisturbanceModel(PolyFamily.HERMITE, coeffs, {"kind": "gaussian", "cov": cov})


def uniform_disturbance(halfwidth: np.ndarray | float) -> DisturbanceModel:
    """Uniform ``U(-a, a)`` per coordinate, degree-one Legendre with coefficient ``a``."""
    a = np.atleast_1d(np.asarray(halfwidth, dtype=float))
    if np.any(a < 0):
        raise ValueError("halfwidth must be nonnegative")
    coeffs = np.hstack([np.zeros((a.size, 1)), np.diag(a)])
    return DisturbanceModel(PolyFamily.LEGENDRE, coeffs, {"kind": "uniform", "halfwidth": a})


def place_disturbance(basis: PceBasis, w_model: DisturbanceModel, step: int) -> np.ndarray:
    """Coefficients of the step-``step`` disturbance in the full basis: its
    two-term PCE dropped into horizon block ``step``, zero elsewhere."""
    if w_model.n_germ != basis.L_w - 1:
        raise ValueError("disturbance germ size does not match basis block size")
    out = np.zeros((w_model.dim, basis.L))
    out[:, basis.block_columns(step)] = w_model.pce_coeffs[:, 1:]
    return out


def galerkin_propagate(
    A: np.ndarray,
    B: np.ndarray,
    x0_coeffs: PceVector | np.ndarray,
    u_coeffs: Iterable[PceVector | np.ndarray],
    w_model: DisturbanceModel | None,
    N: int,
    basis: PceBasis,
) -> list[PceVector]:
    """Propagate PCE coefficients through ``x+ = A x + B u + w`` column by
    column; the step-``k`` disturbance enters through horizon block ``k``.

    This is the model-based reference path: with exact two-term disturbance
    expansions the recursion is exact in the tagged horizon basis.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    x = x0_coeffs.coeffs if isinstance(x0_coeffs, PceVector) else np.atleast_2d(np.asarray(x0_coeffs, dtype=float))
    if x.shape[1] != basis.L:
        raise ValueError("initial coefficients do not match basis size")
    u_list = [u.coeffs if isinstance(u, PceVector) else np.atleast_2d(np.asarray(u, dtype=float)) for u in u_coeffs]
    if len(u_list) < N:
        raise ValueError(f"need {N} input coefficient blocks, got {len(u_list)}")
    states = [PceVector(x.copy())]
    for k in range(N):
        if u_list[k].shape[1] != basis.L:
            raise ValueError("input coefficients do not match basis size")
        w_k = place_disturbance(basis, w_model, k) if w_model is not None else 0.0
        x = A @ x + B @ u_list[k] + w_k
        states.append(PceVector(x))
    return states
