"""First Robin-Dirichlet and Steklov-Dirichlet eigenvalues by inverse iteration."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .fem import DiscreteField, SparseSystem, SolverError
from .mesh import Tag

RQ_STAGNATION = 1e-10
RESIDUAL_TOL = 1e-8
MAX_ITER = 500


class EigenConvergenceWarning(RuntimeWarning):
    pass


@dataclass
class EigenResult:
    value: float
    eigenfield: DiscreteField
    iterations: int
    residual: float
    converged: bool


def _inverse_iteration(solve, A, B, x0, max_iter=MAX_ITER):
    """Smallest eigenpair of ``A w = λ B w`` with ``solve(y) ≈ (A - σB)^{-1} y``."""
    w = x0 / math.sqrt(x0 @ (B @ x0))
    lam = w @ (A @ w)
    res = math.inf
    for it in range(1, max_iter + 1):
        z = solve(B @ w)
        w = z / math.sqrt(z @ (B @ z))
        new = float(w @ (A @ w))
        res = float(np.linalg.norm(A @ w - new * (B @ w)) / np.linalg.norm(w))
        done = abs(new - lam) <= RQ_STAGNATION * max(1.0, abs(new)) and res <= RESIDUAL_TOL
        lam = new
        if done:
            return lam, w, it, res, True
    return lam, w, max_iter, res, False


def _start_vector(n: int) -> np.ndarray:
    # Deterministic, positive, non-degenerate start.
    return 1.0 + 0.01 * np.cos(np.arange(n))


def _fix_sign(w: np.ndarray, B) -> np.ndarray:
    return -w if w @ (B @ np.ones_like(w)) < 0 else w


def lambda1(sys: SparseSystem) -> EigenResult:
    """Smallest λ of ``(K - M_T) w = λ M w`` on the free dofs."""
    m = sys.mesh
    if len(sys.free) == m.n_vertices:
        raise SolverError("lambda1 needs a nonempty sigma")
    A = sys.restrict(sys.A)
    B = sys.restrict(sys.M)
    sigma = 1e-8 * B.diagonal().sum() / B.shape[0]
    lu = spla.splu((A - sigma * B).tocsc())
    lam, w, it, res, ok = _inverse_iteration(lu.solve, A, B, _start_vector(A.shape[0]))
    if not ok:
        warnings.warn(f"lambda1 not converged after {it} iterations (residual {res:.2e})",
                      EigenConvergenceWarning)
    w = _fix_sign(w, B)
    full = np.zeros(m.n_vertices)
    full[sys.free] = w
    return EigenResult(lam, DiscreteField.from_values(m, full, sys), it, res, ok)


@dataclass
class SteklovOperator:
    """Discrete Dirichlet-to-Neumann map on the open T dofs, ``S = K_tt - K_ti K_ii⁻¹ K_it``."""

    t_dofs: np.ndarray
    i_dofs: np.ndarray
    K_tt: object
    K_ti: object
    K_it: object
    K_ii_lu: object
    M_tt: object

    def apply(self, w: np.ndarray) -> np.ndarray:
        return self.K_tt @ w - self.K_ti @ self.K_ii_lu.solve(self.K_it @ w)

    def harmonic_extension(self, w: np.ndarray) -> np.ndarray:
        return -self.K_ii_lu.solve(self.K_it @ w)

    def as_linear_operator(self) -> spla.LinearOperator:
        n = len(self.t_dofs)
        return spla.LinearOperator((n, n), matvec=self.apply, dtype=float)


def steklov_operator(sys: SparseSystem) -> SteklovOperator:
    m = sys.mesh
    tags = m.vertex_tags
    t_dofs = np.flatnonzero(tags == Tag.T_ARC)
    i_dofs = np.flatnonzero(tags == Tag.INTERIOR)
    if len(t_dofs) == 0 or len(sys.free) == m.n_vertices:
        raise SolverError("mu1 needs nonempty sigma and T")
    K = sys.K.tocsr()
    try:
        K_ii_lu = spla.splu(K[i_dofs][:, i_dofs].tocsc())
    except RuntimeError as exc:
        raise SolverError("interior stiffness block is singular") from exc
    return SteklovOperator(
        t_dofs, i_dofs,
        K[t_dofs][:, t_dofs].tocsr(), K[t_dofs][:, i_dofs].tocsr(), K[i_dofs][:, t_dofs].tocsr(),
        K_ii_lu, sys.M_T.tocsr()[t_dofs][:, t_dofs].tocsr(),
    )


def mu1(sys: SparseSystem) -> EigenResult:
    """Smallest μ of ``S w = μ (M_T)_tt w`` for the discrete Dirichlet-to-Neumann map."""
    m = sys.mesh
    op = steklov_operator(sys)
    t, i = op.t_dofs, op.i_dofs
    # S⁻¹ y is the T-block of K_ff⁻¹ [y; 0] with free dofs ordered (t, i).
    order = np.concatenate([t, i])
    K_ff_lu = spla.splu(sys.K.tocsr()[order][:, order].tocsc())
    nt = len(t)

    def solve(y):
        rhs = np.zeros(len(order))
        rhs[:nt] = y
        return K_ff_lu.solve(rhs)[:nt]

    S = op.as_linear_operator()
    mu, w, it, res, ok = _inverse_iteration(solve, S, op.M_tt, _start_vector(nt))
    if not ok:
        warnings.warn(f"mu1 not converged after {it} iterations (residual {res:.2e})",
                      EigenConvergenceWarning)
    w = _fix_sign(w, op.M_tt)
    full = np.zeros(m.n_vertices)
    full[t] = w
    full[i] = op.harmonic_extension(w)
    return EigenResult(mu, DiscreteField.from_values(m, full, sys), it, res, ok)


def rayleigh_lambda(sys: SparseSystem, v: np.ndarray) -> float:
    """``(∫|∇v|² - ∫_T v²) / ∫v²`` for a full nodal vector vanishing on Σ̄."""
    return sys.energy(v) / float(v @ (sys.M @ v))


def rayleigh_mu(sys: SparseSystem, v: np.ndarray) -> float:
    """``∫|∇v|² / ∫_T v²``."""
    return float(v @ (sys.K @ v)) / float(v @ (sys.M_T @ v))
