"""Saddle-point solvers for the masked MAC Stokes system.

The discrete problem is

    K u - B^T p = b,      -B u = -g,

posed on the free faces and fluid cells of a :class:`~homlab.mac.TensorGrid`,
where ``K`` is a symmetric viscous form and ``B`` the cell-integrated
divergence. Two solvers are provided: an augmented-Lagrangian Uzawa scheme
with conjugate-gradient iterations on the Schur complement, and a
block-preconditioned MINRES on the full saddle system (the default; much
cheaper per digit because the viscous block is only applied through one AMG
cycle per iteration).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pyamg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mac import AXES, TensorGrid, free_faces

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Raised when an iterative solve fails to reach its tolerance."""

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = list(history or [])


@dataclass
class SaddleResult:
    u: np.ndarray          # stacked face field, full grid (3N)
    p: np.ndarray          # cell field, zero on non-fluid cells, zero fluid mean
    iterations: int
    residual: float
    history: list = field(default_factory=list)


def _deflate(v: np.ndarray, kernel: list) -> np.ndarray:
    v = v.copy()
    for idx in kernel:
        v[idx] -= v[idx].mean()
    return v


class MaskedStokes:
    """Restriction of the MAC Stokes operators to free faces / fluid cells.

    Parameters
    ----------
    grid : TensorGrid
    fluid : bool array of the grid shape; cells carrying a pressure unknown.
    free : optional stacked bool mask of faces that are unknowns. Defaults to
        faces whose two neighbours are fluid.
    """

    def __init__(self, grid: TensorGrid, fluid: np.ndarray, free: np.ndarray | None = None):
        self.grid = grid
        self.fluid = np.asarray(fluid, dtype=bool)
        if free is None:
            free = grid.stack(free_faces(self.fluid)).astype(bool)
        self.free = np.asarray(free, dtype=bool)
        self.free_idx = np.flatnonzero(self.free)
        self.fixed_idx = np.flatnonzero(~self.free)
        self.cell_idx = np.flatnonzero(self.fluid.ravel())
        B = grid.divergence_integrated[self.cell_idx]
        self.B_free = B[:, self.free_idx].tocsr()
        self.B_fixed = B[:, self.fixed_idx].tocsr()
        self.vol = np.broadcast_to(grid.cell_volumes, grid.shape).ravel()[self.cell_idx]

    @property
    def n_u(self) -> int:
        return self.free_idx.size

    @property
    def n_p(self) -> int:
        return self.cell_idx.size

    def restrict(self, K_full: sp.csr_matrix):
        K = K_full[self.free_idx][:, self.free_idx].tocsr()
        K_fd = K_full[self.free_idx][:, self.fixed_idx].tocsr()
        return K, K_fd

    def solve(self, K_full, rhs_full=None, u_fixed=None, div_target=None, nu_cell=1.0,
              tol=1e-10, maxiter=4000, x0=None, method="minres", amg=None) -> SaddleResult:
        """Solve for the free velocities and the fluid pressures.

        ``rhs_full`` is the integrated momentum load on all faces (only free
        entries are used); ``u_fixed`` the stacked values on all faces (only
        non-free entries are used); ``div_target`` the cell-integrated
        divergence target on all cells. ``x0`` is a previous
        :class:`SaddleResult` used as warm start.
        """
        grid = self.grid
        n3 = 3 * grid.size
        K, K_fd = self.restrict(K_full)
        b_u = np.zeros(self.n_u) if rhs_full is None else np.asarray(rhs_full, float)[self.free_idx].copy()
        b_p = np.zeros(self.n_p)
        ud = None
        if u_fixed is not None:
            ud = np.asarray(u_fixed, float)[self.fixed_idx]
            if np.any(ud):
                b_u -= K_fd @ ud
                b_p += self.B_fixed @ ud
        if div_target is not None:
            b_p -= np.asarray(div_target, float).ravel()[self.cell_idx]
        # compatibility: the divergence data must integrate to zero over each
        # connected fluid component; we only project the global mean
        b_p -= self.vol * (b_p.sum() / self.vol.sum())

        nu_p = np.broadcast_to(np.asarray(nu_cell, float), grid.shape).ravel()[self.cell_idx]
        if amg is None:
            amg = build_amg(K)
        kernel = self._velocity_kernel(K)
        if kernel:
            # hole-free torus: constant velocities are undetermined; work orthogonally to them
            b_u = _deflate(b_u, kernel)
            base = amg
            amg = lambda r: _deflate(base(_deflate(r, kernel)), kernel)
        if method == "minres":
            u, p, its, hist = self._minres(K, b_u, b_p, nu_p, amg, tol, maxiter, x0)
        elif method == "uzawa":
            u, p, its, hist = self._uzawa(K, b_u, b_p, nu_p, amg, tol, maxiter, x0)
        else:
            raise ValueError(f"unknown saddle method {method!r}")

        u_full = np.zeros(n3)
        if ud is not None:
            u_full[self.fixed_idx] = ud
        u_full[self.free_idx] = u
        p_full = np.zeros(grid.size)
        p = p - np.dot(self.vol, p) / self.vol.sum()
        p_full[self.cell_idx] = p
        res = self.residual(K, u, p, b_u, b_p)
        return SaddleResult(u_full, p_full.reshape(grid.shape), its, res, hist)

    def _velocity_kernel(self, K) -> list:
        """Index sets of velocity components whose constants lie in the kernel of ``K``."""
        n = self.grid.size
        comp = self.free_idx // n
        out = []
        scale = max(abs(K).sum(axis=1).max(), 1e-300)
        for c in range(3):
            idx = np.flatnonzero(comp == c)
            if idx.size != n:
                continue
            e = np.zeros(self.n_u)
            e[idx] = 1.0
            if np.abs(K @ e).max() <= 1e-12 * scale:
                out.append(idx)
        return out

    def residual(self, K, u, p, b_u, b_p) -> float:
        r_u = K @ u - self.B_free.T @ p - b_u
        r_p = -(self.B_free @ u) - b_p
        scale = max(np.linalg.norm(b_u) + np.linalg.norm(b_p), 1e-300)
        return float(np.sqrt(np.dot(r_u, r_u) + np.dot(r_p, r_p)) / scale)

    # -----------------------------------------------------------------------
    def _minres(self, K, b_u, b_p, nu_p, amg, tol, maxiter, x0):
        nu_ = self.n_u
        Bf = self.B_free
        BfT = Bf.T.tocsr()
        pscale = nu_p / self.vol

        def mv(x):
            u, p = x[:nu_], x[nu_:]
            return np.concatenate((K @ u - BfT @ p, -(Bf @ u)))

        def prec(r):
            return np.concatenate((amg(r[:nu_]), pscale * r[nu_:]))

        b = np.concatenate((b_u, b_p))
        x = np.zeros_like(b)
        if x0 is not None:
            x = np.concatenate((x0.u[self.free_idx], x0.p.ravel()[self.cell_idx]))
        # reference scale: preconditioned norm of the right-hand side
        zb = prec(b)
        bnorm = np.sqrt(max(np.dot(b, zb), 0.0))
        if bnorm == 0:
            return np.zeros(nu_), np.zeros(b_p.size), 0, [0.0]
        x, its, hist = pminres(mv, prec, b, x, tol * bnorm, maxiter)
        hist = [h / bnorm for h in hist]
        if hist[-1] > tol:
            raise SolverError(f"MINRES did not converge: preconditioned residual {hist[-1]:.3e} "
                              f"after {its} iterations", hist)
        return x[:nu_], x[nu_:], its, hist

    def _uzawa(self, K, b_u, b_p, nu_p, amg, tol, maxiter, x0, gamma=None):
        """Augmented-Lagrangian Uzawa with CG on the (augmented) Schur complement."""
        Bf = self.B_free
        BfT = Bf.T.tocsr()
        winv = 1.0 / self.vol
        if gamma is None:
            gamma = 0.0
        # augmentation with the discrete grad-div form; leaves the solution unchanged
        Kg = (K + gamma * (BfT @ sp.diags(winv) @ Bf)).tocsr()
        amg_g = build_amg(Kg)
        inner_tol = max(tol * 1e-2, 1e-14)

        def solve_K(rhs, guess=None):
            if not np.any(rhs):
                return np.zeros_like(rhs)
            x, info = spla.cg(Kg, rhs, x0=guess, rtol=inner_tol, maxiter=500, M=_as_op(amg_g, Kg.shape[0]))
            return x

        # b_u augmented consistently with -B u = b_p
        bu_g = b_u - gamma * (BfT @ (winv * b_p))
        p = np.zeros(self.n_p) if x0 is None else x0.p.ravel()[self.cell_idx].copy()
        u = solve_K(bu_g + BfT @ p)
        r = -(Bf @ u) - b_p          # constraint residual
        pscale = 1.0 / (1.0 / nu_p + gamma) * winv
        z = pscale * r
        d = z.copy()
        rz = np.dot(r, z)
        rz0 = max(rz, np.dot(b_p, pscale * b_p), 1e-300)
        hist = [np.sqrt(rz / rz0)]
        its = 0
        while hist[-1] > tol:
            its += 1
            if its > maxiter:
                raise SolverError("Uzawa iteration did not converge", hist)
            # S d = B K^-1 B^T d
            w = solve_K(BfT @ d)
            Sd = Bf @ w
            dSd = np.dot(d, Sd)
            if dSd <= 0:
                break
            a = rz / dSd
            p += a * d
            u += a * w
            r = -(Bf @ u) - b_p
            z = pscale * r
            rz_new = np.dot(r, z)
            hist.append(np.sqrt(max(rz_new, 0.0) / rz0))
            d = z + (rz_new / rz) * d
            rz = rz_new
        return u, p, its, hist


def pminres(matvec, prec, b, x, atol, maxiter):
    """Preconditioned MINRES (Paige--Saunders recurrences) for a symmetric operator.

    Stops when the preconditioned residual norm estimate drops below ``atol``.
    Returns the iterate, the iteration count and the residual-norm history.
    """
    r = b - matvec(x)
    z = prec(r)
    gamma = np.sqrt(max(np.dot(r, z), 0.0))
    hist = [gamma]
    if gamma <= atol:
        return x, 0, hist
    v_old = np.zeros_like(b)
    v = r / gamma
    z = z / gamma
    gamma_old, eta = 1.0, gamma
    s_old = s = 0.0
    c_old = c = 1.0
    w_old = np.zeros_like(b)
    w = np.zeros_like(b)
    for k in range(1, maxiter + 1):
        Az = matvec(z)
        delta = np.dot(Az, z)
        v_new = Az - delta * v - gamma * v_old
        z_new = prec(v_new)
        gamma_new = np.sqrt(max(np.dot(v_new, z_new), 0.0))
        alpha0 = c * delta - c_old * s * gamma
        alpha1 = np.hypot(alpha0, gamma_new)
        alpha2 = s * delta + c_old * c * gamma
        alpha3 = s_old * gamma
        c_new, s_new = alpha0 / alpha1, gamma_new / alpha1
        w_new = (z - alpha3 * w_old - alpha2 * w) / alpha1
        x = x + c_new * eta * w_new
        eta = -s_new * eta
        hist.append(abs(eta))
        if abs(eta) <= atol or gamma_new == 0:
            return x, k, hist
        v_old, v = v, v_new / gamma_new
        z = z_new / gamma_new
        gamma_old, gamma = gamma, gamma_new
        w_old, w = w, w_new
        c_old, c = c, c_new
        s_old, s = s, s_new
    return x, maxiter, hist


def _as_op(amg, n):
    return spla.LinearOperator((n, n), matvec=amg, dtype=float)


def build_amg(K: sp.csr_matrix):
    """Symmetric smoothed-aggregation V-cycle for an SPD viscous block."""
    if K.shape[0] == 0:
        return lambda r: r
    # pyamg draws the start vector of its spectral-radius estimate from the global
    # legacy RNG; pin it so repeated runs give bit-identical results
    state = np.random.get_state()
    np.random.seed(0)
    try:
        ml = pyamg.smoothed_aggregation_solver(K, symmetry="hermitian", max_coarse=500,
                                               presmoother=("gauss_seidel", {"sweep": "symmetric"}),
                                               postsmoother=("gauss_seidel", {"sweep": "symmetric"}))
    finally:
        np.random.set_state(state)
    pre = ml.aspreconditioner(cycle="V")
    return pre.matvec
