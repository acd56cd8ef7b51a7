"""Stationary and evolutionary solvers for the scaled generalized Navier--Stokes system.

On the perforated (windowed) torus we solve

    -eps^(3-alpha) div(eta(eps^(3-alpha)|Du|) Du) + eps^lam div(u (x) u) + grad p = f,
    div u = 0,   u = 0 on the holes,

on a uniform MAC grid. Faces touching a solid cell carry zero velocity, the
pressure lives on fluid cells with zero mean. The viscosity is frozen at the
previous iterate (Picard) and convection is lagged to the right-hand side, so
every inner problem is a symmetric saddle-point system.

Convection uses the divergence form with averaged transport velocities; its
discrete work ``sum u . N(u)`` vanishes for discretely divergence-free ``u``,
so the discrete energy balance mirrors the continuous one.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .constitutive import ViscosityLaw, eta as eval_eta
from .geometry import DomainMask, GridSpec, PerforationSpec, build_mask
from .mac import AXES, TensorGrid, edge_average, edge_to_cell
from .stokes import MaskedStokes, SolverError, build_amg

log = logging.getLogger(__name__)


class DivergenceError(SolverError):
    """Picard iteration stagnates."""


class InstabilityError(SolverError):
    """Iterates blow up (typically inertia too strong for a lagged treatment)."""


@dataclass(eq=False)
class StaggeredField:
    """Face velocities ``u[c]`` and cell pressure ``p`` on the mask's grid."""

    u: list
    p: np.ndarray
    mask: DomainMask

    @property
    def h(self) -> float:
        return self.mask.h

    @property
    def grid(self) -> TensorGrid:
        return self.mask.tensor_grid()

    def stacked(self) -> np.ndarray:
        return np.concatenate([np.asarray(c, float).ravel() for c in self.u])

    @classmethod
    def zeros(cls, mask: DomainMask) -> "StaggeredField":
        return cls([np.zeros(mask.shape) for _ in AXES], np.zeros(mask.shape), mask)

    @classmethod
    def from_stacked(cls, vec: np.ndarray, p: np.ndarray, mask: DomainMask) -> "StaggeredField":
        n = int(np.prod(mask.shape))
        return cls([vec[c * n:(c + 1) * n].reshape(mask.shape).copy() for c in AXES],
                   np.asarray(p, float).reshape(mask.shape).copy(), mask)


@dataclass
class SolveConfig:
    """Solver settings. ``lam`` is the inertia exponent (``lambda``).

    ``forcing`` is a callable ``f(x, y, z) -> (fx, fy, fz)`` evaluated at face
    centres, or a list of three face arrays.
    """

    lam: float
    law: ViscosityLaw
    forcing: Callable | list | None = None
    tol: float = 1e-8
    max_iter: int = 60
    dt: float | None = None
    t_end: float | None = None
    u0: StaggeredField | None = None
    saddle: str = "minres"
    saddle_tol: float | None = None
    amg_refresh: int = 4
    callback: Callable | None = None

    def lambda_prime(self, alpha: float) -> float:
        """``lambda' = lambda - 2(3 - alpha)``."""
        return self.lam - 2.0 * (3.0 - alpha)

    def check(self, alpha: float):
        if not self.lam > alpha:
            raise ValueError(f"lambda={self.lam} must exceed alpha={alpha}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


@dataclass
class SolveDiagnostics:
    residual_history: list = field(default_factory=list)
    energy_lhs: float = 0.0
    energy_rhs: float = 0.0
    energy_residual: float = 0.0
    divergence: float = 0.0
    bound_checks: dict = field(default_factory=dict)
    iterations: int = 0
    saddle_iterations: list = field(default_factory=list)
    converged: bool = False


# --- discrete building blocks ---------------------------------------------------------

def forcing_on_faces(forcing, tg: TensorGrid) -> list:
    if forcing is None:
        return [np.zeros(tg.shape) for _ in AXES]
    if callable(forcing):
        return [np.asarray(forcing(*tg.face_coords(c))[c], float) for c in AXES]
    return [np.asarray(f, float).reshape(tg.shape) for f in forcing]


def convection(u: list, h: float) -> list:
    """``div(u (x) u)`` on the c-faces (per unit volume), periodic uniform grid."""
    out = []
    for c in AXES:
        acc = np.zeros_like(u[c])
        for d in AXES:
            if d == c:
                ub = 0.5 * (u[c] + np.roll(u[c], -1, axis=c))
                F = ub * ub
                acc += (F - np.roll(F, 1, axis=c)) / h
            else:
                F = 0.25 * (u[d] + np.roll(u[d], 1, axis=c)) * (u[c] + np.roll(u[c], 1, axis=d))
                acc += (np.roll(F, -1, axis=d) - F) / h
        out.append(acc)
    return out


def strain_parts(tg: TensorGrid, u_stacked: np.ndarray):
    """Cell diagonals ``D_cc`` and edge off-diagonals ``D_cd`` (c < d) of the discrete strain."""
    G = tg.gradient(u_stacked)
    diag = [G[c, c] for c in AXES]
    off = {(c, d): 0.5 * (G[c, d] + G[d, c]) for c in AXES for d in AXES if c < d}
    return diag, off


def strain_magnitude(tg: TensorGrid, u_stacked: np.ndarray) -> np.ndarray:
    """``|Du|`` at cell centres (edge contributions averaged in squares)."""
    diag, off = strain_parts(tg, u_stacked)
    s = sum(D * D for D in diag)
    for (c, d), D in off.items():
        s = s + 2.0 * edge_to_cell(D * D, c, d)
    return np.sqrt(s)


def viscosity_fields(law: ViscosityLaw, tg: TensorGrid, u_stacked: np.ndarray, beta: float):
    """``eta(beta |Du|)`` at cells and its averages on the edges."""
    if law.is_newtonian:
        e = np.full(tg.shape, law.eta0)
        return e, {(c, d): e for c in AXES for d in AXES if c < d}
    e = eval_eta(law, beta * strain_magnitude(tg, u_stacked))
    return e, {(c, d): edge_average(e, c, d) for c in AXES for d in AXES if c < d}


def dissipation(tg: TensorGrid, u_stacked: np.ndarray, eta_cell, eta_edge) -> float:
    """``int eta |Du|^2`` with the quadrature of the strain form."""
    diag, off = strain_parts(tg, u_stacked)
    vol = np.broadcast_to(tg.cell_volumes, tg.shape)
    total = sum(np.sum(vol * eta_cell * D * D) for D in diag)
    for (c, d), D in off.items():
        w = tg.gradient_blocks[c, d][1].reshape(tg.shape)
        total += 2.0 * np.sum(w * eta_edge[c, d] * D * D)
    return float(total)


def viscous_operator(law: ViscosityLaw, tg: TensorGrid, eta_cell, eta_edge, beta: float):
    """Integrated viscous form ``beta int eta Du:Dv``; Laplacian form for Newtonian laws.

    For discretely divergence-free fields both forms coincide, since
    ``2|Du|^2 = |grad u|^2 + |div u|^2`` holds exactly on the periodic MAC grid.
    """
    if law.is_newtonian:
        return tg.laplacian_form(0.5 * beta * law.eta0)
    return tg.strain_form(beta * eta_cell, {k: beta * v for k, v in eta_edge.items()})


def l2_norm(tg: TensorGrid, u_stacked: np.ndarray, volume: float | None = None) -> float:
    vol = tg.volume if volume is None else volume
    return float(np.sqrt(np.dot(tg.face_weights(), u_stacked ** 2) / vol))


def gradient_norm(tg: TensorGrid, u_stacked: np.ndarray, q: float = 2.0, volume: float | None = None) -> float:
    """Entrywise ``L^q`` norm of the discrete gradient, normalized to a unit-volume torus."""
    vol = tg.volume if volume is None else volume
    s = 0.0
    for (c, d), v in tg.gradient(u_stacked).items():
        w = tg.gradient_blocks[c, d][1].reshape(tg.shape)
        s += np.sum(w * np.abs(v) ** q)
    return float((s / vol) ** (1.0 / q))


def bound_norms(field_: StaggeredField, spec: PerforationSpec, law: ViscosityLaw) -> dict:
    tg = field_.grid
    u = field_.stacked()
    e, a = spec.epsilon, spec.alpha
    out = {"scaled_grad_l2": e ** ((3 - a) / 2) * gradient_norm(tg, u), "l2": l2_norm(tg, u)}
    if law.r > 2:
        out["scaled_grad_lr"] = e ** ((3 - a) * (law.r - 1) / law.r) * gradient_norm(tg, u, law.r)
    return out


# --- stationary solve ------------------------------------------------------------------

class _System:
    """Per-mask assembled pieces shared by the stationary and evolutionary solvers."""

    def __init__(self, mask: DomainMask, spec: PerforationSpec, cfg: SolveConfig):
        self.mask, self.spec, self.cfg = mask, spec, cfg
        self.tg = mask.tensor_grid()
        self.stokes = MaskedStokes(self.tg, mask.fluid)
        self.beta = spec.epsilon ** (3 - spec.alpha)
        self.inertia = spec.epsilon ** cfg.lam
        self.fw = self.tg.face_weights()
        self.f = self.tg.stack(forcing_on_faces(cfg.forcing, self.tg))
        self.load = self.fw * self.f
        self.free = self.stokes.free_idx
        self.nu_cell = 0.5 * self.beta * cfg.law.eta0
        self._newtonian = None
        self._amg = {}

    def operator(self, u, mass=None):
        """Viscous form at ``u`` (plus an optional diagonal mass) and the viscosity fields."""
        law = self.cfg.law
        if law.is_newtonian:
            if self._newtonian is None:
                self._newtonian = self.operator_at(u)
            K, visc = self._newtonian
        else:
            K, visc = self.operator_at(u)
        if mass is not None:
            K = K + sp.diags(mass)
        return K.tocsr(), visc

    def operator_at(self, u):
        e_c, e_e = viscosity_fields(self.cfg.law, self.tg, u, self.beta)
        return viscous_operator(self.cfg.law, self.tg, e_c, e_e, self.beta), (e_c, e_e)

    def convective_load(self, u):
        if self.inertia == 0 or not np.any(u):
            return np.zeros_like(u)
        N = self.tg.stack(convection(self.tg.unstack(u), self.mask.h))
        return self.inertia * self.fw * N

    def preconditioner(self, K_full, key, force=False):
        """AMG for the restricted viscous block; frozen for Newtonian laws, refreshed periodically otherwise."""
        amg, age = self._amg.get(key, (None, 0))
        stale = not self.cfg.law.is_newtonian and age >= self.cfg.amg_refresh
        if amg is None or force or stale:
            K, _ = self.stokes.restrict(K_full)
            amg, age = build_amg(K), 0
        self._amg[key] = (amg, age + 1)
        return amg

    def momentum_residual(self, K_full, u, p, extra_load=None):
        r = K_full @ u + self.convective_load(u) - self.tg.divergence_integrated.T @ p.ravel() - self.load
        if extra_load is not None:
            r = r - extra_load
        return r[self.free]

    def energy(self, u, visc):
        lhs = self.beta * dissipation(self.tg, u, *visc)
        rhs = float(np.dot(self.load, u))
        return lhs, rhs


def _picard(system: _System, u, p, extra_load=None, mass=None, label="stationary"):
    """Fixed-point loop: viscosity and convection frozen at the current iterate."""
    cfg = system.cfg
    key = "mass" if mass is not None else "plain"
    hist, inner = [], []
    load = system.load if extra_load is None else system.load + extra_load
    bnorm = max(float(np.linalg.norm(load[system.free])), 1e-300)
    inner_tol = cfg.saddle_tol if cfg.saddle_tol is not None else max(1e-2 * cfg.tol, 1e-13)
    K_full, _ = system.operator(u, mass)
    res = None
    for k in range(cfg.max_iter + 1):
        if k > 0:
            rel = float(np.linalg.norm(system.momentum_residual(K_full, u, p, extra_load)) / bnorm)
            hist.append(rel)
            log.debug("%s Picard %d: residual %.3e", label, k, rel)
            if not np.isfinite(rel):
                raise InstabilityError("non-finite residual in the Picard loop", hist)
            if rel <= cfg.tol:
                return u, p, hist, inner, True
            if k >= 11 and rel > 0.99 * hist[k - 11]:
                raise DivergenceError("Picard iteration stagnated (less than 1% reduction over 10 steps)", hist)
            if k == cfg.max_iter:
                break
        rhs = system.load - system.convective_load(u)
        if extra_load is not None:
            rhs = rhs + extra_load
        amg = system.preconditioner(K_full, key)
        try:
            res = system.stokes.solve(K_full, rhs, tol=inner_tol, method=cfg.saddle, amg=amg, x0=res,
                                      nu_cell=system.nu_cell)
        except SolverError:
            # a stale preconditioner can stall the inner solver; rebuild once
            amg = system.preconditioner(K_full, key, force=True)
            res = system.stokes.solve(K_full, rhs, tol=inner_tol, method=cfg.saddle, amg=amg,
                                      nu_cell=system.nu_cell)
        inner.append(res.iterations)
        uo, un = float(np.linalg.norm(u)), float(np.linalg.norm(res.u))
        if k > 1 and uo > 0 and un > 2 * uo:
            raise InstabilityError("velocity doubled between Picard steps; increase lambda or reduce the forcing", hist)
        u, p = res.u, res.p
        if cfg.callback is not None:
            cfg.callback(label, k + 1, u, p)
        K_full, _ = system.operator(u, mass)
    raise DivergenceError(f"Picard iteration did not reach tol={cfg.tol} in {cfg.max_iter} steps", hist)


def solve_stationary(spec: PerforationSpec, grid: GridSpec, cfg: SolveConfig, mask: DomainMask | None = None):
    """Solve the stationary system; returns ``(StaggeredField, SolveDiagnostics)``."""
    cfg.check(spec.alpha)
    mask = build_mask(spec, grid) if mask is None else mask
    system = _System(mask, spec, cfg)
    diag = SolveDiagnostics()
    if not np.any(system.load):
        field_ = StaggeredField.zeros(mask)
        diag.converged = True
        diag.residual_history = [0.0]
        diag.bound_checks = bound_norms(field_, spec, cfg.law)
        return field_, diag
    u0 = np.zeros(3 * system.tg.size)
    p0 = np.zeros(mask.shape)
    u, p, hist, inner, ok = _picard(system, u0, p0)
    field_ = StaggeredField.from_stacked(u, p, mask)
    _, visc = system.operator_at(u)
    lhs, rhs = system.energy(u, visc)
    diag.residual_history = hist
    diag.iterations = len(hist)
    diag.saddle_iterations = inner
    diag.converged = ok
    diag.energy_lhs, diag.energy_rhs = lhs, rhs
    diag.energy_residual = abs(lhs - rhs) / max(abs(rhs), 1e-300)
    diag.divergence = float(np.abs(system.tg.divergence(u)[mask.fluid]).max())
    diag.bound_checks = bound_norms(field_, spec, cfg.law)
    return field_, diag


# --- evolutionary solve ----------------------------------------------------------------

@dataclass(eq=False)
class EvolutionState:
    field: StaggeredField
    t: float = 0.0
    step: int = 0
    kinetic0: float = 0.0
    dissipated: float = 0.0
    work: float = 0.0
    ledger: list = field(default_factory=list)
    system: object = field(default=None, repr=False)

    @property
    def kinetic(self) -> float:
        return self.ledger[-1]["kinetic"] if self.ledger else self.kinetic0

    @property
    def ledger_defect(self) -> float:
        """``E(t) + dissipated - E(0) - work``; non-positive up to tolerance."""
        return self.kinetic + self.dissipated - self.kinetic0 - self.work


def initial_state(spec: PerforationSpec, cfg: SolveConfig, u0: StaggeredField) -> EvolutionState:
    system = _System(u0.mask, spec, cfg)
    u = u0.stacked()
    k0 = 0.5 * system.inertia * float(np.dot(system.fw, u * u))
    return EvolutionState(u0, 0.0, 0, k0, system=system)


def step_evolutionary(state: EvolutionState, spec: PerforationSpec, grid: GridSpec, cfg: SolveConfig) -> EvolutionState:
    """One implicit-Euler step of the evolutionary system with a Picard inner loop."""
    if cfg.dt is None or cfg.dt <= 0:
        raise ValueError("evolutionary steps need dt > 0")
    cfg.check(spec.alpha)
    system = state.system if state.system is not None else _System(state.field.mask, spec, cfg)
    u_old = state.field.stacked()
    mass = system.inertia / cfg.dt * system.fw
    extra = mass * u_old
    if not np.any(system.load) and not np.any(u_old):
        u, p = u_old.copy(), np.zeros(state.field.mask.shape)
        hist = [0.0]
    else:
        u, p, hist, _, _ = _picard(system, u_old, state.field.p, extra_load=extra, mass=mass, label="step")
    _, visc = system.operator_at(u)
    diss, work = system.energy(u, visc)
    kin = 0.5 * system.inertia * float(np.dot(system.fw, u * u))
    new = EvolutionState(StaggeredField.from_stacked(u, p, state.field.mask), state.t + cfg.dt, state.step + 1,
                         state.kinetic0, state.dissipated + cfg.dt * diss, state.work + cfg.dt * work,
                         list(state.ledger), system)
    new.ledger.append({"step": new.step, "t": new.t, "kinetic": kin, "dissipated": new.dissipated,
                       "work": new.work, "defect": kin + new.dissipated - new.kinetic0 - new.work,
                       "picard": len(hist), "residual": hist[-1]})
    return new


def leray_project(mask: DomainMask, u_faces: list, tol: float = 1e-11) -> np.ndarray:
    """Weighted L2 projection onto discretely divergence-free fields vanishing on solid faces."""
    tg = mask.tensor_grid()
    stokes = MaskedStokes(tg, mask.fluid)
    u = tg.stack(u_faces)
    u[stokes.fixed_idx] = 0.0
    w = tg.face_weights()[stokes.free_idx]
    B = stokes.B_free
    A = (B @ sp.diags(1.0 / w) @ B.T).tocsr()
    rhs = B @ u[stokes.free_idx]
    rhs -= rhs.mean()
    amg = build_amg(A + sp.identity(A.shape[0]) * 1e-14 * A.diagonal().mean())
    # constants span the kernel of A; keep the preconditioned iterates orthogonal to them
    M = spla.LinearOperator(A.shape, matvec=lambda r: (lambda z: z - z.mean())(amg(r - r.mean())))
    phi, info = spla.cg(A, rhs, rtol=tol, maxiter=2000, M=M)
    if info:
        raise SolverError("projection Poisson solve did not converge")
    out = u.copy()
    out[stokes.free_idx] -= (B.T @ phi) / w
    return out


# --- post-processing -------------------------------------------------------------------

def extend_by_zero(field_: StaggeredField, mask: DomainMask | None = None) -> StaggeredField:
    """Zero extension: velocities vanish on solid faces, pressure on solid cells."""
    mask = field_.mask if mask is None else mask
    u = [np.where(s, 0.0, c) for c, s in zip(field_.u, mask.face_solid)]
    p = np.where(mask.solid, 0.0, field_.p)
    return StaggeredField(u, p, mask)


@dataclass
class EnergyResidual:
    value: float
    lhs: float
    rhs: float
    degenerate: bool = False

    def __float__(self):
        return float(self.value)


def energy_identity_residual(field_: StaggeredField, cfg: SolveConfig, spec: PerforationSpec) -> EnergyResidual:
    """``|eps^(3-alpha) int eta |Du|^2 - int f.u| / int |f.u|``."""
    tg = field_.grid
    u = field_.stacked()
    beta = spec.epsilon ** (3 - spec.alpha)
    e_c, e_e = viscosity_fields(cfg.law, tg, u, beta)
    lhs = beta * dissipation(tg, u, e_c, e_e)
    fu = tg.face_weights() * tg.stack(forcing_on_faces(cfg.forcing, tg)) * u
    rhs = float(fu.sum())
    scale = float(np.abs(fu).sum())
    if scale == 0.0:
        return EnergyResidual(0.0 if lhs == 0 else float("inf"), lhs, rhs, True)
    return EnergyResidual(abs(lhs - rhs) / scale, lhs, rhs)


@dataclass
class BoundReport:
    rows: list
    flags: list

    @property
    def passed(self) -> bool:
        return not self.flags


def uniform_bound_report(entries) -> BoundReport:
    """Scaled norms per eps from ``(spec, field, law)`` triples; flags growth above x2 between sweep points."""
    entries = list(entries)
    if len(entries) < 2:
        raise ValueError("need at least two sweep points")
    rows = []
    for spec, fld, law in entries:
        rows.append({"epsilon": spec.epsilon, **bound_norms(fld, spec, law)})
    flags = []
    keys = [k for k in rows[0] if k != "epsilon"]
    for a, b in zip(rows, rows[1:]):
        for k in keys:
            if k in b and a[k] > 0 and b[k] > 2 * a[k]:
                flags.append(f"{k} grew from {a[k]:.4g} to {b[k]:.4g} between eps={a['epsilon']:g} and {b['epsilon']:g}")
    return BoundReport(rows, flags)


# --- checkpoints -------------------------------------------------------------------------

def write_checkpoint(field_: StaggeredField, stem, header: dict | None = None) -> list:
    """JSON header plus ``stem.u.bin`` (three face arrays, float64 C order) and ``stem.p.bin``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    m = field_.mask
    head = {"n": m.grid.n, "epsilon": m.spec.epsilon, "alpha": m.spec.alpha, "dims": list(m.shape),
            "window": list(m.grid.window_cells(m.spec)), "dtype": "<f8"}
    head.update(header or {})
    paths = [stem.with_suffix(".json"), stem.with_suffix(".u.bin"), stem.with_suffix(".p.bin")]
    paths[0].write_text(json.dumps(head, indent=2, default=float))
    paths[1].write_bytes(field_.stacked().astype("<f8").tobytes())
    paths[2].write_bytes(np.asarray(field_.p, "<f8").tobytes())
    return paths


def read_checkpoint(stem):
    stem = Path(stem)
    head = json.loads(stem.with_suffix(".json").read_text())
    dims = tuple(head["dims"])
    n = int(np.prod(dims))
    u = np.frombuffer(stem.with_suffix(".u.bin").read_bytes(), dtype="<f8")
    p = np.frombuffer(stem.with_suffix(".p.bin").read_bytes(), dtype="<f8").reshape(dims)
    return head, [u[c * n:(c + 1) * n].reshape(dims).copy() for c in AXES], p.copy()
