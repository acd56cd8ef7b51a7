"""Exterior Stokes cell problem, permeability tensor and oscillating correctors.

Lengths in the exterior problem are in units of ``eps**alpha`` (the units in
which the model hole ``T`` is given), so the Dirichlet energies computed here
are directly the entries of ``M0``.

The exterior domain is truncated to a box ``[-L, L]^3`` with ``L = R * radius``.
It is discretized on a tensor grid that is uniform near the hole and grows
geometrically towards the box; the box boundary is a one-cell shell whose
faces carry the far-field value ``e_i``. Because every axis is periodic a
single shell layer borders the box on both sides.
"""

from __future__ import annotations

import copy
import functools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.optimize import brentq

from .geometry import GridSpec, HoleShape, PerforationSpec, SpecError, build_mask
from .mac import AXES, TensorGrid, free_faces
from .stokes import MaskedStokes, SolverError, build_amg

log = logging.getLogger(__name__)


class NumericalQualityError(RuntimeError):
    """A computed quantity fails a structural check (symmetry, definiteness)."""


class TruncationError(ValueError):
    """The exterior solution does not reach far enough for the requested use."""

    def __init__(self, message: str, required_R: float):
        super().__init__(message)
        self.required_R = required_R


# --- exterior problem --------------------------------------------------------------

def _geometric_widths(h0: float, count: int, length: float) -> np.ndarray:
    """``count`` widths growing from ``h0`` by a constant ratio and summing to ``length``."""
    if count <= 0:
        raise ValueError("need at least one stretched cell")
    if length <= h0 * count * (1 + 1e-12):
        return np.full(count, length / count)
    j = np.arange(1, count + 1)
    q = brentq(lambda q: h0 * np.sum(q ** j) - length, 1.0 + 1e-12, 10.0)
    w = h0 * q ** j
    return w * (length / w.sum())


def exterior_grid(radius: float, R: float, n: int, cells_per_radius: float = 8, core: float = 2.0,
                  spacing: float | None = None) -> TensorGrid:
    """Stretched grid for the box of half-width ``R * radius``, origin at a vertex.

    ``n`` is the number of cells per axis; one is used by the shell (index 0),
    the rest splits evenly between both sides of the origin. The core of
    half-width ``core * radius`` has spacing ``spacing`` (default
    ``radius / cells_per_radius``).
    """
    h0 = spacing if spacing is not None else radius / cells_per_radius
    nc = int(math.ceil(core * radius / h0 - 1e-9))
    rest = n - 1 - 2 * nc
    if rest % 2:
        rest -= 1
    ng = rest // 2
    L = R * radius
    if ng <= 0:
        raise ValueError(f"n={n} leaves no room for stretched cells (core uses {2 * nc})")
    if nc * h0 >= L:
        raise ValueError("core region exceeds the truncation box")
    grow = _geometric_widths(h0, ng, L - nc * h0)
    half = np.concatenate((np.full(nc, h0), grow))
    w = np.concatenate(([grow[-1]], half[::-1], half))
    origin = -L - grow[-1]
    return TensorGrid((w, w.copy(), w.copy()), (origin, origin, origin))


def _hole_cells(hole: HoleShape, grid: TensorGrid) -> np.ndarray:
    x = grid.cell_coords()
    return hole.contains(*x)


@dataclass(eq=False)
class ExteriorSolution:
    """Velocities ``v[i]`` (stacked MAC faces) and pressures ``q[i]`` for i = 0, 1, 2."""

    grid: TensorGrid
    hole: HoleShape
    solid: np.ndarray
    v: list
    q: list
    R: float
    spacing: float
    energies: np.ndarray
    divergence: float = 0.0
    iterations: list = field(default_factory=list)

    @property
    def half_width(self) -> float:
        return float(self.grid.lengths[0] / 2 - self.grid.widths[0][0] / 2)

    def faces(self, i: int) -> list:
        return self.grid.unstack(self.v[i])

    def interpolator(self, i: int, c: int):
        """Trilinear interpolant of component ``c`` of ``v^i`` (hole units)."""
        g = self.grid
        coords = [g.nodes(a) if a == c else g.centers(a) for a in AXES]
        vals = self.faces(i)[c]
        # faces at index 0 along c sit on the shell; wrap to the far side for monotone coords
        return RegularGridInterpolator(coords, vals, method="linear", bounds_error=True)

    def far_field_defect(self, radius_fraction: float = 1.0) -> float:
        """max |v^i - e_i| over faces whose centres lie in the box shell of half-width ``radius_fraction * L``."""
        L = self.R * self.hole.radius * radius_fraction
        g = self.grid
        worst = 0.0
        for i in AXES:
            comps = self.faces(i)
            for c in AXES:
                x = g.face_coords(c)
                r = np.max(np.abs(np.stack(x)), axis=0)
                sel = (r <= L) & (r >= L - g.widths[0].max() * 1.5)
                if np.any(sel):
                    worst = max(worst, float(np.abs(comps[c][sel] - (1.0 if c == i else 0.0)).max()))
        return worst


def solve_exterior_stokes(hole: HoleShape, R: float = 16.0, n: int = 96, cells_per_radius: float = 8,
                          core: float = 2.0, tol: float = 1e-9, method: str = "minres",
                          grid: TensorGrid | None = None, spacing: float | None = None,
                          min_cells_across: float = 8) -> ExteriorSolution:
    """Three Stokes solves around ``hole`` with ``v = e_i`` on the truncation box.

    ``grid`` may be supplied (for example a uniform grid aligned with an
    eps-cell); it must be centred at the origin with its shell at index 0.
    ``min_cells_across`` is lowered only when the solve must reproduce the
    voxel hole of a coarser flow grid.
    """
    if grid is None:
        if R < 8:
            raise ValueError("truncation R must be at least 8 hole radii")
        if hole.is_empty:
            radius = 1.0
        else:
            radius = hole.radius
            if 2 * radius / (spacing or radius / cells_per_radius) < min_cells_across - 1e-9:
                raise ValueError(f"hole must be resolved by at least {min_cells_across:g} cells across")
        grid = exterior_grid(radius, R, n, cells_per_radius, core, spacing)
    shell = np.zeros(grid.shape, dtype=bool)
    shell[0, :, :] = shell[:, 0, :] = shell[:, :, 0] = True
    solid = _hole_cells(hole, grid) if not hole.is_empty else np.zeros(grid.shape, dtype=bool)
    if np.any(solid & shell):
        raise ValueError("hole touches the truncation box")
    fluid = ~solid & ~shell
    stokes = MaskedStokes(grid, fluid)
    K_full = grid.laplacian_form(1.0)
    K, _ = stokes.restrict(K_full)
    amg = build_amg(K) if K.shape[0] else None
    hole_faces = grid.stack([solid | np.roll(solid, 1, axis=c) for c in AXES]).astype(bool)
    v, q, its = [], [], []
    div_max = 0.0
    for i in AXES:
        bc = grid.stack([np.full(grid.shape, 1.0 if c == i else 0.0) for c in AXES])
        bc[hole_faces] = 0.0
        if hole.is_empty:
            v.append(bc)
            q.append(np.zeros(grid.shape))
            its.append(0)
            continue
        res = stokes.solve(K_full, u_fixed=bc, tol=tol, method=method, amg=amg)
        v.append(res.u)
        q.append(res.p)
        its.append(res.iterations)
        div = grid.divergence(res.u)[fluid]
        div_max = max(div_max, float(np.abs(div).max()))
    E = np.array([[v[i] @ (K_full @ v[j]) for j in AXES] for i in AXES])
    h0 = float(grid.widths[0][grid.shape[0] // 2])
    return ExteriorSolution(grid, hole, solid, v, q, float(R), h0, E, div_max, its)


# --- permeability --------------------------------------------------------------------

@dataclass
class PermeabilityTensor:
    """Extrapolated ``M0`` together with the raw truncated energies."""

    m: np.ndarray
    hole: dict
    R_list: list
    raw_energies: list
    asymmetry: float = 0.0
    degenerate: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.m)

    def scaled(self, factor: float) -> "PermeabilityTensor":
        return PermeabilityTensor(self.m * factor, self.hole, self.R_list,
                                  [np.asarray(e) * factor for e in self.raw_energies],
                                  self.asymmetry, self.degenerate, dict(self.meta, scaled_by=factor))

    def to_dict(self) -> dict:
        return {"m": [float(v) for v in np.asarray(self.m).ravel()], "holes": self.hole,
                "R_list": [float(r) for r in self.R_list],
                "raw_energies": [[float(v) for v in np.asarray(e).ravel()] for e in self.raw_energies],
                "asymmetry": self.asymmetry, "degenerate": self.degenerate, "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "PermeabilityTensor":
        return cls(np.asarray(d["m"], float).reshape(3, 3), d.get("holes", {}), list(d.get("R_list", [])),
                   [np.asarray(e, float).reshape(3, 3) for e in d.get("raw_energies", [])],
                   d.get("asymmetry", 0.0), d.get("degenerate", False), d.get("meta", {}))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def load(cls, path) -> "PermeabilityTensor":
        return cls.from_dict(json.loads(Path(path).read_text()))


def richardson(R_list, values) -> np.ndarray:
    """Extrapolate ``M(R) = M_inf + C / R`` (least squares for more than two R)."""
    R = np.asarray(R_list, float)
    if R.size < 2 or np.any(np.diff(R) <= 0):
        raise ValueError("need at least two increasing truncations")
    X = np.stack([np.ones_like(R), 1.0 / R], axis=1)
    Y = np.stack([np.asarray(v, float).ravel() for v in values])
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
    return coef[0].reshape(np.shape(values[0]))


def permeability(hole: HoleShape, R_list=(16.0, 32.0), n: int = 48, cells_per_radius: float = 4,
                 core: float = 2.0, tol: float = 1e-9, spacing: float | None = None,
                 min_cells_across: float = 8) -> PermeabilityTensor:
    """``(M0)_ij = int grad v^i : grad v^j`` extrapolated in ``1/R``; symmetrized and checked SPD.

    Results for ball holes are memoized per process (sweeps at a fixed
    hole-relative resolution reuse one tensor).
    """
    args = (tuple(float(r) for r in R_list), int(n), float(cells_per_radius), float(core), float(tol),
            None if spacing is None else float(spacing), float(min_cells_across))
    if hole.kind == "ball":
        return copy.deepcopy(_ball_permeability(float(hole.rho), *args))
    return _permeability(hole, *args)


@functools.lru_cache(maxsize=32)
def _ball_permeability(rho, *args) -> PermeabilityTensor:
    return _permeability(HoleShape.ball(rho), *args)


def _permeability(hole, R_list, n, cells_per_radius, core, tol, spacing, min_cells_across) -> PermeabilityTensor:
    R_list = [float(r) for r in R_list]
    if len(R_list) < 2 or any(b <= a for a, b in zip(R_list, R_list[1:])):
        raise ValueError("R_list needs at least two increasing truncations")
    if hole.is_empty:
        zero = np.zeros((3, 3))
        return PermeabilityTensor(zero, hole.to_dict(), R_list, [zero] * len(R_list), 0.0, True)
    raw, info = [], []
    for R in R_list:
        ext = solve_exterior_stokes(hole, R, n, cells_per_radius, core, tol, spacing=spacing,
                                    min_cells_across=min_cells_across)
        raw.append(ext.energies)
        info.append({"R": R, "iterations": ext.iterations, "divergence": ext.divergence})
    m = richardson(R_list, raw)
    asym = float(np.linalg.norm(m - m.T) / max(np.linalg.norm(m), 1e-300))
    m = 0.5 * (m + m.T)
    ev = np.linalg.eigvalsh(m)
    if ev.min() <= 0:
        raise NumericalQualityError(f"extrapolated permeability is not positive definite (eigenvalues {ev})")
    meta = {"n": n, "spacing": spacing if spacing is not None else hole.radius / cells_per_radius,
            "core": core, "solves": info}
    return PermeabilityTensor(m, hole.to_dict(), R_list, raw, asym, False, meta)


def discrete_permeability(spec: PerforationSpec, grid: GridSpec, R_list=(16.0, 32.0), n: int = 48,
                          tol: float = 1e-9) -> PermeabilityTensor:
    """``M0`` at the hole-relative resolution of a flow grid.

    The exterior solve uses the flow grid's spacing (in hole units) near the
    hole, so for vertex-centred holes it sees exactly the same voxel set.
    """
    spacing = grid.h / spec.scale
    return permeability(spec.hole, R_list, n, core=2.0, tol=tol, spacing=spacing, min_cells_across=0)


# --- correctors ----------------------------------------------------------------------

HOLE, INNER, ANNULUS, IDENTITY = 0, 1, 2, 3


@dataclass(eq=False)
class CorrectorField:
    """``W`` (columns ``W e_i`` as stacked face fields) and ``Q`` on one eps-cell.

    Coordinates are centred on the hole; ``labels`` marks cells as hole,
    rescaled exterior (inside B(eps/4)), annulus or identity region.
    """

    grid: TensorGrid
    W: list
    Q: list
    labels: np.ndarray
    epsilon: float
    alpha: float
    iterations: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    divergence: float = 0.0

    @property
    def solid(self) -> np.ndarray:
        return self.labels == HOLE

    def column(self, i: int) -> list:
        return self.grid.unstack(self.W[i])

    def tiled(self, reps=(2, 2, 2)) -> "CorrectorField":
        """Explicit periodic tiling (for checks of the single-cell norms)."""
        g = self.grid
        grid = TensorGrid(tuple(np.tile(w, r) for w, r in zip(g.widths, reps)), g.origin)
        W = [grid.stack([np.tile(c, reps) for c in self.column(i)]) for i in AXES]
        Q = [np.tile(q, reps) for q in self.Q]
        return CorrectorField(grid, W, Q, np.tile(self.labels, reps), self.epsilon, self.alpha,
                              self.iterations, self.residuals, self.divergence)


def _cell_grid(spec: PerforationSpec, grid: GridSpec) -> TensorGrid:
    m = grid.cells_per_eps(spec)
    return TensorGrid.uniform((m, m, m), grid.h, (-spec.epsilon / 2,) * 3)


def aligned_exterior(spec: PerforationSpec, grid: GridSpec, tol: float = 1e-10,
                     method: str = "minres") -> ExteriorSolution:
    """Exterior solve on the eps-cell grid itself (hole units), shell on the cell boundary."""
    m = grid.cells_per_eps(spec)
    hh = grid.h / spec.scale
    g = TensorGrid.uniform((m, m, m), hh, (-(m / 2) * hh,) * 3)
    R = (m / 2 - 1) * hh / max(spec.hole.radius, 1e-300)
    return solve_exterior_stokes(spec.hole, R, grid=g, tol=tol, method=method)


def build_corrector(spec: PerforationSpec, grid: GridSpec, ext: ExteriorSolution | None = None,
                    tol: float = 1e-10, method: str = "minres") -> CorrectorField:
    """Assemble ``W_eps`` and ``Q_eps`` on one eps-cell.

    Outside B(eps/2) W = Id; in B(eps/4) W e_i = v^i((x - c)/eps^alpha) and
    Q_i = eps^-alpha q^i; W = 0 on the hole; in the annulus in between each
    column solves a Stokes problem with the neighbouring values as Dirichlet
    data. Without ``ext`` an exterior solution aligned with the cell grid is
    computed so the inner data are copied exactly; otherwise they are
    interpolated trilinearly.
    """
    eps, scale = spec.epsilon, spec.scale
    g = _cell_grid(spec, grid)
    m = g.shape[0]
    if m % 2:
        raise SpecError(f"corrector cell grid needs an even number of cells per eps-cell, got {m}")
    x = g.cell_coords()
    r = np.sqrt(x[0] ** 2 + x[1] ** 2 + x[2] ** 2)
    solid = spec.hole.contains(*(xi / scale for xi in x)) if not spec.hole.is_empty else np.zeros(g.shape, bool)
    labels = np.full(g.shape, IDENTITY, dtype=np.int8)
    labels[r < eps / 2] = ANNULUS
    labels[r < eps / 4] = INNER
    labels[solid] = HOLE
    if np.any(solid & (r >= eps / 4)):
        raise SpecError("hole reaches beyond B(eps/4); the corrector construction needs a smaller hole")
    aligned = ext is None
    if aligned:
        ext = aligned_exterior(spec, grid, tol=tol, method=method)
    else:
        need = eps ** (1 - spec.alpha) / 4 / max(spec.hole.radius, 1e-300)
        if ext.half_width * scale < eps / 4 + 2 * grid.h:
            raise TruncationError(f"exterior solution reaches {ext.half_width / spec.hole.radius:.3g} hole radii; "
                                  f"the corrector needs R >= {need:.3g}", need)

    fluid = labels == ANNULUS
    free_mask, inner_mask, hole_mask = [], [], []
    for c in AXES:
        a, b = labels, np.roll(labels, 1, axis=c)
        free_mask.append((a == ANNULUS) & (b == ANNULUS))
        hole_mask.append((a == HOLE) | (b == HOLE))
        inner_mask.append(((a == INNER) | (b == INNER)) & ~hole_mask[-1])
    free = g.stack(free_mask).astype(bool)
    stokes = MaskedStokes(g, fluid, free)
    K_full = g.laplacian_form(1.0)
    K, _ = stokes.restrict(K_full)
    amg = build_amg(K)

    W, Q, its, resids = [], [], [], []
    div_max = 0.0
    for i in AXES:
        comps = []
        for c in AXES:
            val = np.full(g.shape, 1.0 if c == i else 0.0)
            sel = inner_mask[c]
            if aligned:
                val[sel] = ext.faces(i)[c][sel]
            else:
                fx = g.face_coords(c)
                pts = np.stack([fx[a][sel] / scale for a in AXES], axis=-1)
                val[sel] = ext.interpolator(i, c)(pts)
            val[hole_mask[c]] = 0.0
            comps.append(val)
        data = g.stack(comps)
        res = stokes.solve(K_full, u_fixed=data, tol=tol, method=method, amg=amg)
        W.append(res.u)
        its.append(res.iterations)
        resids.append(res.residual)
        q = np.zeros(g.shape)
        inner = labels == INNER
        if aligned:
            q[inner] = ext.q[i][inner] / scale
        else:
            pts = np.stack([x[a][inner] / scale for a in AXES], axis=-1)
            qc = [ext.grid.centers(a) for a in AXES]
            q[inner] = RegularGridInterpolator(qc, ext.q[i], method="linear")(pts) / scale
        # match the annulus gauge to the rescaled exterior pressure along their interface
        touch = np.zeros(g.shape, bool)
        for c in AXES:
            touch |= np.roll(inner, 1, axis=c) | np.roll(inner, -1, axis=c)
        ring = fluid & touch
        shift = q[inner & _dilate(fluid)].mean() - res.p[ring].mean() if np.any(ring) else 0.0
        q[fluid] = res.p[fluid] + shift
        live = labels != HOLE
        q[live] -= q[live].mean()
        Q.append(q)
        div = g.divergence(res.u)[fluid]
        div_max = max(div_max, float(np.abs(div).max(initial=0.0)))
    return CorrectorField(g, W, Q, labels, eps, spec.alpha, its, resids, div_max)


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    for c in AXES:
        out |= np.roll(mask, 1, axis=c) | np.roll(mask, -1, axis=c)
    return out


def _face_to_cell(comps) -> np.ndarray:
    return np.stack([0.5 * (u + np.roll(u, -1, axis=c)) for c, u in enumerate(comps)])


@dataclass
class CorrectorNorms:
    q: float
    w_minus_id: float
    grad_w: float
    q_norm: float
    epsilon: float
    alpha: float
    note: str = ""


def _lq(values: np.ndarray, weights: np.ndarray, q: float, factor: float) -> float:
    if math.isinf(q):
        return float(np.abs(values).max(initial=0.0))
    return float((factor * np.sum(weights * np.abs(values) ** q)) ** (1.0 / q))


def corrector_norms(cf: CorrectorField, q: float = 2.0) -> CorrectorNorms:
    """Torus norms of ``W - Id``, ``grad W`` and ``Q`` from one cell by periodicity.

    Columns are measured separately and the largest is reported; the pointwise
    norm of a column is Euclidean. For q = 2 the face quadrature of the MAC
    grid is used exactly; other q use cell-centred averages for ``W - Id`` and
    entrywise differences for ``grad W``.
    """
    if not q >= 1:
        raise ValueError("q must lie in [1, inf]")
    g = cf.grid
    factor = 1.0 / g.volume            # cell integral -> torus integral (volume 1)
    vol = np.broadcast_to(g.cell_volumes, g.shape)
    wid, grad = 0.0, 0.0
    for i in AXES:
        comps = cf.column(i)
        dev = [comps[c] - (1.0 if c == i else 0.0) for c in AXES]
        if q == 2:
            s = sum(np.sum(g.face_volumes(c) * dev[c] ** 2) for c in AXES)
            wid = max(wid, math.sqrt(factor * s))
        elif math.isinf(q):
            face_max = max(float(np.abs(d).max()) for d in dev)
            cell = np.sqrt((_face_to_cell(dev) ** 2).sum(axis=0))
            wid = max(wid, face_max, float(cell.max()))
        else:
            cell = np.sqrt((_face_to_cell(dev) ** 2).sum(axis=0))
            wid = max(wid, _lq(cell, vol, q, factor))
        G = g.gradient(cf.W[i])
        if math.isinf(q):
            grad = max(grad, max(float(np.abs(v).max()) for v in G.values()))
        else:
            s = 0.0
            for (c, d), v in G.items():
                w = g.gradient_blocks[c, d][1].reshape(g.shape)
                s += np.sum(w * np.abs(v) ** q)
            grad = max(grad, float((factor * s) ** (1.0 / q)))
    qn = max(_lq(Qi, vol, q, factor) for Qi in cf.Q)
    note = "q=3: the bound carries an extra |log eps|^(1/3) factor" if q == 3 else ""
    return CorrectorNorms(float(q), wid, grad, qn, cf.epsilon, cf.alpha, note)


def pairing_matrix(cf: CorrectorField) -> np.ndarray:
    """``P_ji = eps^(3-alpha) <-Delta W e_i + grad Q_i, W e_j>`` on the torus, for constant test fields.

    The discrete functional ``-Delta W e_i + grad Q_i`` is the full-grid
    momentum residual of column i. As eps -> 0, ``P`` approaches ``M0``.
    """
    g = cf.grid
    K = g.laplacian_form(1.0)
    Bt = g.divergence_integrated.T
    P = np.zeros((3, 3))
    cells = 1.0 / g.volume
    for i in AXES:
        r = K @ cf.W[i] - Bt @ cf.Q[i].ravel()
        for j in AXES:
            P[j, i] = cf.epsilon ** (3 - cf.alpha) * cells * (r @ cf.W[j])
    return P


def save_corrector(cf: CorrectorField, stem) -> list:
    """``stem.json`` header, ``stem.mask.bin`` (hole cells), ``stem.W.bin`` (9 face arrays), ``stem.Q.bin``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    paths = [stem.with_suffix(s) for s in (".json", ".mask.bin", ".W.bin", ".Q.bin")]
    head = {"n": int(cf.grid.shape[0]), "epsilon": cf.epsilon, "alpha": cf.alpha,
            "h": float(cf.grid.widths[0][0]), "dtype": "float64", "layout": "W[i][c] faces, C order"}
    paths[0].write_text(json.dumps(head, indent=2))
    paths[1].write_bytes(cf.solid.astype(np.uint8).tobytes())
    paths[2].write_bytes(np.concatenate([w for w in cf.W]).astype("<f8").tobytes())
    paths[3].write_bytes(np.stack(cf.Q).astype("<f8").tobytes())
    return paths
