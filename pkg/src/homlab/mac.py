"""Staggered (MAC) discretization on periodic tensor-product grids.

Velocity component ``c`` lives on the lower ``c``-face of each cell, pressure
at cell centres. Every axis is periodic; bounded boxes are emulated by
prescribing velocity values on an outer shell of cells. All operators are
assembled in integrated (finite-volume) form so that the viscous forms are
symmetric and summation-by-parts identities hold exactly on non-uniform
spacings.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

AXES = (0, 1, 2)


def _shift(n: int, k: int) -> sp.csr_matrix:
    """Periodic shift: ``(S p)_i = p_{i+k}``."""
    rows = np.arange(n)
    cols = (rows + k) % n
    return sp.csr_matrix((np.ones(n), (rows, cols)), shape=(n, n))


def _kron_axis(op: sp.spmatrix, axis: int, shape: tuple[int, int, int]) -> sp.csr_matrix:
    mats = [sp.identity(n, format="csr") for n in shape]
    mats[axis] = op
    return sp.kron(sp.kron(mats[0], mats[1]), mats[2], format="csr")


def _broadcast(vec: np.ndarray, axis: int) -> np.ndarray:
    shape = [1, 1, 1]
    shape[axis] = vec.size
    return vec.reshape(shape)


@dataclass(frozen=True, eq=False)
class TensorGrid:
    """Periodic tensor-product grid given by its cell widths along each axis."""

    widths: tuple[np.ndarray, np.ndarray, np.ndarray]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @classmethod
    def uniform(cls, shape, h: float, origin=(0.0, 0.0, 0.0)) -> "TensorGrid":
        return cls(tuple(np.full(int(n), float(h)) for n in shape), tuple(float(o) for o in origin))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(w.size for w in self.widths)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def lengths(self) -> np.ndarray:
        return np.array([w.sum() for w in self.widths])

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    @property
    def is_uniform(self) -> bool:
        h = self.widths[0][0]
        return all(np.allclose(w, h, rtol=1e-12, atol=0) for w in self.widths)

    @property
    def h(self) -> float:
        if not self.is_uniform:
            raise ValueError("grid is not uniform")
        return float(self.widths[0][0])

    def nodes(self, axis: int) -> np.ndarray:
        """Coordinates of the lower faces (length n)."""
        w = self.widths[axis]
        return self.origin[axis] + np.concatenate(([0.0], np.cumsum(w)[:-1]))

    def centers(self, axis: int) -> np.ndarray:
        return self.nodes(axis) + 0.5 * self.widths[axis]

    def spacing_at_faces(self, axis: int) -> np.ndarray:
        """Centre-to-centre distance across lower face ``i`` (periodic wrap)."""
        w = self.widths[axis]
        return 0.5 * (w + np.roll(w, 1))

    @cached_property
    def cell_volumes(self) -> np.ndarray:
        w = self.widths
        return _broadcast(w[0], 0) * _broadcast(w[1], 1) * _broadcast(w[2], 2)

    def face_volumes(self, c: int) -> np.ndarray:
        """Control volume attached to each ``c``-face."""
        parts = []
        for a in AXES:
            parts.append(_broadcast(self.spacing_at_faces(a) if a == c else self.widths[a], a))
        return parts[0] * parts[1] * parts[2]

    def face_area(self, c: int) -> np.ndarray:
        parts = [_broadcast(self.widths[a], a) for a in AXES if a != c]
        return parts[0] * parts[1]

    def cell_coords(self) -> list[np.ndarray]:
        return np.meshgrid(*(self.centers(a) for a in AXES), indexing="ij")

    def face_coords(self, c: int) -> list[np.ndarray]:
        return np.meshgrid(*((self.nodes(a) if a == c else self.centers(a)) for a in AXES), indexing="ij")

    # --- sparse building blocks -------------------------------------------------
    def diff_face_to_cell(self, axis: int) -> sp.csr_matrix:
        """Undivided difference u_{i+1} - u_i from ``axis``-faces to cells."""
        n = self.shape[axis]
        return _kron_axis(_shift(n, 1) - sp.identity(n, format="csr"), axis, self.shape)

    def diff_cell_to_face(self, axis: int) -> sp.csr_matrix:
        """Undivided difference p_i - p_{i-1} from cells to lower ``axis``-faces."""
        n = self.shape[axis]
        return _kron_axis(sp.identity(n, format="csr") - _shift(n, -1), axis, self.shape)

    @cached_property
    def gradient_blocks(self) -> dict:
        """Divided differences ``G[c, d]`` (d-derivative of component c) and quadrature weights.

        ``G[c, c]`` maps c-faces to cells; ``G[c, d]`` maps c-faces to (c, d)-edges.
        """
        out = {}
        for c in AXES:
            for d in AXES:
                if c == d:
                    inv = 1.0 / _broadcast(self.widths[c], c)
                    op = self.diff_face_to_cell(c)
                    weight = self.cell_volumes
                else:
                    inv = 1.0 / _broadcast(self.spacing_at_faces(d), d)
                    op = self.diff_cell_to_face(d)
                    e = 3 - c - d
                    weight = (_broadcast(self.spacing_at_faces(c), c) * _broadcast(self.spacing_at_faces(d), d)
                              * _broadcast(self.widths[e], e))
                inv = np.broadcast_to(inv, self.shape).ravel()
                out[c, d] = (sp.diags(inv) @ op).tocsr(), np.broadcast_to(weight, self.shape).ravel().copy()
        return out

    @cached_property
    def divergence_integrated(self) -> sp.csr_matrix:
        """Cell-integrated divergence, mapping stacked faces (3N) to cells (N)."""
        blocks = []
        for c in AXES:
            area = np.broadcast_to(self.face_area(c), self.shape).ravel()
            blocks.append(sp.diags(area) @ self.diff_face_to_cell(c))
        return sp.hstack(blocks, format="csr")

    def laplacian_form(self, nu) -> sp.csr_matrix:
        """Matrix of ``sum_cd  W nu (G_cd u_c)(G_cd v_c)``; ``nu`` scalar."""
        blocks = []
        for c in AXES:
            acc = None
            for d in AXES:
                g, w = self.gradient_blocks[c, d]
                term = g.T @ sp.diags(nu * w) @ g
                acc = term if acc is None else acc + term
            blocks.append(acc)
        return sp.block_diag(blocks, format="csr")

    def strain_form(self, eta_cell: np.ndarray, eta_edge: dict) -> sp.csr_matrix:
        """Matrix of ``sum W eta D(u):D(v)`` with D the symmetric discrete gradient.

        ``eta_cell`` has the grid shape; ``eta_edge[(c, d)]`` (c < d) lives on the (c, d)-edges.
        """
        n = self.size
        ec = np.broadcast_to(eta_cell, self.shape).ravel()
        rows = [[None] * 3 for _ in AXES]
        for c in AXES:
            g, w = self.gradient_blocks[c, c]
            rows[c][c] = g.T @ sp.diags(w * ec) @ g
        for c in AXES:
            for d in AXES:
                if d <= c:
                    continue
                gcd, w = self.gradient_blocks[c, d]
                gdc, _ = self.gradient_blocks[d, c]
                we = 0.5 * w * np.broadcast_to(eta_edge[c, d], self.shape).ravel()
                dw = sp.diags(we)
                rows[c][c] = rows[c][c] + gcd.T @ dw @ gcd
                rows[d][d] = rows[d][d] + gdc.T @ dw @ gdc
                rows[c][d] = gcd.T @ dw @ gdc
                rows[d][c] = gdc.T @ dw @ gcd
        for c in AXES:
            for d in AXES:
                if rows[c][d] is None:
                    rows[c][d] = sp.csr_matrix((n, n))
        return sp.bmat(rows, format="csr")

    # --- array-level helpers ------------------------------------------------------
    def stack(self, comps) -> np.ndarray:
        return np.concatenate([np.asarray(u, dtype=float).ravel() for u in comps])

    def unstack(self, vec: np.ndarray) -> list[np.ndarray]:
        n = self.size
        return [vec[c * n:(c + 1) * n].reshape(self.shape) for c in AXES]

    def face_weights(self) -> np.ndarray:
        return self.stack([np.broadcast_to(self.face_volumes(c), self.shape) for c in AXES])

    def gradient(self, u_stacked: np.ndarray) -> dict:
        """All nine divided differences of a stacked face field, each as a grid array."""
        comps = [u.ravel() for u in self.unstack(u_stacked)]
        return {(c, d): (self.gradient_blocks[c, d][0] @ comps[c]).reshape(self.shape)
                for c in AXES for d in AXES}

    def divergence(self, u_stacked: np.ndarray) -> np.ndarray:
        vol = self.cell_volumes
        return (self.divergence_integrated @ u_stacked).reshape(self.shape) / vol


def free_faces(fluid: np.ndarray) -> list[np.ndarray]:
    """Faces whose two adjacent cells are both fluid."""
    return [fluid & np.roll(fluid, 1, axis=c) for c in AXES]


def edge_average(cell_values: np.ndarray, c: int, d: int) -> np.ndarray:
    """Average of the four cells sharing a (c, d)-edge (lower-lower corner)."""
    a = cell_values + np.roll(cell_values, 1, axis=c)
    return 0.25 * (a + np.roll(a, 1, axis=d))


def edge_to_cell(edge_values: np.ndarray, c: int, d: int) -> np.ndarray:
    """Average of the four (c, d)-edges bounding each cell."""
    a = edge_values + np.roll(edge_values, -1, axis=c)
    return 0.25 * (a + np.roll(a, -1, axis=d))
