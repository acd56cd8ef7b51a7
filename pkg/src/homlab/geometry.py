"""Periodically perforated torus: hole layout, voxel masks and mask I/O.

The torus of side 1 is split into (1/eps)^3 cells of side ``eps``. Each cell
carries one hole ``eps*(x0 + k) + eps**alpha * T`` with ``T`` a model hole
(a ball of radius ``rho`` or a reference voxel mask). Masks are cell-centred:
a grid cell is solid iff its centre lies in a hole. All lengths in
:class:`HoleShape` are in units of ``eps**alpha``.

A :class:`GridSpec` may restrict the computation to a periodic window made of
whole eps-cells (for instance one eps x eps x 1 column); the mask is then
periodic on the window, which is exact whenever the data are periodic with
the window's period.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mac import TensorGrid, free_faces

CONTAINMENT_RADIUS = 1.0 / 8.0
MASK_RESOLUTION = 64


class SpecError(ValueError):
    """Invalid perforation or grid specification."""


class ResolutionError(SpecError):
    """Holes are too small for the grid spacing."""

    def __init__(self, message: str, required_n: int):
        super().__init__(message)
        self.required_n = required_n


def _inverse_integer(eps: float, tol: float = 1e-9) -> int | None:
    if eps <= 0:
        return None
    m = round(1.0 / eps)
    if m < 1 or abs(1.0 / eps - m) > tol * max(1.0, m):
        return None
    return int(m)


@dataclass(frozen=True, eq=False)
class HoleShape:
    """Model hole ``T`` in units of ``eps**alpha``.

    ``kind='ball'`` uses ``rho``; ``kind='mask'`` uses a boolean ``mask`` on a
    cubic sub-grid covering ``[-extent, extent]^3`` (nearest-neighbour lookup).
    """

    kind: str = "ball"
    rho: float = 1.0 / 8.0
    mask: np.ndarray | None = None
    extent: float = CONTAINMENT_RADIUS

    def __post_init__(self):
        if self.kind == "ball":
            if self.rho < 0:
                raise SpecError("ball radius must be non-negative")
        elif self.kind == "mask":
            if self.mask is None or np.ndim(self.mask) != 3 or len(set(np.shape(self.mask))) != 1:
                raise SpecError("mask hole needs a cubic boolean array")
            object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))
        else:
            raise SpecError(f"unknown hole kind {self.kind!r}")

    @classmethod
    def ball(cls, rho: float) -> "HoleShape":
        return cls("ball", float(rho))

    @classmethod
    def from_mask(cls, mask, extent: float = CONTAINMENT_RADIUS) -> "HoleShape":
        return cls("mask", 0.0, np.asarray(mask, dtype=bool), float(extent))

    @property
    def is_empty(self) -> bool:
        return self.radius == 0.0

    @property
    def radius(self) -> float:
        """Radius of the smallest origin-centred ball containing the hole."""
        if self.kind == "ball":
            return float(self.rho)
        idx = np.argwhere(self.mask)
        if idx.size == 0:
            return 0.0
        m = self.mask.shape[0]
        dx = 2 * self.extent / m
        corners = np.stack([idx * dx - self.extent, (idx + 1) * dx - self.extent])
        far = np.max(np.abs(corners), axis=0)
        return float(np.sqrt((far ** 2).sum(axis=1)).max())

    def contains(self, y0, y1, y2) -> np.ndarray:
        """Indicator of the hole at points given in hole units."""
        if self.kind == "ball":
            return y0 * y0 + y1 * y1 + y2 * y2 < self.rho ** 2
        m = self.mask.shape[0]
        scale = m / (2 * self.extent)
        out = np.zeros(np.broadcast(y0, y1, y2).shape, dtype=bool)
        idx = [np.floor((np.broadcast_to(y, out.shape) + self.extent) * scale).astype(np.int64)
               for y in (y0, y1, y2)]
        inside = np.ones(out.shape, dtype=bool)
        for i in idx:
            inside &= (i >= 0) & (i < m)
        out[inside] = self.mask[idx[0][inside], idx[1][inside], idx[2][inside]]
        return out

    def volume(self) -> float:
        if self.kind == "ball":
            return 4.0 / 3.0 * math.pi * self.rho ** 3
        dx = 2 * self.extent / self.mask.shape[0]
        return float(self.mask.sum()) * dx ** 3

    def to_dict(self) -> dict:
        if self.kind == "ball":
            return {"kind": "ball", "rho": self.rho}
        return {"kind": "mask", "extent": self.extent, "resolution": int(self.mask.shape[0]),
                "solid_voxels": int(self.mask.sum())}

    @classmethod
    def from_dict(cls, d: dict) -> "HoleShape":
        if d.get("kind", "ball") == "ball":
            return cls.ball(d.get("rho", CONTAINMENT_RADIUS))
        if "mask" in d:
            return cls.from_mask(np.asarray(d["mask"], dtype=bool), d.get("extent", CONTAINMENT_RADIUS))
        raise SpecError("mask hole descriptors need the mask data")


@dataclass(frozen=True, eq=False)
class PerforationSpec:
    epsilon: float
    alpha: float
    hole: HoleShape = field(default_factory=HoleShape)
    x0: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))

    @property
    def cells_per_axis(self) -> int:
        m = _inverse_integer(self.epsilon)
        if m is None:
            raise SpecError(f"1/epsilon must be a positive integer, got epsilon={self.epsilon}")
        return m

    @property
    def scale(self) -> float:
        """Hole scale ``eps**alpha``."""
        return self.epsilon ** self.alpha

    @property
    def hole_radius(self) -> float:
        return self.scale * self.hole.radius

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "alpha": self.alpha, "hole": self.hole.to_dict(), "x0": list(self.x0)}


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid with ``n`` cells per unit length.

    ``window`` counts eps-cells per axis of the periodic computational box;
    ``None`` means the whole torus.
    """

    n: int
    window: tuple | None = None

    @property
    def h(self) -> float:
        return 1.0 / self.n

    def cells_per_eps(self, spec: PerforationSpec) -> int:
        m = self.n * spec.epsilon
        if abs(m - round(m)) > 1e-9 * max(1.0, m):
            raise SpecError(f"n={self.n} is not a multiple of 1/epsilon={1 / spec.epsilon:g}")
        return int(round(m))

    def window_cells(self, spec: PerforationSpec) -> tuple:
        if self.window is None:
            k = spec.cells_per_axis
            return (k, k, k)
        return tuple(int(w) for w in self.window)

    def shape(self, spec: PerforationSpec) -> tuple:
        m = self.cells_per_eps(spec)
        return tuple(m * w for w in self.window_cells(spec))

    @classmethod
    def cells_per_radius(cls, spec: PerforationSpec, k: float, window=None, minimum: int = 0) -> "GridSpec":
        """Smallest tiling-compatible grid with at least ``k`` cells per hole radius."""
        per = spec.cells_per_axis
        r = spec.hole_radius
        if r <= 0:
            m = max(1, math.ceil(minimum / per))
        else:
            m = math.ceil(k * spec.epsilon / r - 1e-9)
            m = max(m, math.ceil(minimum / per))
        return cls(m * per, window)

    @classmethod
    def default_rule(cls, spec: PerforationSpec, window=None) -> "GridSpec":
        """``n = max(64, 8 / eps**alpha)`` rounded up to a multiple of 1/eps."""
        per = spec.cells_per_axis
        target = max(64.0, 8.0 / spec.scale)
        return cls(per * math.ceil(target / per - 1e-9), window)


@dataclass(frozen=True, eq=False)
class DomainMask:
    """Solid indicator on pressure cells of the (windowed) periodic grid."""

    solid: np.ndarray
    spec: PerforationSpec
    grid: GridSpec

    @property
    def shape(self) -> tuple:
        return self.solid.shape

    @property
    def h(self) -> float:
        return self.grid.h

    @property
    def fluid(self) -> np.ndarray:
        return ~self.solid

    @property
    def face_solid(self) -> list:
        """Per component: face is solid iff either adjacent cell is solid."""
        return [~f for f in free_faces(self.fluid)]

    @property
    def porosity(self) -> float:
        return float(1.0 - self.solid.mean())

    @property
    def box_volume(self) -> float:
        return float(np.prod(self.shape)) * self.h ** 3

    @property
    def n_holes(self) -> int:
        return int(np.prod(self.grid.window_cells(self.spec)))

    def tensor_grid(self) -> TensorGrid:
        return TensorGrid.uniform(self.shape, self.h)

    def header(self) -> dict:
        return {"n": self.grid.n, "epsilon": self.spec.epsilon, "alpha": self.spec.alpha,
                "x0": list(self.spec.x0), "shape": self.spec.hole.to_dict(),
                "window": list(self.grid.window_cells(self.spec)), "dims": list(self.shape)}


def hole_centers(spec: PerforationSpec) -> np.ndarray:
    """All (1/eps)^3 hole centres ``eps*(x0 + k) mod 1`` as an array of shape (N, 3)."""
    m = spec.cells_per_axis
    k = np.stack(np.meshgrid(*(np.arange(m),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    return np.mod(spec.epsilon * (np.asarray(spec.x0) + k), 1.0)


def validate_spec(spec: PerforationSpec, grid: GridSpec | None = None) -> list:
    """Violated invariants as short ``code: explanation`` strings (empty iff valid)."""
    out = []
    if not (1.0 < spec.alpha < 3.0):
        out.append(f"alpha: alpha={spec.alpha} outside (1, 3)")
    per = _inverse_integer(spec.epsilon)
    if per is None:
        out.append(f"epsilon: 1/epsilon={1 / spec.epsilon if spec.epsilon else float('inf'):g} is not a positive integer")
    if any(not (-0.5 < v < 0.5) for v in spec.x0):
        out.append(f"x0: offset {spec.x0} outside (-1/2, 1/2)^3")
    if spec.hole.radius > CONTAINMENT_RADIUS + 1e-12:
        out.append(f"containment: hole radius {spec.hole.radius:g} exceeds 1/8 (T not inside B(0, 1/8))")
    if per is not None:
        gap = spec.epsilon * (0.5 - max(abs(v) for v in spec.x0)) - spec.hole_radius
        if gap < spec.epsilon / 8 - 1e-12:
            out.append(f"separation: distance {gap:.4g} from hole to cell boundary is below eps/8={spec.epsilon / 8:.4g}")
    if grid is not None and per is not None:
        m = grid.n * spec.epsilon
        if abs(m - round(m)) > 1e-9 * max(1.0, m):
            out.append(f"tiling: n={grid.n} is not a multiple of 1/epsilon={per}")
        elif not spec.hole.is_empty and 2 * spec.hole_radius < 4 * grid.h:
            out.append(f"resolution: hole diameter {2 * spec.hole_radius:.4g} spans fewer than 4 cells "
                       f"(need n >= {required_n(spec)})")
    return out


def required_n(spec: PerforationSpec) -> int:
    per = spec.cells_per_axis
    need = 2.0 / spec.hole_radius
    return per * math.ceil(need / per - 1e-9)


def _cell_pattern(spec: PerforationSpec, m: int, h: float) -> np.ndarray:
    """Solid indicator on one eps-cell of m^3 grid cells (periodic images included)."""
    # work in grid units to keep shifts of x0 by whole cells exact
    c = np.mod(np.asarray(spec.x0) * spec.epsilon / h, m)
    coords = []
    for a in range(3):
        d = np.arange(m) + 0.5 - c[a]
        d = d - m * np.round(d / m)
        coords.append(d * (h / spec.scale))
    y = np.meshgrid(*coords, indexing="ij")
    return spec.hole.contains(*y)


def build_mask(spec: PerforationSpec, grid: GridSpec, strict: bool = False) -> DomainMask:
    """Voxelize the perforated torus (or the configured window of it).

    Hard errors: non-integer 1/eps, n incompatible with the eps tiling, a hole
    leaving its own eps-cell, and holes spanning fewer than 4 cells. The
    remaining invariants of :func:`validate_spec` (containment in B(0, 1/8),
    eps/8 separation) are reported there and only enforced with ``strict``.
    """
    per = spec.cells_per_axis
    m = grid.cells_per_eps(spec)
    diag = validate_spec(spec, grid)
    if strict and diag:
        raise SpecError("; ".join(diag))
    if not (1.0 < spec.alpha < 3.0):
        raise SpecError(f"alpha={spec.alpha} outside (1, 3)")
    if spec.hole_radius > spec.epsilon / 2 + 1e-12:
        raise SpecError(f"hole radius {spec.hole_radius:.4g} exceeds half the cell size {spec.epsilon / 2:.4g}")
    if not spec.hole.is_empty and 2 * spec.hole_radius < 4 * grid.h - 1e-12:
        n_req = required_n(spec)
        raise ResolutionError(f"hole diameter {2 * spec.hole_radius:.4g} spans fewer than 4 cells at n={grid.n}; "
                              f"need n >= {n_req}", n_req)
    window = grid.window_cells(spec)
    if any(w < 1 or w > per for w in window):
        raise SpecError(f"window {window} must count between 1 and {per} eps-cells per axis")
    if spec.hole.is_empty:
        solid = np.zeros(tuple(m * w for w in window), dtype=bool)
    else:
        solid = np.tile(_cell_pattern(spec, m, grid.h), window)
    solid.setflags(write=False)
    return DomainMask(solid, spec, grid)


def analytic_solid_fraction(spec: PerforationSpec) -> float:
    """(1/eps)^3 |eps^alpha T| for non-overlapping holes."""
    return spec.hole.volume() * spec.scale ** 3 / spec.epsilon ** 3


def save_mask(mask: DomainMask, stem) -> tuple:
    """Write ``stem.bin`` (one byte per cell, C order, 1 = solid) and ``stem.json``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    bin_path.write_bytes(mask.solid.astype(np.uint8).tobytes(order="C"))
    json_path.write_text(json.dumps(mask.header(), indent=2))
    return bin_path, json_path


def load_mask(stem, hole: HoleShape | None = None) -> DomainMask:
    stem = Path(stem)
    head = json.loads(stem.with_suffix(".json").read_text())
    dims = tuple(head.get("dims") or (head["n"],) * 3)
    raw = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype=np.uint8)
    if raw.size != int(np.prod(dims)):
        raise SpecError(f"mask file holds {raw.size} bytes, header expects {int(np.prod(dims))}")
    if hole is None:
        shape = head.get("shape", {})
        hole = HoleShape.ball(shape.get("rho", 0.0)) if shape.get("kind", "ball") == "ball" else HoleShape()
    spec = PerforationSpec(head["epsilon"], head["alpha"], hole, tuple(head.get("x0", (0, 0, 0))))
    window = head.get("window")
    per = spec.cells_per_axis
    grid = GridSpec(int(head["n"]), None if window is None or list(window) == [per] * 3 else tuple(window))
    solid = raw.reshape(dims).astype(bool)
    solid.setflags(write=False)
    return DomainMask(solid, spec, grid)
