"""Spectral solver for the limit Darcy system on the unit torus.

    (eta0 / 2) M0 u = f - grad p,     div u = 0,     mean p = 0.

The constant-coefficient problem is diagonal in Fourier space:
``p_k = (k . M0^-1 f_k) / (2 pi i  k . M0^-1 k)`` and
``u_k = (2/eta0) M0^-1 (f_k - 2 pi i k p_k)``. Grid samples sit at cell
centres ``(j + 1/2)/N``. Solutions keep their Fourier coefficients so they
can be evaluated exactly (for band-limited data) at any point, e.g. at MAC
face centres of a much finer flow grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .micro import PermeabilityTensor

TWO_PI = 2.0 * np.pi


class BandLimitError(ValueError):
    """Data carry energy at or above the Nyquist wavenumber of the grid."""


def _matrix(M0) -> np.ndarray:
    m = np.asarray(M0.m if isinstance(M0, PermeabilityTensor) else M0, dtype=float)
    if m.shape != (3, 3):
        raise ValueError("M0 must be 3x3")
    if not np.allclose(m, m.T, rtol=1e-10, atol=1e-14 * np.abs(m).max(initial=1.0)):
        raise ValueError("M0 must be symmetric")
    if np.linalg.eigvalsh(m).min() <= 0:
        raise ValueError("M0 must be positive definite")
    return m


def wavenumbers(N: int):
    k = np.fft.fftfreq(N, 1.0 / N)
    return np.meshgrid(k, k, k, indexing="ij")


def cell_centers(N: int):
    x = (np.arange(N) + 0.5) / N
    return np.meshgrid(x, x, x, indexing="ij")


def _to_coeffs(values: np.ndarray) -> np.ndarray:
    """Fourier coefficients of samples at cell centres (so that f(x) = sum c_k e^{2 pi i k.x})."""
    N = values.shape[-1]
    K = wavenumbers(N)
    phase = np.exp(-1j * np.pi * (K[0] + K[1] + K[2]) / N)
    return np.fft.fftn(values, axes=(-3, -2, -1)) * phase / N ** 3


def _from_coeffs(coeffs: np.ndarray) -> np.ndarray:
    N = coeffs.shape[-1]
    K = wavenumbers(N)
    phase = np.exp(1j * np.pi * (K[0] + K[1] + K[2]) / N)
    return np.real(np.fft.ifftn(coeffs * phase, axes=(-3, -2, -1)) * N ** 3)


def nyquist_energy(coeffs: np.ndarray) -> float:
    """Relative energy of the coefficients on Nyquist planes (even N)."""
    N = coeffs.shape[-1]
    total = float(np.sum(np.abs(coeffs) ** 2))
    if N % 2 or total == 0:
        return 0.0
    sel = np.zeros(coeffs.shape[-3:], dtype=bool)
    sel[N // 2, :, :] = sel[:, N // 2, :] = sel[:, :, N // 2] = True
    return float(np.sum(np.abs(coeffs[..., sel]) ** 2) / total)


@dataclass(eq=False)
class DarcySolution:
    u: np.ndarray                 # (3, N, N, N) at cell centres
    p: np.ndarray                 # (N, N, N), zero mean
    M0: np.ndarray
    eta0: float
    u_hat: np.ndarray = field(repr=False, default=None)
    p_hat: np.ndarray = field(repr=False, default=None)
    band_limited: bool = True

    @property
    def N(self) -> int:
        return self.p.shape[-1]

    def _modes(self, tol=1e-14):
        K = wavenumbers(self.N)
        scale = max(np.abs(self.u_hat).max(initial=0.0), np.abs(self.p_hat).max(initial=0.0), 1e-300)
        keep = (np.abs(self.u_hat).max(axis=0) > tol * scale) | (np.abs(self.p_hat) > tol * scale)
        return [k[keep] for k in K], self.u_hat[:, keep], self.p_hat[keep]

    def evaluate(self, x, y, z):
        """Trigonometric interpolant of (u, p) at arbitrary points (exact for band-limited data)."""
        x, y, z = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float), np.asarray(z, float))
        (k0, k1, k2), uh, ph = self._modes()
        u = np.zeros((3,) + x.shape)
        p = np.zeros(x.shape)
        for j in range(k0.size):
            e = np.exp(TWO_PI * 1j * (k0[j] * x + k1[j] * y + k2[j] * z))
            p += np.real(ph[j] * e)
            for c in range(3):
                if uh[c, j] != 0:
                    u[c] += np.real(uh[c, j] * e)
        return u, p

    def velocity_on_faces(self, face_coords) -> list:
        """Component c of u at the c-face centres given as ``face_coords[c] = (x, y, z)``."""
        out = []
        for c, pts in enumerate(face_coords):
            u, _ = self.evaluate(*pts)
            out.append(u[c])
        return out

    def residual(self, f: np.ndarray) -> tuple:
        """Max Darcy-law defect and max divergence, both evaluated spectrally."""
        K = wavenumbers(self.N)
        fh = _to_coeffs(f)
        law = 0.5 * self.eta0 * np.einsum("ij,j...->i...", self.M0, self.u_hat) - fh
        law += np.stack([TWO_PI * 1j * k * self.p_hat for k in K])
        div = sum(TWO_PI * 1j * K[c] * self.u_hat[c] for c in range(3))
        return float(np.abs(_from_coeffs(law)).max()), float(np.abs(_from_coeffs(div)).max())


def solve_darcy(M0, eta0: float, f: np.ndarray, strict: bool = False) -> DarcySolution:
    """Spectral Darcy solve for cell-centred forcing samples ``f`` of shape (3, N, N, N)."""
    m = _matrix(M0)
    if eta0 <= 0:
        raise ValueError("eta0 must be positive")
    f = np.asarray(f, dtype=float)
    if f.ndim != 4 or f.shape[0] != 3 or len(set(f.shape[1:])) != 1:
        raise ValueError("f must have shape (3, N, N, N)")
    N = f.shape[-1]
    fh = _to_coeffs(f)
    band = nyquist_energy(fh) < 1e-24
    if strict and not band:
        raise BandLimitError("forcing has energy on the Nyquist planes")
    K = wavenumbers(N)
    if N % 2 == 0:
        # the Nyquist derivative is ambiguous; treat those modes as non-oscillating
        K = [np.where(np.abs(k) == N // 2, 0.0, k) for k in K]
    minv = np.linalg.inv(m)
    mf = np.einsum("ij,j...->i...", minv, fh)
    kmf = sum(K[i] * mf[i] for i in range(3))
    kmk = sum(K[i] * minv[i, j] * K[j] for i in range(3) for j in range(3))
    safe = np.where(kmk == 0, 1.0, kmk)
    ph = np.where(kmk == 0, 0.0, kmf / (TWO_PI * 1j * safe))
    ph[0, 0, 0] = 0.0
    grad = np.stack([TWO_PI * 1j * k * ph for k in K])
    uh = (2.0 / eta0) * np.einsum("ij,j...->i...", minv, fh - grad)
    return DarcySolution(_from_coeffs(uh), _from_coeffs(ph), m, float(eta0), uh, ph, band)


# --- analytic forcing presets ---------------------------------------------------------

@dataclass(frozen=True)
class Forcing:
    """Named analytic forcing.

    * ``constant``: ``f = amplitude`` (a 3-vector);
    * ``single-mode``: ``f = (A sin 2 pi z, 0, B cos 2 pi z)`` with ``amplitude = (A, B)``;
    * ``smooth-bump``: ``f = (A b(x), 0, 0)``, ``b`` a product of raised cosines centred at 1/2.

    ``period`` reports the smallest periodic window (in eps-cells per axis,
    ``None`` meaning the full extent) on which the perforated problem is
    exactly reproducible.
    """

    kind: str = "single-mode"
    amplitude: tuple = (1.0, 1.0)

    def __post_init__(self):
        if self.kind not in ("constant", "single-mode", "smooth-bump", "zero"):
            raise ValueError(f"unknown forcing preset {self.kind!r}")
        object.__setattr__(self, "amplitude", tuple(float(a) for a in np.atleast_1d(self.amplitude)))

    def __call__(self, x, y, z):
        x, y, z = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float), np.asarray(z, float))
        zero = np.zeros(x.shape)
        a = self.amplitude
        if self.kind == "zero":
            return zero, zero.copy(), zero.copy()
        if self.kind == "constant":
            v = (tuple(a) + (0.0, 0.0, 0.0))[:3]
            return zero + v[0], zero + v[1], zero + v[2]
        if self.kind == "single-mode":
            A, B = (tuple(a) + (0.0, 0.0))[:2]
            return A * np.sin(TWO_PI * z), zero, B * np.cos(TWO_PI * z)
        b = np.prod([0.5 * (1 + np.cos(TWO_PI * (t - 0.5))) for t in (x, y, z)], axis=0)
        return a[0] * b, zero, zero.copy()

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero" or not any(self.amplitude)

    def reduced_window(self, cells: int) -> tuple | None:
        """Window (eps-cells per axis) on which the eps-problem with this forcing is exact."""
        if self.kind in ("constant", "zero"):
            return (1, 1, 1)
        if self.kind == "single-mode":
            return (1, 1, cells)
        return None

    def sample(self, N: int) -> np.ndarray:
        return np.stack(self(*cell_centers(N)))

    def on_faces(self, face_coords) -> list:
        return [self(*pts)[c] for c, pts in enumerate(face_coords)]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "amplitude": list(self.amplitude)}

    @classmethod
    def from_dict(cls, d) -> "Forcing":
        if isinstance(d, str):
            return cls(d)
        return cls(d.get("kind", "single-mode"), tuple(d.get("amplitude", (1.0, 1.0))))


def darcy_reference(M0, eta0: float, forcing: Forcing, N: int = 8) -> DarcySolution:
    """Darcy solution for an analytic preset (all presets are band-limited below N/2 for N >= 4)."""
    return solve_darcy(M0, eta0, forcing.sample(N), strict=True)


# --- manufactured checks --------------------------------------------------------------

@dataclass(frozen=True)
class TrigMode:
    """``amplitude * cos(2 pi k.x + phase)`` with analytic gradient; optional direction for vector fields."""

    k: tuple
    amplitude: float = 1.0
    phase: float = 0.0
    direction: tuple = (0.0, 0.0, 0.0)

    def value(self, x, y, z):
        k = self.k
        return self.amplitude * np.cos(TWO_PI * (k[0] * x + k[1] * y + k[2] * z) + self.phase)

    def gradient(self, x, y, z):
        k = self.k
        s = -self.amplitude * TWO_PI * np.sin(TWO_PI * (k[0] * x + k[1] * y + k[2] * z) + self.phase)
        return [s * k[i] for i in range(3)]

    def vector(self, x, y, z):
        v = self.value(x, y, z)
        return [v * d for d in self.direction]


@dataclass
class ManufacturedResult:
    error_u: float
    error_p: float
    band_limited: bool

    @property
    def error(self) -> float:
        return self.error_u + self.error_p


def manufactured_check(M0, eta0: float, p_star=(), u_star=(), N: int = 16) -> ManufacturedResult:
    """Solve with ``f = (eta0/2) M0 u* + grad p*`` and compare with (u*, p*).

    ``p_star`` and ``u_star`` are sequences of :class:`TrigMode`; velocity
    modes must be solenoidal (direction orthogonal to k). Modes at or above the
    Nyquist wavenumber make the result non band-limited, which is flagged.
    """
    m = _matrix(M0)
    X = cell_centers(N)
    p = np.zeros((N, N, N))
    gp = np.zeros((3, N, N, N))
    u = np.zeros((3, N, N, N))
    band = True
    for mode in p_star:
        p += mode.value(*X)
        gp += np.stack(mode.gradient(*X))
        band &= max(abs(k) for k in mode.k) < N / 2
    for mode in u_star:
        if abs(np.dot(mode.k, mode.direction)) > 1e-12:
            raise ValueError("velocity modes must be divergence-free (direction orthogonal to k)")
        u += np.stack(mode.vector(*X))
        band &= max(abs(k) for k in mode.k) < N / 2
    f = 0.5 * eta0 * np.einsum("ij,j...->i...", m, u) + gp
    sol = solve_darcy(m, eta0, f)
    band &= sol.band_limited
    dv = N ** -3
    eu = float(np.sqrt(np.sum((sol.u - u) ** 2) * dv))
    ep = float(np.sqrt(np.sum((sol.p - (p - p.mean())) ** 2) * dv))
    return ManufacturedResult(eu, ep, bool(band))
