"""Shear-dependent viscosity laws ``eta_r(s) = eta0 + g_r(s)``.

The Carreau--Yasuda law

    eta(s) = (eta0 - eta_inf) (1 + kappa0 s^a)^((r-2)/a) + eta_inf

is written in this form with ``g_r(s) = (eta0 - eta_inf)((1 + kappa0 s^a)^((r-2)/a) - 1)``.
Laws are immutable and evaluate element-wise on numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

ETA_FLOOR = 1e-10


def _zero(s):
    return np.zeros_like(np.asarray(s, dtype=float))


@dataclass(frozen=True)
class CarreauYasuda:
    eta0: float
    eta_inf: float
    kappa0: float
    r: float
    a: float = 2.0

    def __post_init__(self):
        if not (self.eta0 > self.eta_inf > 0):
            raise ValueError("Carreau-Yasuda needs eta0 > eta_inf > 0")
        if self.kappa0 <= 0:
            raise ValueError("kappa0 must be positive")
        if self.r <= 1:
            raise ValueError("r must exceed 1")
        if self.a < 1:
            raise ValueError("Yasuda exponent a must be >= 1")

    def g(self, s):
        s = np.asarray(s, dtype=float)
        expo = (self.r - 2.0) / self.a
        if expo == 0.0:
            return np.zeros_like(s)
        return (self.eta0 - self.eta_inf) * np.expm1(expo * np.log1p(self.kappa0 * s ** self.a))

    def law(self, floor: float = ETA_FLOOR) -> "ViscosityLaw":
        params = {"eta0": self.eta0, "eta_inf": self.eta_inf, "kappa0": self.kappa0, "r": self.r, "a": self.a}
        return ViscosityLaw(self.eta0, self.g, self.r, floor, "carreau_yasuda", params)


@dataclass(frozen=True)
class ViscosityLaw:
    """``eta(s) = max(eta0 + g(s), floor)`` with structure exponent ``r``."""

    eta0: float
    g: Callable = _zero
    r: float = 2.0
    floor: float = ETA_FLOOR
    kind: str = "newtonian"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.eta0 <= 0:
            raise ValueError("eta0 must be positive")

    @classmethod
    def newtonian(cls, eta0: float = 1.0) -> "ViscosityLaw":
        return cls(float(eta0), _zero, 2.0, ETA_FLOOR, "newtonian", {"eta0": float(eta0)})

    @classmethod
    def carreau_yasuda(cls, eta0, eta_inf, kappa0, r, a=2.0) -> "ViscosityLaw":
        return CarreauYasuda(eta0, eta_inf, kappa0, r, a).law()

    @property
    def is_newtonian(self) -> bool:
        """True when ``g`` vanishes identically (also Carreau--Yasuda with r = 2)."""
        return self.kind == "newtonian" or (self.kind == "carreau_yasuda" and self.r == 2.0)

    def __call__(self, s):
        return eta(self, s)

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "ViscosityLaw":
        kind = d.get("kind")
        if kind == "newtonian":
            return cls.newtonian(d["eta0"])
        if kind == "carreau_yasuda":
            return cls.carreau_yasuda(d["eta0"], d["eta_inf"], d["kappa0"], d["r"], d.get("a", 2.0))
        raise ValueError(f"unknown law kind {kind!r}")


def eta(law: ViscosityLaw, s):
    """Viscosity at shear magnitude ``s >= 0`` (scalar or array)."""
    s = np.asarray(s, dtype=float)
    if np.any(s < 0) or np.any(np.isnan(s)):
        raise ValueError("shear magnitude must be non-negative")
    out = np.maximum(law.eta0 + law.g(s), law.floor)
    return float(out) if out.ndim == 0 else out


def stress(law: ViscosityLaw, D, beta: float = 1.0) -> np.ndarray:
    """``eta(beta |D|) D`` for a symmetric 3x3 tensor (or a stack of them)."""
    D = np.asarray(D, dtype=float)
    if D.shape[-2:] != (3, 3):
        raise ValueError("D must have trailing shape (3, 3)")
    scale = max(np.abs(D).max(initial=0.0), 1.0)
    if np.abs(D - np.swapaxes(D, -1, -2)).max(initial=0.0) > 1e-12 * scale:
        raise ValueError("D must be symmetric")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    mag = np.sqrt(np.einsum("...ij,...ij->...", D, D))
    return np.asarray(eta(law, beta * mag))[..., None, None] * D


@dataclass
class MonotonicityReport:
    min_ratio: float
    mean_ratio: float
    n_samples: int
    beta: float
    seed: int

    @property
    def passed(self) -> bool:
        return self.min_ratio > 0


@dataclass
class GrowthReport:
    constant: float
    argmax: float
    n_samples: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.constant))


def _unit_symmetric(rng, n):
    X = rng.standard_normal((n, 3, 3))
    X = 0.5 * (X + np.swapaxes(X, 1, 2))
    return X / np.sqrt(np.einsum("nij,nij->n", X, X))[:, None, None]


def _random_symmetric(rng, n):
    # magnitudes spread over many decades so both growth regimes are probed
    return _unit_symmetric(rng, n) * (10.0 ** rng.uniform(-3, 3, n))[:, None, None]


def check_monotonicity(law: ViscosityLaw, beta: float = 1.0, n_samples: int = 10_000, seed: int = 0):
    """Sampled coercivity ratio of the stress map.

    For symmetric pairs (A, B) the ratio is
    ``[S(A) - S(B)]:(A - B) / (|A-B|^2 + beta^(r-2) |A-B|^r 1_{r>2})``
    with ``S(X) = eta(beta |X|) X``. Pairs with ``|A - B| < 1e-8`` are redrawn.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    A = _random_symmetric(rng, n_samples)
    B = _random_symmetric(rng, n_samples)
    # a quarter of the pairs are close neighbours, where the local slope matters
    near = rng.random(n_samples) < 0.25
    size = np.sqrt(np.einsum("nij,nij->n", A[near], A[near]))
    B[near] = A[near] + 1e-3 * size[:, None, None] * _unit_symmetric(rng, int(near.sum()))
    diff = A - B
    dn = np.sqrt(np.einsum("nij,nij->n", diff, diff))
    while np.any(dn < 1e-8):
        bad = dn < 1e-8
        B[bad] = _random_symmetric(rng, int(bad.sum()))
        diff = A - B
        dn = np.sqrt(np.einsum("nij,nij->n", diff, diff))
    num = np.einsum("nij,nij->n", stress(law, A, beta) - stress(law, B, beta), diff)
    den = dn ** 2
    if law.r > 2:
        den = den + beta ** (law.r - 2) * dn ** law.r
    ratio = num / den
    return MonotonicityReport(float(ratio.min()), float(ratio.mean()), n_samples, beta, seed)


def check_growth(law: ViscosityLaw, n_samples: int = 4001) -> GrowthReport:
    """Smallest C with |g(s)| <= C (s 1_{s<=1} + s^max(r-2,0) 1_{s>=1}) on a log grid over [1e-6, 1e6]."""
    s = np.logspace(-6, 6, n_samples)
    gs = np.abs(law.g(s))
    den = np.where(s <= 1.0, s, s ** max(law.r - 2.0, 0.0))
    q = gs / den
    k = int(np.argmax(q))
    return GrowthReport(float(q[k]), float(s[k]), n_samples)
