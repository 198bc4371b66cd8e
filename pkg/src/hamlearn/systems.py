"""Ground-truth Hamiltonians: Henon-Heiles, Morse and the double well.

All three share the kinetic energy K(p) = |p|^2 / 2; only the potential
depends on the parameter vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class PhaseState:
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q, dtype=np.float64))
        p = np.atleast_1d(np.asarray(self.p, dtype=np.float64))
        if q.shape != p.shape or q.ndim != 1:
            raise DimensionError(f"q{q.shape} and p{p.shape} must be equal-length vectors")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @property
    def dim(self) -> int:
        return self.q.size

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.p])

    @classmethod
    def from_vector(cls, z) -> "PhaseState":
        z = np.asarray(z, dtype=np.float64)
        d = z.size // 2
        return cls(z[:d], z[d:])


@dataclass(frozen=True)
class SystemSpec:
    """One of 'henon_heiles' (alpha, beta), 'morse' (alpha), 'double_well' (alpha)."""

    system: str
    alpha: float
    beta: float | None = None

    def __post_init__(self):
        if self.system not in DIMS:
            raise ValueError(f"unknown system {self.system!r}; choose from {sorted(DIMS)}")
        if (self.system == "henon_heiles") != (self.beta is not None):
            raise ValueError("beta is required for henon_heiles and only for it")

    @property
    def dim(self) -> int:
        return DIMS[self.system]

    @property
    def lam(self) -> np.ndarray:
        if self.beta is None:
            return np.array([self.alpha], dtype=np.float64)
        return np.array([self.alpha, self.beta], dtype=np.float64)

    @classmethod
    def from_lambda(cls, system: str, lam) -> "SystemSpec":
        lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
        if system == "henon_heiles":
            return cls(system, float(lam[0]), float(lam[1]))
        return cls(system, float(lam[0]))

    def to_dict(self) -> dict:
        d = {"system": self.system, "alpha": self.alpha}
        if self.beta is not None:
            d["beta"] = self.beta
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SystemSpec":
        extra = set(d) - {"system", "alpha", "beta"}
        if extra:
            raise ValueError(f"unknown keys in system spec: {sorted(extra)}")
        return cls(d["system"], float(d["alpha"]), None if d.get("beta") is None else float(d["beta"]))


DIMS = {"henon_heiles": 2, "morse": 1, "double_well": 1}
LAMBDA_DIMS = {"henon_heiles": 2, "morse": 1, "double_well": 1}


def _check(spec: SystemSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (spec.dim,):
        raise DimensionError(f"{spec.system} needs {spec.dim}-dim coordinates, got shape {x.shape}")
    return x


def potential(spec: SystemSpec, q) -> np.ndarray | float:
    """V(q; lambda). Accepts a single vector or a (n, dim) batch."""
    q = _check(spec, q)
    a = spec.alpha
    if spec.system == "henon_heiles":
        q1, q2 = q[..., 0], q[..., 1]
        v = 0.5 * (q1 * q1 + q2 * q2) + a * q1 * q1 * q2 - spec.beta * q2 ** 3 / 3.0
    elif spec.system == "morse":
        e = np.exp(-a * (q[..., 0] - 1.0))
        v = (1.0 - e) ** 2 - 1.0
    else:
        x = q[..., 0]
        v = 0.5 * a * x * x + 0.25 * x ** 4
    return float(v) if np.ndim(v) == 0 else v


def kinetic(spec: SystemSpec, p) -> np.ndarray | float:
    p = _check(spec, p)
    k = 0.5 * np.sum(p * p, axis=-1)
    return float(k) if np.ndim(k) == 0 else k


def hamiltonian(spec: SystemSpec, s: PhaseState) -> float:
    return kinetic(spec, s.p) + potential(spec, s.q)


def hamiltonian_batch(spec: SystemSpec, q, p) -> np.ndarray:
    return kinetic(spec, p) + potential(spec, q)


def potential_gradient(spec: SystemSpec, q) -> np.ndarray:
    q = _check(spec, q)
    a = spec.alpha
    if spec.system == "henon_heiles":
        q1, q2 = q[..., 0], q[..., 1]
        return np.stack([q1 + 2.0 * a * q1 * q2, q2 + a * q1 * q1 - spec.beta * q2 * q2], axis=-1)
    if spec.system == "morse":
        e = np.exp(-a * (q - 1.0))
        return 2.0 * a * e * (1.0 - e)
    return a * q + q ** 3


def kinetic_gradient(spec: SystemSpec, p) -> np.ndarray:
    return _check(spec, p).copy()


def eom(spec: SystemSpec, s: PhaseState) -> PhaseState:
    """(dq/dt, dp/dt) packed in a PhaseState."""
    return PhaseState(kinetic_gradient(spec, s.p), -potential_gradient(spec, s.q))


def morse_series_coefficient(n: int, alpha: float) -> float:
    """Coefficient of (q - 1)^n in the Taylor expansion of the Morse potential."""
    if n < 0:
        raise ValueError("n must be non-negative")
    return 2.0 * (-1) ** n * (2.0 ** (n - 1) - 1.0) * alpha ** n / math.factorial(n)


def morse_series(q_shift, alpha: float, degree: int) -> np.ndarray:
    q_shift = np.asarray(q_shift, dtype=np.float64)
    return sum(morse_series_coefficient(n, alpha) * q_shift ** n for n in range(degree + 1))


def potential_minimum(spec: SystemSpec) -> float:
    """Global minimum of V (HH returns the local minimum at the origin)."""
    if spec.system == "morse":
        return -1.0
    if spec.system == "double_well" and spec.alpha < 0:
        return -spec.alpha ** 2 / 4.0
    return 0.0
