"""Stormer-Verlet (kick-drift-kick) stepping for separable Hamiltonians.

Everything here works on plain arrays: a single state is a pair of (d,)
vectors, a batch is a pair of (n, d) arrays integrated in lockstep.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .systems import PhaseState, SystemSpec, potential_gradient


class IntegrationBlowup(FloatingPointError):
    def __init__(self, step: int, msg: str = "non-finite state"):
        super().__init__(f"{msg} at step {step}")
        self.step = step


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ForceProvider:
    """dVdq(q, lam) and dKdp(p); both map (…, d) arrays to (…, d) arrays."""

    dVdq: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dKdp: Callable[[np.ndarray], np.ndarray]


def analytic_forces(system: str) -> ForceProvider:
    def dv(q, lam):
        return potential_gradient(SystemSpec.from_lambda(system, lam), q)

    # K = |p|^2 / 2 for every supported system
    return ForceProvider(dv, lambda p: p)


@dataclass
class Trajectory:
    """Uniformly spaced states; q and p have shape (n_states, d)."""

    q: np.ndarray
    p: np.ndarray
    dt: float
    lam: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        if self.q.shape != self.p.shape or self.q.ndim != 2 or len(self.q) == 0:
            raise ValueError("trajectory needs matching non-empty (n, d) arrays")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    def __len__(self):
        return len(self.q)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.q))

    @property
    def states(self) -> list[PhaseState]:
        return [PhaseState(q, p) for q, p in zip(self.q, self.p)]

    def to_csv(self) -> str:
        d = self.q.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"q{i + 1}" for i in range(d)] + [f"p{i + 1}" for i in range(d)])
        for t, q, p in zip(self.times, self.q, self.p):
            w.writerow([f"{x:.17g}" for x in (t, *q, *p)])
        return buf.getvalue()

    def save_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str, lam=(), dt: float | None = None) -> "Trajectory":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], np.array(rows[1:], dtype=np.float64)
        d = (len(header) - 1) // 2
        t = body[:, 0]
        if dt is None:
            dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
        return cls(body[:, 1:1 + d], body[:, 1 + d:], dt, np.asarray(lam, dtype=np.float64), float(t[0]))


def verlet_step(f: ForceProvider, q, p, lam, dt: float, _force_q=None):
    """One kick-drift-kick step. Returns (q, p, dVdq at the new q)."""
    fq = f.dVdq(q, lam) if _force_q is None else _force_q
    p_half = p - 0.5 * dt * fq
    q_new = q + dt * f.dKdp(p_half)
    fq_new = f.dVdq(q_new, lam)
    p_new = p_half - 0.5 * dt * fq_new
    return q_new, p_new, fq_new


def step(f: ForceProvider, s: PhaseState, lam, dt: float) -> PhaseState:
    if dt <= 0:
        raise ConfigError("dt must be positive")
    q, p, _ = verlet_step(f, s.q, s.p, np.asarray(lam, dtype=np.float64), dt)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
        raise IntegrationBlowup(1)
    return PhaseState(q, p)


def rollout_arrays(f: ForceProvider, q0, p0, lam, dt: float, n: int, every: int = 1):
    """Integrate n steps from (q0, p0), keeping every `every`-th state.

    Shapes: q0 (d,) or (B, d). Returns arrays of shape (n // every + 1, ...).
    """
    if n < 0:
        raise ConfigError("number of steps must be non-negative")
    q = np.array(q0, dtype=np.float64)
    p = np.array(p0, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    qs, ps = [q.copy()], [p.copy()]
    fq = f.dVdq(q, lam)
    for i in range(1, n + 1):
        q, p, fq = verlet_step(f, q, p, lam, dt, fq)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
            raise IntegrationBlowup(i)
        if i % every == 0:
            qs.append(q.copy())
            ps.append(p.copy())
    return np.stack(qs), np.stack(ps)


def rollout(f: ForceProvider, s0: PhaseState, lam, dt: float, n: int) -> Trajectory:
    qs, ps = rollout_arrays(f, s0.q, s0.p, lam, dt, n)
    return Trajectory(qs, ps, dt, np.asarray(lam, dtype=np.float64))


def coarsen_ratio(fine_dt: float, obs_dt: float) -> int:
    r = obs_dt / fine_dt
    ri = int(round(r))
    if ri < 1 or abs(r - ri) > 1e-9 * max(1.0, r):
        raise ConfigError(f"obs_dt/fine_dt = {r} is not a positive integer")
    return ri


def fine_then_coarsen(spec: SystemSpec, s0: PhaseState, fine_dt: float = 1e-3, obs_dt: float = 0.1,
                      n_obs: int = 1) -> Trajectory:
    """Integrate at fine_dt with the analytic forces and keep every obs_dt."""
    r = coarsen_ratio(fine_dt, obs_dt)
    qs, ps = rollout_arrays(analytic_forces(spec.system), s0.q, s0.p, spec.lam, fine_dt, n_obs * r, every=r)
    return Trajectory(qs, ps, obs_dt, spec.lam)


def fine_then_coarsen_batch(spec: SystemSpec, q0, p0, fine_dt: float, obs_dt: float, n_obs: int):
    """Batched variant: q0, p0 of shape (B, d); returns (n_obs+1, B, d) arrays."""
    r = coarsen_ratio(fine_dt, obs_dt)
    return rollout_arrays(analytic_forces(spec.system), q0, p0, spec.lam, fine_dt, n_obs * r, every=r)
