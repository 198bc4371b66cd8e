"""Prediction metrics: fractional energy error, learned-energy drift,
parameter-grid sweeps, noise-sweep summaries and learned potential curves.

The fractional error always uses the analytic Hamiltonian on both sides;
the learned energy carries an arbitrary additive constant and is only
compared after `align_offset`.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .datagen import sample_initial_condition, stream
from .integrate import Trajectory, rollout_arrays
from .model import AsrnnModel
from .systems import SystemSpec, hamiltonian_batch, potential


class UndefinedRatioError(ZeroDivisionError):
    pass


def fractional_energy_error(spec: SystemSpec, pred: Trajectory) -> np.ndarray:
    """|H(z0) - H(z_n)| / |H(z0)| along a predicted trajectory."""
    return energy_error_batch(spec, pred.q[:, None, :], pred.p[:, None, :])[:, 0]


def energy_error_batch(spec: SystemSpec, qs, ps) -> np.ndarray:
    """Same as fractional_energy_error for (T, B, d) batches; NaN rows stay NaN."""
    h = hamiltonian_batch(spec, qs, ps)
    h0 = h[0]
    if np.any(np.abs(h0[np.isfinite(h0)]) < 1e-12):
        raise UndefinedRatioError("initial energy is zero; fractional error undefined")
    return np.abs(h0 - h) / np.abs(h0)


@dataclass
class EnergyErrorSummary:
    lam: tuple
    eps: np.ndarray            # (n_trajectories, horizon+1), NaN where diverged
    horizon: int
    label: dict = field(default_factory=dict)

    @property
    def per_trajectory(self) -> np.ndarray:
        return np.nanmean(self.eps, axis=1) if self.eps.size else np.array([])

    @property
    def finite(self) -> np.ndarray:
        ok = np.isfinite(self.eps).all(axis=1)
        return self.eps[ok].mean(axis=1)

    @property
    def n_trajectories(self) -> int:
        return len(self.eps)

    @property
    def n_diverged(self) -> int:
        return int(np.sum(~np.isfinite(self.eps).all(axis=1)))

    def _pct(self, q):
        v = self.finite
        return float(100.0 * np.percentile(v, q)) if v.size else float("nan")

    @property
    def mean(self):
        v = self.finite
        return float(100.0 * v.mean()) if v.size else float("nan")

    @property
    def median(self):
        return self._pct(50)

    @property
    def p25(self):
        return self._pct(25)

    @property
    def p75(self):
        return self._pct(75)


def fixed_energy_states(spec: SystemSpec, energy: float, n: int, seed: int, key: int = 0):
    qs, ps = [], []
    for j in range(n):
        s = sample_initial_condition(spec, max(energy, 0.0) + 10.0, stream(seed, key, j, 3), target_energy=energy)
        qs.append(s.q)
        ps.append(s.p)
    return np.stack(qs), np.stack(ps)


def _predict(member, q0, p0, lam, horizon: int, dt: float, substeps: int = 100):
    """Batch rollout for a trained model or, as an oracle, a force provider.

    Force providers are integrated at dt/substeps and sampled every dt, the
    same way ground-truth data are generated.
    """
    if isinstance(member, AsrnnModel):
        return mdl.predict_batch(member, q0, p0, lam, horizon)
    return rollout_arrays(member, q0, p0, lam, dt / substeps, horizon * substeps, every=substeps)


def ensemble_energy_errors(ensemble, spec: SystemSpec, energy: float, n_traj: int, horizon: int,
                           seed: int, key: int = 0, dt: float = 0.1) -> EnergyErrorSummary:
    """Energy error of every (member, initial condition) pair at one parameter point.

    Members are trained models or force providers (dt applies to the latter).
    """
    q0, p0 = fixed_energy_states(spec, energy, n_traj, seed, key)
    rows = []
    for m in ensemble:
        qs, ps = _predict(m, q0, p0, spec.lam, horizon, dt)
        with np.errstate(all="ignore"):
            rows.append(energy_error_batch(spec, qs, ps).T)
    return EnergyErrorSummary(tuple(spec.lam), np.concatenate(rows), horizon)


def learned_energy_drift(m: AsrnnModel, pred: Trajectory):
    """(H_theta series, std, max - min) along a predicted trajectory."""
    h = mdl.learned_hamiltonian(m, pred.q, pred.p, pred.lam)
    return h, float(np.std(h)), float(np.max(h) - np.min(h))


def learned_energy_std(m: AsrnnModel, qs, ps, lam) -> np.ndarray:
    """Per-trajectory std of H_theta for (T, B, d) predictions."""
    T, B, d = qs.shape
    h = mdl.learned_hamiltonian(m, qs.reshape(-1, d), ps.reshape(-1, d), lam).reshape(T, B)
    return np.std(h, axis=0)


@dataclass
class SweepGrid:
    alphas: np.ndarray
    betas: np.ndarray
    values: np.ndarray           # (n_alpha, n_beta) mean percent error
    n_diverged: np.ndarray       # (n_alpha, n_beta)
    training: set = field(default_factory=set)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "beta", "mean_pct_err", "n_diverged", "in_training_set"])
        for i, a in enumerate(self.alphas):
            for j, b in enumerate(self.betas):
                w.writerow(["%.17g" % a, "%.17g" % b, "%.17g" % self.values[i, j], int(self.n_diverged[i, j]),
                            int((round(a, 9), round(b, 9)) in self.training)])
        return buf.getvalue()

    def mean_over(self, lo: float, hi: float) -> float:
        ia = (self.alphas >= lo - 1e-9) & (self.alphas <= hi + 1e-9)
        ib = (self.betas >= lo - 1e-9) & (self.betas <= hi + 1e-9)
        return float(np.nanmean(self.values[np.ix_(ia, ib)]))


def parameter_sweep(ensemble, alphas, betas, energy: float = 0.125, n_traj: int = 40, horizon: int = 500,
                    seed: int = 0, training=()) -> SweepGrid:
    """Mean percent energy error over an (alpha, beta) grid of Henon-Heiles systems."""
    alphas = np.asarray(alphas, dtype=np.float64)
    betas = np.asarray(betas, dtype=np.float64)
    if alphas.size == 0 or betas.size == 0:
        raise ValueError("sweep grid is empty")
    vals = np.full((alphas.size, betas.size), np.nan)
    ndiv = np.zeros((alphas.size, betas.size), dtype=int)
    for i, a in enumerate(alphas):
        for j, b in enumerate(betas):
            summ = ensemble_energy_errors(ensemble, SystemSpec("henon_heiles", float(a), float(b)), energy,
                                          n_traj, horizon, seed, key=i * betas.size + j)
            vals[i, j] = summ.mean
            ndiv[i, j] = summ.n_diverged
    marks = {(round(float(a), 9), round(float(b), 9)) for a, b in training}
    return SweepGrid(alphas, betas, vals, ndiv, marks)


def noise_sweep_summary(conditions: dict, system: str, lam_eval, energy: float, n_traj: int = 40,
                        horizon: int = 500, seed: int = 0) -> list[EnergyErrorSummary]:
    """One summary per noise condition; conditions maps (nsr, tau) -> ensemble."""
    spec = SystemSpec.from_lambda(system, lam_eval)
    out = []
    for (nsr, tau), ensemble in conditions.items():
        s = ensemble_energy_errors(ensemble, spec, energy, n_traj, horizon, seed)
        s.label = {"nsr": nsr, "tau": tau}
        out.append(s)
    return out


def noise_sweep_csv(rows: list[EnergyErrorSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["nsr", "tau", "median", "p25", "p75", "mean", "n_trajectories", "n_diverged"])
    for r in rows:
        w.writerow(["%.17g" % r.label.get("nsr", 0.0), "%.17g" % r.label.get("tau", 0.0), "%.17g" % r.median,
                    "%.17g" % r.p25, "%.17g" % r.p75, "%.17g" % r.mean, r.n_trajectories, r.n_diverged])
    return buf.getvalue()


def align_offset(learned, reference):
    """Constant shift minimizing the squared gap; returns (offset, residuals)."""
    learned = np.asarray(learned, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if learned.shape != reference.shape or learned.size == 0:
        raise ValueError("learned and reference curves must be non-empty and equally long")
    offset = float(np.mean(reference - learned))
    return offset, learned + offset - reference


def count_local_minima(values) -> int:
    """Strict interior local minima of a sampled curve."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 3:
        return 0
    return int(np.sum((v[1:-1] < v[:-2]) & (v[1:-1] < v[2:])))


@dataclass
class CurveReport:
    member: int
    alpha: float
    q: np.ndarray
    learned: np.ndarray   # offset-aligned
    analytic: np.ndarray
    max_residual: float
    minima_learned: int
    minima_analytic: int


def double_well_diagnostic(ensemble, alphas, q_grid) -> list[CurveReport]:
    q = np.asarray(q_grid, dtype=np.float64)
    out = []
    for i, m in enumerate(ensemble):
        for a in alphas:
            spec = SystemSpec("double_well", float(a))
            true = potential(spec, q[:, None])
            raw = mdl.learned_potential_curve(m, q, spec.lam)
            off, res = align_offset(raw, true)
            out.append(CurveReport(i, float(a), q, raw + off, true, float(np.max(np.abs(res))),
                                   count_local_minima(raw), count_local_minima(true)))
    return out


def curves_csv(reports: list[CurveReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["member", "alpha", "max_aligned_residual", "minima_learned", "minima_analytic"])
    for r in reports:
        w.writerow([r.member, "%.17g" % r.alpha, "%.17g" % r.max_residual, r.minima_learned, r.minima_analytic])
    return buf.getvalue()
