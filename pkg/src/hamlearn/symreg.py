"""Symbolic recovery from trained models.

Sequentially thresholded least squares over a polynomial library, used
two ways: on (q, p) -> (dK/dp, -dV/dq) pairs to recover equations of
motion, and on sampled (state, energy) pairs to fit K and V directly.
Regression targets come straight from the model gradients, never from
differencing trajectories.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .datagen import sample_initial_condition, stream
from .integrate import ForceProvider, rollout_arrays
from .model import AsrnnModel
from .systems import SystemSpec

log = logging.getLogger(__name__)


class ExtractionError(ValueError):
    pass


@dataclass(frozen=True)
class PolyLibrary:
    variables: tuple[str, ...]
    degree: int
    include_constant: bool = True

    @property
    def exponents(self) -> list[tuple[int, ...]]:
        """Graded order; within a degree, earlier variables carry higher powers first."""
        n = len(self.variables)
        out = []
        for deg in range(0 if self.include_constant else 1, self.degree + 1):
            for combo in itertools.combinations_with_replacement(range(n), deg):
                e = [0] * n
                for i in combo:
                    e[i] += 1
                out.append(tuple(e))
        return out

    @property
    def names(self) -> list[str]:
        return [monomial_name(self.variables, e) for e in self.exponents]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def to_dict(self) -> dict:
        return {"variables": list(self.variables), "degree": self.degree,
                "include_constant": self.include_constant, "terms": self.names}


def monomial_name(variables, exps) -> str:
    parts = []
    for v, k in zip(variables, exps):
        if k == 1:
            parts.append(v)
        elif k > 1:
            parts.append(f"{v}^{k}")
    return "*".join(parts) if parts else "1"


def build_design(x, lib: PolyLibrary) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != len(lib.variables):
        raise ValueError(f"library has {len(lib.variables)} variables, data has {x.shape[1]} columns")
    cols = []
    for e in lib.exponents:
        c = np.ones(len(x))
        for i, k in enumerate(e):
            if k:
                c = c * x[:, i] ** k
        cols.append(c)
    return np.stack(cols, axis=1)


@dataclass
class SparseFit:
    library: PolyLibrary
    targets: tuple[str, ...]
    coefficients: np.ndarray          # (n_terms, n_targets)
    threshold: float
    residual_rms: np.ndarray          # (n_targets,)
    extracted: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def coef(self, target: str, term: str) -> float:
        return float(self.coefficients[self.library.index(term), self.targets.index(target)])

    def support(self, target: str) -> set[str]:
        j = self.targets.index(target)
        return {n for n, c in zip(self.library.names, self.coefficients[:, j]) if c != 0.0}

    def equations(self, precision: int = 6) -> list[str]:
        out = []
        for j, t in enumerate(self.targets):
            terms = [f"{c:+.{precision}g} {n}" if n != "1" else f"{c:+.{precision}g}"
                     for n, c in zip(self.library.names, self.coefficients[:, j]) if c != 0.0]
            out.append(f"{t} = " + (" ".join(terms) if terms else "0"))
        return out

    def to_dict(self) -> dict:
        return {
            "library": self.library.to_dict(),
            "threshold": self.threshold,
            "targets": {t: {n: float(c) for n, c in zip(self.library.names, self.coefficients[:, j]) if c != 0.0}
                        for j, t in enumerate(self.targets)},
            "residual_rms": {t: float(r) for t, r in zip(self.targets, self.residual_rms)},
            "extracted": {k: float(v) for k, v in self.extracted.items()},
            "flags": list(self.flags),
            "equations": self.equations(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def _ridge(a: np.ndarray, y: np.ndarray, ridge: float):
    """Ridge solve; falls back to the minimum-norm solution on rank deficiency."""
    if a.shape[1] == 0:
        return np.zeros((0,) + y.shape[1:]), False
    gram = a.T @ a
    if ridge > 0:
        gram = gram + ridge * np.eye(a.shape[1])
    if np.linalg.matrix_rank(a) < a.shape[1]:
        return np.linalg.lstsq(a, y, rcond=None)[0], True
    return np.linalg.solve(gram, a.T @ y), False


def stlsq(design, targets, threshold: float = 0.05, ridge: float = 1e-8, max_iters: int = 20,
          keep=(), library: PolyLibrary | None = None, target_names=None) -> SparseFit:
    """Sequentially thresholded least squares, one target column at a time.

    Columns listed in `keep` are never thresholded.
    """
    a = np.asarray(design, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if a.shape[0] != y.shape[0]:
        raise ValueError("design and targets need the same number of rows")
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    n_terms = a.shape[1]
    keep = np.zeros(n_terms, dtype=bool) if not len(keep) else np.isin(np.arange(n_terms), keep)
    coefs = np.zeros((n_terms, y.shape[1]))
    flags = []
    for j in range(y.shape[1]):
        support = np.ones(n_terms, dtype=bool)
        c, deficient = _ridge(a, y[:, j], ridge)
        for _ in range(max_iters):
            new = ((np.abs(c) >= threshold) | keep) & support
            if np.array_equal(new, support):
                break
            support = new
            c = np.zeros(n_terms)
            c[support], deficient = _ridge(a[:, support], y[:, j], ridge)
        c[~support] = 0.0
        if deficient:
            flags.append(f"target {j}: rank-deficient support, minimum-norm solution")
        coefs[:, j] = c
    lib = library or PolyLibrary(tuple(f"x{i}" for i in range(n_terms)), 1, False)
    names = tuple(target_names) if target_names is not None else tuple(f"y{j}" for j in range(y.shape[1]))
    rms = np.sqrt(np.mean((a @ coefs - y) ** 2, axis=0))
    return SparseFit(lib, names, coefs, threshold, rms, {}, flags)


# -- state sampling --------------------------------------------------------

# Morse potential fits sample well below dissociation so that the degree-6
# truncation of the expansion about q = 1 stays accurate over the data.
SYMREG_EMAX = {"henon_heiles": 1.0 / 6.0, "morse": -0.7, "double_well": 1.0}


def sample_states(forces: ForceProvider, system: str, lam, n_traj: int, horizon: int, dt: float = 0.1,
                  seed: int = 0, e_max: float | None = None):
    """Pooled (q, p) states from trajectories at fixed lambda but varying energies."""
    spec = SystemSpec.from_lambda(system, lam)
    e_max = SYMREG_EMAX[system] if e_max is None else e_max
    starts = [sample_initial_condition(spec, e_max, stream(seed, 7, j)) for j in range(n_traj)]
    q0 = np.stack([s.q for s in starts])
    p0 = np.stack([s.p for s in starts])
    lam = np.asarray(lam, dtype=np.float64)
    qs, ps = [], []
    with np.errstate(all="ignore"):
        for j in range(n_traj):
            try:
                q, p = rollout_arrays(forces, q0[j], p0[j], lam, dt, horizon)
            except FloatingPointError:
                log.warning("trajectory %d diverged; dropped from the regression data", j)
                continue
            qs.append(q)
            ps.append(p)
    if not qs:
        raise ExtractionError("every sampled trajectory diverged")
    return np.concatenate(qs), np.concatenate(ps)


# -- equations of motion ---------------------------------------------------

HH_EOM_SUPPORT = {
    "dq1": {"p1"},
    "dq2": {"p2"},
    "dp1": {"q1", "q1*q2"},
    "dp2": {"q2", "q1^2", "q2^2"},
}


def recover_eom_from_forces(forces: ForceProvider, lam, n_traj: int = 20, horizon: int = 200,
                            degree: int = 3, threshold: float = 0.05, seed: int = 0, dt: float = 0.1,
                            ridge: float = 1e-8, e_max: float | None = None) -> SparseFit:
    """Henon-Heiles equations of motion from a force provider's own gradients."""
    q, p = sample_states(forces, "henon_heiles", lam, n_traj, horizon, dt, seed, e_max)
    lam_arr = np.asarray(lam, dtype=np.float64)
    targets = np.concatenate([forces.dKdp(p), -forces.dVdq(q, lam_arr)], axis=1)
    lib = PolyLibrary(("q1", "q2", "p1", "p2"), degree)
    fit = stlsq(build_design(np.concatenate([q, p], axis=1), lib), targets, threshold, ridge,
                library=lib, target_names=("dq1", "dq2", "dp1", "dp2"))
    for t, want in HH_EOM_SUPPORT.items():
        got = fit.support(t)
        if got != want:
            fit.flags.append(f"structure mismatch in {t}: expected {sorted(want)}, got {sorted(got)}")
    fit.extracted = {
        "alpha_hat": -fit.coef("dp1", "q1*q2") / 2.0,
        "alpha_hat_cross": -fit.coef("dp2", "q1^2"),
        "beta_hat": fit.coef("dp2", "q2^2"),
    }
    for msg in fit.flags:
        log.warning(msg)
    return fit


def recover_eom(m: AsrnnModel, lam, n_traj: int = 20, horizon: int = 200, degree: int = 3,
                threshold: float = 0.05, seed: int = 0, **kw) -> SparseFit:
    return recover_eom_from_forces(mdl.model_forces(m), lam, n_traj, horizon, degree, threshold, seed,
                                   m.dt, **kw)


# -- energy polynomials ----------------------------------------------------

def _position_variables(system: str, dim: int):
    if system == "morse":
        return ("qt",), np.array([1.0])   # qt = q - 1
    names = tuple(f"q{i + 1}" for i in range(dim))
    return names, np.zeros(dim)


def fit_energy_functions(kinetic, potential_fn, forces: ForceProvider, system: str, lam,
                         sample_count: int = 2000, degree: int = 6, threshold: float = 0.05,
                         seed: int = 0, n_traj: int = 40, horizon: int = 500, dt: float = 0.1,
                         k_degree: int | None = None, ridge: float = 1e-8, e_max: float | None = None):
    """Fit K(p) and V(q) on time-shuffled states; returns (fit_K, fit_V).

    The constant column is never thresholded; it absorbs the offset
    ambiguity of learned energies.
    """
    if degree < 2:
        raise ValueError("degree must be at least 2")
    q, p = sample_states(forces, system, lam, n_traj, horizon, dt, seed, e_max)
    ok = np.isfinite(q).all(axis=1) & np.isfinite(p).all(axis=1)
    q, p = q[ok], p[ok]
    if sample_count > len(q):
        raise ExtractionError(f"asked for {sample_count} samples, only {len(q)} states available")
    idx = stream(seed, 8).choice(len(q), size=sample_count, replace=False)
    q, p = q[idx], p[idx]
    d = q.shape[1]

    k_lib = PolyLibrary(tuple(f"p{i + 1}" for i in range(d)), k_degree or min(degree, 4))
    fit_k = stlsq(build_design(p, k_lib), kinetic(p), threshold, ridge, keep=[0],
                  library=k_lib, target_names=("K",))
    names, centre = _position_variables(system, d)
    v_lib = PolyLibrary(names, degree)
    fit_v = stlsq(build_design(q - centre, v_lib), potential_fn(q), threshold, ridge, keep=[0],
                  library=v_lib, target_names=("V",))
    if system == "morse":
        fit_v.extracted = {f"c{n}": fit_v.coef("V", monomial_name(names, (n,))) for n in range(degree + 1)}
        try:
            fit_v.extracted["alpha_hat"] = extract_morse_alpha(fit_v)
        except ExtractionError as exc:
            fit_v.flags.append(str(exc))
    return fit_k, fit_v


def fit_hamiltonian_polys(m: AsrnnModel, system: str, lam, sample_count: int = 2000, degree: int = 6,
                          threshold: float = 0.05, seed: int = 0, **kw):
    lam_arr = np.asarray(lam, dtype=np.float64)
    return fit_energy_functions(lambda p: mdl.learned_kinetic(m, p),
                                lambda q: mdl.learned_potential(m, q, lam_arr),
                                mdl.model_forces(m), system, lam, sample_count, degree, threshold, seed,
                                dt=m.dt, **kw)


def extract_morse_alpha(fit: SparseFit) -> float:
    """alpha_hat = sqrt(c2) from a fit in qt = q - 1."""
    var = fit.library.variables
    if len(var) != 1:
        raise ExtractionError("Morse extraction needs a one-variable library")
    name = monomial_name(var, (2,))
    if name not in fit.library.names:
        raise ExtractionError("library has no quadratic term")
    c2 = fit.coef(fit.targets[0], name)
    if c2 < 0:
        raise ExtractionError(f"negative quadratic coefficient {c2:.6g}; fit failed")
    return math.sqrt(c2)
