"""Monte-Carlo checks of the noise analysis.

Every check compares an empirical quantity with its prediction in units
of the empirical standard error. Standard errors come from batch means:
trials are split into `n_batches` equal batches, each reduced to one
mean gradient in a single tape pass.

Noise draws are antithetic by default: each batch holds the draws
(eta0, xi) and (-eta0, -xi). The noise law is symmetric so expectations
are unchanged, while the first-order noise response cancels exactly,
which is what makes sigma^2 effects resolvable at 1e6 trials.

Comparisons that differ only in one ingredient (correlated vs
independent target noise, target noise on vs off) reuse the same
normal draws, so their difference carries no input-noise scatter.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Callable

import numpy as np

from . import model as mdl
from .autodiff import Tape
from .datagen import OuNoiseConfig, stream
from .model import AsrnnModel, TapeModel

GradFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class McGradEstimate:
    mean: np.ndarray
    se: np.ndarray
    trials: int
    condition: dict = field(default_factory=dict)
    batches: np.ndarray | None = field(default=None, repr=False)  # (n_batches, n_params)

    def __post_init__(self):
        if self.trials < 2:
            raise ValueError("at least two trials are needed")

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "se": self.se.tolist(), "trials": self.trials,
                "condition": dict(self.condition)}


@dataclass
class ScalingFit:
    slope: float
    intercept: float
    residuals: np.ndarray
    inconclusive: bool
    rows: list[dict]


def table_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = list(rows[0])
    w.writerow(cols)
    for r in rows:
        w.writerow([("%.17g" % r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    return buf.getvalue()


# -- finite-difference variance law ---------------------------------------

def fd_variance_predicted(sigma: float, tau: float, ds: float) -> float:
    return 2.0 * sigma ** 2 / ds ** 2 * (1.0 - math.exp(-ds / tau))


def fd_variance_check(cfg: OuNoiseConfig, ds_list, trials: int = 100_000, seed: int = 0) -> list[dict]:
    """Variance of the forward difference of stationary OU noise, per ds."""
    if cfg.sigma_inf is None:
        raise ValueError("noise amplitude must be resolved to sigma_inf")
    sigma, tau = cfg.sigma_inf, cfg.tau
    rows = []
    for i, ds in enumerate(ds_list):
        if not ds > 0:
            raise ValueError("ds must be positive")
        rng = stream(seed, 11, i)
        a = math.exp(-ds / tau)
        e1 = sigma * rng.standard_normal(trials)
        e2 = a * e1 + math.sqrt(1.0 - a * a) * sigma * rng.standard_normal(trials)
        d = (e2 - e1) / ds
        var = float(np.var(d, ddof=1))
        m4 = float(np.mean((d - d.mean()) ** 4))
        se = math.sqrt(max(m4 - var * var, 0.0) / trials)
        pred = fd_variance_predicted(sigma, tau, ds)
        z = (var - pred) / se if se > 0 else (0.0 if var == pred else math.inf)
        rows.append({"ds": float(ds), "empirical_var": var, "predicted_var": pred, "std_error": se,
                     "z_score": float(z)})
    return rows


# -- generic Monte-Carlo gradient -------------------------------------------

def mc_gradient(grad_fn: GradFn, dim: int, sigma: float, a_n: float, trials: int, seed: int,
                n_batches: int = 100, correlated: bool = True, antithetic: bool = True,
                shared: bool = False, condition: dict | None = None) -> McGradEstimate:
    """Average grad_fn(eta0, eta_n) over Gaussian noise draws.

    eta0 ~ N(0, sigma^2 I); eta_n | eta0 ~ N(a_n eta0, sigma^2 (1 - a_n^2) I)
    when correlated, else an independent N(0, sigma^2 I). With shared=True
    one scalar stream is copied to every coordinate. grad_fn receives
    (rows, dim) arrays and returns the mean gradient over its rows.
    """
    if trials < 2:
        raise ValueError("at least two trials are needed")
    if trials < 4:
        antithetic = False
    per = 2 if antithetic else 1
    n_batches = max(2, min(n_batches, trials // per))
    size = trials // n_batches
    size -= size % per
    width = 1 if shared else dim
    c = math.sqrt(max(1.0 - a_n * a_n, 0.0)) if correlated else 1.0
    a_eff = a_n if correlated else 0.0
    out = []
    for b in range(n_batches):
        rng = stream(seed, 13, b)
        half = size // per
        x0 = rng.standard_normal((half, width))
        x1 = rng.standard_normal((half, width))
        if antithetic:
            x0 = np.concatenate([x0, -x0])
            x1 = np.concatenate([x1, -x1])
        eta0 = sigma * x0
        eta_n = a_eff * eta0 + c * sigma * x1
        if shared:
            eta0 = np.repeat(eta0, dim, axis=1)
            eta_n = np.repeat(eta_n, dim, axis=1)
        out.append(grad_fn(eta0, eta_n))
    batches = np.stack(out)
    mean = batches.mean(axis=0)
    se = batches.std(axis=0, ddof=1) / math.sqrt(n_batches)
    cond = dict(condition or {})
    cond.update({"sigma_inf": sigma, "a_n": a_n, "correlated": correlated, "shared": shared})
    return McGradEstimate(mean, se, size * n_batches, cond, batches)


# -- ASRNN pieces -----------------------------------------------------------

def _rows(z, n):
    return np.broadcast_to(np.asarray(z, dtype=np.float64), (n, np.size(z))).copy()


def asrnn_grad_fn(m: AsrnnModel, z0, z_n, lam, n_steps: int) -> GradFn:
    """Mean over rows of grad ||z_hat_N(z0 + eta0) - z_N - eta_N||^2."""
    def fn(eta0, eta_n):
        r = len(eta0)
        batch = SimpleNamespace(z0=_rows(z0, r) + eta0, z_obs=_rows(z_n, r) + eta_n,
                                k=np.full(r, n_steps, dtype=np.int64), lam=_rows(lam, r))
        return mdl.asrnn_loss_and_grad(m, batch)[1]
    return fn


def noise_free_gradient(m: AsrnnModel, z0, z_n, lam, n_steps: int) -> np.ndarray:
    d = len(np.atleast_1d(z0))
    return asrnn_grad_fn(m, z0, z_n, lam, n_steps)(np.zeros((1, d)), np.zeros((1, d)))


def _resolved_sigma(cfg: OuNoiseConfig) -> float:
    if cfg.sigma_inf is None:
        raise ValueError("noise amplitude must be resolved to sigma_inf")
    return cfg.sigma_inf


def expected_gradient_mc(m: AsrnnModel, z0, z_n, lam, n_steps: int, cfg: OuNoiseConfig, trials: int,
                         seed: int = 0, correlated: bool = True, n_batches: int = 100,
                         antithetic: bool = True) -> McGradEstimate:
    sigma = _resolved_sigma(cfg)
    a_n = math.exp(-n_steps * m.dt / cfg.tau)
    cond = {"tau": cfg.tau, "n_steps": n_steps, "dt": m.dt}
    if sigma == 0.0:
        g0 = noise_free_gradient(m, z0, z_n, lam, n_steps)
        return McGradEstimate(g0, np.zeros_like(g0), trials, {**cond, "sigma_inf": 0.0, "a_n": a_n})
    return mc_gradient(asrnn_grad_fn(m, z0, z_n, lam, n_steps), len(np.atleast_1d(z0)), sigma, a_n,
                       trials, seed, n_batches, correlated, antithetic, condition=cond)


def _norm_with_se(batches: np.ndarray, ref: np.ndarray):
    """Norm of the batch-mean deviation and its delta-method standard error."""
    dev = batches - ref
    mean = dev.mean(axis=0)
    b = float(np.linalg.norm(mean))
    if b == 0.0:
        return 0.0, 0.0
    proj = dev @ (mean / b)
    return b, float(proj.std(ddof=1) / math.sqrt(len(proj)))


def bias_scaling_fit(m: AsrnnModel, z0, z_n, lam, n_steps: int, tau: float, sigma_list, trials: int,
                     seed: int = 0, n_batches: int = 100) -> ScalingFit:
    """Slope of log ||E[grad] - grad_0|| against log sigma.

    All sigmas share one set of normal draws, so the slope is not
    blurred by independent Monte-Carlo scatter between points.
    """
    g0 = noise_free_gradient(m, z0, z_n, lam, n_steps)
    rows = []
    for s in sigma_list:
        est = expected_gradient_mc(m, z0, z_n, lam, n_steps, OuNoiseConfig(tau, sigma_inf=float(s)),
                                   trials, seed, n_batches=n_batches)
        if est.batches is None:
            b, se = 0.0, 0.0
        else:
            b, se = _norm_with_se(est.batches, g0)
        rows.append({"sigma": float(s), "bias_norm": b, "std_error": se,
                     "z_score": b / se if se > 0 else 0.0})
    b = np.array([r["bias_norm"] for r in rows])
    se = np.array([r["std_error"] for r in rows])
    inconclusive = bool(np.all(b <= 2.0 * se)) or np.any(b <= 0)
    if inconclusive:
        return ScalingFit(math.nan, math.nan, np.full(len(rows), math.nan), True, rows)
    x = np.log(np.asarray(sigma_list, dtype=np.float64))
    y = np.log(b)
    slope, intercept = np.polyfit(x, y, 1)
    res = y - (slope * x + intercept)
    for r, v in zip(rows, res):
        r["fit_residual"] = float(v)
    return ScalingFit(float(slope), float(intercept), res, False, rows)


def output_param_gradient(m: AsrnnModel, z0, lam, n_steps: int, j: int) -> np.ndarray:
    """d z_hat_N[j] / d theta at a single start state."""
    d = m.dim
    z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    tm = TapeModel(Tape(), m)
    t = tm.tape
    q, p = tm.rollout(t.const(z0[:, :d]), t.const(z0[:, d:]), t.const(_rows(lam, 1)), n_steps)
    out = t.sum(t.cols(t.concat_cols(q, p), j, j + 1))
    return tm.grads(out)


def divergence_param_gradient(m: AsrnnModel, z0, lam, n_steps: int, h: float = 1e-4) -> np.ndarray:
    """grad_theta of the Jacobian trace of the N-step map, by central differences in z."""
    z0 = np.asarray(z0, dtype=np.float64)
    total = 0.0
    for j in range(z0.size):
        e = np.zeros_like(z0)
        e[j] = h
        total = total + (output_param_gradient(m, z0 + e, lam, n_steps, j)
                         - output_param_gradient(m, z0 - e, lam, n_steps, j)) / (2.0 * h)
    return total


def _fit_log_linear(x, y, w=None):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1, w=w)
    return float(slope), float(intercept), y - (slope * x + intercept)


def correlation_decay_check(m: AsrnnModel, z0, z_n, lam, n_list, tau: float, sigma: float, trials: int,
                            seed: int = 0, n_batches: int = 100) -> ScalingFit:
    """Correlated-minus-independent gradient gap against a^N.

    The gap is projected onto D_N = grad_theta(div z_hat_N) and divided by
    -2 sigma^2 |D_N|^2, which estimates a^N. The fitted slope of log a^N
    against N is reported as a per-step decay rate (ScalingFit.slope holds
    minus that slope) and compared with dt / tau.
    """
    rows = []
    for n in n_list:
        a_n = math.exp(-n * m.dt / tau)
        fn = asrnn_grad_fn(m, z0, z_n, lam, n)
        cond = {"tau": tau, "n_steps": n, "dt": m.dt}
        corr = mc_gradient(fn, len(z0), sigma, a_n, trials, seed, n_batches, True, condition=cond)
        ind = mc_gradient(fn, len(z0), sigma, a_n, trials, seed, n_batches, False, condition=cond)
        gap_b = corr.batches - ind.batches
        gap = gap_b.mean(axis=0)
        dvec = divergence_param_gradient(m, z0, lam, n)
        scale = -2.0 * sigma ** 2 * float(dvec @ dvec)
        r_b = gap_b @ dvec / scale if scale != 0 else np.zeros(len(gap_b))
        r = float(r_b.mean())
        se = float(r_b.std(ddof=1) / math.sqrt(len(r_b)))
        gnorm, gse = _norm_with_se(gap_b, 0.0)
        rows.append({"n_steps": int(n), "gap_norm": gnorm, "gap_norm_se": gse, "a_n_estimate": r,
                     "a_n_se": se, "a_n_predicted": a_n,
                     "z_score": (r - a_n) / se if se > 0 else (0.0 if r == a_n else math.inf)})
    r = np.array([row["a_n_estimate"] for row in rows])
    se = np.array([row["a_n_se"] for row in rows])
    if np.all(np.abs(r) <= 2.0 * se) or np.any(r <= 0):
        return ScalingFit(math.nan, math.nan, np.full(len(rows), math.nan), True, rows)
    # weights 1/se of log r ~ r/se
    slope, intercept, res = _fit_log_linear([row["n_steps"] for row in rows], np.log(r), w=r / se)
    for row, v in zip(rows, res):
        row["fit_residual"] = float(v)
    return ScalingFit(-slope, intercept, res, False, rows)


# -- derivative-matching baseline ------------------------------------------

def ahnn_grad_fn(m: AsrnnModel, z0, v, lam, ds: float, target_noise: bool = True) -> GradFn:
    """Mean gradient of the forward-difference residual loss.

    With target_noise=False the target velocity is left clean while the
    input still carries eta0; differencing the two isolates the part of
    the bias coming from noise in the difference quotient.
    """
    def fn(eta0, eta_n):
        r = len(eta0)
        z_t = _rows(z0, r) + eta0
        clean_next = _rows(z0, r) + ds * _rows(v, r)
        z_next = clean_next + eta_n if target_noise else clean_next + eta0
        return mdl.ahnn_fd_loss_and_grad(m, z_t, z_next, lam, ds)[1]
    return fn


def _vector_field_param_gradient(m: AsrnnModel, z0, lam, u) -> np.ndarray:
    """grad_theta of u . f(z0) with f = (dK/dp, -dV/dq)."""
    d = m.dim
    z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    tm = TapeModel(Tape(), m)
    t = tm.tape
    fq = tm.dkdp(t.const(z0[:, d:]))
    fp = t.scale(tm.dvdq(t.const(z0[:, :d]), t.const(_rows(lam, 1))), -1.0)
    out = t.sum(t.mul(t.concat_cols(fq, fp), t.const(np.asarray(u, dtype=np.float64)[None, :])))
    return tm.grads(out)


def vector_field_divergence_gradient(m: AsrnnModel, z0, lam, shared: bool = False, h: float = 1e-4):
    """grad_theta of u^T J_f u summed over the noise directions u.

    Independent coordinates use u = e_j (the trace, i.e. the divergence,
    which vanishes for any Hamiltonian field); shared noise uses u = 1.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    dirs = [np.ones_like(z0)] if shared else list(np.eye(z0.size))
    total = 0.0
    for u in dirs:
        total = total + (_vector_field_param_gradient(m, z0 + h * u, lam, u)
                         - _vector_field_param_gradient(m, z0 - h * u, lam, u)) / (2.0 * h)
    return total


def ahnn_coefficient(ds: float, tau: float, sigma: float) -> float:
    return 2.0 * (1.0 - math.exp(-ds / tau)) * sigma ** 2 / ds


def ahnn_bias_scaling(m: AsrnnModel, z0, v, lam, ds_list, tau: float, sigma: float, trials: int,
                      seed: int = 0, n_batches: int = 100, shared: bool = False) -> ScalingFit:
    """Target-noise part of the expected baseline gradient across ds.

    The clean velocity v is held fixed (z_next = z0 + v ds) so the noise-free
    loss is the same at every ds. The gap is projected onto the unit vector
    along grad_theta(1^T J_f 1); `coef_predicted` is the theory coefficient
    times the projection of its own direction (zero for independent noise).
    ScalingFit.slope is the slope of log|gap| against log ds over the
    points with ds >= 4 tau (the 1/ds regime, slope -1).
    """
    d_shared = vector_field_divergence_gradient(m, z0, lam, shared=True)
    unit = d_shared / np.linalg.norm(d_shared)
    d_own = d_shared if shared else vector_field_divergence_gradient(m, z0, lam, shared=False)
    along = float(d_own @ unit)
    rows, proj = [], []
    for ds in ds_list:
        a = math.exp(-ds / tau)
        cond = {"tau": tau, "ds": ds}
        full = mc_gradient(ahnn_grad_fn(m, z0, v, lam, ds, True), len(z0), sigma, a, trials, seed,
                           n_batches, True, shared=shared, condition=cond)
        clean = mc_gradient(ahnn_grad_fn(m, z0, v, lam, ds, False), len(z0), sigma, a, trials, seed,
                            n_batches, True, shared=shared, condition=cond)
        g_b = (full.batches - clean.batches) @ unit
        proj.append(g_b)
        c = float(g_b.mean())
        se = float(g_b.std(ddof=1) / math.sqrt(len(g_b)))
        pred = ahnn_coefficient(ds, tau, sigma) * along
        rows.append({"ds": float(ds), "gap_projected": c, "std_error": se, "coef_predicted": pred,
                     "z_score": (c - pred) / se if se > 0 else 0.0})
    # ratios between consecutive ds, delta method with paired batches
    for i in range(len(rows) - 1):
        a_b, b_b = proj[i], proj[i + 1]
        A, B = a_b.mean(), b_b.mean()
        nb = len(a_b)
        ratio = A / B if B != 0 else math.inf
        cov = np.cov(a_b, b_b, ddof=1) / nb
        var = ratio ** 2 * (cov[0, 0] / A ** 2 + cov[1, 1] / B ** 2 - 2 * cov[0, 1] / (A * B)) \
            if A != 0 and B != 0 else math.inf
        rse = math.sqrt(max(var, 0.0))
        d1, d2 = rows[i]["ds"], rows[i + 1]["ds"]
        c2 = ahnn_coefficient(d2, tau, sigma)
        pred = ahnn_coefficient(d1, tau, sigma) / c2 if c2 != 0 else math.nan
        rows[i].update({"ratio_to_next": float(ratio), "ratio_se": rse, "ratio_predicted": pred,
                        "ratio_z": (ratio - pred) / rse if rse > 0 else math.inf})
    rows[-1].update({"ratio_to_next": math.nan, "ratio_se": math.nan, "ratio_predicted": math.nan,
                     "ratio_z": math.nan})
    c = np.array([r["gap_projected"] for r in rows])
    se = np.array([r["std_error"] for r in rows])
    if np.all(np.abs(c) <= 2.0 * se):
        return ScalingFit(math.nan, math.nan, np.full(len(rows), math.nan), True, rows)
    ds = np.array([r["ds"] for r in rows])
    big = (ds >= 4.0 * tau) & (np.abs(c) > 0)
    if big.sum() >= 2:
        slope, intercept, res = _fit_log_linear(np.log(ds[big]), np.log(np.abs(c[big])))
    else:
        slope, intercept, res = math.nan, math.nan, np.array([])
    return ScalingFit(slope, intercept, res, False, rows)


def tiny_model(seed: int = 0, dt: float = 0.1) -> AsrnnModel:
    """K {1,5,1} and V {2,5,1}: one coordinate, one parameter channel."""
    return mdl.build(1, 1, (5,), dt, seed)
