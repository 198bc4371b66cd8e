"""L-BFGS over scipy's strong-Wolfe line search, and a plain Adam for rescues.

Objectives are callables ``f(x) -> (value, gradient)`` on flat float64
vectors. A non-finite value (for instance a rollout that blew up) is
treated as +inf: the line search backs off instead of failing.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import line_search

log = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


class LineSearchFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class LbfgsConfig:
    history_size: int = 20
    max_line_search_evals: int = 25
    tolerance: float = 1e-12  # on the gradient infinity norm
    c1: float = 1e-4
    c2: float = 0.9


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    iterations: int
    n_evals: int
    status: str  # "converged" | "max_iter" | "line_search_failed" | "non_finite"
    history: list = field(default_factory=list)


def _safe_eval(fun: Objective, x):
    f, g = fun(x)
    f = float(f)
    if not math.isfinite(f) or not np.all(np.isfinite(g)):
        return math.inf, None
    return f, g


def strong_wolfe(fun: Objective, x, f0, g0, d, alpha0=1.0, c1=1e-4, c2=0.9, max_evals=25):
    """Return (alpha, f, g, n_evals) satisfying the strong Wolfe conditions.

    Wraps scipy's line search; alpha0 scales the direction so the first
    trial step is alpha0. Non-finite evaluations count as +inf, which the
    search treats as a failed sufficient-decrease test and backs off from.
    """
    if float(g0 @ d) >= 0:
        raise LineSearchFailure("not a descent direction")
    p = alpha0 * d
    cache = {}

    def evaluate(xv):
        key = xv.tobytes()
        if key not in cache:
            cache[key] = _safe_eval(fun, xv)
        return cache[key]

    def value(xv):
        return evaluate(xv)[0]

    def grad(xv):
        g = evaluate(xv)[1]
        return np.full_like(xv, np.nan) if g is None else g

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # failures surface as t is None
        t = line_search(value, grad, x, p, g0, f0, c1=c1, c2=c2, maxiter=max_evals)[0]
    if t is None:
        raise LineSearchFailure(f"no strong-Wolfe point after {len(cache)} evaluations")
    f, g = evaluate(x + t * p)
    if g is None:
        raise LineSearchFailure("line search ended on a non-finite point")
    return t * alpha0, f, g, len(cache)


def _two_loop(g, s_hist, y_hist, rho_hist):
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def lbfgs_minimize(fun: Objective, x0, cfg: LbfgsConfig = LbfgsConfig(), max_iter: int = 500,
                   callback: Callable | None = None) -> LbfgsResult:
    """Minimize fun from x0. callback(iteration, x, f) may return True to stop."""
    x = np.array(x0, dtype=np.float64)
    f, g = _safe_eval(fun, x)
    n_evals = 1
    if g is None:
        return LbfgsResult(x, math.inf, np.full_like(x, np.nan), 0, n_evals, "non_finite")
    s_hist, y_hist, rho_hist = [], [], []
    history = [f]
    status = "max_iter"
    it = 0
    while it < max_iter:
        if np.max(np.abs(g)) < cfg.tolerance:
            status = "converged"
            break
        d = _two_loop(g, s_hist, y_hist, rho_hist)
        if float(g @ d) >= 0:
            # stale curvature; restart from steepest descent
            s_hist, y_hist, rho_hist = [], [], []
            d = -g
        alpha0 = 1.0 if s_hist else min(1.0, 1.0 / np.sum(np.abs(g)))
        try:
            a, f_new, g_new, ne = strong_wolfe(fun, x, f, g, d, alpha0, cfg.c1, cfg.c2,
                                               cfg.max_line_search_evals)
        except LineSearchFailure as exc:
            log.debug("line search failed at iteration %d: %s", it, exc)
            status = "line_search_failed"
            break
        n_evals += ne
        s = a * d
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > cfg.history_size:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
        x, f, g = x + s, f_new, g_new
        it += 1
        history.append(f)
        if callback is not None and callback(it, x, f):
            status = "stopped"
            break
    else:
        if np.max(np.abs(g)) < cfg.tolerance:
            status = "converged"
    return LbfgsResult(x, f, g, it, n_evals, status, history)


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


def adam_minimize(fun: Objective, x0, cfg: AdamConfig = AdamConfig(), steps: int = 100):
    """Plain Adam; non-finite evaluations halve the learning rate and retry."""
    x = np.array(x0, dtype=np.float64)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    b1, b2 = cfg.betas
    lr = cfg.lr
    f = math.inf
    for t in range(1, steps + 1):
        f, g = _safe_eval(fun, x)
        if g is None:
            lr *= 0.5
            continue
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        x = x - lr * mh / (np.sqrt(vh) + cfg.eps)
    return x, f
