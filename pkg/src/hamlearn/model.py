"""The adaptable symplectic recurrent network.

A model is two scalar MLPs, K(p) and V(q; lambda), whose input gradients
drive a kick-drift-kick Verlet step. Training rolls that step out on the
tape so the trajectory-matching loss can be differentiated through every
recurrent step.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import MlpNodes, MlpParams, MlpSpec, Tape
from .integrate import ForceProvider, IntegrationBlowup, Trajectory, rollout_arrays
from .systems import PhaseState


@dataclass(frozen=True)
class AsrnnModel:
    k_params: MlpParams
    v_params: MlpParams
    dt: float = 0.1
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def dim(self) -> int:
        return self.k_params.spec.input_dim

    @property
    def n_lambda(self) -> int:
        return self.v_params.spec.input_dim - self.dim

    @property
    def n_params(self) -> int:
        return self.k_params.spec.n_params + self.v_params.spec.n_params

    def flat(self) -> np.ndarray:
        return np.concatenate([self.k_params.flat(), self.v_params.flat()])

    def with_flat(self, theta: np.ndarray) -> "AsrnnModel":
        nk = self.k_params.spec.n_params
        return AsrnnModel(
            MlpParams.from_flat(self.k_params.spec, theta[:nk], self.k_params.seed),
            MlpParams.from_flat(self.v_params.spec, theta[nk:], self.v_params.seed),
            self.dt, self.metadata,
        )

    def to_dict(self) -> dict:
        return {"k": self.k_params.to_dict(), "v": self.v_params.to_dict(), "dt": self.dt,
                "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d: dict) -> "AsrnnModel":
        return cls(MlpParams.from_dict(d["k"]), MlpParams.from_dict(d["v"]), float(d["dt"]),
                   d.get("metadata", {}))

    def save(self, path) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        Path(path).write_text(text)
        return hashlib.sha256(text.encode()).hexdigest()

    @classmethod
    def load(cls, path) -> "AsrnnModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build(dim: int, n_lambda: int, hidden=(30, 30, 30), dt: float = 0.1, seed: int = 0,
          k_hidden=None) -> AsrnnModel:
    k_hidden = hidden if k_hidden is None else k_hidden
    k_spec = MlpSpec((dim, *k_hidden, 1))
    v_spec = MlpSpec((dim + n_lambda, *hidden, 1))
    ss = np.random.SeedSequence(seed).spawn(2)
    k_seed, v_seed = (int(s.generate_state(1)[0]) for s in ss)
    return AsrnnModel(ad.init_gaussian(k_spec, k_seed), ad.init_gaussian(v_spec, v_seed), dt,
                      {"seed": seed})


def zero_model(dim: int, n_lambda: int, hidden=(5,), dt: float = 0.1) -> AsrnnModel:
    return AsrnnModel(ad.zeros(MlpSpec((dim, *hidden, 1))), ad.zeros(MlpSpec((dim + n_lambda, *hidden, 1))), dt)


# -- plain numpy evaluation ------------------------------------------------


def _lam_rows(lam, n: int) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 1:
        return np.broadcast_to(lam, (n, lam.size))
    return lam


def model_forces(m: AsrnnModel) -> ForceProvider:
    """Learned dV/dq (lambda channels dropped from the gradient) and dK/dp."""
    d = m.dim

    def dv(q, lam):
        q2 = np.atleast_2d(q)
        x = np.concatenate([q2, _lam_rows(lam, len(q2))], axis=1)
        g = ad.mlp_input_gradient(m.v_params.spec, m.v_params, x)[:, :d]
        return g[0] if np.ndim(q) == 1 else g

    def dk(p):
        return ad.mlp_input_gradient(m.k_params.spec, m.k_params, p)

    return ForceProvider(dv, dk)


def predict(m: AsrnnModel, z0: PhaseState, lam, n: int) -> Trajectory:
    qs, ps = rollout_arrays(model_forces(m), z0.q, z0.p, lam, m.dt, n)
    return Trajectory(qs, ps, m.dt, np.asarray(lam, dtype=np.float64))


def predict_batch(m: AsrnnModel, q0, p0, lam, n: int, stop_on_blowup: bool = False):
    """Roll out a batch of initial states; returns (n+1, B, d) arrays.

    With stop_on_blowup=False, rows that go non-finite are frozen at NaN
    instead of aborting the whole batch.
    """
    f = model_forces(m)
    if stop_on_blowup:
        return rollout_arrays(f, q0, p0, lam, m.dt, n)
    q = np.array(q0, dtype=np.float64)
    p = np.array(p0, dtype=np.float64)
    lam = _lam_rows(lam, len(q)).copy()
    qs, ps = [q.copy()], [p.copy()]
    fq = f.dVdq(q, lam)
    with np.errstate(all="ignore"):
        for _ in range(n):
            p_half = p - 0.5 * m.dt * fq
            q = q + m.dt * f.dKdp(p_half)
            fq = f.dVdq(q, lam)
            p = p_half - 0.5 * m.dt * fq
            bad = ~(np.isfinite(q).all(axis=1) & np.isfinite(p).all(axis=1))
            if bad.any():
                q[bad] = np.nan
                p[bad] = np.nan
                fq[bad] = 0.0
            qs.append(q.copy())
            ps.append(p.copy())
    return np.stack(qs), np.stack(ps)


def learned_kinetic(m: AsrnnModel, p) -> np.ndarray:
    return ad.mlp_eval(m.k_params.spec, m.k_params, np.atleast_2d(p))


def learned_potential(m: AsrnnModel, q, lam) -> np.ndarray:
    q = np.atleast_2d(q)
    x = np.concatenate([q, _lam_rows(lam, len(q))], axis=1)
    return ad.mlp_eval(m.v_params.spec, m.v_params, x)


def learned_hamiltonian(m: AsrnnModel, q, p, lam) -> np.ndarray:
    return learned_kinetic(m, p) + learned_potential(m, q, lam)


def learned_potential_curve(m: AsrnnModel, q_grid, lam) -> np.ndarray:
    q = np.asarray(q_grid, dtype=np.float64)
    if q.ndim == 1:
        q = q.reshape(-1, m.dim) if m.dim > 1 and q.size == m.dim else q.reshape(-1, 1)
    return learned_potential(m, q, lam)


# -- on-tape rollout -------------------------------------------------------


class TapeModel:
    """Both networks registered on one tape."""

    def __init__(self, tape: Tape, m: AsrnnModel, trainable: bool = True):
        self.tape = tape
        self.m = m
        self.k = MlpNodes(tape, m.k_params, trainable)
        self.v = MlpNodes(tape, m.v_params, trainable)

    def dvdq(self, q, lam):
        t = self.tape
        g = ad.input_gradient_on_tape(t, self.v, t.concat_cols(q, lam))
        return t.cols(g, 0, self.m.dim)

    def dkdp(self, p):
        return ad.input_gradient_on_tape(self.tape, self.k, p)

    def step(self, q, p, lam, fq=None):
        t, h = self.tape, self.m.dt
        if fq is None:
            fq = self.dvdq(q, lam)
        p_half = t.axpy(-0.5 * h, fq, p)
        q_new = t.axpy(h, self.dkdp(p_half), q)
        fq_new = self.dvdq(q_new, lam)
        p_new = t.axpy(-0.5 * h, fq_new, p_half)
        return q_new, p_new, fq_new

    def rollout(self, q, p, lam, n: int):
        """Final (q, p) nodes after n steps."""
        fq = None
        for _ in range(n):
            q, p, fq = self.step(q, p, lam, fq)
        return q, p

    def grads(self, out) -> np.ndarray:
        gk, gv = ad.grad_params(self.tape, out, [self.k, self.v])
        return np.concatenate([gk.flat(), gv.flat()])


def _check_finite(node, step):
    if not np.all(np.isfinite(node.value)):
        raise IntegrationBlowup(step)


def _loss_nodes(tm: TapeModel, z0, z_obs, k, lam, squared: bool = True):
    t = tm.tape
    d = tm.m.dim
    k = np.asarray(k, dtype=np.int64)
    order = np.argsort(-k, kind="stable")
    z0, z_obs, k, lam = z0[order], z_obs[order], k[order], np.asarray(lam)[order]
    n_total = len(k)
    # active[n] = number of samples still rolling at step n (k sorted descending)
    counts = [int(np.sum(k >= n)) for n in range(int(k.max()) + 2)]
    q = t.const(z0[:, :d])
    p = t.const(z0[:, d:])
    lam_all = lam
    fq = None
    terms = []
    for n in range(1, int(k.max()) + 1):
        c = counts[n]
        if c < q.value.shape[0]:
            q, p = t.rows(q, 0, c), t.rows(p, 0, c)
            if fq is not None:
                fq = t.rows(fq, 0, c)
        lam_c = t.const(lam_all[:c])
        q, p, fq = tm.step(q, p, lam_c, fq)
        _check_finite(p, n)
        lo = counts[n + 1]
        if lo < c:
            pred = t.concat_cols(t.rows(q, lo, c), t.rows(p, lo, c))
            resid = t.sub(pred, t.const(z_obs[lo:c]))
            if squared:
                terms.append(t.sum_squares(resid))
            else:
                dq = t.sqrt(t.row_sum_squares(t.cols(resid, 0, d)))
                dp = t.sqrt(t.row_sum_squares(t.cols(resid, d, 2 * d)))
                terms.append(t.sum(t.add(dq, dp)))
    total = terms[0]
    for term in terms[1:]:
        total = t.add(total, term)
    return t.scale(total, 1.0 / n_total)


def _as_arrays(batch):
    """A SparseDataset or a sequence of SparseSample -> stacked arrays."""
    if isinstance(getattr(batch, "k", None), np.ndarray):
        return batch.z0, batch.z_obs, batch.k, batch.lam
    samples = list(batch)
    z0 = np.stack([_vec(s.z0) for s in samples])
    zo = np.stack([_vec(s.z_obs) for s in samples])
    k = np.array([s.k for s in samples])
    lam = np.stack([np.atleast_1d(np.asarray(s.lam, dtype=np.float64)) for s in samples])
    return z0, zo, k, lam


def _vec(z):
    return z.as_vector() if isinstance(z, PhaseState) else np.asarray(z, dtype=np.float64)


def asrnn_loss(m: AsrnnModel, batch, squared: bool = True) -> float:
    """Mean over samples of the squared (q, p) mismatch after k steps."""
    z0, zo, k, lam = _as_arrays(batch)
    tm = TapeModel(Tape(), m, trainable=False)
    return float(_loss_nodes(tm, z0, zo, k, lam, squared).value)


def asrnn_loss_and_grad(m: AsrnnModel, batch, squared: bool = True) -> tuple[float, np.ndarray]:
    z0, zo, k, lam = _as_arrays(batch)
    tm = TapeModel(Tape(), m)
    loss = _loss_nodes(tm, z0, zo, k, lam, squared)
    return float(loss.value), tm.grads(loss)


def asrnn_loss_gradient(m: AsrnnModel, batch, squared: bool = True) -> tuple[MlpParams, MlpParams]:
    _, g = asrnn_loss_and_grad(m, batch, squared)
    nk = m.k_params.spec.n_params
    return (MlpParams.from_flat(m.k_params.spec, g[:nk]), MlpParams.from_flat(m.v_params.spec, g[nk:]))


# -- derivative-matching baseline -----------------------------------------


def _ahnn_nodes(tm: TapeModel, z_t, z_next, lam, ds: float):
    t = tm.tape
    d = tm.m.dim
    z_t = np.atleast_2d(z_t)
    z_next = np.atleast_2d(z_next)
    vel = (z_next - z_t) / ds
    q = t.const(z_t[:, :d])
    p = t.const(z_t[:, d:])
    lam_c = t.const(_lam_rows(lam, len(z_t)))
    rk = t.sub(tm.dkdp(p), t.const(vel[:, :d]))
    rv = t.add(tm.dvdq(q, lam_c), t.const(vel[:, d:]))
    total = t.add(t.sum_squares(rk), t.sum_squares(rv))
    return t.scale(total, 1.0 / len(z_t))


def ahnn_fd_loss(m: AsrnnModel, z_t, z_next, lam, ds: float) -> float:
    """Hamilton's-equations residual with forward-difference velocities."""
    if not ds > 0:
        raise ValueError("ds must be positive")
    tm = TapeModel(Tape(), m, trainable=False)
    return float(_ahnn_nodes(tm, z_t, z_next, lam, ds).value)


def ahnn_fd_loss_and_grad(m: AsrnnModel, z_t, z_next, lam, ds: float) -> tuple[float, np.ndarray]:
    if not ds > 0:
        raise ValueError("ds must be positive")
    tm = TapeModel(Tape(), m)
    loss = _ahnn_nodes(tm, z_t, z_next, lam, ds)
    return float(loss.value), tm.grads(loss)
