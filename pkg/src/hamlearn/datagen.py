"""Training corpora: bounded-energy initial conditions, ground-truth
trajectories, Ornstein-Uhlenbeck measurement noise and sparse windows.

Each underlying trajectory gets its own RNG stream derived from
(seed, lambda index, trajectory index), so generation order never changes
the output.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .integrate import fine_then_coarsen_batch
from .systems import PhaseState, SystemSpec, potential, potential_minimum


class SamplingError(RuntimeError):
    pass


class DegenerateDataError(ValueError):
    pass


# (q box, p box, default e_max) per system
SAMPLING_BOXES = {
    "henon_heiles": ((-0.5, 0.5), (-0.5, 0.5), 1.0 / 6.0),
    "morse": ((0.2, 3.0), (-1.0, 1.0), -0.05),
    "double_well": ((-2.4, 2.4), (-3.5, 3.5), 6.0),
}
# q box for fixed-energy sampling, wide enough to hold the whole well
TARGET_Q_BOXES = {
    "henon_heiles": (-1.2, 1.2),
    "morse": (0.0, 6.0),
    "double_well": (-3.0, 3.0),
}


@dataclass(frozen=True)
class OuNoiseConfig:
    """Exactly one of sigma_inf / nsr is set; nsr=0 or sigma_inf=0 means no noise."""

    tau: float = 0.1
    sigma_inf: float | None = None
    nsr: float | None = None

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if (self.sigma_inf is None) == (self.nsr is None):
            raise ValueError("set exactly one of sigma_inf and nsr")
        if self.nsr is not None and not 0.0 <= self.nsr < 1.0:
            raise ValueError("nsr must lie in [0, 1)")
        if self.sigma_inf is not None and self.sigma_inf < 0:
            raise ValueError("sigma_inf must be non-negative")

    @property
    def disabled(self) -> bool:
        return (self.nsr or 0.0) == 0.0 and (self.sigma_inf or 0.0) == 0.0

    def decay(self, dt: float) -> float:
        return math.exp(-dt / self.tau)

    def resolved(self, signal_std: float) -> "OuNoiseConfig":
        if self.sigma_inf is not None:
            return self
        return OuNoiseConfig(self.tau, sigma_inf=self.nsr * signal_std)

    def to_dict(self) -> dict:
        return {"tau": self.tau, "sigma_inf": self.sigma_inf, "nsr": self.nsr, "disabled": self.disabled}

    @classmethod
    def from_dict(cls, d: dict) -> "OuNoiseConfig":
        return cls(float(d["tau"]), d.get("sigma_inf"), d.get("nsr"))


NO_NOISE = OuNoiseConfig(tau=1.0, nsr=0.0)


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def ou_sequence(cfg: OuNoiseConfig, dt: float, n: int, dim: int, rng) -> np.ndarray:
    """n stationary OU samples of a dim-vector at spacing dt, exact update."""
    if cfg.sigma_inf is None:
        raise ValueError("resolve the noise amplitude before sampling")
    if n < 1:
        raise ValueError("n must be at least 1")
    xi = rng.standard_normal((n, dim))
    return _ou_from_normals(xi, cfg.decay(dt), cfg.sigma_inf)


def _ou_from_normals(xi: np.ndarray, a: float, sigma: float) -> np.ndarray:
    """xi has time on axis 0; returns eta with eta[0] = sigma * xi[0]."""
    eta = np.empty_like(xi)
    eta[0] = sigma * xi[0]
    c = math.sqrt(1.0 - a * a) * sigma
    for i in range(1, len(xi)):
        eta[i] = a * eta[i - 1] + c * xi[i]
    return eta


def _in_well(spec: SystemSpec, q: np.ndarray, level: float, n_check: int = 16) -> np.ndarray:
    """Points whose straight segment from the potential minimum stays below level."""
    centre = _well_centre(spec)
    ok = np.ones(len(q), dtype=bool)
    for t in np.linspace(0.0, 1.0, n_check + 1)[1:]:
        ok &= potential(spec, centre + t * (q - centre)) <= level
    return ok


def _well_centre(spec: SystemSpec) -> np.ndarray:
    if spec.system == "morse":
        return np.array([1.0])
    return np.zeros(spec.dim)


def sample_initial_condition(spec: SystemSpec, e_max: float | None = None, rng=None,
                             target_energy: float | None = None,
                             max_proposals: int = 1_000_000, chunk: int = 256) -> PhaseState:
    """Rejection sampler for H <= e_max, or an exact fixed-energy draw.

    With target_energy E, q is uniform over the well {V(q) < E} and
    |p| = sqrt(2 (E - V(q))) along a uniformly random direction.
    """
    rng = np.random.default_rng() if rng is None else rng
    qbox, pbox, default_emax = SAMPLING_BOXES[spec.system]
    e_max = default_emax if e_max is None else e_max
    if target_energy is not None and target_energy > e_max:
        raise ValueError("target_energy must not exceed e_max")
    level = e_max if target_energy is None else target_energy
    if level <= potential_minimum(spec):
        raise SamplingError(f"energy {level} is not above the potential minimum of {spec.system}")
    d = spec.dim
    tried = 0
    while tried < max_proposals:
        if target_energy is None:
            q = rng.uniform(*qbox, size=(chunk, d))
            p = rng.uniform(*pbox, size=(chunk, d))
            ok = potential(spec, q) + 0.5 * np.sum(p * p, axis=1) <= e_max
        else:
            lo, hi = TARGET_Q_BOXES[spec.system]
            q = rng.uniform(lo, hi, size=(chunk, d))
            ok = potential(spec, q) < target_energy
        tried += chunk
        idx = np.flatnonzero(ok)
        if idx.size:
            idx = idx[_in_well(spec, q[idx], level)]
        if idx.size:
            qi = q[idx[0]]
            if target_energy is None:
                return PhaseState(qi, p[idx[0]])
            speed = math.sqrt(2.0 * (target_energy - potential(spec, qi)))
            if d == 1:
                direction = np.array([1.0 if rng.random() < 0.5 else -1.0])
            else:
                v = rng.standard_normal(d)
                direction = v / np.linalg.norm(v)
            return PhaseState(qi, speed * direction)
    raise SamplingError(f"no acceptance in {tried} proposals for {spec.system} at level {level}")


def resolve_nsr(clean, nsr: float) -> float:
    """sigma_inf = nsr * pooled within-trajectory std.

    `clean` is a sequence of (n_t, n_coords) arrays or Trajectory objects.
    """
    return nsr * signal_std(clean) if nsr != 0 else 0.0


def signal_std(clean) -> float:
    variances = []
    for tr in clean:
        z = np.concatenate([tr.q, tr.p], axis=1) if hasattr(tr, "q") else np.asarray(tr, dtype=np.float64)
        if len(z) == 0:
            continue
        variances.append(np.var(z, axis=0))
    if not variances:
        raise DegenerateDataError("no trajectories to pool")
    s2 = float(np.mean(np.concatenate(variances)))
    if not s2 > 0:
        raise DegenerateDataError("clean trajectories have zero within-trajectory variance")
    return math.sqrt(s2)


@dataclass(frozen=True)
class SparseSample:
    z0: np.ndarray
    z_obs: np.ndarray
    k: int
    lam: np.ndarray


@dataclass
class TrajectoryBank:
    """Clean and noisy observation series, shape (n_lambda, n_traj, T, 2d)."""

    system: str
    lambdas: np.ndarray
    clean: np.ndarray
    noisy: np.ndarray
    dt: float
    noise: OuNoiseConfig
    signal_std: float
    seed: int


@dataclass
class SparseDataset:
    system: str
    dt: float
    noise: OuNoiseConfig
    seed: int
    signal_std: float
    z0: np.ndarray        # (n, 2d)
    z_obs: np.ndarray     # (n, 2d)
    k: np.ndarray         # (n,) int
    lam: np.ndarray       # (n, n_lambda)
    window_len: int = 15
    noise_initial: bool = False
    bank: TrajectoryBank | None = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.k)

    @property
    def dim(self) -> int:
        return self.z0.shape[1] // 2

    @property
    def samples(self) -> list[SparseSample]:
        return [SparseSample(a, b, int(c), d) for a, b, c, d in zip(self.z0, self.z_obs, self.k, self.lam)]

    def subset(self, idx) -> "SparseDataset":
        idx = np.asarray(idx)
        return replace(self, z0=self.z0[idx], z_obs=self.z_obs[idx], k=self.k[idx], lam=self.lam[idx])

    def header(self) -> dict:
        return {
            "system": self.system,
            "dt": self.dt,
            "noise": self.noise.to_dict(),
            "seed": self.seed,
            "signal_std": self.signal_std,
            "window_len": self.window_len,
            "noise_initial": self.noise_initial,
            "n_samples": len(self),
        }

    def to_json(self) -> str:
        lines = ['{"header": ' + json.dumps(self.header(), sort_keys=True) + ',', ' "records": [']
        recs = []
        for z0, zo, k, lam in zip(self.z0, self.z_obs, self.k, self.lam):
            recs.append('  {"lambda": %s, "k": %d, "z0": %s, "zobs": %s}'
                        % (_fmt(lam), int(k), _fmt(z0), _fmt(zo)))
        lines.append(",\n".join(recs))
        lines.append(" ]}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> str:
        text = self.to_json()
        Path(path).write_text(text)
        return hashlib.sha256(text.encode()).hexdigest()

    @classmethod
    def from_json(cls, text: str) -> "SparseDataset":
        doc = json.loads(text)
        h, recs = doc["header"], doc["records"]
        return cls(
            system=h["system"], dt=h["dt"], noise=OuNoiseConfig.from_dict(h["noise"]), seed=h["seed"],
            signal_std=h["signal_std"],
            z0=np.array([r["z0"] for r in recs], dtype=np.float64),
            z_obs=np.array([r["zobs"] for r in recs], dtype=np.float64),
            k=np.array([r["k"] for r in recs], dtype=np.int64),
            lam=np.array([r["lambda"] for r in recs], dtype=np.float64),
            window_len=h.get("window_len", 15), noise_initial=h.get("noise_initial", False),
        )

    @classmethod
    def load(cls, path) -> "SparseDataset":
        return cls.from_json(Path(path).read_text())


def _fmt(v) -> str:
    return "[" + ", ".join("%.17g" % x for x in np.asarray(v).ravel()) + "]"


def make_bank(system: str, lambdas, n_traj: int, traj_len: int, noise: OuNoiseConfig, dt: float = 0.1,
              e_max: float | None = None, seed: int = 0, fine_dt: float | None = None) -> TrajectoryBank:
    """Ground-truth trajectories of traj_len observation instants plus OU noise."""
    lambdas = np.atleast_2d(np.asarray(lambdas, dtype=np.float64))
    fine_dt = dt / 100.0 if fine_dt is None else fine_dt
    clean = []
    for li, lam in enumerate(lambdas):
        spec = SystemSpec.from_lambda(system, lam)
        starts = [sample_initial_condition(spec, e_max, stream(seed, li, ti, 0)) for ti in range(n_traj)]
        q0 = np.stack([s.q for s in starts])
        p0 = np.stack([s.p for s in starts])
        qs, ps = fine_then_coarsen_batch(spec, q0, p0, fine_dt, dt, traj_len - 1)
        # (T, B, d) -> (B, T, 2d)
        clean.append(np.concatenate([qs, ps], axis=2).transpose(1, 0, 2))
    clean = np.stack(clean)
    s_std = signal_std(clean.reshape(-1, traj_len, clean.shape[-1]))
    resolved = noise.resolved(s_std)
    if resolved.disabled:
        noisy = clean.copy()
    else:
        xi = np.stack([
            np.stack([stream(seed, li, ti, 1).standard_normal((traj_len, clean.shape[-1])) for ti in range(n_traj)])
            for li in range(len(lambdas))
        ])  # (L, B, T, D)
        eta = _ou_from_normals(np.moveaxis(xi, 2, 0), resolved.decay(dt), resolved.sigma_inf)
        noisy = clean + np.moveaxis(eta, 0, 2)
    return TrajectoryBank(system, lambdas, clean, noisy, dt, resolved, s_std, seed)


def slice_windows(bank: TrajectoryBank, window_len: int = 15, seed: int = 0,
                  noise_initial: bool = False) -> SparseDataset:
    """One window per trajectory: random start offset and offset k in [1, window_len-1]."""
    if window_len < 2:
        raise ValueError("window_len must be at least 2")
    n_lam, n_traj, T, D = bank.clean.shape
    if window_len > T:
        raise ValueError(f"window_len {window_len} exceeds trajectory length {T}")
    z0, zo, ks, lams = [], [], [], []
    for li in range(n_lam):
        for ti in range(n_traj):
            rng = stream(seed, li, ti, 2)
            start = int(rng.integers(0, T - window_len + 1))
            k = int(rng.integers(1, window_len))
            src0 = bank.noisy if noise_initial else bank.clean
            z0.append(src0[li, ti, start])
            zo.append(bank.noisy[li, ti, start + k])
            ks.append(k)
            lams.append(bank.lambdas[li])
    return SparseDataset(bank.system, bank.dt, bank.noise, seed, bank.signal_std,
                         np.array(z0), np.array(zo), np.array(ks, dtype=np.int64), np.array(lams),
                         window_len, noise_initial, bank)


def make_sparse_dataset(system: str, lambdas, windows: int, noise: OuNoiseConfig = NO_NOISE,
                        window_len: int = 15, dt: float = 0.1, e_max: float | None = None, seed: int = 0,
                        traj_len: int | None = None, fine_dt: float | None = None,
                        noise_initial: bool = False) -> SparseDataset:
    """`windows` sparse samples per lambda, each cut from its own trajectory."""
    traj_len = window_len if traj_len is None else traj_len
    bank = make_bank(system, lambdas, windows, traj_len, noise, dt, e_max, seed, fine_dt)
    return slice_windows(bank, window_len, seed, noise_initial)


def train_val_split(n: int, validation_fraction: float, seed: int):
    perm = stream(seed, 7).permutation(n)
    n_val = int(round(validation_fraction * n))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def grid(values_a, values_b=None) -> np.ndarray:
    """Cartesian product of parameter values as an (n, 2) array, or a column for one axis."""
    a = np.asarray(values_a, dtype=np.float64)
    if values_b is None:
        return a.reshape(-1, 1)
    b = np.asarray(values_b, dtype=np.float64)
    return np.array([(x, y) for x in a for y in b])
