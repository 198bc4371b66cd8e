"""Command line: hamlearn <command> --config run.json [--check] [--threads n] [--out dir].

Every command is a pure function of its config (plus the outputs of
earlier commands in the same run directory) and writes CSV/JSON files
stamped with the config hash, plus a manifest listing file hashes.
Exit codes: 0 ok, 1 config error, 2 runtime failure, 3 check failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

log = logging.getLogger("hamlearn")

COMMANDS = ("generate", "train", "predict", "sweep", "symreg", "verify-theory")

ARTIFACTS = {
    "generate": "sparse training corpus",
    "train": "ensemble checkpoints and loss curves",
    "predict": "energy-error summaries, learned-energy drift, potential curves",
    "sweep": "energy error over the parameter grid",
    "symreg": "recovered equations and parameter estimates",
    "verify-theory": "noise-theory Monte-Carlo tables",
}


class ConfigError(ValueError):
    pass


class CheckFailure(RuntimeError):
    pass


# -- config schema --------------------------------------------------------

def _from_dict(cls, d, where: str):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class DataSection:
    lambdas: list | None = None       # explicit list of parameter vectors
    grid: list | None = None          # values; cartesian square for two-parameter systems
    windows: int = 800
    window_len: int = 15
    traj_len: int | None = None
    dt: float = 0.1
    fine_dt: float = 1e-3
    e_max: float | None = None
    noise: dict | None = None         # {"tau": .., "nsr": ..} or {"tau": .., "sigma_inf": ..}
    noise_initial: bool = False

    def __post_init__(self):
        if (self.lambdas is None) == (self.grid is None):
            raise ValueError("set exactly one of lambdas and grid")
        if self.windows < 1:
            raise ValueError("windows must be positive")


@dataclass(frozen=True)
class ModelSection:
    hidden: list | None = None
    k_hidden: list | None = None


@dataclass(frozen=True)
class EvaluateSection:
    lambdas: list = field(default_factory=list)
    energy: float | None = None
    n_traj: int = 10
    horizon: int = 500
    seed: int = 0
    sweep_alphas: list | None = None
    sweep_betas: list | None = None
    training_region: list = field(default_factory=lambda: [0.2, 0.8])
    oracle: bool = False
    curve_alphas: list = field(default_factory=list)
    curve_q: list = field(default_factory=lambda: [-2.0, 2.0, 401])


@dataclass(frozen=True)
class SymregSection:
    lambdas: list = field(default_factory=list)
    threshold: float = 0.05
    degree: int | None = None
    n_traj: int | None = None
    horizon: int | None = None
    sample_count: int = 2000
    e_max: float | None = None
    oracle: bool = False


@dataclass(frozen=True)
class TheorySection:
    checks: list = field(default_factory=lambda: ["fd_variance", "bias", "decay", "ahnn"])
    trials: int = 1_000_000
    n_batches: int = 100
    model_seed: int = 3
    z0: list = field(default_factory=lambda: [0.5, 0.3])
    z_n: list = field(default_factory=lambda: [0.6, -0.1])
    velocity: list = field(default_factory=lambda: [0.3, -0.5])
    lam: list = field(default_factory=lambda: [1.0])
    n_steps: int = 3
    tau: float = 0.2
    sigma: float = 0.01
    sigma_list: list = field(default_factory=lambda: [1e-3, 3e-3, 1e-2])
    n_list: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    ds_list: list = field(default_factory=lambda: [0.05, 0.1, 0.2, 0.4, 0.8, 1.6, 3.2])
    ahnn_shared_noise: bool = True
    fd_variance_tau: float = 0.5
    fd_variance_sigma: float = 0.1
    fd_variance_ds: list = field(default_factory=lambda: [0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0])
    fd_variance_trials: int = 100_000


@dataclass(frozen=True)
class CheckSection:
    max_mean_pct: float | None = None
    max_grid_mean_pct: float | None = None
    max_htheta_std: float | None = None
    rel_tol: float | None = None                 # symreg alpha/beta relative tolerance
    alpha_band: list | None = None               # Morse alpha_hat band
    max_c1_ratio: float | None = None
    exact_support: bool = False
    max_abs_z: float = 3.0
    slope_band: list = field(default_factory=lambda: [1.85, 2.15])
    decay_rel_tol: float = 0.2
    ahnn_slope_band: list = field(default_factory=lambda: [-1.2, -0.8])   # large-ds 1/ds law
    max_curve_residual: float | None = None


@dataclass(frozen=True)
class RunConfig:
    system: str
    seed: int = 0
    out: str | None = None
    data: DataSection | None = None
    model: ModelSection = ModelSection()
    train: dict = field(default_factory=dict)
    evaluate: EvaluateSection = EvaluateSection()
    symreg: SymregSection = SymregSection()
    theory: TheorySection = TheorySection()
    check: CheckSection = CheckSection()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config: expected a JSON object")
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"config: unknown keys {unknown}")
        if "system" not in d:
            raise ConfigError("config: missing key 'system'")
        if d["system"] not in ("henon_heiles", "morse", "double_well"):
            raise ConfigError(f"config: unknown system {d['system']!r}")
        if not isinstance(d.get("seed", 0), int):
            raise ConfigError("config: seed must be an integer")
        from .train import TrainConfig
        try:
            TrainConfig.from_dict(d.get("train", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from exc
        return cls(
            system=d["system"], seed=d.get("seed", 0), out=d.get("out"),
            data=_from_dict(DataSection, d["data"], "data") if d.get("data") is not None else None,
            model=_from_dict(ModelSection, d.get("model"), "model"),
            train=dict(d.get("train", {})),
            evaluate=_from_dict(EvaluateSection, d.get("evaluate"), "evaluate"),
            symreg=_from_dict(SymregSection, d.get("symreg"), "symreg"),
            theory=_from_dict(TheorySection, d.get("theory"), "theory"),
            check=_from_dict(CheckSection, d.get("check"), "check"),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def load_config(path, seed_override: str | None = None) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: file not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    try:
        cfg = RunConfig.from_dict(doc)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if seed_override is not None:
        try:
            seed = int(seed_override)
        except ValueError as exc:
            raise ConfigError(f"HAMLEARN_SEED must be an integer, got {seed_override!r}") from exc
        log.info("HAMLEARN_SEED overrides config seed %d -> %d", cfg.seed, seed)
        cfg = RunConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(cfg)}, "seed": seed})
    return cfg


# -- output helpers ---------------------------------------------------------

class Run:
    def __init__(self, cfg: RunConfig, out: Path, command: str):
        self.cfg = cfg
        self.out = out
        self.command = command
        self.hash = cfg.digest()
        self.files: dict[str, str] = {}
        self.summary: dict = {}

    def _record(self, rel: str, text: str):
        path = self.out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        self.files[rel] = hashlib.sha256(text.encode()).hexdigest()

    def csv(self, rel: str, text: str):
        self._record(rel, f"# config_sha256: {self.hash}\n" + text)

    def json(self, rel: str, doc: dict):
        self._record(rel, json.dumps({"config_sha256": self.hash, **doc}, sort_keys=True, indent=1) + "\n")

    def raw(self, rel: str, text: str):
        self._record(rel, text)

    def manifest(self):
        doc = {"command": self.command, "artifact": ARTIFACTS[self.command], "config_sha256": self.hash,
               "seed": self.cfg.seed, "files": dict(sorted(self.files.items())), "summary": self.summary}
        text = json.dumps(doc, sort_keys=True, indent=1) + "\n"
        (self.out / f"manifest_{self.command}.json").write_text(text)


def _lambdas(cfg: RunConfig):
    import numpy as np

    from .datagen import grid
    d = cfg.data
    if d is None:
        raise ConfigError("data section is required for this command")
    if d.lambdas is not None:
        return np.atleast_2d(np.asarray(d.lambdas, dtype=np.float64))
    if cfg.system == "henon_heiles":
        return grid(d.grid, d.grid)
    return grid(d.grid)


def _noise(cfg: RunConfig):
    from .datagen import NO_NOISE, OuNoiseConfig
    n = cfg.data.noise
    if n is None:
        return NO_NOISE
    try:
        return OuNoiseConfig.from_dict(n)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"data.noise: {exc}") from exc


def build_dataset(cfg: RunConfig):
    from .datagen import make_sparse_dataset
    d = cfg.data
    return make_sparse_dataset(cfg.system, _lambdas(cfg), d.windows, _noise(cfg), d.window_len, d.dt, d.e_max,
                               cfg.seed, d.traj_len, d.fine_dt, d.noise_initial)


def _train_config(cfg: RunConfig):
    from .train import TrainConfig
    tc = TrainConfig.from_dict(cfg.train)
    return TrainConfig.from_dict({**tc.to_dict(), "master_seed": cfg.seed})


def _architecture(cfg: RunConfig):
    from .train import Architecture
    arch = Architecture.for_system(cfg.system)
    m = cfg.model
    return Architecture(tuple(m.hidden) if m.hidden else arch.hidden,
                        tuple(m.k_hidden) if m.k_hidden else arch.k_hidden)


def load_ensemble(out: Path):
    from .model import AsrnnModel
    files = sorted((out / "train").glob("member_[0-9][0-9][0-9].json"))
    if not files:
        raise FileNotFoundError(f"{out / 'train'}: no checkpoints; run 'hamlearn train' first")
    return [AsrnnModel.load(f) for f in files]


DEFAULT_ENERGY = {"henon_heiles": 0.125, "morse": -0.5, "double_well": 0.5}


# -- commands -------------------------------------------------------------

def cmd_generate(run: Run, check: bool):
    ds = build_dataset(run.cfg)
    run.raw("data/dataset.json", ds.to_json())
    run.summary = {"n_samples": len(ds), "seed": ds.seed, "signal_std": ds.signal_std,
                   "noise": ds.noise.to_dict(), "noise_disabled": ds.noise.disabled,
                   "n_lambda": int(len(_lambdas(run.cfg)))}
    if check:
        want = run.cfg.data.windows * len(_lambdas(run.cfg))
        if len(ds) != want:
            raise CheckFailure(f"dataset has {len(ds)} samples, expected {want}")
        if not ds.signal_std > 0:
            raise CheckFailure("signal std is not positive")


def cmd_train(run: Run, check: bool):
    import math

    from .train import save_member, train_ensemble
    ds = build_dataset(run.cfg)
    existing = run.out / "data" / "dataset.json"
    digest = hashlib.sha256(ds.to_json().encode()).hexdigest()
    if existing.exists() and hashlib.sha256(existing.read_bytes()).hexdigest() != digest:
        log.warning("%s differs from the dataset implied by this config", existing)
    tc = _train_config(run.cfg)
    results = train_ensemble(ds, _architecture(run.cfg), tc)
    rows = []
    for i, (m, rep) in enumerate(results):
        info = save_member(run.out / "train", i, m, rep)
        for suffix in (".json", "_report.json", "_loss.csv"):
            rel = f"train/member_{i:03d}{suffix}"
            if (run.out / rel).exists():
                run.files[rel] = hashlib.sha256((run.out / rel).read_bytes()).hexdigest()
        rows.append({**info, "best_val_loss": rep.best_val_loss, "best_epoch": rep.best_epoch,
                     "diverged": rep.diverged, "events": rep.events})
    run.json("train/summary.json", {"dataset_sha256": digest, "members": rows, "train": tc.to_dict()})
    run.summary = {"members": len(rows), "failed": sum(r["checkpoint"] is None for r in rows)}
    if check:
        bad = [r["member"] for r in rows if r["checkpoint"] is None or not math.isfinite(r["best_val_loss"])]
        if bad:
            raise CheckFailure(f"members without a finite validation loss: {bad}")


def cmd_predict(run: Run, check: bool):
    import numpy as np

    from . import evaluate as ev
    from .systems import SystemSpec
    cfg = run.cfg
    e = cfg.evaluate
    ensemble = load_ensemble(run.out)
    energy = DEFAULT_ENERGY[cfg.system] if e.energy is None else e.energy
    lams = e.lambdas or _lambdas(cfg).tolist()
    header = "lambda,mean_pct,median_pct,p25_pct,p75_pct,n_trajectories,n_diverged,htheta_std_mean\n"
    lines = []
    worst_std = 0.0
    means = []
    for key, lam in enumerate(lams):
        spec = SystemSpec.from_lambda(cfg.system, lam)
        s = ev.ensemble_energy_errors(ensemble, spec, energy, e.n_traj, e.horizon, e.seed, key)
        q0, p0 = ev.fixed_energy_states(spec, energy, e.n_traj, e.seed, key)
        stds = []
        for m in ensemble:
            from .model import predict_batch
            qs, ps = predict_batch(m, q0, p0, spec.lam, e.horizon)
            sd = ev.learned_energy_std(m, qs, ps, spec.lam)
            stds.append(sd[np.isfinite(sd)])
        sd = float(np.mean(np.concatenate(stds))) if stds else float("nan")
        worst_std = max(worst_std, sd)
        means.append(s.mean)
        lam_s = " ".join("%.17g" % v for v in np.atleast_1d(lam))
        lines.append(f"{lam_s},{s.mean:.17g},{s.median:.17g},{s.p25:.17g},{s.p75:.17g},"
                     f"{s.n_trajectories},{s.n_diverged},{sd:.17g}\n")
    run.csv("predict/energy_errors.csv", header + "".join(lines))
    summary = {"energy": energy, "mean_pct_over_lambdas": float(np.nanmean(means)),
               "max_htheta_std": worst_std}
    if cfg.system == "double_well" and e.curve_alphas:
        lo, hi, n = e.curve_q
        reports = ev.double_well_diagnostic(ensemble, e.curve_alphas, np.linspace(lo, hi, int(n)))
        run.csv("predict/potential_curves.csv", ev.curves_csv(reports))
        inside = [r.max_residual for r in reports if 0.1 - 1e-9 <= r.alpha <= 0.9 + 1e-9]
        summary["max_curve_residual_training_region"] = max(inside) if inside else None
    run.summary = summary
    if check:
        c = cfg.check
        if c.max_mean_pct is not None and not summary["mean_pct_over_lambdas"] < c.max_mean_pct:
            raise CheckFailure(f"mean error {summary['mean_pct_over_lambdas']:.4g}% >= {c.max_mean_pct}%")
        if c.max_htheta_std is not None and not worst_std < c.max_htheta_std:
            raise CheckFailure(f"H_theta std {worst_std:.3g} >= {c.max_htheta_std}")
        r = summary.get("max_curve_residual_training_region")
        if c.max_curve_residual is not None and (r is None or not r < c.max_curve_residual):
            raise CheckFailure(f"aligned potential residual {r} >= {c.max_curve_residual}")


def cmd_sweep(run: Run, check: bool):
    import numpy as np

    from . import evaluate as ev
    from .integrate import analytic_forces
    cfg = run.cfg
    if cfg.system != "henon_heiles":
        raise ConfigError("sweep is defined for the two-parameter henon_heiles family")
    e = cfg.evaluate
    alphas = e.sweep_alphas if e.sweep_alphas is not None else np.round(np.arange(0.0, 1.01, 0.1), 10)
    betas = e.sweep_betas if e.sweep_betas is not None else alphas
    ensemble = [analytic_forces(cfg.system)] if e.oracle else load_ensemble(run.out)
    training = _lambdas(cfg).tolist() if cfg.data is not None else []
    energy = DEFAULT_ENERGY[cfg.system] if e.energy is None else e.energy
    g = ev.parameter_sweep(ensemble, alphas, betas, energy, e.n_traj, e.horizon, e.seed, training)
    run.csv("sweep/grid.csv", g.to_csv())
    lo, hi = e.training_region
    inner = g.mean_over(lo, hi)
    run.summary = {"mean_pct_training_region": inner, "mean_pct_all": float(np.nanmean(g.values)),
                   "n_diverged": int(g.n_diverged.sum()), "oracle": e.oracle}
    if check and cfg.check.max_grid_mean_pct is not None and not inner < cfg.check.max_grid_mean_pct:
        raise CheckFailure(f"grid mean {inner:.4g}% >= {cfg.check.max_grid_mean_pct}%")


def cmd_symreg(run: Run, check: bool):
    import numpy as np

    from . import symreg as sr
    from .integrate import analytic_forces
    from .systems import SystemSpec, hamiltonian_batch, kinetic
    cfg = run.cfg
    s = cfg.symreg
    if not s.lambdas:
        raise ConfigError("symreg.lambdas must list at least one parameter vector")
    if cfg.system == "double_well":
        raise ConfigError("symreg supports henon_heiles and morse")
    if s.oracle:
        members = [("oracle", analytic_forces(cfg.system), 0.1)]
    else:
        members = [(str(i), m, m.dt) for i, m in enumerate(load_ensemble(run.out))]
    rows, fits, failures = [], {}, []
    for lam in s.lambdas:
        lam_key = " ".join("%.17g" % v for v in lam)
        for name, m, dt in members:
            is_model = not s.oracle
            if cfg.system == "henon_heiles":
                kw = {k: v for k, v in (("n_traj", s.n_traj), ("horizon", s.horizon)) if v is not None}
                forces = sr.mdl.model_forces(m) if is_model else m
                fit = sr.recover_eom_from_forces(forces, lam, degree=s.degree or 3, threshold=s.threshold,
                                                 seed=cfg.seed, dt=dt, e_max=s.e_max, **kw)
                ex = fit.extracted
                exact = not fit.flags
                rows.append({"lambda": lam_key, "member": name, "alpha_hat": ex["alpha_hat"],
                             "alpha_hat_cross": ex["alpha_hat_cross"], "beta_hat": ex["beta_hat"],
                             "exact_support": int(exact)})
                truth = {"alpha_hat": lam[0], "beta_hat": lam[1]}
                fits[f"{lam_key}/{name}"] = fit.to_dict()
            else:
                kw = {k: v for k, v in (("n_traj", s.n_traj), ("horizon", s.horizon)) if v is not None}
                if is_model:
                    fk, fv = sr.fit_hamiltonian_polys(m, cfg.system, lam, s.sample_count, s.degree or 6,
                                                      s.threshold, cfg.seed, e_max=s.e_max, **kw)
                else:
                    spec = SystemSpec.from_lambda(cfg.system, lam)
                    from .systems import potential
                    fk, fv = sr.fit_energy_functions(kinetic, lambda q: potential(spec, q), m, cfg.system,
                                                     lam, s.sample_count, s.degree or 6, s.threshold,
                                                     cfg.seed, dt=dt, e_max=s.e_max, **kw)
                ex = fv.extracted
                rows.append({"lambda": lam_key, "member": name, "alpha_hat": ex.get("alpha_hat", float("nan")),
                             "c1": ex["c1"], "c2": ex["c2"], "kinetic_p2": fk.coef("K", "p1^2")})
                truth = {"alpha_hat": lam[0]}
                fits[f"{lam_key}/{name}"] = {"K": fk.to_dict(), "V": fv.to_dict()}
            for line in (fits[f"{lam_key}/{name}"].get("equations")
                         or fits[f"{lam_key}/{name}"]["V"]["equations"]):
                log.info("lambda %s member %s: %s", lam_key, name, line)
            failures.extend(_symreg_failures(cfg, rows[-1], truth))
    cols = list(rows[0])
    text = ",".join(cols) + "\n" + "".join(
        ",".join(("%.17g" % r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols) + "\n" for r in rows)
    run.csv("symreg/estimates.csv", text)
    stats = {}
    for lam in s.lambdas:
        lam_key = " ".join("%.17g" % v for v in lam)
        sub = [r for r in rows if r["lambda"] == lam_key]
        stats[lam_key] = {k: {"mean": float(np.mean([r[k] for r in sub])),
                              "median": float(np.median([r[k] for r in sub])),
                              "std": float(np.std([r[k] for r in sub]))}
                          for k in ("alpha_hat", "beta_hat") if k in sub[0]}
    run.json("symreg/fits.json", {"fits": fits, "ensemble": stats})
    run.summary = {"ensemble": stats, "n_check_failures": len(failures)}
    if check and failures:
        raise CheckFailure("; ".join(failures))


def _symreg_failures(cfg: RunConfig, row: dict, truth: dict) -> list[str]:
    c = cfg.check
    out = []
    tag = f"lambda {row['lambda']} member {row['member']}"
    if c.rel_tol is not None:
        for k, v in truth.items():
            if not abs(row[k] - v) <= c.rel_tol * abs(v):
                out.append(f"{tag}: {k}={row[k]:.6g} outside {c.rel_tol:.0%} of {v}")
    if c.exact_support and not row.get("exact_support", 1):
        out.append(f"{tag}: recovered support differs from the expected monomials")
    if c.alpha_band is not None and not c.alpha_band[0] <= row["alpha_hat"] <= c.alpha_band[1]:
        out.append(f"{tag}: alpha_hat={row['alpha_hat']:.6g} outside {c.alpha_band}")
    if c.max_c1_ratio is not None and "c1" in row and not abs(row["c1"]) < c.max_c1_ratio * row["c2"]:
        out.append(f"{tag}: |c1|={abs(row['c1']):.3g} not below {c.max_c1_ratio}*c2")
    return out


def cmd_verify_theory(run: Run, check: bool):
    import numpy as np

    from . import theory as th
    from .datagen import OuNoiseConfig
    t = run.cfg.theory
    c = run.cfg.check
    unknown = sorted(set(t.checks) - {"fd_variance", "bias", "decay", "ahnn"})
    if unknown:
        raise ConfigError(f"theory.checks: unknown entries {unknown}")
    seed = run.cfg.seed
    m = th.tiny_model(t.model_seed)
    z0, zn, lam = np.array(t.z0), np.array(t.z_n), np.array(t.lam)
    failures, summary = [], {}
    if "fd_variance" in t.checks:
        ou = OuNoiseConfig(t.fd_variance_tau, sigma_inf=t.fd_variance_sigma)
        rows = th.fd_variance_check(ou, t.fd_variance_ds, t.fd_variance_trials, seed)
        run.csv("theory/fd_variance.csv", th.table_csv(rows))
        zmax = max(abs(r["z_score"]) for r in rows)
        summary["fd_variance_max_abs_z"] = zmax
        if zmax > c.max_abs_z:
            failures.append(f"finite-difference variance: max |z| {zmax:.3g} > {c.max_abs_z}")
    if "bias" in t.checks:
        fit = th.bias_scaling_fit(m, z0, zn, lam, t.n_steps, t.tau, t.sigma_list, t.trials, seed, t.n_batches)
        run.csv("theory/bias_scaling.csv", th.table_csv(fit.rows))
        summary["bias_slope"] = fit.slope
        lo, hi = c.slope_band
        if fit.inconclusive or not lo <= fit.slope <= hi:
            failures.append(f"bias slope {fit.slope:.4g} outside [{lo}, {hi}]")
    if "decay" in t.checks:
        fit = th.correlation_decay_check(m, z0, zn, lam, t.n_list, t.tau, t.sigma, t.trials, seed, t.n_batches)
        run.csv("theory/correlation_decay.csv", th.table_csv(fit.rows))
        want = m.dt / t.tau
        summary["decay_rate"] = fit.slope
        summary["decay_rate_predicted"] = want
        if fit.inconclusive or not abs(fit.slope - want) <= c.decay_rel_tol * want:
            failures.append(f"decay rate {fit.slope:.4g} not within {c.decay_rel_tol:.0%} of {want:.4g}")
    if "ahnn" in t.checks:
        fit = th.ahnn_bias_scaling(m, z0, np.array(t.velocity), lam, t.ds_list, t.tau, t.sigma, t.trials, seed,
                                   t.n_batches, shared=t.ahnn_shared_noise)
        run.csv("theory/ahnn_scaling.csv", th.table_csv(fit.rows))
        summary["ahnn_large_ds_slope"] = fit.slope
        zs = [abs(r["z_score"]) for r in fit.rows]
        if t.ahnn_shared_noise:
            zs += [abs(r["ratio_z"]) for r in fit.rows[:-1]]
        summary["ahnn_max_abs_z"] = max(zs)
        if max(zs) > c.max_abs_z:
            failures.append(f"baseline gap: max |z| {max(zs):.3g} > {c.max_abs_z}")
        lo, hi = c.ahnn_slope_band
        if t.ahnn_shared_noise and t.sigma > 0 and not lo <= fit.slope <= hi:
            failures.append(f"large-ds gap slope {fit.slope:.4g} outside [{lo}, {hi}]")
    run.summary = summary
    if check and failures:
        raise CheckFailure("; ".join(failures))


HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "predict": cmd_predict,
    "sweep": cmd_sweep,
    "symreg": cmd_symreg,
    "verify-theory": cmd_verify_theory,
}


def _cap_threads(n: int):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def parse_args(argv=None):
    ap = argparse.ArgumentParser(prog="hamlearn", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="run configuration (JSON)")
    ap.add_argument("--check", action="store_true", help="run acceptance assertions; exit 3 on failure")
    ap.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    ap.add_argument("--out", default=None, help="output directory (overrides config 'out')")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads is not None:
        if args.threads < 1:
            log.error("--threads must be positive")
            return 1
        if "numpy" in sys.modules:
            log.warning("numpy already imported; --threads may not take effect")
        _cap_threads(args.threads)
    try:
        cfg = load_config(args.config, os.environ.get("HAMLEARN_SEED"))
        out = Path(args.out or cfg.out or "runs/default")
        out.mkdir(parents=True, exist_ok=True)
        run = Run(cfg, out, args.command)
        log.info("%s: config %s, seed %d, output %s", args.command, run.hash[:12], cfg.seed, out)
        HANDLERS[args.command](run, args.check)
        run.manifest()
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 1
    except CheckFailure as exc:
        run.manifest()
        log.error("%s check failed: %s", args.command, exc)
        return 3
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        log.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        log.debug("traceback", exc_info=True)
        return 2
    log.info("%s: wrote %d files", args.command, len(run.files))
    return 0
