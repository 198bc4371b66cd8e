"""Acceptance criteria 1-9.

Criteria 1-3 and 9 are computed here. Criteria 4-8 read the outputs of the
desk-scale runs under runs/ (produced by scripts/run_desk.sh) and rerun any
command whose manifest is missing or was written for a different config.
"""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from hamlearn import autodiff as ad
from hamlearn import datagen as dg
from hamlearn import integrate as it
from hamlearn import model as mdl
from hamlearn import symreg as sr
from hamlearn import theory as th
from hamlearn.autodiff import MlpSpec
from hamlearn.cli import load_config, main
from hamlearn.datagen import OuNoiseConfig, SparseSample

from acceptance_report import report

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
HO = it.ForceProvider(lambda q, lam: q, lambda p: p)
NO_LAM = np.zeros(0)


@pytest.fixture(autouse=True)
def _no_seed_override(monkeypatch):
    monkeypatch.delenv("HAMLEARN_SEED", raising=False)


def ensure_run(name: str, commands) -> Path:
    """Output directory of a desk config, running commands whose outputs are absent or stale."""
    path = CONFIGS / f"{name}.json"
    cfg = load_config(path)
    out = ROOT / cfg.out
    for command in commands:
        manifest = out / f"manifest_{command}.json"
        if manifest.exists() and json.loads(manifest.read_text())["config_sha256"] == cfg.digest():
            continue
        code = main([command, "--config", str(path), "--out", str(out)])
        assert code == 0, f"{name} {command} exited {code}"
    return out


def summary(out: Path, command: str) -> dict:
    return json.loads((out / f"manifest_{command}.json").read_text())["summary"]


def read_csv(path: Path) -> list[dict]:
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


def at_lambda(row: dict, lam) -> bool:
    return np.allclose([float(v) for v in row["lambda"].split()], lam, rtol=0, atol=1e-12)


# -- 1. integrator ---------------------------------------------------------

def _symplectic_defect(f, q, p, lam, dt=0.1, h=1e-6):
    d = q.size
    z = np.concatenate([q, p])
    cols = []
    for i in range(2 * d):
        e = np.zeros(2 * d)
        e[i] = h
        a = np.concatenate(it.verlet_step(f, (z + e)[:d], (z + e)[d:], lam, dt)[:2])
        b = np.concatenate(it.verlet_step(f, (z - e)[:d], (z - e)[d:], lam, dt)[:2])
        cols.append((a - b) / (2 * h))
    j = np.array(cols).T
    omega = np.block([[np.zeros((d, d)), np.eye(d)], [-np.eye(d), np.zeros((d, d))]])
    return float(np.max(np.abs(j.T @ omega @ j - omega)))


def _reversal_error(f, q, p, lam, dt=0.1):
    q1, p1, _ = it.verlet_step(f, q, p, lam, dt)
    q2, p2, _ = it.verlet_step(f, q1, p1, lam, -dt)
    return float(np.max(np.abs(np.concatenate([q2 - q, p2 - p]))))


def _order_ratio(f, q0, p0, lam, t_end=5.0, dt=0.05):
    ref_q, ref_p = it.rollout_arrays(f, q0, p0, lam, 1e-4, int(round(t_end / 1e-4)), every=int(round(0.1 / 1e-4)))

    def err(h):
        r = int(round(0.1 / h))
        qs, ps = it.rollout_arrays(f, q0, p0, lam, h, int(round(t_end / h)), every=r)
        return max(np.max(np.abs(qs - ref_q)), np.max(np.abs(ps - ref_p)))

    return err(dt) / err(dt / 2)


def test_criterion_1_integrator():
    rng = np.random.default_rng(1)
    hh = it.analytic_forces("henon_heiles")
    lam = np.array([0.7, 0.4])
    symp, rev = 0.0, 0.0
    for _ in range(20):
        q, p = rng.uniform(-0.4, 0.4, 2), rng.uniform(-0.4, 0.4, 2)
        symp = max(symp, _symplectic_defect(hh, q, p, lam))
        rev = max(rev, _reversal_error(hh, q, p, lam))
        x, y = rng.uniform(-1, 1, 1), rng.uniform(-1, 1, 1)
        symp = max(symp, _symplectic_defect(HO, x, y, NO_LAM))
        rev = max(rev, _reversal_error(HO, x, y, NO_LAM))
    r_ho = _order_ratio(HO, np.array([1.0]), np.array([0.0]), NO_LAM)
    r_hh = _order_ratio(hh, np.array([0.1, -0.1]), np.array([0.3, 0.2]), np.array([1.0, 1.0]))
    ok = symp < 1e-6 and rev < 1e-12 and all(abs(r / 4 - 1) <= 0.15 for r in (r_ho, r_hh))
    report("1", ok, f"symplectic defect {symp:.2e}, reversal {rev:.2e}, "
                    f"halving ratios HO {r_ho:.3f} HH {r_hh:.3f}")


# -- 2. autodiff -----------------------------------------------------------

def test_criterion_2_autodiff():
    worst_param = 0.0
    for seed, dim in ((0, 1), (1, 2), (2, 2)):
        m = mdl.build(dim, dim, (4, 4), seed=seed)
        rng = np.random.default_rng(seed)
        batch = [SparseSample(rng.normal(0, 0.3, 2 * dim), rng.normal(0, 0.3, 2 * dim), 14,
                              rng.uniform(0.2, 0.8, dim)) for _ in range(3)]
        _, g = mdl.asrnn_loss_and_grad(m, batch)
        theta = m.flat()
        fd = np.empty_like(theta)
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = 1e-6
            fd[i] = (mdl.asrnn_loss(m.with_flat(theta + e), batch)
                     - mdl.asrnn_loss(m.with_flat(theta - e), batch)) / 2e-6
        worst_param = max(worst_param, float(np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-8)))
    worst_input = 0.0
    for seed in range(5):
        spec = MlpSpec((3, 5, 5, 1))
        p = ad.init_gaussian(spec, seed)
        x = np.random.default_rng(seed).normal(size=(4, 3))
        g = ad.mlp_input_gradient(spec, p, x)
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1e-6
            fd = (ad.mlp_eval(spec, p, x + e) - ad.mlp_eval(spec, p, x - e)) / 2e-6
            worst_input = max(worst_input, float(np.max(np.abs(g[:, i] - fd))))
    report("2", worst_param < 1e-4 and worst_input < 1e-6,
           f"k=14 parameter gradient max rel error {worst_param:.2e}, input gradient error {worst_input:.2e}")


# -- 3. OU noise -----------------------------------------------------------

def test_criterion_3_ou_noise():
    cfg = OuNoiseConfig(tau=0.5, sigma_inf=0.3)
    eta = dg.ou_sequence(cfg, 0.1, 1_000_000, 1, dg.stream(0, 99))[:, 0]
    var_rel = abs(np.var(eta) / 0.09 - 1)
    lag_err = abs(np.corrcoef(eta[:-1], eta[1:])[0, 1] - cfg.decay(0.1))
    tau = 0.5
    ds = [tau / 10, 0.1, 0.2, tau, 1.0, 2.0, 10 * tau]
    rows = th.fd_variance_check(OuNoiseConfig(tau, sigma_inf=0.1), ds, trials=100_000, seed=0)
    zmax = max(abs(r["z_score"]) for r in rows)
    report("3", var_rel < 0.02 and lag_err < 0.005 and zmax <= 3,
           f"variance off by {var_rel:.2%}, lag-1 off by {lag_err:.4f}, finite-difference table max |z| {zmax:.2f}")


# -- 4. Henon-Heiles desk reproduction -------------------------------------

def test_criterion_4a_grid_error():
    out = ensure_run("hh_desk", ["generate", "train", "sweep"])
    mean = summary(out, "sweep")["mean_pct_training_region"]
    report("4a", mean < 1.0, f"mean energy error over the [0.2,0.8]^2 grid {mean:.3f}% (< 1%)")


def _noisy_hh_errors():
    short = summary(ensure_run("hh_nsr10_tau_short", ["generate", "train", "sweep"]), "sweep")
    long = summary(ensure_run("hh_nsr10_tau_long", ["generate", "train", "sweep"]), "sweep")
    return short["mean_pct_training_region"], long["mean_pct_training_region"]


def test_criterion_4b_noisy_grid_error():
    s, l = _noisy_hh_errors()
    report("4b", s < 3.0 and l < 8.0, f"NSR 10%: short tau {s:.3f}% (< 3%), long tau {l:.3f}% (< 8%)")


@pytest.mark.xfail(strict=True, reason="with noise on both window ends the effective target noise "
                                       "eta_N - A eta_0 shrinks as the correlation time grows")
def test_criterion_4b_noisy_ordering():
    s, l = _noisy_hh_errors()
    report("4b-order", l > s, f"NSR 10%: long tau {l:.3f}% above short tau {s:.3f}%: {l > s}",
           known_failure=True)


def test_criterion_4c_learned_energy_fluctuation():
    out = ensure_run("hh_desk", ["generate", "train", "predict"])
    sd = summary(out, "predict")["max_htheta_std"]
    report("4c", sd < 1e-2, f"largest H_theta std along 500-step predictions {sd:.2e} (< 1e-2)")


# -- 5. symbolic recovery, Henon-Heiles --------------------------------------
# Desk ensembles have 3 members, so estimates are ensemble medians; every
# member's support must still be exact at the seen parameters.

def median_of(rows, key):
    return float(np.median([float(r[key]) for r in rows]))


def test_criterion_5_hh_symbolic_recovery():
    oracle = sr.recover_eom_from_forces(it.analytic_forces("henon_heiles"), [0.4, 0.6], threshold=0.05)
    oracle_err = max(abs(oracle.extracted["alpha_hat"] - 0.4), abs(oracle.extracted["beta_hat"] - 0.6))
    assert not oracle.flags and oracle_err < 1e-8, "oracle recovery must be exact before judging models"
    rows = read_csv(ensure_run("hh_desk", ["generate", "train", "symreg"]) / "symreg" / "estimates.csv")
    seen = [r for r in rows if at_lambda(r, [0.4, 0.6])]
    unseen = [r for r in rows if at_lambda(r, [0.5, 0.7])]
    assert seen and unseen
    exact = [r["member"] for r in seen if r["exact_support"] == "1"]
    e_seen = max(abs(median_of(seen, "alpha_hat") / 0.4 - 1), abs(median_of(seen, "beta_hat") / 0.6 - 1))
    e_unseen = max(abs(median_of(unseen, "alpha_hat") / 0.5 - 1), abs(median_of(unseen, "beta_hat") / 0.7 - 1))
    report("5", len(exact) == len(seen) and e_seen <= 0.05 and e_unseen <= 0.10,
           f"oracle error {oracle_err:.1e}; exact support in {len(exact)}/{len(seen)} members at (0.4, 0.6); "
           f"median relative error seen {e_seen:.2%} (<= 5%), unseen {e_unseen:.2%} (<= 10%)")


# -- 6. symbolic recovery, Morse -------------------------------------------

def _morse_rows(name):
    rows = read_csv(ensure_run(name, ["generate", "train", "symreg"]) / "symreg" / "estimates.csv")
    return {a: [r for r in rows if at_lambda(r, [a])] for a in (2.0, 1.5)}


def test_criterion_6_morse_symbolic_recovery():
    rows = _morse_rows("morse_desk")
    a2, a15 = median_of(rows[2.0], "alpha_hat"), median_of(rows[1.5], "alpha_hat")
    c1 = float(np.median([abs(float(r["c1"])) for r in rows[2.0]]))
    c2 = median_of(rows[2.0], "c2")
    members = ", ".join(f"{float(r['alpha_hat']):.3f}" for r in rows[1.5])
    ok = 1.95 <= a2 <= 2.05 and 1.40 <= a15 <= 1.65 and c1 < 0.05 * c2
    report("6", ok, f"median alpha_hat(2) {a2:.4f} in [1.95, 2.05], median alpha_hat(1.5) {a15:.4f} in "
                    f"[1.40, 1.65] (members {members}), median |c1|/c2 {c1 / c2:.4f} (< 0.05)")


def test_criterion_6_morse_noisy_trend():
    short, long = _morse_rows("morse_nsr10_tau_short"), _morse_rows("morse_nsr10_tau_long")
    a_s, a_l = median_of(short[2.0], "alpha_hat"), median_of(long[2.0], "alpha_hat")
    report("6-noisy", a_l > a_s, f"NSR 10% at alpha 2: median alpha_hat short tau {a_s:.4f}, long tau {a_l:.4f} "
                                 f"(upward drift with tau: {a_l > a_s})")


# -- 7. theory scaling -----------------------------------------------------

def test_criterion_7_theory_scaling():
    out = ensure_run("theory", ["verify-theory"])
    s = summary(out, "verify-theory")
    cfg = load_config(CONFIGS / "theory.json")
    want = th.tiny_model(cfg.theory.model_seed).dt / cfg.theory.tau
    decay_ok = abs(s["decay_rate"] - want) <= 0.2 * want
    ok = (1.85 <= s["bias_slope"] <= 2.15 and decay_ok and s["ahnn_max_abs_z"] <= 3
          and -1.2 <= s["ahnn_large_ds_slope"] <= -0.8)
    report("7", ok, f"bias slope {s['bias_slope']:.3f} in [1.85, 2.15]; decay rate {s['decay_rate']:.4f} vs "
                    f"{want:.4f}; baseline gap max |z| {s['ahnn_max_abs_z']:.2f}; large-ds slope "
                    f"{s['ahnn_large_ds_slope']:.3f} (1/ds law)")


# -- 8. double-well diagnostic ---------------------------------------------

def test_criterion_8_double_well():
    out = ensure_run("dw_desk", ["generate", "train", "predict"])
    r = summary(out, "predict")["max_curve_residual_training_region"]
    rows = read_csv(out / "predict" / "potential_curves.csv")
    minima = "; ".join(f"alpha {float(x['alpha']):g} member {x['member']}: {x['minima_learned']} learned vs "
                       f"{x['minima_analytic']} analytic" for x in rows if float(x["alpha"]) <= 0)
    print(f"double-well extrapolation minima: {minima}")
    report("8", r < 0.05, f"max aligned residual in the training region {r:.4f} (< 0.05); minima report: {minima}")


# -- 9. determinism --------------------------------------------------------

def test_criterion_9_determinism(tmp_path):
    smoke = str(CONFIGS / "smoke.json")
    dirs = [tmp_path / "a", tmp_path / "b"]
    commands = ("generate", "train", "predict", "sweep", "symreg", "verify-theory")
    for d in dirs:
        for command in commands:
            assert main([command, "--config", smoke, "--out", str(d)]) == 0
    files = sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*") if p.is_file())
    differ = [str(f) for f in files if (dirs[0] / f).read_bytes() != (dirs[1] / f).read_bytes()]
    report("9", not differ and len(files) > len(commands),
           f"{len(files)} files from {len(commands)} commands, byte-identical across reruns: {not differ}")
