import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hamlearn import symreg as sr
from hamlearn.integrate import analytic_forces
from hamlearn.symreg import PolyLibrary
from hamlearn.systems import SystemSpec, potential


def test_design_by_hand():
    lib = PolyLibrary(("q1", "q2"), 2)
    assert lib.names == ["1", "q1", "q2", "q1^2", "q1*q2", "q2^2"]
    np.testing.assert_array_equal(sr.build_design(np.array([[2.0, 3.0]]), lib), [[1, 2, 3, 4, 6, 9]])
    np.testing.assert_array_equal(sr.build_design(np.ones((4, 3)) * 7, PolyLibrary(("a", "b", "c"), 0)), np.ones((4, 1)))
    with pytest.raises(ValueError):
        sr.build_design(np.ones((2, 3)), lib)


@settings(max_examples=30, deadline=None)
@given(d=st.integers(1, 4), g=st.integers(0, 5))
def test_column_count_is_binomial(d, g):
    lib = PolyLibrary(tuple(f"x{i}" for i in range(d)), g)
    assert len(lib.names) == math.comb(d + g, g)
    assert len(set(lib.names)) == len(lib.names)


def test_exact_span_recovery():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(200, 6))
    c = np.array([0.0, 1.5, -0.3, 0.0, 2.0, 0.0])
    fit = sr.stlsq(a, a @ c, threshold=0.1)
    np.testing.assert_allclose(fit.coefficients[:, 0], c, atol=1e-10)


def test_zero_threshold_is_ridge():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(50, 4))
    y = rng.normal(size=50)
    fit = sr.stlsq(a, y, threshold=0.0, ridge=1e-3)
    ref = np.linalg.solve(a.T @ a + 1e-3 * np.eye(4), a.T @ y)
    np.testing.assert_allclose(fit.coefficients[:, 0], ref, rtol=1e-12)


def test_noisy_synthetic_support():
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, size=(2000, 2))
    y = 2 * x[:, 0] - 0.5 * x[:, 1] ** 3 + rng.normal(0, 1e-4, 2000)
    lib = PolyLibrary(("q1", "q2"), 3)
    fit = sr.stlsq(sr.build_design(x, lib), y, 0.05, library=lib, target_names=("y",))
    assert fit.support("y") == {"q1", "q2^3"}
    assert fit.coef("y", "q1") == pytest.approx(2.0, rel=0.01)
    assert fit.coef("y", "q2^3") == pytest.approx(-0.5, rel=0.01)
    # coefficients under the threshold are exactly zero
    c = fit.coefficients[:, 0]
    assert np.all((c == 0) | (np.abs(c) >= 0.05))


def test_rank_deficient_support_is_flagged():
    x = np.random.default_rng(3).normal(size=(30, 1))
    a = np.concatenate([x, x], axis=1)
    fit = sr.stlsq(a, 2 * x[:, 0], threshold=0.1, ridge=0.0)
    assert fit.flags and "rank-deficient" in fit.flags[0]
    np.testing.assert_allclose(fit.coefficients[:, 0], [1.0, 1.0], atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), s=st.floats(0.1, 10.0))
def test_idempotence_and_scale_covariance(seed, s):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(80, 5))
    y = a @ np.array([1.0, 0.0, -0.7, 0.02, 0.3]) + rng.normal(0, 0.01, 80)
    fit = sr.stlsq(a, y, 0.05)
    keep = np.flatnonzero(fit.coefficients[:, 0])
    again = sr.stlsq(a[:, keep], y, 0.05)
    np.testing.assert_allclose(again.coefficients[:, 0], fit.coefficients[keep, 0], rtol=1e-12, atol=1e-15)
    scaled = sr.stlsq(a, s * y, 0.05 * s)
    support = fit.coefficients[:, 0] != 0
    assert np.array_equal(scaled.coefficients[:, 0] != 0, support)
    np.testing.assert_allclose(scaled.coefficients[:, 0], s * fit.coefficients[:, 0], rtol=1e-9, atol=1e-12)


def test_stlsq_errors():
    with pytest.raises(ValueError):
        sr.stlsq(np.ones((3, 2)), np.ones(4))
    with pytest.raises(ValueError):
        sr.stlsq(np.ones((3, 2)), np.ones(3), threshold=-1)


@pytest.mark.parametrize("threshold", [0.01, 0.05, 0.1])
def test_oracle_hh_equations_of_motion(threshold):
    fit = sr.recover_eom_from_forces(analytic_forces("henon_heiles"), [0.4, 0.6], threshold=threshold)
    assert not fit.flags
    for target, want in sr.HH_EOM_SUPPORT.items():
        assert fit.support(target) == want
    assert fit.extracted["alpha_hat"] == pytest.approx(0.4, abs=1e-8)
    assert fit.extracted["alpha_hat_cross"] == pytest.approx(0.4, abs=1e-8)
    assert fit.extracted["beta_hat"] == pytest.approx(0.6, abs=1e-8)
    assert fit.coef("dq1", "p1") == pytest.approx(1.0, abs=1e-6)


def test_structure_mismatch_is_flagged():
    # a force provider with a spurious extra term
    base = analytic_forces("henon_heiles")
    bad = sr.ForceProvider(lambda q, lam: base.dVdq(q, lam) + 0.3 * q[..., ::-1] ** 3, base.dKdp)
    fit = sr.recover_eom_from_forces(bad, [0.4, 0.6])
    assert any("structure mismatch" in f for f in fit.flags)


def test_oracle_kinetic_energy():
    spec = SystemSpec("henon_heiles", 0.4, 0.6)
    fit_k, fit_v = sr.fit_energy_functions(lambda p: 0.5 * np.sum(p * p, axis=1), lambda q: potential(spec, q),
                                           analytic_forces("henon_heiles"), "henon_heiles", spec.lam,
                                           sample_count=500, degree=3, n_traj=10, horizon=100)
    assert fit_k.support("K") - {"1"} == {"p1^2", "p2^2"}
    assert fit_k.coef("K", "p1^2") == pytest.approx(0.5, abs=1e-6)
    assert fit_v.coef("V", "q1^2*q2") == pytest.approx(0.4, abs=1e-6)
    assert fit_v.coef("V", "q2^3") == pytest.approx(-0.2, abs=1e-6)


def test_oracle_one_dim_kinetic_energy():
    spec = SystemSpec("morse", 2.0)
    fit_k, _ = sr.fit_energy_functions(lambda p: 0.5 * p[:, 0] ** 2, lambda q: potential(spec, q),
                                       analytic_forces("morse"), "morse", [2.0], sample_count=500, n_traj=10,
                                       horizon=100)
    assert fit_k.support("K") - {"1"} == {"p1^2"}
    assert fit_k.coef("K", "p1^2") == pytest.approx(0.5, abs=1e-6)


@pytest.mark.parametrize("alpha", [2.0, 1.5])
def test_oracle_morse_expansion(alpha):
    spec = SystemSpec("morse", alpha)
    _, fit_v = sr.fit_energy_functions(lambda p: 0.5 * p[:, 0] ** 2, lambda q: potential(spec, q),
                                       analytic_forces("morse"), "morse", [alpha])
    c2 = fit_v.extracted["c2"]
    assert c2 == pytest.approx(alpha ** 2, rel=0.01)
    assert abs(fit_v.extracted["c1"]) < 0.02
    assert abs(fit_v.extracted["c1"]) < 0.05 * c2
    assert fit_v.extracted["alpha_hat"] == pytest.approx(alpha, rel=0.005)
    # constant column survives regardless of threshold
    assert "1" in fit_v.support("V")


def _quadratic_fit(c2):
    lib = PolyLibrary(("qt",), 2)
    return sr.SparseFit(lib, ("V",), np.array([[0.0], [0.0], [c2]]), 0.05, np.zeros(1), {}, [])


def test_alpha_extraction_examples():
    assert sr.extract_morse_alpha(_quadratic_fit(4.0)) == 2.0
    assert sr.extract_morse_alpha(_quadratic_fit(0.0)) == 0.0
    with pytest.raises(sr.ExtractionError):
        sr.extract_morse_alpha(_quadratic_fit(-0.1))


def test_fit_serialization():
    fit = sr.recover_eom_from_forces(analytic_forces("henon_heiles"), [0.4, 0.6], n_traj=4, horizon=50)
    doc = json.loads(fit.to_json())
    assert doc["library"]["variables"] == ["q1", "q2", "p1", "p2"]
    assert set(doc["targets"]["dp1"]) == {"q1", "q1*q2"}
    assert any(line.startswith("dp2 =") for line in fit.equations())


def test_degree_guard():
    with pytest.raises(ValueError):
        sr.fit_energy_functions(None, None, analytic_forces("morse"), "morse", [2.0], degree=1)
