import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hamlearn import datagen as dg
from hamlearn.datagen import OuNoiseConfig, SparseDataset, TrajectoryBank
from hamlearn.systems import SystemSpec, hamiltonian


def test_decay_constant():
    assert OuNoiseConfig(tau=0.5, sigma_inf=1.0).decay(0.1) == pytest.approx(0.8187307530779818, abs=1e-16)


def test_ou_statistics_over_a_million_steps():
    cfg = OuNoiseConfig(tau=0.5, sigma_inf=0.3)
    eta = dg.ou_sequence(cfg, 0.1, 1_000_000, 1, dg.stream(0, 99))[:, 0]
    assert np.var(eta) == pytest.approx(0.09, rel=0.02)
    lag1 = np.corrcoef(eta[:-1], eta[1:])[0, 1]
    assert abs(lag1 - cfg.decay(0.1)) < 0.005


def test_zero_amplitude_is_silent():
    eta = dg.ou_sequence(OuNoiseConfig(tau=0.5, sigma_inf=0.0), 0.1, 50, 3, dg.stream(0))
    assert np.all(eta == 0)
    with pytest.raises(ValueError):
        dg.ou_sequence(OuNoiseConfig(tau=0.5, nsr=0.1), 0.1, 5, 1, dg.stream(0))


def test_noise_config_validation():
    with pytest.raises(ValueError):
        OuNoiseConfig(tau=0.0, nsr=0.1)
    with pytest.raises(ValueError):
        OuNoiseConfig(tau=1.0)
    with pytest.raises(ValueError):
        OuNoiseConfig(tau=1.0, nsr=0.1, sigma_inf=0.1)
    assert OuNoiseConfig(tau=1.0, nsr=0.0).disabled


def test_resolve_nsr_pooling_rule():
    a = np.array([[-1.0], [1.0]] * 50)  # variance 1
    b = np.array([[-2.0], [2.0]] * 50)  # variance 4
    assert dg.resolve_nsr([a, b], 0.1) == pytest.approx(0.1581138830, abs=1e-10)
    assert dg.resolve_nsr([a, b], 0.0) == 0.0
    with pytest.raises(dg.DegenerateDataError):
        dg.resolve_nsr([np.ones((10, 2))], 0.1)


def test_sampler_errors_and_determinism():
    morse = SystemSpec("morse", 2.0)
    with pytest.raises(dg.SamplingError):
        dg.sample_initial_condition(morse, e_max=-1.5, rng=dg.stream(0))
    a = dg.sample_initial_condition(morse, rng=dg.stream(3, 1))
    b = dg.sample_initial_condition(morse, rng=dg.stream(3, 1))
    assert np.array_equal(a.q, b.q) and np.array_equal(a.p, b.p)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), system=st.sampled_from(["henon_heiles", "morse", "double_well"]))
def test_sampled_states_respect_energy_bound(seed, system):
    spec = SystemSpec.from_lambda(system, [0.5, 0.5] if system == "henon_heiles" else [0.8])
    e_max = dg.SAMPLING_BOXES[system][2]
    s = dg.sample_initial_condition(spec, rng=dg.stream(seed))
    assert hamiltonian(spec, s) <= e_max + 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), energy=st.floats(0.02, 0.15))
def test_fixed_energy_draws_are_exact(seed, energy):
    spec = SystemSpec("henon_heiles", 0.6, 0.4)
    s = dg.sample_initial_condition(spec, e_max=1.0, rng=dg.stream(seed), target_energy=energy)
    assert hamiltonian(spec, s) == pytest.approx(energy, rel=1e-12)


def _toy_bank(n_traj=4000, T=15):
    z = np.zeros((1, n_traj, T, 2))
    z[..., 0] = np.arange(T)
    return TrajectoryBank("morse", np.array([[2.0]]), z, z.copy(), 0.1, dg.NO_NOISE, 1.0, 0)


def test_offsets_are_uniform_over_window():
    ds = dg.slice_windows(_toy_bank(), 15, seed=1)
    counts = np.bincount(ds.k, minlength=15)[1:]
    assert counts.sum() == 4000 and ds.k.min() >= 1 and ds.k.max() <= 14
    expected = 4000 / 14
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    # 13 degrees of freedom, 0.999 quantile is about 34.5
    assert chi2 < 34.5
    # the observation sits k instants after the window start
    np.testing.assert_array_equal(ds.z_obs[:, 0] - ds.z0[:, 0], ds.k)


def test_full_scale_hh_sample_counts():
    lam = dg.grid([0.2, 0.4, 0.6, 0.8], [0.2, 0.4, 0.6, 0.8])
    ds = dg.make_sparse_dataset("henon_heiles", lam, 800, fine_dt=0.01, seed=0)
    assert len(ds) == 12800
    tr, va = dg.train_val_split(len(ds), 0.25, 0)
    assert (len(tr), len(va)) == (9600, 3200)
    assert not set(tr) & set(va)


def test_noise_free_windows_are_clean_states():
    ds = dg.make_sparse_dataset("morse", [[1.0], [2.0]], 30, window_len=15, traj_len=40, seed=2)
    bank = ds.bank
    assert np.array_equal(bank.noisy, bank.clean)
    assert ds.noise.disabled
    for i in range(len(ds)):
        li, ti = divmod(i, 30)
        rows = np.flatnonzero(np.all(bank.clean[li, ti] == ds.z0[i], axis=1))
        assert rows.size == 1
        assert np.array_equal(bank.clean[li, ti, rows[0] + ds.k[i]], ds.z_obs[i])


def test_noisy_bank_uses_resolved_amplitude():
    noise = OuNoiseConfig(tau=0.5, nsr=0.1)
    ds = dg.make_sparse_dataset("morse", [[2.0]], 50, noise, traj_len=30, seed=4)
    assert ds.noise.sigma_inf == pytest.approx(0.1 * ds.signal_std)
    assert not np.array_equal(ds.bank.noisy, ds.bank.clean)
    # initial states stay clean unless asked otherwise
    assert all(np.any(np.all(ds.bank.clean[0, i] == ds.z0[i], axis=1)) for i in range(50))
    noisy0 = dg.slice_windows(ds.bank, 15, 4, noise_initial=True)
    assert all(np.any(np.all(ds.bank.noisy[0, i] == noisy0.z0[i], axis=1)) for i in range(50))


def test_dataset_bytes_are_deterministic_and_round_trip(tmp_path):
    noise = OuNoiseConfig(tau=0.02, nsr=0.1)
    a = dg.make_sparse_dataset("henon_heiles", [[0.4, 0.6]], 20, noise, seed=9)
    b = dg.make_sparse_dataset("henon_heiles", [[0.4, 0.6]], 20, noise, seed=9)
    assert a.save(tmp_path / "a.json") == b.save(tmp_path / "b.json")
    back = SparseDataset.load(tmp_path / "a.json")
    for name in ("z0", "z_obs", "k", "lam"):
        assert np.array_equal(getattr(back, name), getattr(a, name))
    assert back.noise == a.noise and back.signal_std == a.signal_std
    c = dg.make_sparse_dataset("henon_heiles", [[0.4, 0.6]], 20, noise, seed=10)
    assert not np.array_equal(c.z0, a.z0)


def test_order_independence_of_streams():
    # each trajectory has its own stream: the first lambda's samples do not
    # depend on what other lambdas are in the grid
    one = dg.make_sparse_dataset("morse", [[1.0]], 10, seed=5)
    two = dg.make_sparse_dataset("morse", [[1.0], [3.0]], 10, seed=5)
    assert np.array_equal(one.z0, two.z0[:10])


def test_grid_helper():
    g = dg.grid([1, 2], [3, 4, 5])
    assert g.shape == (6, 2) and tuple(g[0]) == (1, 3)
    assert dg.grid([0.5, 1.0]).shape == (2, 1)
    assert math.isclose(dg.grid([0.1])[0, 0], 0.1)
