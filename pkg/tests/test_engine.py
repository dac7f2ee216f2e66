import json
from dataclasses import replace

import numpy as np
import pytest

from mvhomog import InitialLaw, Marginal, ModelSpec, instantiate, oracle_reference
from mvhomog.engine import (BlowUpError, IntegratorConfig, NotPSDError, StabilityError,
                            coupling_rate, fit_decay_rate, frozen_dt, simulate_frozen,
                            simulate_frozen_corrected, simulate_full, simulate_limit,
                            simulate_tangent_flow, stability_cap)
from mvhomog.homogenize import OracleProvider
from mvhomog.measure import MeasureSummary
from mvhomog.model import Dimensions
from mvhomog.rng import ZeroNoise
import oracles

ORIGIN = MeasureSummary.point_mass([0.0])


def test_config_rejects_unstable_step(linear):
    cap = stability_cap(linear, 0.1)
    IntegratorConfig(0.1, cap, 1.0 * cap * 10, 4).check(linear)
    with pytest.raises(StabilityError, match="stability cap"):
        IntegratorConfig(0.1, 2 * cap, 20 * cap, 4).check(linear)


def test_config_requires_whole_steps():
    with pytest.raises(StabilityError):
        IntegratorConfig(0.1, 0.3, 1.0, 4)
    with pytest.raises(StabilityError):
        IntegratorConfig(0.0, 0.1, 1.0, 4)


def test_for_model_divides_horizon(linear):
    cfg = IntegratorConfig.for_model(linear, 0.07, 1.0, 10)
    assert cfg.n_steps * cfg.dt == pytest.approx(1.0)
    assert cfg.dt <= stability_cap(linear, 0.07)


def test_full_system_deterministic_mean(zero_k):
    # with no noise the particle mean follows m_{k+1} = m_k (1 - (lam - theta) dt)
    cfg = IntegratorConfig.for_model(zero_k, 0.1, 0.5, 50)
    law = InitialLaw(Marginal("normal", 1.0, 0.5))
    ens = simulate_full(zero_k, cfg, law, seed=0, noise=ZeroNoise())
    m0 = ens.X[0].mean()
    expect = m0 * (1 - (oracles.LAM - oracles.THETA) * cfg.dt) ** cfg.n_steps
    assert ens.X[-1].mean() == pytest.approx(expect, rel=1e-12)


def test_full_system_is_seeded(linear):
    cfg = IntegratorConfig.for_model(linear, 0.2, 0.2, 30)
    a = simulate_full(linear, cfg, InitialLaw(), 5)
    b = simulate_full(linear, cfg, InitialLaw(), 5)
    c = simulate_full(linear, cfg, InitialLaw(), 6)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.Y, b.Y)
    assert not np.array_equal(a.X, c.X)


def test_save_every_thins_snapshots(linear):
    cfg = IntegratorConfig.for_model(linear, 0.2, 0.2, 5, save_every=10)
    ens = simulate_full(linear, cfg, InitialLaw(), 0)
    assert len(ens.times) == cfg.n_steps // 10 + 1
    assert ens.times[-1] == pytest.approx(0.2)


def test_blow_up_names_particle_and_time(linear):
    cs = replace(linear, b=lambda x, mu, y: np.where(np.arange(len(x))[:, None] == 3, np.inf, 0.0))
    cfg = IntegratorConfig.for_model(cs, 0.2, 0.2, 8)
    with pytest.raises(BlowUpError) as info:
        simulate_full(cs, cfg, InitialLaw(), 0)
    assert info.value.index == 3
    assert info.value.time == pytest.approx(cfg.dt)


def test_path_csv_and_sidecar(tmp_path, linear):
    cfg = IntegratorConfig.for_model(linear, 0.2, 0.02, 3)
    ens = simulate_full(linear, cfg, InitialLaw(), 0)
    path = tmp_path / "paths.csv"
    ens.to_csv(path)
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert data.shape == (len(ens.times) * 3, 4)
    assert np.allclose(data[-3:, 2], ens.X[-1, :, 0])
    assert json.loads((tmp_path / "paths.csv.json").read_text())["seed"] == 0


def test_frozen_step_cap(linear):
    with pytest.raises(StabilityError):
        simulate_frozen(linear, [0.0], ORIGIN, [0.0], 1.0, 0.1, seed=0)


def test_frozen_invariant_variance(linear):
    dt = frozen_dt(linear)
    path = simulate_frozen(linear, [0.0], ORIGIN, [0.0], 4.0, dt, seed=1, paths=20000,
                           save_every=400)
    var = path.Y[-1].var()
    assert var == pytest.approx(oracles.euler_ou_variance(dt), rel=0.04)


def test_corrected_drift_shifts_mean(linear):
    dt = frozen_dt(linear)
    base = simulate_frozen(linear, [0.0], ORIGIN, [0.0], 4.0, dt, seed=1, paths=4000)
    shifted = simulate_frozen_corrected(linear, [0.0], ORIGIN, [0.0], 0.25, 4.0, dt, seed=1,
                                        paths=4000)
    # extra drift sqrt(eps) eta relaxes to a mean shift of sqrt(eps) eta / gamma
    gap = shifted.Y[-1].mean() - base.Y[-1].mean()
    k = len(base.times) - 1
    expect = 0.5 * oracles.ETA / oracles.GAMMA * (1 - (1 - oracles.GAMMA * dt) ** k)
    assert gap == pytest.approx(expect, rel=1e-9)


def test_tangent_flow_is_exact_geometric(linear):
    dt = frozen_dt(linear)
    tf = simulate_tangent_flow(linear, [0.0], ORIGIN, [0.3], [1.0], 1.0, dt, seed=0, paths=3)
    k = np.arange(len(tf.times))
    expect = (1 - oracles.GAMMA * dt) ** k
    assert np.allclose(tf.flow[:, 0, 0], expect, rtol=1e-9)


def test_coupling_rate_matches_euler_contraction(linear):
    dt = frozen_dt(linear)
    rate, times, gaps = coupling_rate(linear, [0.0], ORIGIN, [1.0], [-1.0], 2.0, dt, seed=0,
                                      paths=16)
    assert rate == pytest.approx(oracles.euler_coupling_decay(dt), rel=1e-8)
    assert gaps[0] == pytest.approx(4.0)


def test_fit_decay_rate_recovers_exponent():
    t = np.linspace(0, 3, 50)
    assert fit_decay_rate(t, 2.0 * np.exp(-1.7 * t)) == pytest.approx(1.7)
    with pytest.raises(ValueError):
        fit_decay_rate(t[:1], np.ones(1))


def test_limit_mean_follows_ode():
    spec = ModelSpec("linear-ou", initial=InitialLaw(Marginal("normal", 1.0, 0.5)))
    provider = OracleProvider(oracle_reference(spec))
    cfg = IntegratorConfig(1.0, 0.001, 1.0, 4000)
    ens = simulate_limit(provider, Dimensions(), cfg, spec.initial, seed=0)
    m0 = ens.X[0].mean()
    sd = ens.X[-1].std()
    assert ens.X[-1].mean() == pytest.approx(oracles.limit_mean(1.0, m0), abs=3 * sd / np.sqrt(4000) + 1e-3)


def test_limit_rejects_indefinite_diffusion():
    bad = lambda X, mu: (np.zeros_like(X), np.array([[-1.0]]))
    cfg = IntegratorConfig(1.0, 0.1, 0.2, 5)
    with pytest.raises(NotPSDError, match="min eigenvalue"):
        simulate_limit(bad, Dimensions(), cfg, InitialLaw(), seed=0)
