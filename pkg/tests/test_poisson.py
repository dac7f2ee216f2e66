import json

import numpy as np
import pytest

from mvhomog import ModelSpec, instantiate
from mvhomog.engine import frozen_dt
from mvhomog.measure import MeasureSummary
from mvhomog.poisson import (CenteringError, ErgodicityError, PoissonSolver, TruncationError,
                             check_centering, fit_contraction_rate, phi, phi_derivatives,
                             poisson_residual, regularity_spotcheck, sample_invariant)
import oracles

ORIGIN = MeasureSummary.point_mass([0.0])
YS = np.array([[-1.0], [0.5], [2.0]])


@pytest.fixture(scope="module")
def linear_nu(linear):
    return sample_invariant(linear, [0.0], ORIGIN, budget=2000, seed=0)


def test_contraction_rate(linear):
    dt = frozen_dt(linear)
    beta = fit_contraction_rate(linear, [0.0], ORIGIN)
    assert beta == pytest.approx(oracles.euler_coupling_decay(dt), rel=1e-8)


def test_invariant_samples_match_euler_law(linear, linear_nu):
    var = oracles.euler_ou_variance(linear_nu.dt)
    assert abs(linear_nu.mean[0]) < 3 * linear_nu.mean_se()[0]
    assert linear_nu.cov[0, 0] == pytest.approx(var, rel=0.1)
    assert linear_nu.size == 2000
    assert linear_nu.ergodic_gap <= linear_nu.gap_tolerance


def test_ergodic_gap_failure_raises(linear):
    with pytest.raises(ErgodicityError, match="ergodic gap"):
        sample_invariant(linear, [0.0], ORIGIN, budget=64, gap_tolerance=1e-9)


def test_centering(linear, linear_nu):
    assert check_centering(linear, [0.0], ORIGIN, linear_nu).passed
    shifted = instantiate(ModelSpec("linear-ou", {"k_shift": 1.0}))
    rep = check_centering(shifted, [0.0], ORIGIN, linear_nu)
    assert not rep.passed and rep.residual[0] == pytest.approx(1.0, abs=0.05)


def test_uncentred_response_refused():
    shifted = instantiate(ModelSpec("linear-ou", {"k_shift": 1.0}))
    with pytest.raises(CenteringError, match="not centred"):
        PoissonSolver(shifted, [0.0], ORIGIN, paths=16, nu_budget=256)


def test_corrector_matches_closed_form(linear, linear_nu):
    ev = phi(linear, [0.0], ORIGIN, YS, paths=1000, nu_hat=linear_nu)
    target = oracles.corrector_slope() * YS[:, 0]
    assert np.all(np.abs(ev.phi[:, 0] - target) <= 3 * ev.se["phi"][:, 0] + 1e-3)
    assert ev.truncation_T > 0 and ev.tail_bound < 1e-3


def test_corrector_differences_exact_under_common_noise(linear, linear_nu):
    # K and the drift are linear, so differences of paths from two starts are deterministic
    solver = PoissonSolver(linear, [0.0], ORIGIN, paths=8, nu_hat=linear_nu)
    ev = solver.phi(YS)
    n = int(round(ev.truncation_T / ev.dt))
    scale = oracles.euler_corrector_slope(ev.dt) * (1 - (1 - oracles.GAMMA * ev.dt) ** n)
    diffs = ev.paths["phi"][:, :, 0] - ev.paths["phi"][0, :, 0]
    assert np.allclose(diffs, scale * (YS[:, 0] - YS[0, 0])[:, None], atol=1e-12)


def test_zero_response_gives_zero_corrector(zero_k):
    ev = phi(zero_k, [1.0], ORIGIN, YS, paths=16, nu_budget=256)
    assert not ev.phi.any() and ev.truncation_T == 0.0


def test_derivatives_fd_and_tangent_agree(linear, linear_nu):
    fd = phi_derivatives(linear, [0.0], ORIGIN, YS, paths=64, nu_hat=linear_nu)
    tan = phi_derivatives(linear, [0.0], ORIGIN, YS, mode="tangent", paths=64, nu_hat=linear_nu)
    slope = oracles.corrector_slope()
    assert np.allclose(fd.d_phi_dy[:, 0, 0], slope, atol=1e-3)
    assert np.allclose(tan.d_phi_dy, fd.d_phi_dy, atol=1e-3)
    assert np.allclose(fd.d_phi_dx, 0.0, atol=1e-6)
    assert np.allclose(fd.d2_phi_dxdy, 0.0, atol=1e-4)


def test_nonlinear_derivative_modes_agree(nonlinear):
    mu = MeasureSummary.point_mass([0.0])
    nu = sample_invariant(nonlinear, [1.0], mu, budget=512, seed=2)
    fd = phi_derivatives(nonlinear, [1.0], mu, YS, paths=128, nu_hat=nu)
    tan = phi_derivatives(nonlinear, [1.0], mu, YS, mode="tangent", paths=128, nu_hat=nu)
    tol = 3 * (fd.se["d_phi_dy"] + tan.se["d_phi_dy"]) + 2e-3
    assert np.all(np.abs(fd.d_phi_dy - tan.d_phi_dy) <= tol)


@pytest.mark.parametrize("family,x", [("linear-ou", 0.0), ("nonlinear-test", 1.0)])
def test_poisson_residual_consistent(family, x):
    cs = instantiate(ModelSpec(family))
    ev = phi_derivatives(cs, [x], ORIGIN, YS, paths=256, second_y=True, bias_check=True,
                         nu_budget=1000)
    rep = poisson_residual(cs, [x], ORIGIN, ev)
    assert rep.consistent, (rep.residual, rep.se, rep.bias_bound)


def test_poisson_residual_detects_wrong_corrector(linear, linear_nu):
    ev = phi_derivatives(linear, [0.0], ORIGIN, YS, paths=256, second_y=True, bias_check=True,
                         nu_hat=linear_nu)
    assert not poisson_residual(linear, [0.0], ORIGIN, ev.scaled(1.5)).consistent


def test_residual_needs_second_derivatives(linear, linear_nu):
    ev = phi_derivatives(linear, [0.0], ORIGIN, YS, paths=16, nu_hat=linear_nu)
    with pytest.raises(ValueError):
        poisson_residual(linear, [0.0], ORIGIN, ev)


def test_truncation_cap(linear, linear_nu):
    solver = PoissonSolver(linear, [0.0], ORIGIN, paths=16, nu_hat=linear_nu, tol=1e-20)
    with pytest.raises(TruncationError):
        solver.phi([[10.0]])


def test_horizon_grows_with_start_point(linear, linear_nu):
    solver = PoissonSolver(linear, [0.0], ORIGIN, paths=64, nu_hat=linear_nu)
    assert solver.horizon(np.array([[5.0]]))[0] > solver.horizon(np.array([[0.5]]))[0]


def test_regularity(linear):
    rep = regularity_spotcheck(linear, [0.0], ORIGIN, paths=64, nu_budget=512)
    assert rep.passed, rep.exponents
    assert rep.phi_ratio[-1] == pytest.approx(oracles.corrector_slope() * 10 / 11, rel=0.1)


def test_eval_json(linear, linear_nu):
    ev = phi(linear, [0.0], ORIGIN, YS, paths=16, nu_hat=linear_nu)
    d = json.loads(ev.to_json())
    assert len(d["phi"]) == 3 and "phi_se" in d


def test_solver_argument_checks(linear, linear_nu):
    with pytest.raises(ValueError):
        PoissonSolver(linear, [0.0], ORIGIN, paths=1, nu_hat=linear_nu)
    with pytest.raises(ValueError):
        PoissonSolver(linear, [0.0], ORIGIN, rule="simpson", nu_hat=linear_nu)
