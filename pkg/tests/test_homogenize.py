import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mvhomog import ModelSpec, instantiate
from mvhomog.engine import NotPSDError
from mvhomog.homogenize import (GridProvider, OracleProvider, ZeroCorrectorProvider,
                                averaged_map, check_equivalence, closed_form_provider,
                                homogenize, psd_sqrt, theta)
from mvhomog.measure import MeasureSummary
from mvhomog.poisson import sample_invariant
import oracles
from oracles import sqrtm_reference

ORIGIN = MeasureSummary.point_mass([0.0])


gram_factors = st.tuples(st.integers(1, 8), st.integers(1, 8)).flatmap(
    lambda nk: arrays(float, nk, elements=st.floats(-3, 3)))


@settings(max_examples=80, deadline=None)
@given(gram_factors)
def test_psd_sqrt_of_gram_matrices(B):
    A = B @ B.T
    R = psd_sqrt(A)
    assert np.allclose(R, R.T, atol=0)
    assert np.linalg.eigvalsh(R)[0] >= -1e-12
    assert np.abs(R @ R - A).max() <= 1e-10 * max(1.0, np.abs(A).max())


def test_psd_sqrt_matches_schur_reference():
    rng = np.random.default_rng(0)
    for n in range(1, 7):
        B = rng.standard_normal((n, n + 2))
        A = B @ B.T
        assert np.allclose(psd_sqrt(A), sqrtm_reference(A), atol=1e-10)


def test_psd_sqrt_clamps_roundoff():
    A = np.diag([1.0, -1e-14])
    assert psd_sqrt(A)[1, 1] == 0.0


def test_psd_sqrt_rejects_indefinite():
    with pytest.raises(NotPSDError, match="eigenvector"):
        psd_sqrt(np.diag([1.0, -0.5]))


def test_psd_sqrt_rejects_asymmetric_and_nonsquare():
    with pytest.raises(NotPSDError, match="symmetric"):
        psd_sqrt(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        psd_sqrt(np.ones((2, 3)))


@pytest.fixture(scope="module")
def nu(linear):
    return sample_invariant(linear, [1.0], ORIGIN, budget=1000, seed=0)


def test_averaged_map_exact_for_constants(linear, nu):
    avg = averaged_map(lambda x, mu, y: np.full((len(y), 1), 0.3), linear, [1.0], ORIGIN, nu)
    assert avg.value[0] == 0.3
    assert avg.se[0] <= 1e-15


def test_averaged_map_second_moment(linear, nu):
    avg = averaged_map(lambda x, mu, y: y**2, linear, [1.0], ORIGIN, nu)
    target = oracles.euler_ou_variance(nu.dt)
    assert abs(avg.value[0] - target) <= 3 * avg.se[0] + 0.01


def test_linear_coefficients_match_closed_form(linear, nu):
    res = homogenize(linear, [1.0], ORIGIN, nu, paths=32, seed=0)
    assert res.theta[0] == pytest.approx(oracles.limit_drift(1.0, 0.0), abs=max(3 * res.theta_se[0], 0.024))
    a = oracles.limit_diffusion()
    assert res.a_tilde[0, 0] == pytest.approx(a, abs=max(3 * res.a_tilde_se[0, 0], 0.03 * a))
    assert res.sigma_tilde[0, 0] == pytest.approx(np.sqrt(res.a_tilde[0, 0]))
    assert abs(res.a_mp[0, 0] - a) <= max(3 * res.a_mp_se[0, 0], 0.03 * a)
    assert not res.mp_violation
    assert json.loads(res.to_json())["theta"] == res.theta.tolist()


def test_theta_wrapper(linear, nu):
    avg = theta(linear, [1.0], ORIGIN, nu, paths=16)
    assert avg.value[0] == pytest.approx(-0.8, abs=0.03)


def test_equivalence_report(linear, nu):
    rep = check_equivalence(linear, [1.0], ORIGIN, nu, paths=32)
    assert rep["relative_residual"] <= 0.05
    assert rep["within_3se"]
    assert {"gram_lhs", "gram_rhs", "cross_lhs", "cross_rhs", "a_mp_min_eig"} <= set(rep)


def test_zero_corrector_provider(zero_k):
    prov = ZeroCorrectorProvider(zero_k)
    X = np.array([[1.0], [-2.0]])
    mu = MeasureSummary(np.array([0.5]), 1.0)
    th, sig = prov(X, mu)
    assert np.allclose(th[:, 0], -oracles.LAM * X[:, 0] + oracles.THETA * 0.5)
    assert np.allclose(sig, oracles.SIGMA0)


def test_closed_form_provider_selection(linear, nonlinear, zero_k):
    assert isinstance(closed_form_provider(ModelSpec("linear-ou"), linear), OracleProvider)
    assert isinstance(closed_form_provider(ModelSpec("zero-k"), zero_k), ZeroCorrectorProvider)
    assert closed_form_provider(ModelSpec("nonlinear-test"), nonlinear) is None


def test_grid_provider_reproduces_linear_drift(linear):
    grid = GridProvider.build(linear, (-1.0, 1.0), (-0.5, 0.5), nx=3, nm=2, paths=16, budget=400)
    X = np.array([[-1.0], [0.3], [5.0]])
    th, sig = grid(X, MeasureSummary(np.array([0.2]), 0.04))
    expect = [oracles.limit_drift(x, 0.2) for x in (-1.0, 0.3, 1.0)]  # 5.0 is clipped to 1.0
    assert np.allclose(th[:, 0], expect, atol=0.03)
    assert np.allclose(sig[:, 0, 0] ** 2, oracles.limit_diffusion(), rtol=0.05)


def test_grid_provider_one_slow_dimension_only():
    from mvhomog.model import Dimensions
    cs = instantiate(ModelSpec("linear-ou", dims=Dimensions(2, 2, 2)))
    with pytest.raises(ValueError):
        GridProvider.build(cs, (-1, 1), (0, 0))
