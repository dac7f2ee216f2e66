"""Reference values computed without touching the package under test."""

import itertools
import math

import numpy as np
import scipy.linalg


def w2_permutation(x, y) -> float:
    """W2 between two uniform clouds of equal size by trying every matching."""
    x = np.asarray(x, float).reshape(len(x), -1)
    y = np.asarray(y, float).reshape(len(y), -1)
    best = math.inf
    for perm in itertools.permutations(range(len(y))):
        cost = np.sum((x - y[list(perm)]) ** 2) / len(x)
        best = min(best, cost)
    return math.sqrt(best)


def sqrtm_reference(A) -> np.ndarray:
    """Principal square root via the Schur method."""
    return np.real(scipy.linalg.sqrtm(np.asarray(A, float)))


# Linear OU fast process dY = -gamma (Y - c) dt + g0 dW, slow response
# K = kappa (Y - c).  Defaults match the linear-ou family.
GAMMA, KAPPA, G0, SIGMA0, ETA, LAM, THETA = 2.0, 1.0, 1.0, 0.5, 0.4, 1.0, 0.5


def corrector_slope(gamma=GAMMA, kappa=KAPPA) -> float:
    # int_0^inf kappa e^{-gamma t} y dt
    return kappa / gamma


def euler_corrector_slope(dt, gamma=GAMMA, kappa=KAPPA) -> float:
    # left sum: sum_k dt kappa (1 - gamma dt)^k y, a geometric series
    return kappa * dt / (1.0 - (1.0 - gamma * dt))


def ou_variance(gamma=GAMMA, g0=G0) -> float:
    return g0**2 / (2.0 * gamma)


def euler_ou_variance(dt, gamma=GAMMA, g0=G0) -> float:
    # v = (1 - gamma dt)^2 v + g0^2 dt
    r = 1.0 - gamma * dt
    return g0**2 * dt / (1.0 - r * r)


def limit_drift(x, mean, gamma=GAMMA, kappa=KAPPA, eta=ETA, lam=LAM, theta=THETA) -> float:
    return -lam * x + theta * mean + kappa / gamma * eta


def limit_diffusion(gamma=GAMMA, kappa=KAPPA, g0=G0, sigma0=SIGMA0) -> float:
    return (kappa / gamma * g0 + sigma0) ** 2


def limit_mean(t, m0, lam=LAM, theta=THETA, shift=KAPPA / GAMMA * ETA) -> float:
    # m' = -(lam - theta) m + shift
    r = lam - theta
    return shift / r + (m0 - shift / r) * math.exp(-r * t)


def coupling_decay(gamma=GAMMA) -> float:
    # |Y1 - Y2|^2 = e^{-2 gamma t} |y1 - y2|^2 under synchronous coupling
    return 2.0 * gamma


def euler_coupling_decay(dt, gamma=GAMMA) -> float:
    return -2.0 * math.log(1.0 - gamma * dt) / dt
