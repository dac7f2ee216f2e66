"""Euler-Maruyama integrators for the two-scale particle system and its relatives.

Covered dynamics:

* the full slow-fast interacting particle system, with one Brownian motion
  driving both the slow and the fast line of each particle;
* the frozen fast equation ``dY = f(x, mu, Y) dt + g(x, mu, Y) dW`` and its
  epsilon-corrected variant with drift ``f + sqrt(eps) h``;
* the first-order tangent flow of the frozen equation with respect to ``y``;
* the limiting mean-field equation ``dX = Theta dt + Sigma dW~``.

All measure arguments seen by the coefficients are pre-step empirical measures.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from .measure import EmpiricalMeasure, MeasureSummary, as_summary
from .model import CoefficientSet, Dimensions, InitialLaw
from .rng import NoiseStream


class StabilityError(ValueError):
    pass


class BlowUpError(FloatingPointError):
    def __init__(self, what: str, index: int, time: float):
        super().__init__(f"non-finite {what} state for particle {index} at t={time:.6g}")
        self.index = index
        self.time = time


class NotPSDError(ValueError):
    pass


def fast_step_ratio(cs: CoefficientSet) -> float:
    """Largest dt/eps keeping the explicit fast drift contractive."""
    return min(0.1 / cs.gamma, 0.1 / cs.lip_f)


def stability_cap(cs: CoefficientSet, epsilon: float) -> float:
    return epsilon * fast_step_ratio(cs)


def _n_steps(T: float, dt: float) -> int:
    return int(round(T / dt))


@dataclass(frozen=True)
class IntegratorConfig:
    epsilon: float
    dt: float
    T: float
    N: int
    save_every: int = 1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise StabilityError("epsilon must be positive")
        if not self.dt > 0 or self.T < 0 or self.N < 1 or self.save_every < 1:
            raise StabilityError(f"invalid integrator settings {self}")
        if self.T > 0 and abs(self.n_steps * self.dt - self.T) > 1e-9 * max(1.0, self.T):
            raise StabilityError("T must be an integer multiple of dt")

    @property
    def n_steps(self) -> int:
        return _n_steps(self.T, self.dt)

    def check(self, cs: CoefficientSet) -> "IntegratorConfig":
        cap = stability_cap(cs, self.epsilon)
        if self.dt > cap * (1 + 1e-9):
            raise StabilityError(f"dt={self.dt:.3g} exceeds the stability cap {cap:.3g} at eps={self.epsilon}")
        return self

    @classmethod
    def for_model(cls, cs: CoefficientSet, epsilon: float, T: float, N: int,
                  delta0: float | None = None, save_every: int = 1) -> "IntegratorConfig":
        """dt = eps * delta0, shrunk so that it divides T."""
        delta0 = fast_step_ratio(cs) if delta0 is None else delta0
        dt = epsilon * delta0
        if T > 0:
            dt = T / math.ceil(T / dt - 1e-9)
        return cls(epsilon, dt, T, N, save_every).check(cs)

    def to_dict(self):
        return {"epsilon": self.epsilon, "dt": self.dt, "T": self.T, "N": self.N,
                "save_every": self.save_every}


def _measure_arg(cs: CoefficientSet, X: np.ndarray) -> MeasureSummary:
    mu = EmpiricalMeasure(X)
    return mu.summary(keep_cloud=cs.measure_dependence == "cloud")


def _first_bad(*arrays) -> int | None:
    for a in arrays:
        bad = ~np.isfinite(a).reshape(a.shape[0], -1).all(axis=1)
        if bad.any():
            return int(np.argmax(bad))
    return None


@dataclass
class ParticleSystemState:
    t: float
    X: np.ndarray
    Y: np.ndarray
    step: int = 0

    @cached_property
    def mu(self) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.X)


def step_full(state: ParticleSystemState, cs: CoefficientSet, cfg: IntegratorConfig,
              noise: NoiseStream, tap: Callable[[str, np.ndarray], None] | None = None
              ) -> ParticleSystemState:
    """One explicit step of the two-scale system; the same increment drives X and Y."""
    X, Y = state.X, state.Y
    N = X.shape[0]
    dt, eps = cfg.dt, cfg.epsilon
    mu = _measure_arg(cs, X)
    dW = noise.increments(state.step, N, cs.dims.d, dt)
    se = math.sqrt(eps)
    if tap is not None:
        tap("X", dW)
    Xn = X + cs.b(X, mu, Y) * dt + cs.K(X, mu, Y) * (dt / se) \
        + np.einsum("bij,bj->bi", cs.sigma(X, mu, Y), dW)
    if tap is not None:
        tap("Y", dW)
    Yn = Y + cs.f(X, mu, Y) * (dt / eps) + cs.h(X, mu, Y) * (dt / se) \
        + np.einsum("bij,bj->bi", cs.g(X, mu, Y), dW) / se
    t = state.t + dt
    bad = _first_bad(Xn, Yn)
    if bad is not None:
        raise BlowUpError("slow/fast", bad, t)
    return ParticleSystemState(t, Xn, Yn, state.step + 1)


@dataclass
class PathEnsemble:
    """Saved snapshots of a particle simulation.

    ``X`` has shape (S, N, n); ``Y`` is (S, N, m) or None for the limit equation.
    """

    times: np.ndarray
    X: np.ndarray
    Y: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.times[0] != 0 or np.any(np.diff(self.times) <= 0):
            raise ValueError("snapshot times must start at 0 and increase strictly")

    def terminal(self) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.X[-1])

    def to_csv(self, path) -> None:
        """Long format ``time, particle, x0.., y0..`` plus a JSON sidecar."""
        S, N, n = self.X.shape
        cols = [np.repeat(self.times, N), np.tile(np.arange(N), S), self.X.reshape(S * N, n)]
        header = ["time", "particle"] + [f"x{i}" for i in range(n)]
        if self.Y is not None:
            m = self.Y.shape[2]
            cols.append(self.Y.reshape(S * N, m))
            header += [f"y{i}" for i in range(m)]
        data = np.column_stack(cols)
        fmt = ["%.17g", "%d"] + ["%.17g"] * (data.shape[1] - 2)
        np.savetxt(path, data, delimiter=",", header=",".join(header), comments="", fmt=fmt)
        with open(f"{path}.json", "w") as fh:
            json.dump(self.meta, fh, sort_keys=True, indent=2)


def simulate_full(cs: CoefficientSet, cfg: IntegratorConfig, initial: InitialLaw, seed: int,
                  noise: NoiseStream | None = None, keep_y: bool = True) -> PathEnsemble:
    """Integrate the particle system from sampled initial data."""
    cfg.check(cs)
    X, Y = initial.sample(cs.dims, cfg.N, seed)
    noise = NoiseStream(seed, "W") if noise is None else noise
    state = ParticleSystemState(0.0, X, Y)
    times, xs, ys = [0.0], [X], [Y]
    for k in range(cfg.n_steps):
        state = step_full(state, cs, cfg, noise)
        if (k + 1) % cfg.save_every == 0:
            times.append((k + 1) * cfg.dt)
            xs.append(state.X)
            ys.append(state.Y)
    meta = {"config": cfg.to_dict(), "seed": int(seed), "model": cs.name}
    return PathEnsemble(np.array(times), np.stack(xs), np.stack(ys) if keep_y else None, meta)


# --------------------------------------------------------------------------
# frozen fast dynamics


def frozen_dt(cs: CoefficientSet) -> float:
    """Default step of the frozen equation (well inside the 0.1/gamma cap)."""
    return 0.01 / max(cs.gamma, cs.lip_f)


def _check_frozen_dt(cs: CoefficientSet, dt: float):
    if dt > 0.1 / cs.gamma * (1 + 1e-9):
        raise StabilityError(f"frozen step {dt:.3g} exceeds 0.1/gamma")


def _jacobian_y(fn, xf, mu, y):
    """Central-difference Jacobian d fn / d y, trailing axis is the y-direction."""
    m = y.shape[1]
    step = 1e-5 * (1.0 + np.linalg.norm(y, axis=1))
    cols = []
    for j in range(m):
        e = np.zeros(m)
        e[j] = 1.0
        dy = step[:, None] * e[None, :]
        diff = fn(xf, mu, y + dy) - fn(xf, mu, y - dy)
        cols.append(diff / (2 * step.reshape((-1,) + (1,) * (diff.ndim - 1))))
    return np.stack(cols, axis=-1)


def integrate_frozen(cs: CoefficientSet, x, mu, y0, dt: float, n_steps: int,
                     noise: NoiseStream, callback: Callable[[int, np.ndarray], None],
                     drift_h_scale: float = 0.0, tangent: np.ndarray | None = None) -> None:
    """Batched Euler scheme for the frozen equation.

    ``x`` is (B, n), ``y0`` is (B, M, m): B slow states / start points, each with
    M paths.  Path ``j`` uses row ``j`` of every noise block for all B, which
    gives common random numbers across start points.  ``callback(k, Y)`` is
    called with the state at step k = 0..n_steps (and ``(Y, V)`` when a
    tangent direction array ``tangent`` of shape (B, M, m) is propagated).
    """
    mu = as_summary(mu)
    x = np.asarray(x, dtype=float)
    Y = np.array(y0, dtype=float)
    B, M, m = Y.shape
    d = cs.dims.d
    xf = np.repeat(x, M, axis=0)
    Yf = Y.reshape(B * M, m)
    V = None if tangent is None else np.array(tangent, dtype=float).reshape(B * M, m)
    callback(0, Yf.reshape(B, M, m) if V is None else (Yf.reshape(B, M, m), V.reshape(B, M, m)))
    for k in range(n_steps):
        dW = np.tile(noise.increments(k, M, d, dt), (B, 1))
        drift = cs.f(xf, mu, Yf)
        if drift_h_scale:
            drift = drift + drift_h_scale * cs.h(xf, mu, Yf)
        gm = cs.g(xf, mu, Yf)
        if V is not None:
            jf = _jacobian_y(cs.f, xf, mu, Yf)
            jg = _jacobian_y(cs.g, xf, mu, Yf)
            if drift_h_scale:
                jf = jf + drift_h_scale * _jacobian_y(cs.h, xf, mu, Yf)
            V = V + np.einsum("bij,bj->bi", jf, V) * dt + np.einsum("bilj,bj,bl->bi", jg, V, dW)
        Yf = Yf + drift * dt + np.einsum("bij,bj->bi", gm, dW)
        bad = _first_bad(Yf) if V is None else _first_bad(Yf, V)
        if bad is not None:
            raise BlowUpError("frozen", bad, (k + 1) * dt)
        callback(k + 1, Yf.reshape(B, M, m) if V is None else (Yf.reshape(B, M, m), V.reshape(B, M, m)))


@dataclass
class FastPath:
    times: np.ndarray
    Y: np.ndarray  # (S, M, m)
    flow: np.ndarray | None = None  # (S, M, m)


def _start(y0, paths: int, m: int) -> np.ndarray:
    y0 = np.asarray(y0, dtype=float)
    if y0.ndim == 1:
        y0 = np.broadcast_to(y0, (paths, m))
    return y0.reshape(1, paths, m)


def _run_frozen(cs, x, mu, y0, horizon, dt, seed, paths, save_every, h_scale, tangent=None,
                noise=None) -> FastPath:
    _check_frozen_dt(cs, dt)
    n_steps = _n_steps(horizon, dt)
    if abs(n_steps * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise StabilityError("horizon must be an integer multiple of dt")
    x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, cs.dims.n)
    start = _start(y0, paths, cs.dims.m)
    noise = NoiseStream(seed, "frozen") if noise is None else noise
    times, ys, vs = [], [], []

    def keep(k, state):
        if k % save_every == 0:
            times.append(k * dt)
            if tangent is None:
                ys.append(state[0].copy())
            else:
                ys.append(state[0][0].copy())
                vs.append(state[1][0].copy())

    tan = None
    if tangent is not None:
        tan = np.broadcast_to(np.asarray(tangent, dtype=float), start.shape)
    integrate_frozen(cs, x, mu, start, dt, n_steps, noise, keep, drift_h_scale=h_scale, tangent=tan)
    return FastPath(np.array(times), np.stack(ys), np.stack(vs) if vs else None)


def simulate_frozen(cs: CoefficientSet, x, mu, y0, horizon: float, dt: float, seed: int,
                    paths: int = 1, save_every: int = 1, noise: NoiseStream | None = None) -> FastPath:
    """Euler path(s) of the frozen fast equation with (x, mu) held fixed."""
    return _run_frozen(cs, x, mu, y0, horizon, dt, seed, paths, save_every, 0.0, noise=noise)


def simulate_frozen_corrected(cs: CoefficientSet, x, mu, y0, epsilon: float, horizon: float,
                              dt: float, seed: int, paths: int = 1, save_every: int = 1,
                              noise: NoiseStream | None = None) -> FastPath:
    """Frozen equation with the extra drift ``sqrt(eps) h``; shares the frozen noise stream."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    return _run_frozen(cs, x, mu, y0, horizon, dt, seed, paths, save_every, math.sqrt(epsilon),
                       noise=noise)


def simulate_tangent_flow(cs: CoefficientSet, x, mu, y0, direction, horizon: float, dt: float,
                          seed: int, paths: int = 1, save_every: int = 1,
                          noise: NoiseStream | None = None) -> FastPath:
    """Base path plus the variation ``d_y Y_t . k`` driven by the same noise."""
    k = np.asarray(direction, dtype=float).reshape(cs.dims.m)
    return _run_frozen(cs, x, mu, y0, horizon, dt, seed, paths, save_every, 0.0, tangent=k,
                       noise=noise)


def fit_decay_rate(times: np.ndarray, values: np.ndarray, floor: float = 1e-12) -> float:
    """Least-squares rate r in ``values ~ C exp(-r t)`` over the part above ``floor``."""
    values = np.asarray(values, dtype=float)
    keep = values > floor * values[0]
    t, v = np.asarray(times)[keep], np.log(values[keep])
    if len(t) < 2:
        raise ValueError("not enough points above the floor to fit a rate")
    slope = np.polyfit(t, v, 1)[0]
    return float(-slope)


def coupling_rate(cs: CoefficientSet, x, mu, y1, y2, horizon: float, dt: float, seed: int,
                  paths: int = 256) -> tuple[float, np.ndarray, np.ndarray]:
    """Fitted decay rate of ``E|Y^{y1}_t - Y^{y2}_t|^2`` under synchronous coupling.

    Returns the rate together with the time grid and the mean squared gap.
    """
    _check_frozen_dt(cs, dt)
    n_steps = _n_steps(horizon, dt)
    m = cs.dims.m
    x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, cs.dims.n)
    starts = np.stack([np.broadcast_to(np.asarray(y1, float), (paths, m)),
                       np.broadcast_to(np.asarray(y2, float), (paths, m))])
    gaps = np.empty(n_steps + 1)

    def record(k, Y):
        gaps[k] = np.mean(np.sum((Y[0] - Y[1]) ** 2, axis=-1))

    integrate_frozen(cs, np.repeat(x, 2, axis=0), mu, starts, dt, n_steps,
                     NoiseStream(seed, "coupling"), record)
    times = np.arange(n_steps + 1) * dt
    return fit_decay_rate(times, gaps, floor=1e-10), times, gaps


# --------------------------------------------------------------------------
# limiting mean-field equation

CoefficientProvider = Callable[[np.ndarray, MeasureSummary], tuple[np.ndarray, np.ndarray]]


def _check_psd(S: np.ndarray, X: np.ndarray, mu: MeasureSummary, t: float):
    asym = np.abs(S - np.swapaxes(S, 1, 2)).max(axis=(1, 2))
    scale = np.maximum(np.abs(S).max(axis=(1, 2)), 1e-300)
    eig = np.linalg.eigvalsh(0.5 * (S + np.swapaxes(S, 1, 2)))[:, 0]
    bad = (asym > 1e-10 * scale + 1e-14) | (eig < -1e-8 * scale)
    if bad.any():
        i = int(np.argmax(bad))
        raise NotPSDError(f"limit diffusion not symmetric PSD at x={X[i].tolist()}, "
                          f"mean(mu)={mu.mean.tolist()}, t={t:.6g} (min eigenvalue {eig[i]:.3g})")


def simulate_limit(provider: CoefficientProvider, dims: Dimensions, cfg: IntegratorConfig,
                   initial: InitialLaw, seed: int, noise: NoiseStream | None = None) -> PathEnsemble:
    """Interacting-particle Euler scheme for ``dX = Theta dt + Sigma dW~`` (fresh noise)."""
    X, _ = initial.sample(dims, cfg.N, seed)
    noise = NoiseStream(seed, "Wlimit") if noise is None else noise
    times, xs = [0.0], [X]
    for k in range(cfg.n_steps):
        mu = EmpiricalMeasure(X).summary()
        theta, sig = provider(X, mu)
        theta = np.asarray(theta, dtype=float).reshape(cfg.N, dims.n)
        sig = np.asarray(sig, dtype=float)
        if sig.ndim == 2:
            sig = np.broadcast_to(sig, (cfg.N, dims.n, dims.n))
        _check_psd(sig, X, mu, k * cfg.dt)
        dW = noise.increments(k, cfg.N, dims.n, cfg.dt)
        X = X + theta * cfg.dt + np.einsum("bij,bj->bi", sig, dW)
        bad = _first_bad(X)
        if bad is not None:
            raise BlowUpError("limit", bad, (k + 1) * cfg.dt)
        if (k + 1) % cfg.save_every == 0:
            times.append((k + 1) * cfg.dt)
            xs.append(X)
    meta = {"config": cfg.to_dict(), "seed": int(seed), "model": "limit"}
    return PathEnsemble(np.array(times), np.stack(xs), None, meta)
