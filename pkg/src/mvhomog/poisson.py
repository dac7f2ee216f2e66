"""Feynman-Kac solution of the measure-dependent Poisson equation ``-L_2 Phi = K``.

``L_2 = f . d_y + 1/2 Tr[g g^T d_yy]`` is the generator of the frozen fast
equation at a fixed slow state ``(x, mu)``.  Under centering of ``K`` the
corrector is ``Phi(x, mu, y) = int_0^inf E K(x, mu, Y_t^y) dt``; it is estimated
by averaging ``K`` along Euler paths of the frozen equation and truncating the
time integral where a fitted exponential envelope of the integrand falls
below tolerance.  Derivatives use central differences with common random
numbers across every perturbed start, or the tangent flow for ``d_y Phi``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .engine import coupling_rate, frozen_dt, integrate_frozen, _jacobian_y
from .measure import EmpiricalMeasure, as_summary, w2_distance
from .model import CoefficientSet
from .rng import NoiseStream


class ErgodicityError(RuntimeError):
    pass


class CenteringError(ValueError):
    pass


class TruncationError(RuntimeError):
    pass


FIRST_STEP = 1e-3
SECOND_STEP = 3e-2
PILOT_PATHS = 256
HORIZON_CAP_FACTOR = 60.0  # cap on T_max in units of 1/beta
CHUNK = 1 << 16  # starts * paths integrated together


class _CoarseNoise(NoiseStream):
    """Increments of a ``factor``-times coarser grid built from a fine stream."""

    def __init__(self, fine: NoiseStream, factor: int):
        super().__init__(fine.master_seed, fine.tag)
        self.fine, self.factor = fine, factor

    def increments(self, step, count, dim, dt):
        h = dt / self.factor
        return sum(self.fine.increments(step * self.factor + i, count, dim, h)
                   for i in range(self.factor))


def fit_contraction_rate(cs: CoefficientSet, x, mu, dt: float | None = None, seed: int = 0,
                         paths: int = 64) -> float:
    """Synchronous-coupling decay rate of ``E|Y^{y1}_t - Y^{y2}_t|^2`` for the frozen flow."""
    dt = frozen_dt(cs) if dt is None else dt
    m = cs.dims.m
    horizon = dt * math.ceil(4.0 / cs.gamma / dt)
    ones = np.ones(m) / math.sqrt(m)
    rate, _, _ = coupling_rate(cs, x, mu, ones, -ones, horizon, dt, seed, paths)
    return rate


# --------------------------------------------------------------------------
# invariant measure


@dataclass
class InvariantMeasureEstimate:
    samples: np.ndarray  # (J, m)
    chain: np.ndarray  # chain index of each sample
    burn_in: float
    thinning: float
    ergodic_gap: float
    gap_tolerance: float
    fitted_beta: float
    dt: float

    @property
    def size(self) -> int:
        return self.samples.shape[0]

    @property
    def measure(self) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.samples)

    @property
    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    @property
    def cov(self) -> np.ndarray:
        return np.atleast_2d(np.cov(self.samples, rowvar=False))

    @property
    def sixth_moment(self) -> float:
        return float(np.mean(np.sum(self.samples**2, axis=1) ** 3))

    def mean_se(self, values: np.ndarray | None = None) -> np.ndarray:
        """Standard error of a sample average from batch means over chains."""
        values = self.samples if values is None else values
        return batch_mean_se(values, self.chain)


def batch_mean_se(values: np.ndarray, groups: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    ids = np.unique(groups)
    if len(ids) < 2:
        return np.zeros(values.shape[1:])
    means = np.stack([values[groups == i].mean(axis=0) for i in ids])
    return means.std(axis=0, ddof=1) / math.sqrt(len(ids))


def sample_invariant(cs: CoefficientSet, x, mu, budget: int = 2000, seed: int = 0,
                     dt: float | None = None, chains: int | None = None,
                     gap_tolerance: float | None = None) -> InvariantMeasureEstimate:
    """Thinned samples of the frozen equation's invariant law at ``(x, mu)``.

    Parallel chains start at the origin, run a burn-in of at least
    ``10/beta`` and are thinned every ``2/beta`` (beta is the fitted coupling
    rate).  The ergodic gap is the W2 distance between the two halves of the
    sample, relative to the sample scale.
    """
    if budget < 16:
        raise ValueError("budget must be at least 16 samples")
    dt = frozen_dt(cs) if dt is None else dt
    mu = as_summary(mu)
    beta = fit_contraction_rate(cs, x, mu, dt, seed)
    if not beta > 0:
        raise ErgodicityError(f"no contraction detected (fitted rate {beta:.3g})")
    chains = min(budget, 1024) if chains is None else chains
    per_chain = math.ceil(budget / chains)
    burn_steps = math.ceil(10.0 / beta / dt)
    stride = max(1, math.ceil(2.0 / beta / dt))
    n_steps = burn_steps + (per_chain - 1) * stride
    m = cs.dims.m
    xb = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, cs.dims.n)
    kept = []

    def keep(k, Y):
        if k >= burn_steps and (k - burn_steps) % stride == 0:
            kept.append(Y[0].copy())

    integrate_frozen(cs, xb, mu, np.zeros((1, chains, m)), dt, n_steps,
                     NoiseStream(seed, "invariant"), keep)
    samples = np.concatenate(kept)[:budget]
    chain = np.tile(np.arange(chains), len(kept))[:budget]
    half = len(samples) // 2
    if per_chain >= 2:
        first = np.concatenate(kept[: len(kept) // 2])
        second = np.concatenate(kept[len(kept) // 2:])
    else:
        first, second = samples[:half], samples[half:]
    scale = math.sqrt(max(np.trace(np.atleast_2d(np.cov(samples, rowvar=False))), 1e-300))
    gap = w2_distance(EmpiricalMeasure(first), EmpiricalMeasure(second), method="sliced",
                      seed=seed) / scale
    # two independent halves of J exact draws already differ by about sqrt(log J / J)
    J = len(samples)
    tol = max(0.2, 3.0 * math.sqrt(math.log(J) / J)) if gap_tolerance is None else gap_tolerance
    if not gap <= tol:
        raise ErgodicityError(f"ergodic gap {gap:.3g} exceeds tolerance {tol:.3g}")
    return InvariantMeasureEstimate(samples, chain, burn_steps * dt, stride * dt, gap, tol, beta, dt)



@dataclass
class CenteringReport:
    residual: np.ndarray
    se: np.ndarray
    passed: bool

    def to_dict(self):
        return {"residual": self.residual.tolist(), "se": self.se.tolist(), "passed": self.passed}


def check_centering(cs: CoefficientSet, x, mu, nu_hat: InvariantMeasureEstimate) -> CenteringReport:
    """``|int K dnu|`` per entry, passing iff each entry is within 3 standard errors of 0."""
    mu = as_summary(mu)
    J = nu_hat.size
    xb = np.broadcast_to(np.atleast_1d(np.asarray(x, dtype=float)), (J, cs.dims.n))
    vals = np.asarray(cs.K(xb, mu, nu_hat.samples), dtype=float)
    resid = np.abs(vals.mean(axis=0))
    se = nu_hat.mean_se(vals)
    return CenteringReport(resid, se, bool(np.all(resid <= 3 * se)))


# --------------------------------------------------------------------------
# corrector and derivatives


@dataclass
class PoissonEval:
    """Corrector values at a batch of ``J`` fast states.

    Shapes: ``phi`` (J, n), ``d_phi_dx`` (J, n, n), ``d_phi_dy`` (J, n, m),
    ``d2_phi_dxdy`` (J, n, n, m) with index order (component, x-direction,
    y-direction), ``d2_phi_dyy`` (J, n, m, m).  Entries of ``se`` mirror the
    value fields.  Per-path arrays are kept in ``paths`` for estimators that
    need to combine fields path by path.
    """

    y: np.ndarray
    phi: np.ndarray
    truncation_T: float
    tail_bound: float
    fitted_beta: float
    dt: float
    d_phi_dx: np.ndarray | None = None
    d_phi_dy: np.ndarray | None = None
    d2_phi_dxdy: np.ndarray | None = None
    d2_phi_dyy: np.ndarray | None = None
    se: dict = field(default_factory=dict)
    bias: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict, repr=False)

    FIELDS = ("phi", "d_phi_dx", "d_phi_dy", "d2_phi_dxdy", "d2_phi_dyy")

    def scaled(self, c: float) -> "PoissonEval":
        """Corrector multiplied by ``c`` (used to probe residual sensitivity)."""
        vals = {k: None if getattr(self, k) is None else c * getattr(self, k) for k in self.FIELDS}
        return replace(self, **vals, se={k: abs(c) * v for k, v in self.se.items()},
                       bias={k: abs(c) * v for k, v in self.bias.items()},
                       paths={k: c * v for k, v in self.paths.items()})

    def to_dict(self) -> dict:
        out = {"y": self.y.tolist(), "truncation_T": self.truncation_T,
               "tail_bound": self.tail_bound, "fitted_beta": self.fitted_beta, "dt": self.dt}
        for k in self.FIELDS:
            v = getattr(self, k)
            if v is not None:
                out[k] = v.tolist()
                out[f"{k}_se"] = self.se[k].tolist()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class _Stencil:
    """Start points for every y-sample and finite-difference offset."""

    x: np.ndarray  # (J*S, n)
    y: np.ndarray  # (J*S, m)
    names: list
    J: int

    @property
    def S(self) -> int:
        return len(self.names)

    def index(self, name) -> int:
        return self.names.index(name)


class PoissonSolver:
    """Monte-Carlo corrector at a fixed slow state ``(x, mu)``.

    ``paths`` frozen trajectories are simulated from every start point; path
    ``j`` uses the same Brownian increments for every start (common random
    numbers), so finite differences and sample averages over start points are
    far less noisy than independent estimates.  ``rule`` selects the time
    quadrature: ``left`` (default) is the sum that solves the discrete
    Poisson equation of the Euler chain exactly, ``trapezoid`` is available
    for comparison.
    """

    def __init__(self, cs: CoefficientSet, x, mu, paths: int = 1000, dt: float | None = None,
                 seed: int = 0, tol: float = 1e-3, nu_hat: InvariantMeasureEstimate | None = None,
                 require_centering: bool = True, rule: str = "left", horizon: float | None = None,
                 nu_budget: int = 2000):
        if rule not in ("left", "trapezoid"):
            raise ValueError(f"unknown quadrature rule {rule!r}")
        if paths < 2:
            raise ValueError("need at least two paths for standard errors")
        self.cs = cs
        self.x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(cs.dims.n)
        self.mu = as_summary(mu)
        self.paths = int(paths)
        self.dt = frozen_dt(cs) if dt is None else float(dt)
        self.seed = seed
        self.tol = tol
        self.rule = rule
        self.fixed_horizon = horizon
        self.noise = NoiseStream(seed, "poisson")
        self.nu_hat = nu_hat
        if require_centering:
            if self.nu_hat is None:
                self.nu_hat = sample_invariant(cs, self.x, self.mu, nu_budget, seed, self.dt)
            report = check_centering(cs, self.x, self.mu, self.nu_hat)
            if not report.passed:
                raise CenteringError(f"K is not centred at x={self.x.tolist()}: residual "
                                     f"{report.residual.tolist()} vs 3 SE {(3 * report.se).tolist()}")
        self.beta = self.nu_hat.fitted_beta if self.nu_hat is not None else \
            fit_contraction_rate(cs, self.x, self.mu, self.dt, seed)

    # -- time integration -------------------------------------------------

    def _weights(self, n_steps: int) -> np.ndarray:
        w = np.full(n_steps + 1, self.dt)
        if self.rule == "left":
            w[-1] = 0.0
        else:
            w[0] = w[-1] = self.dt / 2
        if n_steps == 0:
            w[:] = 0.0
        return w

    def _integrals(self, xs, ys, n_steps: int, paths: int, noise=None, dt=None,
                   tangent: np.ndarray | None = None, trace: bool = False):
        """Per-path time integrals of ``K`` (or of ``d_y K . V`` in tangent mode).

        Returns an array (B, paths, n) and, with ``trace``, the path-mean and
        standard error of the integrand at every step, each (n_steps+1, B, n).
        """
        cs, mu = self.cs, self.mu
        dt = self.dt if dt is None else dt
        noise = self.noise if noise is None else noise
        B, n, m = len(xs), cs.dims.n, cs.dims.m
        w = self._weights(n_steps) * (dt / self.dt)
        out = np.zeros((B, paths, n))
        means = np.zeros((n_steps + 1, B, n)) if trace else None
        ses = np.zeros((n_steps + 1, B, n)) if trace else None
        per = max(1, CHUNK // paths)
        for lo in range(0, B, per):
            hi = min(B, lo + per)
            xc = xs[lo:hi]
            xf = np.repeat(xc, paths, axis=0)
            start = np.broadcast_to(ys[lo:hi, None, :], (hi - lo, paths, m))
            acc = np.zeros(((hi - lo) * paths, n))

            def add(k, state):
                if tangent is None:
                    Yf = state.reshape(-1, m)
                    val = cs.K(xf, mu, Yf)
                else:
                    Yf = state[0].reshape(-1, m)
                    V = state[1].reshape(-1, m)
                    val = np.einsum("bij,bj->bi", _jacobian_y(cs.K, xf, mu, Yf), V)
                if w[k]:
                    acc[...] += w[k] * val
                if trace:
                    v = val.reshape(hi - lo, paths, n)
                    means[k, lo:hi] = v.mean(axis=1)
                    ses[k, lo:hi] = v.std(axis=1, ddof=1) / math.sqrt(paths)

            tan = None if tangent is None else np.broadcast_to(tangent[lo:hi, None, :], start.shape)
            integrate_frozen(cs, xc, mu, start, dt, n_steps, noise, add, tangent=tan)
            out[lo:hi] = acc.reshape(hi - lo, paths, n)
        if trace:
            return out, means, ses
        return out

    def envelope_constant(self, ys: np.ndarray) -> float:
        """Fit ``C`` in ``|E K(Y_t^y)| <= C exp(-beta t / 2) (1 + |y|^3)`` on a pilot run.

        Only the leading stretch of each pilot curve where the mean integrand
        is more than 3 standard errors from zero enters the fit; the result
        carries a safety factor of 2.
        """
        m = self.cs.dims.m
        norms = np.linalg.norm(ys, axis=1)
        order = np.argsort(-norms, kind="stable")
        pick = list(order[:8]) + list(order[:: max(1, len(order) // 8)])
        probes = [ys[i] for i in dict.fromkeys(pick)]
        probes += list(np.eye(m)) + list(-np.eye(m))
        probes = np.array(probes)
        n_steps = math.ceil(10.0 / self.beta / self.dt)
        xs = np.broadcast_to(self.x, (len(probes), self.cs.dims.n))
        _, means, ses = self._integrals(xs, probes, n_steps, min(self.paths, PILOT_PATHS),
                                        noise=NoiseStream(self.seed, "pilot"), trace=True)
        t = np.arange(n_steps + 1) * self.dt
        amp = np.linalg.norm(means, axis=2)
        noise = np.linalg.norm(ses, axis=2)
        grow = np.exp(self.beta * t / 2)[:, None] / (1 + np.linalg.norm(probes, axis=1) ** 3)[None, :]
        best = 0.0
        for b in range(len(probes)):
            signif = amp[:, b] > 3 * noise[:, b]
            stop = len(t) if signif.all() else int(np.argmin(signif))
            if stop:
                best = max(best, float(np.max(amp[:stop, b] * grow[:stop, b])))
        return 2.0 * best

    def horizon(self, ys: np.ndarray) -> tuple[float, float]:
        """Truncation time and the tail bound it guarantees for the batch ``ys``."""
        ymax = float(np.max(np.linalg.norm(ys, axis=1))) if len(ys) else 0.0
        if self.fixed_horizon is not None:
            T = self.dt * math.ceil(self.fixed_horizon / self.dt - 1e-9)
            return T, math.nan
        C = self.envelope_constant(ys)
        if C == 0.0:
            return 0.0, 0.0
        amp = C * (1 + ymax**3) * 2.0 / self.beta
        T = max(0.0, 2.0 / self.beta * math.log(amp * 10.0 / self.tol))
        cap = HORIZON_CAP_FACTOR / self.beta
        if T > cap:
            raise TruncationError(f"integrand envelope stays above tolerance up to the horizon cap "
                                  f"{cap:.3g}")
        T = self.dt * math.ceil(T / self.dt)
        return T, amp * math.exp(-self.beta * T / 2)

    # -- estimators ---------------------------------------------------------

    def _ys(self, y) -> np.ndarray:
        return np.atleast_2d(np.asarray(y, dtype=float)).reshape(-1, self.cs.dims.m)

    def phi(self, y) -> PoissonEval:
        ys = self._ys(y)
        T, tail = self.horizon(ys)
        n_steps = int(round(T / self.dt))
        xs = np.broadcast_to(self.x, (len(ys), self.cs.dims.n))
        I = self._integrals(xs, ys, n_steps, self.paths)
        return PoissonEval(ys, I.mean(axis=1), T, tail, self.beta, self.dt,
                           se={"phi": _se(I)}, paths={"phi": I})

    def _stencil(self, ys, first_x: bool, mixed: bool, second_y: bool, halving: bool) -> _Stencil:
        n, m = self.cs.dims.n, self.cs.dims.m
        J = len(ys)
        hx = FIRST_STEP * (1 + np.linalg.norm(self.x))
        Hx = SECOND_STEP * (1 + np.linalg.norm(self.x))
        hy = FIRST_STEP * (1 + np.linalg.norm(ys, axis=1))
        Hy = SECOND_STEP * (1 + np.linalg.norm(ys, axis=1))
        offs = [("base", np.zeros(n), np.zeros((J, m)))]
        ex, ey = np.eye(n), np.eye(m)
        for k in range(m):
            offs += [(("y+", k), np.zeros(n), hy[:, None] * ey[k]),
                     (("y-", k), np.zeros(n), -hy[:, None] * ey[k])]
        if first_x:
            for a in range(n):
                offs += [(("x+", a), hx * ex[a], np.zeros((J, m))),
                         (("x-", a), -hx * ex[a], np.zeros((J, m)))]
        if mixed:
            for a in range(n):
                for k in range(m):
                    for sx in (1, -1):
                        for sy in (1, -1):
                            offs.append((("xy", a, k, sx, sy), sx * Hx * ex[a],
                                         sy * Hy[:, None] * ey[k]))
        if second_y:
            scales = (1.0, 0.5) if halving else (1.0,)
            for s in scales:
                for k in range(m):
                    for sg in (1, -1):
                        offs.append((("yy", s, k, k, sg, sg), np.zeros(n), sg * s * Hy[:, None] * ey[k]))
                    for l in range(k + 1, m):
                        for sk in (1, -1):
                            for sl in (1, -1):
                                offs.append((("yy", s, k, l, sk, sl), np.zeros(n),
                                             s * Hy[:, None] * (sk * ey[k] + sl * ey[l])))
        names = [o[0] for o in offs]
        xs = np.stack([np.broadcast_to(self.x + o[1], (J, n)) for o in offs], axis=1)
        yv = np.stack([ys + o[2] for o in offs], axis=1)
        st = _Stencil(xs.reshape(J * len(offs), n), yv.reshape(J * len(offs), m), names, J)
        st.hx, st.Hx, st.hy, st.Hy = hx, Hx, hy, Hy
        return st

    def derivatives(self, y, mode: str = "fd", mixed: bool = True, first_x: bool = True,
                    second_y: bool = False, bias_check: bool = False) -> PoissonEval:
        """Corrector and its derivatives at every row of ``y``.

        ``mode='fd'`` differences the corrector itself; ``mode='tangent'``
        integrates ``d_y K`` along the tangent flow and yields ``phi`` and
        ``d_phi_dy`` only.  ``bias_check`` adds a step-halving estimate for the
        second y-derivative and a dt-versus-2dt estimate of time-discretisation
        bias, both stored in ``bias``.
        """
        ys = self._ys(y)
        if mode == "tangent":
            return self._tangent(ys)
        if mode != "fd":
            raise ValueError(f"unknown derivative mode {mode!r}")
        ev = self._fd(ys, first_x, mixed, second_y, bias_check)
        if bias_check and second_y:
            if 2 * self.dt > 0.1 / self.cs.gamma:
                raise ValueError("bias check needs 2*dt within the frozen stability cap")
            coarse = self._fd(ys, False, False, True, False, coarse=True, T=ev.truncation_T)
            for k in ("d_phi_dy", "d2_phi_dyy"):
                ev.bias[f"{k}_dt"] = np.abs(getattr(ev, k) - getattr(coarse, k))
        return ev

    def _fd(self, ys, first_x, mixed, second_y, halving, coarse=False, T=None) -> PoissonEval:
        n, m = self.cs.dims.n, self.cs.dims.m
        J = len(ys)
        if T is None:
            T, tail = self.horizon(ys)
        else:
            tail = math.nan
        st = self._stencil(ys, first_x, mixed, second_y, halving)
        dt = 2 * self.dt if coarse else self.dt
        noise = _CoarseNoise(self.noise, 2) if coarse else None
        n_steps = int(round(T / dt))
        I = self._integrals(st.x, st.y, n_steps, self.paths, noise=noise, dt=dt)
        I = I.reshape(J, st.S, self.paths, n)
        at = lambda name: I[:, st.index(name)]
        per = {"phi": at("base")}
        dy = np.stack([(at(("y+", k)) - at(("y-", k))) / (2 * st.hy[:, None, None])
                       for k in range(m)], axis=-1)
        per["d_phi_dy"] = dy
        if first_x:
            per["d_phi_dx"] = np.stack([(at(("x+", a)) - at(("x-", a))) / (2 * st.hx)
                                        for a in range(n)], axis=-1)
        if mixed:
            mix = np.zeros((J, self.paths, n, n, m))
            for a in range(n):
                for k in range(m):
                    c = lambda sx, sy: at(("xy", a, k, sx, sy))
                    mix[:, :, :, a, k] = (c(1, 1) - c(1, -1) - c(-1, 1) + c(-1, -1)) \
                        / (4 * st.Hx * st.Hy[:, None, None])
            per["d2_phi_dxdy"] = mix
        ev_bias = {}
        if second_y:
            per["d2_phi_dyy"] = self._second_y(at, st, 1.0, per["phi"])
            if halving:
                half = self._second_y(at, st, 0.5, per["phi"])
                ev_bias["d2_phi_dyy_step"] = np.abs(per["d2_phi_dyy"].mean(axis=1) - half.mean(axis=1))
        ev = PoissonEval(ys, per["phi"].mean(axis=1), T, tail, self.beta, dt,
                         se={k: _se(v) for k, v in per.items()}, bias=ev_bias, paths=per)
        for k, v in per.items():
            if k != "phi":
                setattr(ev, k, v.mean(axis=1))
        return ev

    def _second_y(self, at, st, s, base):
        m = self.cs.dims.m
        H = s * st.Hy[:, None, None]
        J, P, n = base.shape
        out = np.zeros((J, P, n, m, m))
        for k in range(m):
            out[..., k, k] = (at(("yy", s, k, k, 1, 1)) - 2 * base + at(("yy", s, k, k, -1, -1))) / H**2
            for l in range(k + 1, m):
                c = lambda sk, sl: at(("yy", s, k, l, sk, sl))
                v = (c(1, 1) - c(1, -1) - c(-1, 1) + c(-1, -1)) / (4 * H**2)
                out[..., k, l] = out[..., l, k] = v
        return out

    def _tangent(self, ys) -> PoissonEval:
        n, m = self.cs.dims.n, self.cs.dims.m
        J = len(ys)
        T, tail = self.horizon(ys)
        n_steps = int(round(T / self.dt))
        xs = np.broadcast_to(self.x, (J * m, n))
        yr = np.repeat(ys, m, axis=0)
        dirs = np.tile(np.eye(m), (J, 1))
        D = self._integrals(xs, yr, n_steps, self.paths, tangent=dirs)
        D = np.moveaxis(D.reshape(J, m, self.paths, n), 1, -1)  # (J, P, n, m)
        I = self._integrals(np.broadcast_to(self.x, (J, n)), ys, n_steps, self.paths)
        return PoissonEval(ys, I.mean(axis=1), T, tail, self.beta, self.dt,
                           d_phi_dy=D.mean(axis=1), se={"phi": _se(I), "d_phi_dy": _se(D)},
                           paths={"phi": I, "d_phi_dy": D})


def _se(per_path: np.ndarray) -> np.ndarray:
    return per_path.std(axis=1, ddof=1) / math.sqrt(per_path.shape[1])


def phi(cs: CoefficientSet, x, mu, y, paths: int = 1000, dt: float | None = None, seed: int = 0,
        **kw) -> PoissonEval:
    """Corrector values at the row(s) of ``y``."""
    return PoissonSolver(cs, x, mu, paths, dt, seed, **kw).phi(y)


def phi_derivatives(cs: CoefficientSet, x, mu, y, mode: str = "fd", paths: int = 1000,
                    dt: float | None = None, seed: int = 0, second_y: bool = False,
                    bias_check: bool = False, **kw) -> PoissonEval:
    return PoissonSolver(cs, x, mu, paths, dt, seed, **kw).derivatives(
        y, mode=mode, second_y=second_y, bias_check=bias_check)


@dataclass
class ResidualReport:
    residual: np.ndarray  # (J, n)
    se: np.ndarray
    bias_bound: np.ndarray

    @property
    def consistent(self) -> bool:
        return bool(np.all(np.abs(self.residual) <= 3 * (self.se + self.bias_bound) + 1e-12))


def poisson_residual(cs: CoefficientSet, x, mu, ev: PoissonEval) -> ResidualReport:
    """``f . d_y Phi + 1/2 Tr[g g^T d_yy Phi] + K`` at the points of ``ev``.

    ``ev`` must hold ``d_phi_dy`` and ``d2_phi_dyy``; the bias bound combines
    whatever step-halving and dt-versus-2dt estimates it carries.
    """
    if ev.d_phi_dy is None or ev.d2_phi_dyy is None:
        raise ValueError("residual needs first and second y-derivatives")
    mu = as_summary(mu)
    ys = ev.y
    J = len(ys)
    xb = np.broadcast_to(np.atleast_1d(np.asarray(x, dtype=float)), (J, cs.dims.n))
    f, g, K = cs.f(xb, mu, ys), cs.g(xb, mu, ys), cs.K(xb, mu, ys)
    a = np.einsum("jkd,jld->jkl", g, g)

    def combine(dy, dyy):
        return np.einsum("jik,jk->ji", dy, f) + 0.5 * np.einsum("jkl,jikl->ji", a, dyy)

    resid = combine(ev.d_phi_dy, ev.d2_phi_dyy) + K
    # per-path combination keeps the correlation between the two derivative estimates
    per = np.einsum("jpik,jk->jpi", ev.paths["d_phi_dy"], f) \
        + 0.5 * np.einsum("jkl,jpikl->jpi", a, ev.paths["d2_phi_dyy"])
    se = _se(per)
    bias = np.zeros_like(resid)
    if "d2_phi_dyy_step" in ev.bias:
        bias += np.abs(0.5 * np.einsum("jkl,jikl->ji", a, ev.bias["d2_phi_dyy_step"]))
    if "d_phi_dy_dt" in ev.bias:
        bias += np.abs(combine(ev.bias["d_phi_dy_dt"], ev.bias["d2_phi_dyy_dt"]))
    if np.isfinite(ev.tail_bound):
        # derivatives share the envelope of the truncated tail
        scale = np.linalg.norm(f, axis=1) + 0.5 * np.abs(np.trace(a, axis1=1, axis2=2))
        bias += (scale * ev.tail_bound)[:, None]
    return ResidualReport(resid, se, bias)


# --------------------------------------------------------------------------
# regularity


@dataclass
class RegularityReport:
    radii: np.ndarray
    phi_ratio: np.ndarray  # |Phi| / (1 + |y|) per probe
    dy_norm: np.ndarray
    dxy_norm: np.ndarray
    dy_se: np.ndarray
    exponents: dict
    passed: bool

    def to_dict(self):
        return {"radii": self.radii.tolist(), "phi_ratio": self.phi_ratio.tolist(),
                "dy_norm": self.dy_norm.tolist(), "dxy_norm": self.dxy_norm.tolist(),
                "exponents": self.exponents, "passed": self.passed}


def _growth_exponent(radii, values) -> float:
    # log-log slope of the statistic against (1 + |y|) over the outer half of the grid
    outer = radii >= np.median(radii)
    v = values[outer]
    if np.all(v <= 1e-12):
        return 0.0
    v = np.maximum(v, 1e-12)
    return float(np.polyfit(np.log1p(radii[outer]), np.log(v), 1)[0])


def regularity_spotcheck(cs: CoefficientSet, x, mu, radii=(0.0, 0.5, 1.0, 2.0, 5.0, 10.0),
                         paths: int = 256, seed: int = 0, **kw) -> RegularityReport:
    """Growth of ``|Phi|``, ``|d_y Phi|`` and ``|d_xy Phi|`` along rays out to ``|y| = 10``.

    Boundedness is judged by trend: the growth exponent of ``|Phi|/(1+|y|)``
    and of each derivative norm against ``1 + |y|`` must stay below 1/2 on the
    outer half of the grid.
    """
    m = cs.dims.m
    radii = np.asarray(radii, dtype=float)
    u = np.ones(m) / math.sqrt(m)
    ys = np.concatenate([radii[:, None] * u, -radii[:, None] * u])
    solver = PoissonSolver(cs, x, mu, paths=paths, seed=seed, **kw)
    ev = solver.derivatives(ys, mixed=True)
    r = np.concatenate([radii, radii])
    ratio = np.linalg.norm(ev.phi, axis=1) / (1 + r)
    dy = np.linalg.norm(ev.d_phi_dy.reshape(len(ys), -1), axis=1)
    dxy = np.linalg.norm(ev.d2_phi_dxdy.reshape(len(ys), -1), axis=1)
    dy_se = np.linalg.norm(ev.se["d_phi_dy"].reshape(len(ys), -1), axis=1)
    both = lambda v: np.maximum(v[: len(radii)], v[len(radii):])
    ex = {"phi_ratio": _growth_exponent(radii, both(ratio)),
          "d_phi_dy": _growth_exponent(radii, both(dy)),
          "d2_phi_dxdy": _growth_exponent(radii, both(dxy))}
    return RegularityReport(r, ratio, dy, dxy, dy_se, ex, all(v < 0.5 for v in ex.values()))
