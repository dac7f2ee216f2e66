"""Model specifications, built-in coefficient families and assumption spot checks.

A model is the six coefficient maps ``b, K, sigma, f, h, g`` of the two-scale
system.  Every map is vectorised over a batch: it takes ``x`` of shape (B, n),
a :class:`~mvhomog.measure.MeasureSummary` shared by the whole batch, and
``y`` of shape (B, m), and returns (B, n), (B, n), (B, n, d), (B, m), (B, m)
and (B, m, d) arrays respectively.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .measure import EmpiricalMeasure, MeasureSummary, as_summary, w2_distance
from .rng import NoiseStream

FAMILIES = ("linear-ou", "nonlinear-test", "zero-k")
MATRIX_PARAMS = ("P", "A", "G", "S")

CoeffFn = Callable[[np.ndarray, MeasureSummary, np.ndarray], np.ndarray]


class ModelError(ValueError):
    """Inadmissible model specification."""


@dataclass(frozen=True)
class Dimensions:
    n: int = 1
    m: int = 1
    d: int = 1

    def __post_init__(self):
        for name in ("n", "m", "d"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ModelError(f"dimension {name} must be a positive integer, got {v!r}")

    def to_dict(self):
        return {"n": int(self.n), "m": int(self.m), "d": int(self.d)}


@dataclass(frozen=True)
class CoefficientSet:
    dims: Dimensions
    b: CoeffFn
    K: CoeffFn
    sigma: CoeffFn
    f: CoeffFn
    h: CoeffFn
    g: CoeffFn
    gamma: float
    varsigma: float
    measure_dependence: str = "mean"
    lip_f: float = 1.0
    lipschitz_bound: float = 1.0
    growth_bound: float = 1.0
    k_vanishes: bool = False
    fast_law_fixed: bool = False
    name: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.gamma > 0:
            raise ModelError("gamma must be positive")
        if not 0 < self.varsigma < 1:
            raise ModelError("varsigma must lie in (0, 1)")


@dataclass(frozen=True)
class Marginal:
    """Product law of independent coordinates: normal(mean, std) or uniform(low, high)."""

    dist: str = "normal"
    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if self.dist not in ("normal", "uniform"):
            raise ModelError(f"unknown initial distribution {self.dist!r}")
        if self.dist == "normal" and self.b < 0:
            raise ModelError("normal std must be nonnegative")
        if self.dist == "uniform" and self.b < self.a:
            raise ModelError("uniform needs low <= high")

    @property
    def p_max(self) -> float:
        # Gaussian and bounded laws have every moment
        return math.inf

    def sample(self, stream: NoiseStream, count: int, dim: int) -> np.ndarray:
        if self.dist == "normal":
            return self.a + self.b * stream.normal(0, (count, dim))
        return self.a + (self.b - self.a) * stream.uniform(0, (count, dim))

    def to_dict(self):
        if self.dist == "normal":
            return {"dist": "normal", "mean": self.a, "std": self.b}
        return {"dist": "uniform", "low": self.a, "high": self.b}

    @classmethod
    def from_dict(cls, d: dict) -> "Marginal":
        d = dict(d)
        dist = d.pop("dist", "normal")
        keys = ("mean", "std") if dist == "normal" else ("low", "high")
        unknown = set(d) - set(keys)
        if unknown:
            raise ModelError(f"unknown initial-law fields {sorted(unknown)}")
        defaults = (0.0, 1.0)
        return cls(dist, float(d.get(keys[0], defaults[0])), float(d.get(keys[1], defaults[1])))


@dataclass(frozen=True)
class InitialLaw:
    xi: Marginal = Marginal("normal", 0.0, 1.0)
    zeta: Marginal = Marginal("normal", 0.0, 0.5)

    def sample(self, dims: Dimensions, count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
        x0 = self.xi.sample(NoiseStream(seed, "xi"), count, dims.n)
        y0 = self.zeta.sample(NoiseStream(seed, "zeta"), count, dims.m)
        return x0, y0

    def to_dict(self):
        return {"xi": self.xi.to_dict(), "zeta": self.zeta.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "InitialLaw":
        unknown = set(d) - {"xi", "zeta"}
        if unknown:
            raise ModelError(f"unknown initial fields {sorted(unknown)}")
        return cls(Marginal.from_dict(d.get("xi", {})),
                   Marginal.from_dict(d.get("zeta", {"mean": 0.0, "std": 0.5})))


LINEAR_DEFAULTS = dict(gamma=2.0, a=0.0, b1=0.0, kappa=1.0, g0=1.0, sigma0=0.5,
                       eta=0.4, lam=1.0, theta=0.5, k_shift=0.0)
NONLINEAR_DEFAULTS = dict(LINEAR_DEFAULTS, alpha=0.5, rho=0.3, beta_b=0.2, beta_k=0.2,
                          beta_h=0.2, beta_s=0.2)
ZERO_K_DEFAULTS = dict(gamma=2.0, a=0.0, b1=0.0, g0=1.0, sigma0=0.5, lam=1.0, theta=0.5)
DEFAULT_PARAMS = {"linear-ou": LINEAR_DEFAULTS, "nonlinear-test": NONLINEAR_DEFAULTS,
                  "zero-k": ZERO_K_DEFAULTS}

# Invariant means of z = y - c and cos z for the default nonlinear-test
# parameters, from calibrate_centering(..., samples=2**22).
NONLINEAR_DEFAULT_OFFSET = (0.21428267, 0.85763719)


@dataclass
class ModelSpec:
    family: str
    params: dict = field(default_factory=dict)
    dims: Dimensions = field(default_factory=Dimensions)
    initial: InitialLaw = field(default_factory=InitialLaw)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        allowed = set(DEFAULT_PARAMS[self.family]) | set(MATRIX_PARAMS)
        if self.family == "nonlinear-test":
            allowed |= {"centering_offset", "cos_offset"}
        unknown = set(self.params) - allowed
        if unknown:
            raise ModelError(f"unknown parameters for {self.family}: {sorted(unknown)}")

    def resolved_params(self) -> dict:
        p = dict(DEFAULT_PARAMS[self.family])
        p.update(self.params)
        return p

    def to_dict(self) -> dict:
        return {"family": self.family, "params": copy.deepcopy(self.params),
                "dims": self.dims.to_dict(), "initial": self.initial.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        unknown = set(d) - {"family", "params", "dims", "initial"}
        if unknown:
            raise ModelError(f"unknown model fields {sorted(unknown)}")
        if "family" not in d:
            raise ModelError("model needs a family")
        dims = d.get("dims", {})
        bad = set(dims) - {"n", "m", "d"}
        if bad:
            raise ModelError(f"unknown dims fields {sorted(bad)}")
        return cls(d["family"], dict(d.get("params", {})), Dimensions(**dims),
                   InitialLaw.from_dict(d.get("initial", {})))

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))


def _matrices(p: dict, dims: Dimensions) -> dict:
    n, m, d = dims.n, dims.m, dims.d
    shapes = {"P": (n, m), "A": (m, n), "G": (m, d), "S": (n, d)}
    out = {}
    for key, shape in shapes.items():
        if key in p:
            mat = np.asarray(p[key], dtype=float)
            if mat.shape != shape:
                raise ModelError(f"matrix {key} must have shape {shape}, got {mat.shape}")
            out[key] = mat
        else:
            out[key] = np.eye(*shape)
    return out


def _check_common(p: dict):
    if not p["gamma"] > 0:
        raise ModelError("gamma must be positive")
    for k, v in p.items():
        if k not in MATRIX_PARAMS and k not in ("centering_offset", "cos_offset") and not math.isfinite(float(v)):
            raise ModelError(f"parameter {k} must be finite")


def _fast_center(p, mats):
    a_mat = mats["A"]
    if p["a"] == 0 and p["b1"] == 0:
        return lambda x, mu: 0.0

    def center(x, mu):
        # c(x, mu) = a A x + b1 A mean(mu), shape (B, m)
        return p["a"] * x @ a_mat.T + p["b1"] * (a_mat @ mu.mean)[None, :]
    return center


def _linear_ou(spec: ModelSpec, p: dict) -> CoefficientSet:
    if p["g0"] == 0:
        raise ModelError("g0 must be nonzero for linear-ou")
    dims = spec.dims
    mats = _matrices(p, dims)
    P, G, S = mats["P"], mats["G"], mats["S"]
    center = _fast_center(p, mats)
    gamma, kappa, g0, s0 = p["gamma"], p["kappa"], p["g0"], p["sigma0"]
    eta_vec = p["eta"] * np.ones(dims.m)

    def b(x, mu, y):
        return -p["lam"] * x + p["theta"] * mu.mean[None, :]

    def K(x, mu, y):
        return kappa * (y - center(x, mu)) @ P.T + p["k_shift"]

    def sigma(x, mu, y):
        return np.broadcast_to(s0 * S, (x.shape[0],) + S.shape)

    def f(x, mu, y):
        return -gamma * (y - center(x, mu))

    def h(x, mu, y):
        return np.broadcast_to(eta_vec, y.shape)

    def g(x, mu, y):
        return np.broadcast_to(g0 * G, (y.shape[0],) + G.shape)

    scale = 1.0 + abs(p["a"]) + abs(p["b1"])
    norm = lambda M: float(np.linalg.norm(M, 2))
    lip = (p["lam"] + abs(p["theta"]) + abs(kappa) * norm(P) * scale
           + gamma * scale + abs(g0) * norm(G) + abs(s0) * norm(S))
    growth = abs(kappa) * norm(P) + abs(p["k_shift"]) + gamma + abs(p["eta"]) * math.sqrt(dims.m) \
        + abs(s0) * norm(S) + abs(g0) * norm(G)
    return CoefficientSet(dims, b, K, sigma, f, h, g, gamma=gamma, varsigma=0.5,
                          lip_f=gamma * scale, lipschitz_bound=1.5 * lip + 1.0,
                          growth_bound=1.5 * growth + 1.0,
                          k_vanishes=(kappa == 0 and p["k_shift"] == 0),
                          fast_law_fixed=(p["a"] == 0 and p["b1"] == 0), name="linear-ou",
                          metadata={"gamma1": None, "params": p})


def _nonlinear(spec: ModelSpec, p: dict) -> CoefficientSet:
    if p["g0"] == 0:
        raise ModelError("g0 must be nonzero for nonlinear-test")
    if not abs(p["rho"]) < 1:
        raise ModelError("rho must satisfy |rho| < 1")
    if p["alpha"] < 0:
        raise ModelError("alpha must be nonnegative")
    dims = spec.dims
    mats = _matrices(p, dims)
    P, G, S = mats["P"], mats["G"], mats["S"]
    center = _fast_center(p, mats)
    gamma, kappa, g0, s0 = p["gamma"], p["kappa"], p["g0"], p["sigma0"]
    offset = np.broadcast_to(np.asarray(p["centering_offset"], dtype=float), (dims.m,))
    cos_offset = np.broadcast_to(np.asarray(p["cos_offset"], dtype=float), (dims.m,))

    def b(x, mu, y):
        z = y - center(x, mu)
        return -p["lam"] * x + p["theta"] * mu.mean[None, :] + p["beta_b"] * np.sin(z) @ P.T

    def K(x, mu, y):
        z = y - center(x, mu)
        wobble = p["beta_k"] * np.sin(x) * ((np.cos(z) - cos_offset) @ P.T)
        return kappa * (z - offset) @ P.T + wobble + p["k_shift"]

    def sigma(x, mu, y):
        z = y - center(x, mu)
        s = 1.0 + p["beta_s"] * np.cos(z).mean(axis=1)
        return s0 * s[:, None, None] * S[None, :, :]

    def f(x, mu, y):
        z = y - center(x, mu)
        return -gamma * z + p["alpha"] * np.cos(z)

    def h(x, mu, y):
        z = y - center(x, mu)
        return p["eta"] * (1.0 + p["beta_h"] * np.cos(z))

    def g(x, mu, y):
        z = y - center(x, mu)
        return g0 * (1.0 + p["rho"] * np.sin(z))[:, :, None] * G[None, :, :]

    scale = 1.0 + abs(p["a"]) + abs(p["b1"])
    norm = lambda M: float(np.linalg.norm(M, 2))
    kb = (abs(kappa) + 2 * abs(p["beta_k"])) * norm(P)
    lip_f = (gamma + p["alpha"]) * scale
    lip = (p["lam"] + abs(p["theta"]) + abs(p["beta_b"]) * norm(P) * scale + kb * scale + lip_f
           + abs(p["eta"] * p["beta_h"]) * scale + abs(g0 * p["rho"]) * norm(G) * scale
           + abs(s0 * p["beta_s"]) * norm(S) * scale)
    growth = kb * (1 + np.abs(offset).max()) + abs(p["k_shift"]) + lip_f + p["alpha"] \
        + abs(p["eta"]) * (1 + abs(p["beta_h"])) * math.sqrt(dims.m) \
        + abs(s0) * (1 + abs(p["beta_s"])) * norm(S) + abs(g0) * (1 + abs(p["rho"])) * norm(G)
    return CoefficientSet(dims, b, K, sigma, f, h, g, gamma=gamma, varsigma=0.5,
                          lip_f=lip_f, lipschitz_bound=1.5 * lip + 1.0,
                          growth_bound=1.5 * growth + 1.0,
                          k_vanishes=(kappa == 0 and p["k_shift"] == 0),
                          fast_law_fixed=(p["a"] == 0 and p["b1"] == 0), name="nonlinear-test",
                          metadata={"gamma1": None, "params": p, "centering_offset": offset.tolist(),
                                    "cos_offset": cos_offset.tolist()})


def _zero_k(spec: ModelSpec, p: dict) -> CoefficientSet:
    dims = spec.dims
    mats = _matrices(p, dims)
    G, S = mats["G"], mats["S"]
    center = _fast_center(p, mats)
    gamma, g0, s0 = p["gamma"], p["g0"], p["sigma0"]

    def b(x, mu, y):
        return -p["lam"] * x + p["theta"] * mu.mean[None, :]

    def K(x, mu, y):
        return np.zeros((x.shape[0], dims.n))

    def sigma(x, mu, y):
        return np.broadcast_to(s0 * S, (x.shape[0],) + S.shape)

    def f(x, mu, y):
        return -gamma * (y - center(x, mu))

    def h(x, mu, y):
        return np.zeros_like(y)

    def g(x, mu, y):
        return np.broadcast_to(g0 * G, (y.shape[0],) + G.shape)

    scale = 1.0 + abs(p["a"]) + abs(p["b1"])
    lip = p["lam"] + abs(p["theta"]) + gamma * scale + abs(g0) + abs(s0)
    return CoefficientSet(dims, b, K, sigma, f, h, g, gamma=gamma, varsigma=0.5,
                          lip_f=gamma * scale, lipschitz_bound=1.5 * lip + 1.0,
                          growth_bound=1.5 * (gamma + abs(g0) + abs(s0)) + 1.0,
                          k_vanishes=True, fast_law_fixed=(p["a"] == 0 and p["b1"] == 0),
                          name="zero-k", metadata={"gamma1": None, "params": p})


def calibrate_centering(params: dict, dims: Dimensions, samples: int = 2**20,
                        seed: int = 20220607) -> tuple[np.ndarray, np.ndarray]:
    """Invariant means of ``z = y - c`` and ``cos z`` for the nonlinear-test fast dynamics.

    The centred variable solves ``dz = (-gamma z + alpha cos z) dt + g0 (1 + rho sin z) G dW``
    whatever (x, mu) is, so one long ensemble run fixes both offsets for all slow states.
    The step matches the default frozen-equation step of the Poisson solver.
    """
    p = dict(NONLINEAR_DEFAULTS)
    p.update(params)
    G = _matrices(p, dims)["G"]
    gamma, alpha, g0, rho = p["gamma"], p["alpha"], p["g0"], p["rho"]
    scale = 1.0 + abs(p["a"]) + abs(p["b1"])
    dt = 0.01 / ((gamma + alpha) * scale)
    chains = 4096
    burn = int(np.ceil(10.0 / gamma / dt))
    stride = max(1, int(np.ceil(0.5 / gamma / dt)))
    keep = max(1, samples // chains)
    stream = NoiseStream(seed, "calibrate")
    z = np.zeros((chains, dims.m))
    acc = np.zeros(dims.m)
    acc_cos = np.zeros(dims.m)
    count = 0
    sq = math.sqrt(dt)
    for k in range(burn + keep * stride):
        dw = sq * stream.normal(k, (chains, dims.d))
        z = z + (-gamma * z + alpha * np.cos(z)) * dt \
            + g0 * (1.0 + rho * np.sin(z)) * (dw @ G.T)
        if k >= burn and (k - burn) % stride == stride - 1:
            acc += z.sum(axis=0)
            acc_cos += np.cos(z).sum(axis=0)
            count += chains
    return acc / count, acc_cos / count


def instantiate(spec: ModelSpec) -> CoefficientSet:
    """Build the coefficient maps of a model specification."""
    p = spec.resolved_params()
    _check_common(p)
    if spec.family == "linear-ou":
        return _linear_ou(spec, p)
    if spec.family == "nonlinear-test":
        if "centering_offset" not in spec.params or "cos_offset" not in spec.params:
            defaults_only = all(p[k] == NONLINEAR_DEFAULTS[k]
                                for k in ("gamma", "alpha", "g0", "rho", "a", "b1")) \
                and "G" not in spec.params and spec.dims.m == 1
            if defaults_only:
                z_mean, cos_mean = [NONLINEAR_DEFAULT_OFFSET[0]], [NONLINEAR_DEFAULT_OFFSET[1]]
            else:
                z_mean, cos_mean = (v.tolist() for v in calibrate_centering(p, spec.dims))
            p.setdefault("centering_offset", z_mean)
            p.setdefault("cos_offset", cos_mean)
        return _nonlinear(spec, p)
    return _zero_k(spec, p)


# --------------------------------------------------------------------------
# closed-form reference for the linear family


@dataclass(frozen=True)
class OracleData:
    """Exact invariant law, corrector and limiting coefficients of linear-ou."""

    params: dict
    dims: Dimensions
    P: np.ndarray
    A: np.ndarray
    G: np.ndarray
    S: np.ndarray

    def invariant_mean(self, x, mu) -> np.ndarray:
        mean = as_summary(mu).mean
        x = np.asarray(x, float)
        return self.params["a"] * (self.A @ x) + self.params["b1"] * (self.A @ mean)

    @property
    def invariant_cov(self) -> np.ndarray:
        p = self.params
        return p["g0"] ** 2 * self.G @ self.G.T / (2 * p["gamma"])

    def phi(self, x, mu, y) -> np.ndarray:
        p = self.params
        return p["kappa"] / p["gamma"] * self.P @ (np.asarray(y, float) - self.invariant_mean(x, mu))

    @property
    def d_phi_dy(self) -> np.ndarray:
        return self.params["kappa"] / self.params["gamma"] * self.P

    @property
    def d_phi_dx(self) -> np.ndarray:
        return -self.params["a"] * self.d_phi_dy @ self.A

    def theta(self, x, mu) -> np.ndarray:
        p = self.params
        mean = as_summary(mu).mean
        eta = p["eta"] * np.ones(self.dims.m)
        return -p["lam"] * np.asarray(x, float) + p["theta"] * mean + self.d_phi_dy @ eta

    @property
    def a_tilde(self) -> np.ndarray:
        p = self.params
        root = self.d_phi_dy @ (p["g0"] * self.G) + p["sigma0"] * self.S
        return root @ root.T

    @property
    def sigma_tilde(self) -> np.ndarray:
        from .homogenize import psd_sqrt
        return psd_sqrt(self.a_tilde)

    @property
    def sigma_mp_matrix(self) -> np.ndarray:
        p = self.params
        k_phi = p["kappa"] ** 2 / p["gamma"] * self.P @ self.invariant_cov @ self.P.T
        sg = p["sigma0"] * p["g0"] * self.S @ self.G.T @ self.d_phi_dy.T
        ss = p["sigma0"] ** 2 * self.S @ self.S.T
        return k_phi + k_phi.T + sg + sg.T + ss


def oracle_reference(spec: ModelSpec) -> OracleData | None:
    """Closed forms for linear-ou (absent for the other families)."""
    if spec.family != "linear-ou":
        return None
    p = spec.resolved_params()
    if p["k_shift"] != 0:
        return None
    mats = _matrices(p, spec.dims)
    return OracleData(p, spec.dims, mats["P"], mats["A"], mats["G"], mats["S"])


# --------------------------------------------------------------------------
# assumption spot checks


@dataclass
class CheckResult:
    name: str
    passed: bool
    statistic: float
    threshold: float
    witness: dict | None = None

    def to_dict(self):
        return {"name": self.name, "passed": bool(self.passed), "statistic": float(self.statistic),
                "threshold": float(self.threshold), "witness": self.witness}


@dataclass
class AssumptionReport:
    checks: list[CheckResult]
    budget: int
    seed: int

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


PROBE_PARTICLES = 32


def _probe_measures(dims: Dimensions, count: int, stream: NoiseStream, tag: int):
    clouds = stream.normal(tag, (count, PROBE_PARTICLES, dims.n))
    return [EmpiricalMeasure(c) for c in clouds]


def verify_assumptions(cs: CoefficientSet, budget: int = 10_000, seed: int = 0,
                       slack: float = 0.0) -> AssumptionReport:
    """Probe the Lipschitz, dissipativity and growth conditions on random points.

    Points are standard Gaussians in x and y; measures are 32-particle
    Gaussian clouds.  A failed check is a result, not an exception.
    """
    if budget < 100:
        raise ValueError("budget must be at least 100")
    dims = cs.dims
    stream = NoiseStream(seed, "assumptions")
    n_mu = min(budget, 64)
    mus = _probe_measures(dims, n_mu, stream, 0)
    sums = [mu.summary(keep_cloud=True) for mu in mus]
    x1, x2 = stream.normal(1, (budget, dims.n)), stream.normal(2, (budget, dims.n))
    y1, y2 = stream.normal(3, (budget, dims.m)), stream.normal(4, (budget, dims.m))
    pick = np.arange(budget) % n_mu
    pick2 = (np.arange(budget) * 7 + 3) % n_mu
    w2 = np.array([[w2_distance(mus[i], mus[j]) for j in range(n_mu)] for i in range(n_mu)])

    def evaluate(fn, x, y, idx):
        out = None
        for k in range(n_mu):
            sel = idx == k
            if not sel.any():
                continue
            v = np.asarray(fn(x[sel], sums[k], y[sel]), dtype=float)
            if out is None:
                out = np.zeros((len(x),) + v.shape[1:])
            out[sel] = v
        return out

    checks = []
    names = ("b", "K", "sigma", "f", "h", "g")
    denom = np.linalg.norm(x1 - x2, axis=1) + np.linalg.norm(y1 - y2, axis=1) + w2[pick, pick2]
    for name in names:
        fn = getattr(cs, name)
        v1 = evaluate(fn, x1, y1, pick).reshape(budget, -1)
        v2 = evaluate(fn, x2, y2, pick2).reshape(budget, -1)
        ratio = np.linalg.norm(v1 - v2, axis=1) / denom
        i = int(np.argmax(ratio))
        checks.append(CheckResult(f"lipschitz_{name}", bool(ratio[i] <= cs.lipschitz_bound),
                                  ratio[i], cs.lipschitz_bound,
                                  {"x1": x1[i].tolist(), "x2": x2[i].tolist(),
                                   "y1": y1[i].tolist(), "y2": y2[i].tolist()}))

    # one-sided dissipativity in y at a common (x, mu)
    f1, f2 = evaluate(cs.f, x1, y1, pick), evaluate(cs.f, x1, y2, pick)
    g1, g2 = evaluate(cs.g, x1, y1, pick), evaluate(cs.g, x1, y2, pick)
    dy = y1 - y2
    stat = (2 * np.einsum("ij,ij->i", f1 - f2, dy) + ((g1 - g2) ** 2).sum(axis=(1, 2))) \
        / np.einsum("ij,ij->i", dy, dy)
    i = int(np.argmax(stat))
    thr = -cs.gamma * (1.0 - slack)
    checks.append(CheckResult("dissipativity", bool(stat[i] <= thr), stat[i], thr,
                              {"x": x1[i].tolist(), "y1": y1[i].tolist(), "y2": y2[i].tolist()}))

    # growth: scale the probe y out to |y| ~ 10 to see the envelope
    radii = np.linspace(0.0, 10.0, budget)[:, None]
    yg = y1 / np.linalg.norm(y1, axis=1, keepdims=True) * radii
    ynorm = radii[:, 0]
    lin = sum(np.linalg.norm(evaluate(getattr(cs, nm), x1, yg, pick).reshape(budget, -1), axis=1)
              for nm in ("K", "f", "h", "sigma"))
    ratio = lin / (1.0 + ynorm)
    i = int(np.argmax(ratio))
    checks.append(CheckResult("growth_linear", bool(ratio[i] <= cs.growth_bound), ratio[i],
                              cs.growth_bound, {"x": x1[i].tolist(), "y": yg[i].tolist()}))
    kr = np.linalg.norm(evaluate(cs.K, x1, yg, pick).reshape(budget, -1), axis=1) / (1.0 + ynorm)
    i = int(np.argmax(kr))
    checks.append(CheckResult("growth_K", bool(kr[i] <= cs.growth_bound), kr[i], cs.growth_bound,
                              {"x": x1[i].tolist(), "y": yg[i].tolist()}))
    gn = np.linalg.norm(evaluate(cs.g, x1, yg, pick).reshape(budget, -1), axis=1)
    gr = gn / (1.0 + ynorm**cs.varsigma)
    i = int(np.argmax(gr))
    checks.append(CheckResult("growth_g", bool(gr[i] <= cs.growth_bound), gr[i], cs.growth_bound,
                              {"x": x1[i].tolist(), "y": yg[i].tolist()}))
    return AssumptionReport(checks, budget, seed)
