"""Limiting drift and diffusion of the homogenised mean-field equation.

Given invariant samples ``y_j`` of the frozen fast dynamics at ``(x, mu)`` and
the corrector ``Phi`` with its derivatives at each sample, the limiting
coefficients are sample averages of

* drift: ``b + d_x Phi . K + d_y Phi . h + sum_{a,k} (sigma g^T)_{ak} d_{x_a} d_{y_k} Phi``
* diffusion (Gram form): ``(d_y Phi g + sigma)(d_y Phi g + sigma)^T``
* diffusion (flux form): ``K Phi^T + Phi K^T + sigma g^T d_y Phi^T + (.)^T + sigma sigma^T``

The two diffusion matrices agree in exact arithmetic; comparing them on the
same samples is a strong end-to-end check of the corrector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .engine import NotPSDError
from .measure import MeasureSummary, as_summary
from .model import CoefficientSet, OracleData
from .poisson import InvariantMeasureEstimate, PoissonEval, PoissonSolver, sample_invariant

SYMMETRY_TOL = 1e-10
EIG_TOL = 1e-8


def psd_sqrt(A, eig_tol: float = EIG_TOL) -> np.ndarray:
    """Principal square root of a symmetric positive semidefinite matrix.

    Eigenvalues in ``[-eig_tol * |A|, 0)`` are treated as round-off and set
    to zero; anything more negative raises :class:`NotPSDError`.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    scale = float(np.abs(A).max()) if A.size else 0.0
    if np.abs(A - A.T).max(initial=0.0) > SYMMETRY_TOL * max(1.0, scale):
        raise NotPSDError("matrix is not symmetric")
    lam, V = np.linalg.eigh(0.5 * (A + A.T))
    tol = eig_tol * max(float(np.abs(lam).max(initial=0.0)), 0.0)
    if lam.size and lam[0] < -tol:
        raise NotPSDError(f"not PSD: eigenvalue {lam[0]:.6g} with eigenvector {V[:, 0].tolist()}")
    root = (V * np.sqrt(np.clip(lam, 0.0, None))) @ V.T
    return 0.5 * (root + root.T)


@dataclass
class Averaged:
    value: np.ndarray
    se: np.ndarray


def _combined_se(per_sample: np.ndarray, nu_hat: InvariantMeasureEstimate,
                 per_path: np.ndarray | None = None) -> np.ndarray:
    # sampling error over invariant samples plus path noise; paths share noise
    # across samples, so the path term uses the spread of per-path sample averages
    se = nu_hat.mean_se(per_sample)
    if per_path is not None:
        avg = per_path.mean(axis=0)
        se = np.sqrt(se**2 + avg.var(axis=0, ddof=1) / avg.shape[0])
    return se


def averaged_map(F, cs: CoefficientSet, x, mu, nu_hat: InvariantMeasureEstimate) -> Averaged:
    """Average of ``F(x, mu, y)`` over the invariant samples, with a batch-means SE."""
    mu = as_summary(mu)
    J = nu_hat.size
    xb = np.broadcast_to(np.atleast_1d(np.asarray(x, dtype=float)), (J, cs.dims.n))
    vals = np.asarray(F(xb, mu, nu_hat.samples), dtype=float)
    # shift by the first sample so constant integrands average exactly
    return Averaged(vals[0] + (vals - vals[0]).mean(axis=0), nu_hat.mean_se(vals))


@dataclass
class AveragedCoefficients:
    x: np.ndarray
    theta: np.ndarray | None = None
    theta_se: np.ndarray | None = None
    a_tilde: np.ndarray | None = None
    a_tilde_se: np.ndarray | None = None
    sigma_tilde: np.ndarray | None = None
    a_mp: np.ndarray | None = None
    a_mp_se: np.ndarray | None = None
    a_mp_min_eig: float | None = None
    sigma_mp: np.ndarray | None = None
    mp_violation: bool = False
    equivalence: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class CorrectorSamples:
    """Corrector and derivatives at every invariant sample of one slow state.

    One frozen-path batch with common random numbers serves every sample and
    every finite-difference offset, so the drift and both diffusion forms are
    built from strongly correlated estimates.
    """

    def __init__(self, cs: CoefficientSet, x, mu, nu_hat: InvariantMeasureEstimate | None = None,
                 paths: int = 32, seed: int = 0, budget: int = 1000, drift: bool = True,
                 **solver_kw):
        self.cs = cs
        self.x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(cs.dims.n)
        self.mu = as_summary(mu)
        if nu_hat is None:
            nu_hat = sample_invariant(cs, self.x, self.mu, budget, seed)
        self.nu_hat = nu_hat
        self.solver = PoissonSolver(cs, self.x, self.mu, paths=paths, seed=seed, nu_hat=nu_hat,
                                    **solver_kw)
        self.ev: PoissonEval = self.solver.derivatives(nu_hat.samples, first_x=drift, mixed=drift)
        J = nu_hat.size
        xb = np.broadcast_to(self.x, (J, cs.dims.n))
        ys = nu_hat.samples
        self.b = cs.b(xb, self.mu, ys)
        self.K = cs.K(xb, self.mu, ys)
        self.h = cs.h(xb, self.mu, ys)
        self.sigma = cs.sigma(xb, self.mu, ys)
        self.g = cs.g(xb, self.mu, ys)

    # integrands; ``D`` arguments carry an optional path axis after the sample axis

    def _drift(self, Dx, Dy, Dxy, path_axis: bool):
        sg = np.einsum("jad,jkd->jak", self.sigma, self.g)
        if path_axis:
            return (self.b[:, None] + np.einsum("jpia,ja->jpi", Dx, self.K)
                    + np.einsum("jpik,jk->jpi", Dy, self.h)
                    + np.einsum("jak,jpiak->jpi", sg, Dxy))
        return (self.b + np.einsum("jia,ja->ji", Dx, self.K) + np.einsum("jik,jk->ji", Dy, self.h)
                + np.einsum("jak,jiak->ji", sg, Dxy))

    def _dyg(self, Dy, path_axis: bool):
        return np.einsum("jpik,jkd->jpid" if path_axis else "jik,jkd->jid", Dy, self.g)

    def terms(self, path_axis: bool = False) -> dict:
        """Per-sample integrands (sample axis first, then optionally paths)."""
        ev = self.ev
        Dy = ev.paths["d_phi_dy"] if path_axis else ev.d_phi_dy
        Phi = ev.paths["phi"] if path_axis else ev.phi
        sig = self.sigma[:, None] if path_axis else self.sigma
        K = self.K[:, None] if path_axis else self.K
        g = self.g[:, None] if path_axis else self.g
        dyg = self._dyg(Dy, path_axis)
        root = dyg + sig
        T = lambda M: np.swapaxes(M, -1, -2)
        outer = lambda u, v: u[..., :, None] * v[..., None, :]
        kphi = outer(K, Phi)
        sgd = np.einsum("...ad,...kd,...ik->...ai", sig, g, Dy)
        ss = sig @ T(sig)
        out = {"a_tilde": root @ T(root),
               "a_mp": kphi + T(kphi) + sgd + T(sgd) + ss,
               "gram_dyg": dyg @ T(dyg), "flux_k_phi": kphi + T(kphi),
               "cross_dyg_sigma": dyg @ T(sig) + sig @ T(dyg), "cross_sg_dy": sgd + T(sgd)}
        if ev.d_phi_dx is not None:
            Dx = ev.paths["d_phi_dx"] if path_axis else ev.d_phi_dx
            Dxy = ev.paths["d2_phi_dxdy"] if path_axis else ev.d2_phi_dxdy
            out["theta"] = self._drift(Dx, Dy, Dxy, path_axis)
        return out

    def averages(self) -> dict:
        vals = self.terms()
        per_path = self.terms(path_axis=True)
        out = {k: Averaged(v.mean(axis=0), _combined_se(v, self.nu_hat, per_path[k]))
               for k, v in vals.items()}
        # difference of the two diffusion forms on common samples
        diff = vals["a_tilde"] - vals["a_mp"]
        out["a_diff"] = Averaged(diff.mean(axis=0), _combined_se(
            diff, self.nu_hat, per_path["a_tilde"] - per_path["a_mp"]))
        return out


def _symmetrize(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def _assemble(cs, x, avg: dict, want_drift: bool) -> AveragedCoefficients:
    out = AveragedCoefficients(np.asarray(x, dtype=float))
    if want_drift:
        out.theta, out.theta_se = avg["theta"].value, avg["theta"].se
    a_t = _symmetrize(avg["a_tilde"].value)
    lam = np.linalg.eigvalsh(a_t)
    # an average of Gram matrices cannot be indefinite beyond round-off
    if lam[0] < -1e-12 * max(1.0, float(np.abs(lam).max())):
        raise NotPSDError(f"Gram-form diffusion has eigenvalue {lam[0]:.3g}")
    out.a_tilde, out.a_tilde_se = a_t, avg["a_tilde"].se
    out.sigma_tilde = psd_sqrt(a_t)
    a_mp = _symmetrize(avg["a_mp"].value)
    out.a_mp, out.a_mp_se = a_mp, avg["a_mp"].se
    out.a_mp_min_eig = float(np.linalg.eigvalsh(a_mp)[0])
    slack = 3 * float(np.linalg.norm(out.a_mp_se)) + EIG_TOL * float(np.abs(a_mp).max(initial=0.0))
    out.mp_violation = out.a_mp_min_eig < -slack
    try:
        out.sigma_mp = psd_sqrt(a_mp)
    except NotPSDError:
        out.sigma_mp = None
    norm_t = float(np.linalg.norm(a_t))
    diff = avg["a_diff"]
    rel = float(np.linalg.norm(diff.value)) / norm_t if norm_t else 0.0
    rel_se = float(np.linalg.norm(diff.se)) / norm_t if norm_t else 0.0
    gram = avg["gram_dyg"].value - avg["flux_k_phi"].value
    gram_se = np.sqrt(avg["gram_dyg"].se ** 2 + avg["flux_k_phi"].se ** 2)
    cross = avg["cross_dyg_sigma"].value - avg["cross_sg_dy"].value
    out.equivalence = {
        "relative_residual": rel, "relative_se": rel_se,
        "within_3se": bool(rel <= 3 * rel_se + 1e-12),
        "gram_lhs": avg["gram_dyg"].value.tolist(), "gram_rhs": avg["flux_k_phi"].value.tolist(),
        "gram_abs_diff": np.abs(gram).tolist(), "gram_se": gram_se.tolist(),
        "cross_lhs": avg["cross_dyg_sigma"].value.tolist(),
        "cross_rhs": avg["cross_sg_dy"].value.tolist(),
        "cross_abs_diff": np.abs(cross).tolist(),
    }
    return out


def homogenize(cs: CoefficientSet, x, mu, nu_hat: InvariantMeasureEstimate | None = None,
               paths: int = 32, seed: int = 0, budget: int = 1000, drift: bool = True,
               **solver_kw) -> AveragedCoefficients:
    """All limiting coefficients at ``(x, mu)`` from one corrector batch."""
    cs_samples = CorrectorSamples(cs, x, mu, nu_hat, paths, seed, budget, drift, **solver_kw)
    return _assemble(cs, x, cs_samples.averages(), drift)


def theta(cs: CoefficientSet, x, mu, nu_hat=None, paths: int = 32, seed: int = 0,
          budget: int = 1000, **kw) -> Averaged:
    res = homogenize(cs, x, mu, nu_hat, paths, seed, budget, drift=True, **kw)
    return Averaged(res.theta, res.theta_se)


def diffusion_tilde(cs: CoefficientSet, x, mu, nu_hat=None, paths: int = 32, seed: int = 0,
                    budget: int = 1000, **kw) -> AveragedCoefficients:
    return homogenize(cs, x, mu, nu_hat, paths, seed, budget, drift=False, **kw)


def diffusion_mp(cs: CoefficientSet, x, mu, nu_hat=None, paths: int = 32, seed: int = 0,
                 budget: int = 1000, **kw) -> AveragedCoefficients:
    return homogenize(cs, x, mu, nu_hat, paths, seed, budget, drift=False, **kw)


def check_equivalence(cs: CoefficientSet, x, mu, nu_hat=None, paths: int = 32, seed: int = 0,
                      budget: int = 1000, **kw) -> dict:
    """Both diffusion forms and their identities on common samples."""
    res = homogenize(cs, x, mu, nu_hat, paths, seed, budget, drift=False, **kw)
    rep = dict(res.equivalence)
    rep["a_tilde"] = res.a_tilde.tolist()
    rep["a_mp"] = res.a_mp.tolist()
    rep["a_mp_min_eig"] = res.a_mp_min_eig
    return rep


# --------------------------------------------------------------------------
# coefficient providers for the limit equation


class OracleProvider:
    """Closed-form drift and diffusion of the linear family."""

    def __init__(self, oracle: OracleData):
        self.oracle = oracle
        self.sigma = oracle.sigma_tilde

    def __call__(self, X, mu: MeasureSummary):
        p = self.oracle.params
        shift = self.oracle.d_phi_dy @ (p["eta"] * np.ones(self.oracle.dims.m))
        theta = -p["lam"] * X + p["theta"] * mu.mean[None, :] + shift[None, :]
        return theta, self.sigma


class GridProvider:
    """Multilinear interpolation of computed coefficients over (x, mean of mu).

    Only one slow dimension is supported; points outside the grid are clipped
    to its boundary.
    """

    def __init__(self, xs, means, theta_grid, a_grid):
        self.xs, self.means = np.asarray(xs, float), np.asarray(means, float)
        self.theta = RegularGridInterpolator((self.xs, self.means), theta_grid)
        self.a = RegularGridInterpolator((self.xs, self.means), a_grid)

    @classmethod
    def build(cls, cs: CoefficientSet, x_range, mean_range, nx: int = 5, nm: int = 3,
              paths: int = 32, budget: int = 500, seed: int = 0, drift_paths: int | None = None
              ) -> "GridProvider":
        if cs.dims.n != 1:
            raise ValueError("grid provider supports one slow dimension only")
        xs = np.linspace(*x_range, nx)
        ms = np.linspace(*mean_range, nm)
        th = np.zeros((nx, nm))
        aa = np.zeros((nx, nm))
        shared = None
        for i, x in enumerate(xs):
            for k, mval in enumerate(ms):
                mu = MeasureSummary(np.array([mval]), float(mval**2))
                nu = shared
                if nu is None:
                    nu = sample_invariant(cs, [x], mu, budget, seed)
                    if cs.fast_law_fixed:
                        shared = nu
                res = homogenize(cs, [x], mu, nu, paths, seed)
                th[i, k] = res.theta[0]
                aa[i, k] = res.a_tilde[0, 0]
        return cls(xs, ms, th, aa)

    def __call__(self, X, mu: MeasureSummary):
        pts = np.column_stack([np.clip(X[:, 0], self.xs[0], self.xs[-1]),
                               np.full(len(X), np.clip(mu.mean[0], self.means[0], self.means[-1]))])
        theta = self.theta(pts)[:, None]
        a = np.maximum(self.a(pts), 0.0)
        return theta, np.sqrt(a)[:, None, None]


class ZeroCorrectorProvider:
    """Limit coefficients when K and h vanish and b, sigma ignore y: Theta = b, Sigma = sqrt(sigma sigma^T)."""

    def __init__(self, cs: CoefficientSet):
        self.cs = cs

    def __call__(self, X, mu: MeasureSummary):
        y = np.zeros((len(X), self.cs.dims.m))
        sig = self.cs.sigma(X, mu, y)
        a = np.einsum("bij,bkj->bik", sig, sig)
        if np.all(a == a[:1]):
            root = np.broadcast_to(psd_sqrt(a[0]), a.shape)
        else:
            root = np.stack([psd_sqrt(m) for m in a])
        return self.cs.b(X, mu, y), root


def closed_form_provider(spec, cs: CoefficientSet):
    """Exact limit coefficients where they are known, else None."""
    from .model import oracle_reference
    oracle = oracle_reference(spec)
    if oracle is not None:
        return OracleProvider(oracle)
    if spec.family == "zero-k":
        return ZeroCorrectorProvider(cs)
    return None
