"""Empirical probability measures on R^n and the 2-Wasserstein distance."""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog

EXACT_SIZE_CAP = 10_000
DEFAULT_PROJECTIONS = 64


class MeasureError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Weighted particle cloud ``sum_i w_i delta_{x_i}``.

    ``points`` has shape (N, n); ``weights`` sums to one.
    """

    points: np.ndarray
    weights: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        pts = np.array(self.points, dtype=float, copy=True)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise MeasureError("a measure needs at least one point of dimension >= 1")
        if not np.all(np.isfinite(pts)):
            raise MeasureError("measure points must be finite")
        if self.weights is None:
            w = np.full(pts.shape[0], 1.0 / pts.shape[0])
        else:
            w = np.array(self.weights, dtype=float, copy=True).reshape(-1)
            if w.shape[0] != pts.shape[0]:
                raise MeasureError("one weight per point required")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise MeasureError("weights must be finite and nonnegative")
            if abs(w.sum() - 1.0) > 1e-12:
                raise MeasureError(f"weights sum to {w.sum()!r}, not 1")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    @property
    def second_moment(self) -> float:
        return float(self.weights @ np.einsum("ij,ij->i", self.points, self.points))

    def summary(self, keep_cloud: bool = False) -> "MeasureSummary":
        return MeasureSummary(self.mean, self.second_moment, self if keep_cloud else None)

    def to_csv(self) -> str:
        buf = io.StringIO()
        header = ",".join(f"x{i}" for i in range(self.dim))
        if not self.is_uniform:
            header += ",weight"
            data = np.column_stack([self.points, self.weights])
        else:
            data = self.points
        np.savetxt(buf, data, delimiter=",", header=header, comments="", fmt="%.17g")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EmpiricalMeasure":
        lines = text.strip().splitlines()
        header = lines[0].split(",")
        data = np.loadtxt(io.StringIO("\n".join(lines[1:])), delimiter=",", ndmin=2)
        if header[-1] == "weight":
            return cls(data[:, :-1], data[:, -1])
        return cls(data)


@dataclass(frozen=True, eq=False)
class MeasureSummary:
    """What coefficient functions see of a measure argument.

    Built-in families read ``mean`` only; ``cloud`` is attached when a
    family declares full-cloud dependence.
    """

    mean: np.ndarray
    second_moment: float
    cloud: EmpiricalMeasure | None = None

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))

    @classmethod
    def point_mass(cls, a) -> "MeasureSummary":
        a = np.atleast_1d(np.asarray(a, dtype=float))
        return cls(a, float(a @ a))


def as_summary(mu) -> MeasureSummary:
    """Accept an EmpiricalMeasure, a MeasureSummary or a point (point mass)."""
    if isinstance(mu, MeasureSummary):
        return mu
    if isinstance(mu, EmpiricalMeasure):
        return mu.summary()
    return MeasureSummary.point_mass(mu)


def empirical_from_samples(points) -> EmpiricalMeasure:
    """Uniform empirical measure of the rows of ``points``."""
    return EmpiricalMeasure(np.asarray(points, dtype=float))


def moments(mu: EmpiricalMeasure, p: int) -> tuple[np.ndarray, float]:
    """Return the mean vector and the raw absolute moment ``sum_i w_i |x_i|^p``."""
    if p < 1:
        raise MeasureError("p must be a positive integer")
    norms = np.sqrt(np.einsum("ij,ij->i", mu.points, mu.points))
    return mu.mean, float(mu.weights @ norms**p)


def _w2_1d(x, wx, y, wy) -> float:
    # monotone coupling through the quantile functions
    ix, iy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    x, wx, y, wy = x[ix], wx[ix], y[iy], wy[iy]
    cx, cy = np.cumsum(wx), np.cumsum(wy)
    cx[-1] = cy[-1] = 1.0
    levels = np.union1d(cx, cy)
    dq = np.diff(np.concatenate([[0.0], levels]))
    qx = x[np.minimum(np.searchsorted(cx, levels, side="left"), len(x) - 1)]
    qy = y[np.minimum(np.searchsorted(cy, levels, side="left"), len(y) - 1)]
    return float(np.sqrt(max(dq @ (qx - qy) ** 2, 0.0)))


def _w2_exact(mu1: EmpiricalMeasure, mu2: EmpiricalMeasure) -> float:
    cost = ((mu1.points[:, None, :] - mu2.points[None, :, :]) ** 2).sum(axis=-1)
    if mu1.size == mu2.size and mu1.is_uniform and mu2.is_uniform:
        r, c = linear_sum_assignment(cost)
        return float(np.sqrt(max(cost[r, c].mean(), 0.0)))
    n1, n2 = mu1.size, mu2.size
    a_eq = np.zeros((n1 + n2, n1 * n2))
    for i in range(n1):
        a_eq[i, i * n2:(i + 1) * n2] = 1.0
    for j in range(n2):
        a_eq[n1 + j, j::n2] = 1.0
    b_eq = np.concatenate([mu1.weights, mu2.weights])
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise MeasureError(f"transport LP failed: {res.message}")
    return float(np.sqrt(max(res.fun, 0.0)))


def w2_distance(mu1: EmpiricalMeasure, mu2: EmpiricalMeasure, method: str = "exact",
                projections: int = DEFAULT_PROJECTIONS, seed: int = 0) -> float:
    """2-Wasserstein distance between two empirical measures.

    ``exact`` sorts in one dimension and solves the optimal assignment (or the
    transport LP for unequal sizes / weights) in higher dimension; ``sliced``
    averages squared 1-D distances over ``projections`` random directions.
    """
    if mu1.dim != mu2.dim:
        raise MeasureError(f"dimension mismatch: {mu1.dim} vs {mu2.dim}")
    if method == "exact":
        if mu1.dim == 1:
            return _w2_1d(mu1.points[:, 0], mu1.weights, mu2.points[:, 0], mu2.weights)
        same_uniform = mu1.size == mu2.size and mu1.is_uniform and mu2.is_uniform
        if mu1.size * mu2.size > EXACT_SIZE_CAP and not same_uniform:
            raise MeasureError(
                f"exact W2 limited to N1*N2 <= {EXACT_SIZE_CAP} (got {mu1.size * mu2.size})")
        return _w2_exact(mu1, mu2)
    if method == "sliced":
        if mu1.dim == 1:
            return _w2_1d(mu1.points[:, 0], mu1.weights, mu2.points[:, 0], mu2.weights)
        rng = np.random.Generator(np.random.Philox(seed))
        dirs = rng.standard_normal((projections, mu1.dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        total = 0.0
        for u in dirs:
            total += _w2_1d(mu1.points @ u, mu1.weights, mu2.points @ u, mu2.weights) ** 2
        return float(np.sqrt(total / projections))
    raise MeasureError(f"unknown W2 method {method!r}")

