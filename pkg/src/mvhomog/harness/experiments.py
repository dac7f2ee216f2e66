"""The harness experiments: assumption battery, weak convergence, fluctuation
scaling, uniform moments and averaging error.

Every experiment runs independent (epsilon, seed) simulations, reduces each
to a few per-seed statistics, and estimates standard errors from the spread
over seeds.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy import stats

from .. import __version__
from ..engine import IntegratorConfig, ParticleSystemState, simulate_limit, step_full
from ..homogenize import GridProvider, check_equivalence, closed_form_provider
from ..measure import EmpiricalMeasure, MeasureSummary, w2_distance
from ..model import CoefficientSet, instantiate, verify_assumptions
from ..poisson import (CenteringError, PoissonSolver, check_centering, poisson_residual,
                       regularity_spotcheck, sample_invariant)
from ..rng import NoiseStream
from .config import ConfigError, ExperimentConfig
from .report import RunReport, Series


def parallel_map(fn, tasks, threads: int = 1) -> list:
    """``[fn(t) for t in tasks]``, optionally on a thread pool; order is preserved."""
    tasks = list(tasks)
    if threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tasks))


def _provenance(config: ExperimentConfig, command: str) -> dict:
    return {"command": command, "config_hash": config.digest(), "model_hash": config.model.digest(),
            "seeds": list(config.seeds), "version": __version__, "config": config.to_dict()}


def _cfg(cs, config: ExperimentConfig, eps: float, N: int | None = None) -> IntegratorConfig:
    return IntegratorConfig.for_model(cs, eps, config.T, N or config.N, config.delta0)


def _run(cs: CoefficientSet, cfg: IntegratorConfig, config: ExperimentConfig, seed: int, observe):
    """Integrate the particle system, calling ``observe(k, state)`` at every step."""
    X, Y = config.model.initial.sample(cs.dims, cfg.N, seed)
    state = ParticleSystemState(0.0, X, Y)
    noise = NoiseStream(seed, "W")
    observe(0, state)
    for k in range(cfg.n_steps):
        state = step_full(state, cs, cfg, noise)
        observe(k + 1, state)
    return state


def _mean_se(values) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(values, dtype=float)
    se = v.std(axis=0, ddof=1) / math.sqrt(len(v)) if len(v) > 1 else np.zeros(v.shape[1:])
    return v.mean(axis=0), se


def loglog_slope(xs, per_seed) -> dict:
    """OLS slope of log(value) on log(x) over every (x, seed) point, with a 95% CI."""
    per_seed = np.asarray(per_seed, dtype=float)
    lx = np.repeat(np.log(np.asarray(xs, dtype=float)), per_seed.shape[1])
    ly = np.log(per_seed.ravel())
    fit = stats.linregress(lx, ly)
    half = stats.t.ppf(0.975, len(lx) - 2) * fit.stderr
    return {"slope": float(fit.slope), "se": float(fit.stderr),
            "ci": [float(fit.slope - half), float(fit.slope + half)]}


def _slope_verdict(report, name, slope: dict, target: float, rel: float = 0.2):
    lo, hi = (1 - rel) * target, (1 + rel) * target
    width = slope["ci"][1] - slope["ci"][0]
    ok = lo <= slope["slope"] <= hi and width <= hi - lo
    report.add_verdict(name, ok, slope["slope"], target,
                       f"band [{lo:.3g}, {hi:.3g}], 95% CI [{slope['ci'][0]:.3g}, "
                       f"{slope['ci'][1]:.3g}] must be narrower than the band")


def monotone_verdict(report, name, eps, values, ses):
    """Non-increasing as epsilon shrinks within 2 combined SE, with a significant overall drop."""
    values, ses = np.asarray(values), np.asarray(ses)
    steps = [values[k + 1] <= values[k] + 2 * math.hypot(ses[k], ses[k + 1])
             for k in range(len(values) - 1)]
    drop = values[0] - values[-1]
    comb = math.hypot(ses[0], ses[-1])
    ok = all(steps) and drop > 2 * comb
    report.add_verdict(name, ok, drop, 2 * comb,
                       f"values {np.round(values, 6).tolist()} over eps {list(eps)}; "
                       f"stepwise ok {steps}; overall drop vs 2 SE")


# --------------------------------------------------------------------------
# check


def cmd_check(config: ExperimentConfig, threads: int = 1) -> RunReport:
    spec = config.model
    cs = instantiate(spec)
    report = RunReport("check", provenance=_provenance(config, "check"))
    seed = config.seeds[0]
    assumptions = verify_assumptions(cs, seed=seed)
    for c in assumptions.checks:
        report.add_verdict(f"assumption_{c.name}", c.passed, c.statistic, c.threshold)
    report.details["assumptions"] = [c.to_dict() for c in assumptions.checks]
    ys = np.asarray(config.probes.y, dtype=float).reshape(-1, cs.dims.m)
    tasks = [(np.asarray(x, float).reshape(cs.dims.n), np.asarray(m, float).reshape(cs.dims.n))
             for x in config.probes.x for m in config.probes.mean]

    def probe(task):
        x, mean = task
        mu = MeasureSummary(mean, float(mean @ mean))
        tag = f"x={x.tolist()} mean={mean.tolist()}"
        out = {"probe": tag}
        nu = sample_invariant(cs, x, mu, config.budget, seed)
        cent = check_centering(cs, x, mu, nu)
        out["centering"] = cent.to_dict()
        if not cent.passed:
            return out
        solver = PoissonSolver(cs, x, mu, paths=config.paths * 8, seed=seed, nu_hat=nu)
        ev = solver.derivatives(ys, first_x=False, mixed=False, second_y=True, bias_check=True)
        res = poisson_residual(cs, x, mu, ev)
        out["residual"] = {"value": res.residual.tolist(), "se": res.se.tolist(),
                           "bias_bound": res.bias_bound.tolist(), "consistent": res.consistent}
        out["regularity"] = regularity_spotcheck(cs, x, mu, seed=seed).to_dict()
        out["equivalence"] = check_equivalence(cs, x, mu, nu, paths=config.paths, seed=seed)
        return out

    for out in parallel_map(probe, tasks, threads):
        tag = out["probe"]
        c = out["centering"]
        report.add_verdict(f"centering {tag}", c["passed"], max(c["residual"]),
                           3 * max(c["se"]) if c["se"] else 0.0)
        if not c["passed"]:
            report.details.setdefault("skipped", []).append(
                f"{tag}: corrector checks skipped because centering failed")
            report.details.setdefault("probes", []).append(out)
            continue
        r = out["residual"]
        report.add_verdict(f"poisson_residual {tag}", r["consistent"],
                           float(np.max(np.abs(r["value"]))),
                           float(np.max(3 * (np.asarray(r["se"]) + np.asarray(r["bias_bound"])))))
        g = out["regularity"]
        report.add_verdict(f"regularity {tag}", g["passed"], max(g["exponents"].values()), 0.5)
        e = out["equivalence"]
        thr = max(3 * e["relative_se"], 0.05)
        report.add_verdict(f"equivalence {tag}", e["relative_residual"] <= thr,
                           e["relative_residual"], thr)
        report.details.setdefault("probes", []).append(out)
    return report


# --------------------------------------------------------------------------
# weak convergence


def _functional(name: str, X: np.ndarray) -> np.ndarray:
    if name == "id":
        return X.mean(axis=0)
    if name == "square":
        return np.array([np.mean(np.sum(X**2, axis=1))])
    u = np.ones(X.shape[1]) / math.sqrt(X.shape[1])
    return np.array([np.mean(np.cos(X @ u))])


def _limit_provider(config: ExperimentConfig, cs, terminal_clouds):
    provider = closed_form_provider(config.model, cs)
    if provider is not None:
        return provider, "closed form"
    pts = np.concatenate(terminal_clouds)
    lo, hi = pts.min(), pts.max()
    pad = 0.2 * (hi - lo)
    means = [c.mean() for c in terminal_clouds]
    mlo, mhi = min(means), max(means)
    mpad = max(0.2 * (mhi - mlo), 0.1)
    provider = GridProvider.build(cs, (lo - pad, hi + pad), (mlo - mpad, mhi + mpad),
                                  config.grid.get("nx", 5), config.grid.get("nm", 3),
                                  paths=config.paths, budget=config.budget, seed=config.seeds[0])
    return provider, "interpolated grid"


def _converge_stats(cs, config, N, threads):
    seeds = config.seeds

    def full(task):
        eps, seed = task
        cfg = _cfg(cs, config, eps, N)
        return _run(cs, cfg, config, seed, lambda k, s: None).X

    tasks = [(e, s) for e in config.epsilons for s in seeds]
    finals = parallel_map(full, tasks, threads)
    finals = [finals[i * len(seeds):(i + 1) * len(seeds)] for i in range(len(config.epsilons))]
    provider, how = _limit_provider(config, cs, [x for row in finals for x in row])
    lcfg = IntegratorConfig(1.0, config.limit_dt, config.T, N)

    def limit(seed):
        return simulate_limit(provider, cs.dims, lcfg, config.model.initial, seed).X[-1]

    limits = parallel_map(limit, seeds, threads)
    table = {}
    for i, eps in enumerate(config.epsilons):
        for name in config.functionals:
            diffs = [_functional(name, a) - _functional(name, b) for a, b in zip(finals[i], limits)]
            mean, se = _mean_se(diffs)
            table[(eps, name)] = (float(np.linalg.norm(mean)), float(np.linalg.norm(se)))
        w2 = [w2_distance(EmpiricalMeasure(a), EmpiricalMeasure(b), method="exact" if cs.dims.n == 1
                          else "sliced", seed=s) for a, b, s in zip(finals[i], limits, seeds)]
        m, s = _mean_se(w2)
        table[(eps, "w2")] = (float(m), float(s))
    return table, how


def cmd_converge(config: ExperimentConfig, threads: int = 1) -> RunReport:
    cs = instantiate(config.model)
    report = RunReport("converge", provenance=_provenance(config, "converge"))
    table, how = _converge_stats(cs, config, config.N, threads)
    report.details["limit_coefficients"] = how
    eps = config.epsilons
    for e in eps:
        for name in list(config.functionals) + ["w2"]:
            v, s = table[(e, name)]
            report.add_row(e, f"weak_error_{name}" if name != "w2" else "w2_terminal", v, s)
    indistinct = config.model.family == "zero-k"
    for name in config.functionals:
        vals = [table[(e, name)][0] for e in eps]
        ses = [table[(e, name)][1] for e in eps]
        if indistinct:
            # the errors are pure noise; 95% family-wise over the grid, t-quantile for few seeds
            S = len(config.seeds)
            q = stats.t.ppf(1 - 0.025 / len(eps), S - 1) if S > 1 else math.inf
            worst = max(v - q * s for v, s in zip(vals, ses))
            report.add_verdict(f"weak_error_{name}_zero", worst <= 0, max(vals), q * max(ses),
                               f"limit and particle system coincide in law; every error within "
                               f"{q:.3g} SE of 0")
        elif len(eps) >= 2:
            monotone_verdict(report, f"weak_error_{name}_decreasing", eps, vals, ses)
    report.series["weak_error"] = Series(
        "terminal weak error", "epsilon", "error", list(eps),
        {n: [table[(e, n)][0] for e in eps] for n in list(config.functionals) + ["w2"]},
        {n: [table[(e, n)][1] for e in eps] for n in list(config.functionals) + ["w2"]},
        logx=True)
    if config.n_doubling:
        big, _ = _converge_stats(cs, config, 2 * config.N, threads)
        diag = {}
        for key, (v, s) in table.items():
            v2, s2 = big[key]
            diag[f"{key[1]}@{key[0]}"] = {"N": v, "2N": v2, "within_3se": abs(v - v2) <= 3 * math.hypot(s, s2)}
        report.diagnostics["n_doubling"] = {
            "note": "propagation-of-chaos sanity check; not part of the verdicts", "stats": diag}
    return report


# --------------------------------------------------------------------------
# fluctuations


def cmd_fluctuation(config: ExperimentConfig, threads: int = 1, p: int | None = None) -> RunReport:
    config.require_slope_grid()
    p = config.p if p is None else p
    if p < 2 or p % 2:
        raise ConfigError("fluctuation order p must be an even integer >= 2")
    cs = instantiate(config.model)
    report = RunReport("fluctuation", provenance=_provenance(config, "fluctuation"))

    def task(t):
        eps, seed = t
        cfg = _cfg(cs, config, eps)
        acc = np.zeros((cfg.N, cs.dims.n))
        best = np.zeros(cfg.N)

        def observe(k, state):
            if k:
                np.maximum(best, np.sum(acc**2, axis=1), out=best)
            if k < cfg.n_steps:
                acc[...] += cs.K(state.X, state.mu.summary(), state.Y) * cfg.dt

        _run(cs, cfg, config, seed, observe)
        return float(np.mean(best ** (p / 2)))

    tasks = [(e, s) for e in config.epsilons for s in config.seeds]
    vals = np.array(parallel_map(task, tasks, threads)).reshape(len(config.epsilons), -1)
    means, ses = _mean_se(vals.T)
    for e, m, s in zip(config.epsilons, means, ses):
        report.add_row(e, f"sup_abs_integral_K_p{p}", m, s)
    if np.all(vals == 0):
        report.add_verdict(f"fluctuation_slope_p{p}", True, 0.0, p / 2,
                           "statistic identically zero; slope undefined", degenerate=True)
        report.details["slope"] = None
    else:
        slope = loglog_slope(config.epsilons, vals)
        report.details["slope"] = slope
        _slope_verdict(report, f"fluctuation_slope_p{p}", slope, p / 2)
    report.series["fluctuation"] = Series(
        f"E sup |int K|^{p}", "epsilon", "statistic", list(config.epsilons),
        {f"p{p}": means.tolist()}, {f"p{p}": ses.tolist()}, logx=True, logy=bool(np.all(means > 0)))
    return report


# --------------------------------------------------------------------------
# moments


def _lags(cfg) -> list[int]:
    # h = dt * 2^j, kept well inside the fast time scale (h <= eps / 20)
    lags, j = [], 0
    while cfg.dt * 2**j <= cfg.epsilon / 20 * (1 + 1e-9) and cfg.dt * 2**j <= cfg.T / 2:
        lags.append(2**j)
        j += 1
    return lags


def cmd_moments(config: ExperimentConfig, threads: int = 1, p: int | None = None) -> RunReport:
    p = config.p if p is None else p
    cs = instantiate(config.model)
    report = RunReport("moments", provenance=_provenance(config, "moments"))

    def task(t):
        eps, seed = t
        cfg = _cfg(cs, config, eps)
        lags = _lags(cfg)
        ym = np.zeros(cfg.n_steps + 1)
        xm = np.zeros(cfg.n_steps + 1)
        hist = []
        inc = np.zeros(len(lags))
        cnt = np.zeros(len(lags))
        depth = (lags[-1] + 1) if lags else 1

        def observe(k, state):
            ym[k] = np.mean(np.sum(state.Y**2, axis=1) ** (p / 2))
            xm[k] = np.mean(np.sum(state.X**2, axis=1) ** (p / 2))
            hist.append(state.X)
            if len(hist) > depth:
                hist.pop(0)
            for i, L in enumerate(lags):
                if len(hist) > L:
                    inc[i] += np.mean(np.sum((hist[-1] - hist[-1 - L]) ** 2, axis=1) ** (p / 2))
                    cnt[i] += 1

        _run(cs, cfg, config, seed, observe)
        steps = np.array(lags, dtype=float) * cfg.dt
        return ym, xm, steps, np.divide(inc, np.maximum(cnt, 1))

    tasks = [(e, s) for e in config.epsilons for s in config.seeds]
    out = parallel_map(task, tasks, threads)
    S = len(config.seeds)
    sup = {"Y": [], "X": []}
    for i, eps in enumerate(config.epsilons):
        rows = out[i * S:(i + 1) * S]
        for key, idx in (("Y", 0), ("X", 1)):
            curves = np.stack([r[idx] for r in rows])
            mean_curve = curves.mean(axis=0)
            k = int(np.argmax(mean_curve))
            val = float(mean_curve[k])
            se = float(curves[:, k].std(ddof=1) / math.sqrt(S)) if S > 1 else 0.0
            sup[key].append((val, se))
            report.add_row(eps, f"sup_E_abs_{key}_p{p}", val, se)
        steps = rows[0][2]
        if len(steps) < 2:
            report.details[f"increment_slope_eps{eps:g}"] = (
                "fewer than two lags with h <= eps/20; lower delta0 to resolve increments")
        else:
            incs = np.stack([r[3] for r in rows])
            mean_inc, se_inc = _mean_se(incs)
            for h, v, s in zip(steps, mean_inc, se_inc):
                report.add_row(eps, f"increment_p{p}_h={h:.6g}", v, s)
            report.series[f"increments_eps{eps:g}"] = Series(
                f"E|X(t+h)-X(t)|^{p}, eps={eps:g}", "h", "statistic", steps.tolist(),
                {f"p{p}": mean_inc.tolist()}, {f"p{p}": se_inc.tolist()}, logx=True,
                logy=bool(np.all(mean_inc > 0)))
            if np.all(incs == 0):
                report.add_verdict(f"increment_slope_eps{eps:g}", True, 0.0, p / 2,
                                   "increments identically zero", degenerate=True)
            else:
                slope = loglog_slope(steps, incs.T)
                report.details[f"increment_slope_eps{eps:g}"] = slope
                _slope_verdict(report, f"increment_slope_eps{eps:g}", slope, p / 2)
    for key in ("Y", "X"):
        vals = np.array([v for v, _ in sup[key]])
        ses = np.array([s for _, s in sup[key]])
        if np.all(vals == 0):
            report.add_verdict(f"uniform_{key}_moments", True, 1.0, 1.2, "all moments zero",
                               degenerate=True)
            continue
        ratio = float(vals.max() / vals.min())
        rel = math.hypot(ses[vals.argmax()] / vals.max(), ses[vals.argmin()] / vals.min())
        report.add_verdict(f"uniform_{key}_moments", ratio <= 1.2, ratio, 1.2,
                           f"max/min of sup_t E|{key}|^{p} across eps; relative SE of ratio {rel:.3g}")
        report.series[f"moments_{key}"] = Series(
            f"sup_t E|{key}_t|^{p}", "epsilon", "moment", list(config.epsilons),
            {key: vals.tolist()}, {key: ses.tolist()}, logx=True)
    return report


# --------------------------------------------------------------------------
# averaging


def _observable(name: str, cs: CoefficientSet):
    if name == "square":
        return (lambda x, mu, y: y**2), False
    if name == "constant":
        return (lambda x, mu, y: np.ones((len(y), 1))), False
    if name == "K":
        return cs.K, True
    return cs.b, True


def _averaged(F, x_dep: bool, X, mu, ys, const=None, chunk: int = 1 << 20):
    if not x_dep:
        return np.broadcast_to(const, (len(X), const.shape[0]))
    J = len(ys)
    per = max(1, chunk // J)
    out = []
    for lo in range(0, len(X), per):
        xc = X[lo:lo + per]
        v = F(np.repeat(xc, J, axis=0), mu, np.tile(ys, (len(xc), 1)))
        v = v.reshape(len(xc), J, -1)
        out.append(v[:, 0] + (v - v[:, :1]).mean(axis=1))
    return np.concatenate(out)


def cmd_averaging(config: ExperimentConfig, threads: int = 1) -> RunReport:
    cs = instantiate(config.model)
    if not cs.fast_law_fixed:
        raise ConfigError("averaging needs a model whose frozen fast law does not depend on (x, mu)")
    report = RunReport("averaging", provenance=_provenance(config, "averaging"))
    F, x_dep = _observable(config.observable, cs)
    seed = config.seeds[0]
    x0 = np.zeros(cs.dims.n)
    mu0 = MeasureSummary.point_mass(x0)
    # the fast chain of the particle scheme moves with step dt/eps = delta0
    probe_cfg = _cfg(cs, config, config.epsilons[0])
    frozen_step = probe_cfg.dt / probe_cfg.epsilon
    nu = sample_invariant(cs, x0, mu0, config.invariant_samples, seed, dt=frozen_step)
    ys = nu.samples
    const = None
    if not x_dep:
        v = F(np.zeros((len(ys), cs.dims.n)), mu0, ys)
        const = v[0] + (v - v[0]).mean(axis=0)
    report.details["invariant"] = {"samples": nu.size, "dt": frozen_step,
                                   "ergodic_gap": nu.ergodic_gap}

    def task(t):
        eps, s = t
        cfg = _cfg(cs, config, eps)
        block = max(1, int(round(eps**config.block_exponent / cfg.dt)))
        acc = None
        best = np.zeros(cfg.N)
        fbar = [None]

        def observe(k, state):
            nonlocal acc
            if k:
                np.maximum(best, np.sqrt(np.sum(acc**2, axis=1)), out=best)
            if k == cfg.n_steps:
                return
            mu = state.mu.summary()
            if k % block == 0:
                fbar[0] = _averaged(F, x_dep, state.X, mu, ys, const)
            val = F(state.X, mu, state.Y) - fbar[0]
            acc = val * cfg.dt if acc is None else acc + val * cfg.dt

        _run(cs, cfg, config, s, observe)
        return float(best.mean())

    tasks = [(e, s) for e in config.epsilons for s in config.seeds]
    vals = np.array(parallel_map(task, tasks, threads)).reshape(len(config.epsilons), -1)
    means, ses = _mean_se(vals.T)
    for e, m, s in zip(config.epsilons, means, ses):
        report.add_row(e, f"averaging_error_{config.observable}", m, s)
    eps = config.epsilons
    if np.all(vals == 0):
        report.add_verdict("averaging_error_decreasing", True, 0.0, 0.0,
                           "observable has no fluctuation; error identically zero", degenerate=True)
    elif len(eps) >= 2:
        strict = all(means[k + 1] < means[k] for k in range(len(eps) - 1))
        drop = means[0] - means[-1]
        comb = math.hypot(ses[0], ses[-1])
        report.add_verdict("averaging_error_decreasing", strict and drop > 2 * comb, drop, 2 * comb,
                           f"A(eps) = {np.round(means, 6).tolist()}; strictly decreasing "
                           f"{strict}; overall drop vs 2 SE")
    report.series["averaging"] = Series(
        f"averaging error ({config.observable})", "epsilon", "A(eps)", list(eps),
        {config.observable: means.tolist()}, {config.observable: ses.tolist()},
        logx=True, logy=bool(np.all(means > 0)))
    return report


COMMANDS = {"check": cmd_check, "converge": cmd_converge, "fluctuation": cmd_fluctuation,
            "moments": cmd_moments, "averaging": cmd_averaging}
