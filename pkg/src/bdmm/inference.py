"""Maximum-likelihood fitting, asymptotic covariance, confidence ellipsoids and replication studies."""
from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .core import ParameterVector, Trajectory
from .likelihood import (DEFAULT_BRACKET_DRAWS, DEFAULT_BRACKET_STRIDE, InformationMatrix,
                         LogLikBreakdown, loglik_total, observed_information, score)
from .model.spec import ModelSpec, initial_configuration, model_from_config

WORKERS_ENV = "BDMM_WORKERS"


# --------------------------------------------------------------------------
# Chi-square quantile via the regularised incomplete gamma function
# --------------------------------------------------------------------------

def _gamma_p(a: float, x: float) -> float:
    """Regularised lower incomplete gamma P(a, x)."""
    if x <= 0:
        return 0.0
    log_pre = a * math.log(x) - x - math.lgamma(a)
    if x < a + 1.0:
        term = total = 1.0 / a
        ap = a
        for _ in range(10_000):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * 1e-17:
                break
        return min(1.0, total * math.exp(log_pre))
    # Lentz continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return max(0.0, 1.0 - math.exp(log_pre) * h)


def chi2_cdf(x: float, df: int) -> float:
    return _gamma_p(0.5 * df, 0.5 * x)


def chi2_quantile(level: float, df: int) -> float:
    """Inverse chi-square CDF by safeguarded Newton iteration."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    if df < 1:
        raise ValueError("df must be >= 1")
    a = 0.5 * df
    lo, hi = 0.0, max(1.0, float(df))
    while chi2_cdf(hi, df) < level:
        lo, hi = hi, 2.0 * hi
    x = 0.5 * (lo + hi)
    for _ in range(200):
        f = chi2_cdf(x, df) - level
        if f == 0.0:
            return x
        if f < 0:
            lo = x
        else:
            hi = x
        # chi-square density
        logpdf = (a - 1.0) * math.log(x) - 0.5 * x - a * math.log(2.0) - math.lgamma(a) if x > 0 else -math.inf
        step = f / math.exp(logpdf) if logpdf > -700 else math.inf
        nxt = x - step
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        if abs(nxt - x) <= 1e-15 * max(1.0, x):
            return nxt
        x = nxt
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    return x


# --------------------------------------------------------------------------
# Parameter transforms
# --------------------------------------------------------------------------

def _to_free(x, lo, hi):
    if math.isfinite(lo) and math.isfinite(hi):
        s = (x - lo) / (hi - lo)
        return math.log(s) - math.log1p(-s)
    if math.isfinite(lo):
        return math.log(x - lo)
    if math.isfinite(hi):
        return math.log(hi - x)
    return x


def _from_free(u, lo, hi):
    if math.isfinite(lo) and math.isfinite(hi):
        if u >= 0:
            s = 1.0 / (1.0 + math.exp(-u))
        else:
            e = math.exp(u)
            s = e / (1.0 + e)
        return lo + (hi - lo) * s
    if math.isfinite(lo):
        return lo + math.exp(min(u, 700.0))
    if math.isfinite(hi):
        return hi - math.exp(min(u, 700.0))
    return u


def _dx_du(x, lo, hi):
    if math.isfinite(lo) and math.isfinite(hi):
        s = (x - lo) / (hi - lo)
        return (hi - lo) * s * (1.0 - s)
    if math.isfinite(lo):
        return x - lo
    if math.isfinite(hi):
        return -(hi - x)
    return 1.0


def _interior(x, lo, hi):
    """Nudge a start value off a finite bound so the transform is finite."""
    span = (hi - lo) if math.isfinite(lo) and math.isfinite(hi) else max(1.0, abs(x))
    eps = 1e-6 * span
    if math.isfinite(lo) and x - lo < eps:
        x = lo + eps
    if math.isfinite(hi) and hi - x < eps:
        x = hi - eps
    return x


# --------------------------------------------------------------------------
# Fitting
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FitOptions:
    method: str = "nelder-mead"  # or "bfgs"
    xatol: float = 1e-8
    fatol: float = 1e-12
    maxiter: int = 5000
    initial_step: float = 0.1
    keep_trace: bool = True
    bracket_stride: int = DEFAULT_BRACKET_STRIDE
    bracket_draws: int = DEFAULT_BRACKET_DRAWS


@dataclass
class FitResult:
    theta_hat: ParameterVector
    free: tuple
    loglik: float
    loglik0: float
    breakdown: LogLikBreakdown
    info: Optional[InformationMatrix]
    covariance: Optional[np.ndarray]
    n_evals: int
    converged: bool
    message: str = ""
    warnings: tuple = ()
    trace: list = field(default_factory=list)

    @property
    def estimate(self) -> np.ndarray:
        return np.array([self.theta_hat[n] for n in self.free])

    @property
    def std_errors(self) -> Optional[np.ndarray]:
        if self.covariance is None:
            return None
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def to_dict(self) -> dict:
        return {
            "free": list(self.free),
            "theta_hat": dict(zip(self.theta_hat.names, map(float, self.theta_hat.values))),
            "estimate": self.estimate.tolist(),
            "loglik": self.loglik,
            "loglik0": self.loglik0,
            "breakdown": self.breakdown.as_dict(),
            "information": None if self.info is None else self.info.matrix.tolist(),
            "covariance": None if self.covariance is None else self.covariance.tolist(),
            "std_errors": None if self.covariance is None else self.std_errors.tolist(),
            "n_evals": self.n_evals,
            "converged": self.converged,
            "message": self.message,
            "warnings": list(self.warnings),
        }


class FitError(RuntimeError):
    pass


def _theta_pv(model: ModelSpec, theta0) -> ParameterVector:
    full = model.theta(theta0)
    return ParameterVector([full[n] for n in model.param_names], model.param_names, model.params.bounds)


def fit_mle(traj: Trajectory, model: ModelSpec, free, theta0=None,
            options: FitOptions = FitOptions()) -> FitResult:
    """Maximise the likelihood over ``free`` parameters, the rest held at theta0.

    Only the likelihood components that involve a free parameter are
    evaluated during the search.
    """
    free = tuple(free)
    if not free:
        raise ValueError("free_params must be nonempty")
    unknown = set(free) - set(model.param_names)
    if unknown:
        raise ValueError(f"unknown parameters {sorted(unknown)}")
    pv0 = _theta_pv(model, theta0)
    comps = model.components_for(free)
    bounds = [pv0.bounds[pv0.index(n)] for n in free]
    base = pv0.as_dict()

    def unpack(u):
        th = dict(base)
        for n, ui, (lo, hi) in zip(free, u, bounds):
            th[n] = _from_free(float(ui), lo, hi)
        return th

    trace = []
    n_evals = 0

    def objective(u):
        nonlocal n_evals
        n_evals += 1
        th = unpack(u)
        try:
            ll = loglik_total(traj, model, th, components=comps).total
        except ValueError:
            ll = -math.inf
        if options.keep_trace:
            trace.append((np.array([th[n] for n in free]), ll))
        return -ll if math.isfinite(ll) else 1e300

    start = {n: _interior(base[n], lo, hi) for n, (lo, hi) in zip(free, bounds)}
    ll0 = loglik_total(traj, model, base, components=comps).total
    if not math.isfinite(ll0):
        ll0_start = loglik_total(traj, model, base | start, components=comps).total
        if not math.isfinite(ll0_start):
            raise FitError("log-likelihood is not finite at the initial parameters")
    u0 = np.array([_to_free(start[n], lo, hi) for n, (lo, hi) in zip(free, bounds)])

    method = options.method.lower()
    if method in ("nelder-mead", "nm"):
        simplex = np.vstack([u0] + [u0 + options.initial_step * e for e in np.eye(len(u0))])
        res = minimize(objective, u0, method="Nelder-Mead",
                       options={"xatol": options.xatol, "fatol": options.fatol,
                                "maxiter": options.maxiter, "maxfev": 4 * options.maxiter,
                                "initial_simplex": simplex})
    elif method in ("bfgs", "quasi-newton"):
        idx = model.index(free)

        def jac(u):
            th = unpack(u)
            g = score(traj, model, th, components=comps)[idx]
            return -g * np.array([_dx_du(th[n], lo, hi) for n, (lo, hi) in zip(free, bounds)])

        res = minimize(objective, u0, jac=jac, method="BFGS",
                       options={"gtol": 1e-8, "maxiter": options.maxiter})
    else:
        raise ValueError(f"unknown method {options.method!r}")

    th_hat = unpack(res.x)
    pv_hat = pv0.with_values({n: th_hat[n] for n in free})
    bd = loglik_total(traj, model, th_hat)
    ll_hat_part = loglik_total(traj, model, th_hat, components=comps).total
    if ll_hat_part < ll0:
        # the start was better (e.g. flat objective); fall back to it
        pv_hat = pv0
        th_hat = base
        bd = loglik_total(traj, model, th_hat)
    converged = bool(res.success)
    warns = []
    if not converged:
        warns.append(f"optimizer did not converge: {res.message}")

    info = cov = None
    try:
        full = observed_information(traj, model, th_hat, components=comps,
                                    stride=options.bracket_stride, n_draws=options.bracket_draws)
        J = full.restrict(free)
        info = InformationMatrix(J, traj.horizon, free)
        if not np.all(np.isfinite(J)) or np.linalg.cond(J) > 1e12:
            raise np.linalg.LinAlgError("information matrix is singular")
        cov = np.linalg.inv(J)
        cov = 0.5 * (cov + cov.T)
    except np.linalg.LinAlgError as exc:
        warns.append(f"covariance omitted: {exc}")
        warnings.warn(f"covariance omitted: {exc}", RuntimeWarning, stacklevel=2)

    return FitResult(pv_hat, free, bd.total, loglik_total(traj, model, base).total, bd, info, cov,
                     n_evals, converged, str(res.message), tuple(warns), trace)


# --------------------------------------------------------------------------
# Confidence ellipsoids
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Ellipsoid:
    center: np.ndarray
    shape: np.ndarray
    radius2: float
    names: tuple = ()

    def mahalanobis2(self, x) -> float:
        r = np.asarray(x, dtype=float) - self.center
        return float(r @ np.linalg.solve(self.shape, r))

    def contains(self, x) -> bool:
        return self.mahalanobis2(x) <= self.radius2

    def boundary(self, n_points: int = 361, dims=(0, 1)) -> np.ndarray:
        """Closed polyline of the 2-d section through the chosen coordinates (first row == last row)."""
        i, j = dims
        S = self.shape[np.ix_([i, j], [i, j])]
        L = np.linalg.cholesky(S)
        ang = np.linspace(0.0, 2.0 * math.pi, n_points)
        circle = np.stack([np.cos(ang), np.sin(ang)])
        pts = self.center[[i, j]][:, None] + math.sqrt(self.radius2) * (L @ circle)
        pts = pts.T
        pts[-1] = pts[0]
        return pts


def confidence_ellipsoid(fit: FitResult, level: float = 0.95) -> Ellipsoid:
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    if fit.covariance is None:
        raise ValueError("fit has no covariance")
    return Ellipsoid(fit.estimate, np.array(fit.covariance), chi2_quantile(level, len(fit.free)), fit.free)


def ellipsoid_from_dict(d: dict, level: float = 0.95) -> Ellipsoid:
    """Ellipsoid from a serialized FitResult dict (as written by the CLI)."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    if d.get("covariance") is None:
        raise ValueError("fit has no covariance")
    return Ellipsoid(np.array(d["estimate"], dtype=float), np.array(d["covariance"], dtype=float),
                     chi2_quantile(level, len(d["free"])), tuple(d["free"]))


# --------------------------------------------------------------------------
# Likelihood surface
# --------------------------------------------------------------------------

def loglik_surface(traj: Trajectory, model: ModelSpec, grid: dict, theta=None) -> list:
    """Rows (v1, v2, total loglik) over the tensor grid of two parameters."""
    if len(grid) != 2:
        raise ValueError("the grid must span exactly two parameters")
    (n1, g1), (n2, g2) = grid.items()
    base = model.theta(theta)
    comps = model.components_for([n1, n2])
    fixed = loglik_total(traj, model, base, components=[c for c in ("birth", "death", "mutation", "move")
                                                       if c not in comps])
    rows = []
    for a in np.asarray(g1, dtype=float):
        for b in np.asarray(g2, dtype=float):
            th = dict(base)
            th[n1], th[n2] = float(a), float(b)
            try:
                part = loglik_total(traj, model, th, components=comps)
            except ValueError:
                rows.append((float(a), float(b), -math.inf))
                continue
            parts = {c: getattr(fixed, c) for c in fixed.components}
            parts |= {c: getattr(part, c) for c in part.components}
            rows.append((float(a), float(b), LogLikBreakdown.from_parts(parts).total))
    return rows


# --------------------------------------------------------------------------
# Replication study
# --------------------------------------------------------------------------

@dataclass
class StudyConfig:
    model: dict
    free: tuple
    truth: dict = field(default_factory=dict)
    theta0: Optional[dict] = None
    x0: Optional[dict] = None
    horizon: float = 100.0
    grid_dt: float = 0.1
    replicates: int = 100
    seed: int = 0
    level: float = 0.95
    method: str = "nelder-mead"
    max_events: int = 1_000_000

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown study config keys {sorted(unknown)}")
        known["free"] = tuple(known["free"])
        if known.get("x0") is None and "x0" in known["model"]:
            known["x0"] = known["model"]["x0"]
        return cls(**known)


@dataclass
class StudyReport:
    free: tuple
    truth: np.ndarray
    rows: list
    n_failed: int
    valid: bool
    mean: np.ndarray
    sd: np.ndarray
    mean_covariance: np.ndarray
    coverage: float
    level: float

    def mean_ellipsoid(self) -> Ellipsoid:
        """Ellipsoid centred at the mean estimate with the mean reported covariance."""
        return Ellipsoid(self.mean, self.mean_covariance, chi2_quantile(self.level, len(self.free)), self.free)

    def summary(self) -> str:
        lines = [f"replicates: {len(self.rows)}  failed: {self.n_failed}  valid: {self.valid}",
                 f"coverage of {self.level:.0%} ellipsoids: {self.coverage:.4f}"]
        for n, t, m, s, c in zip(self.free, self.truth, self.mean, self.sd, np.diag(self.mean_covariance)):
            lines.append(f"{n}: truth {t:.6g}  mean {m:.6g}  sd {s:.6g}  mean reported sd {math.sqrt(max(c, 0)):.6g}")
        return "\n".join(lines)


def replicate_seeds(master_seed: int, r: int):
    """(x0 rng seed material, simulation seed) for replicate r."""
    ss = np.random.SeedSequence([int(master_seed), int(r)])
    x0_ss, sim_ss = ss.spawn(2)
    return x0_ss, int(sim_ss.generate_state(1, np.uint64)[0])


def run_replicate(cfg: StudyConfig, r: int, emit_ellipse: bool = False) -> dict:
    """Simulate and fit one replicate; never raises (failures are reported in the row)."""
    from .simulate import SimOptions, simulate

    row = {"replicate": r, "ok": False, "error": ""}
    try:
        model = model_from_config(cfg.model)
        truth = model.theta(cfg.truth)
        x0_ss, sim_seed = replicate_seeds(cfg.seed, r)
        x0 = initial_configuration(cfg.x0, model, np.random.default_rng(x0_ss))
        traj = simulate(model, truth, x0, SimOptions(cfg.horizon, cfg.grid_dt, sim_seed, cfg.max_events))
        theta0 = dict(truth) | (cfg.theta0 or {})
        fit = fit_mle(traj, model, cfg.free, theta0, FitOptions(method=cfg.method, keep_trace=False))
        row.update(estimate=fit.estimate.tolist(), loglik=fit.loglik, converged=fit.converged,
                   covariance=None if fit.covariance is None else fit.covariance.tolist(),
                   counts=traj.counts())
        if fit.covariance is not None:
            ell = confidence_ellipsoid(fit, cfg.level)
            row["covered"] = ell.contains([truth[n] for n in cfg.free])
            if emit_ellipse and len(cfg.free) >= 2:
                row["ellipse"] = ell.boundary().tolist()
        row["ok"] = fit.converged and fit.covariance is not None
        if not row["ok"]:
            row["error"] = "; ".join(fit.warnings) or "fit failed"
    except Exception as exc:  # replicate failures are data, not faults
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)


def replicate_study(cfg: StudyConfig, workers: Optional[int] = None, emit_ellipses: bool = False,
                    progress=None) -> StudyReport:
    """Simulate and fit ``cfg.replicates`` trajectories; results in replicate order."""
    if cfg.replicates < 1:
        raise ValueError("replicates must be >= 1")
    workers = default_workers() if workers is None else max(1, int(workers))
    R = cfg.replicates
    if workers == 1 or R == 1:
        rows = []
        for r in range(R):
            rows.append(run_replicate(cfg, r, emit_ellipses))
            if progress:
                progress(r + 1, R)
    else:
        with ProcessPoolExecutor(max_workers=min(workers, R)) as ex:
            futs = [ex.submit(run_replicate, cfg, r, emit_ellipses) for r in range(R)]
            rows = []
            for i, f in enumerate(futs):
                rows.append(f.result())
                if progress:
                    progress(i + 1, R)

    model = model_from_config(cfg.model)
    truth_full = model.theta(cfg.truth)
    truth = np.array([truth_full[n] for n in cfg.free])
    good = [row for row in rows if row["ok"]]
    n_failed = R - len(good)
    k = len(cfg.free)
    if good:
        est = np.array([row["estimate"] for row in good])
        mean = est.mean(axis=0)
        sd = est.std(axis=0, ddof=1) if len(good) > 1 else np.zeros(k)
        mean_cov = np.mean([row["covariance"] for row in good], axis=0)
        coverage = float(np.mean([row["covered"] for row in good]))
    else:
        mean = sd = np.full(k, np.nan)
        mean_cov = np.full((k, k), np.nan)
        coverage = float("nan")
    return StudyReport(tuple(cfg.free), truth, rows, n_failed, n_failed <= 0.1 * R, mean, sd, mean_cov,
                       coverage, cfg.level)
