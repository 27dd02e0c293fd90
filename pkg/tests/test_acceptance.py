"""Acceptance criteria 1-11; each test records one pass/fail line for the terminal summary."""

import math
import time

import numpy as np
from scipy import stats

from bdmm.cli import load_config, load_study_config
from bdmm.core import Configuration, d1_distance
from bdmm.ergodicity import RateSequences, check_ergodicity
from bdmm.inference import StudyConfig, fit_mle, replicate_study
from bdmm.likelihood import loglik_total, observed_information, score
from bdmm.model import model_from_config
from bdmm.model.kernels import make_birth_kernel
from bdmm.model.spec import initial_configuration
from bdmm.simulate import SimOptions, sample_interjump, sample_jump, simulate

import conftest
from conftest import base_config
from test_core import random_config
from test_likelihood import births_fixture, drift_line_fixture, drift_model, one_label_config
from test_model import BOX, kernel_models, midpoint_grid, random_theta, random_xz


def record(n, ok, detail, elapsed, limit):
    ok = ok and elapsed < limit
    conftest.ACCEPTANCE_LINES.append(
        f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail} ({elapsed:.1f} s, limit {limit:g} s)")
    return ok


def rate_model(beta, delta, tau):
    cfg = base_config(params={"beta": beta, "delta": delta, "tau": tau})
    cfg["intensities"] = {k: {"family": "constant", "rate": k} for k in ("beta", "delta", "tau")}
    return model_from_config(cfg)


# ---- 1. waiting-time law -------------------------------------------------------

def test_criterion_1_waiting_time_law():
    t0 = time.perf_counter()
    model = rate_model(1.0, 0.5, 0.5)
    x = Configuration([0], [[5.0, 5.0]], [0])
    rng = np.random.default_rng(101)
    w = np.array([sample_interjump(model, None, x, rng, 0.1)[0] for _ in range(10_000)])
    D = stats.kstest(w, stats.expon(scale=0.5).cdf).statistic
    crit = 1.628 / math.sqrt(len(w))
    assert record(1, D < crit, f"KS D = {D:.4f} < {crit:.4f}", time.perf_counter() - t0, 10)


# ---- 2. jump-kind split --------------------------------------------------------

def test_criterion_2_jump_kind_split():
    t0 = time.perf_counter()
    model = rate_model(1.0, 1.0, 1.0)
    x = Configuration([0], [[5.0, 5.0]], [0])
    rng = np.random.default_rng(102)
    kinds = [sample_jump(model, None, x, rng).kind for _ in range(10_000)]
    frac = kinds.count("birth") / len(kinds)
    tol = 3 * math.sqrt(2 / 9 / len(kinds))
    ok = abs(frac - 1 / 3) < tol
    assert record(2, ok, f"birth fraction {frac:.4f}, |diff| < {tol:.4f}", time.perf_counter() - t0, 10)


# ---- 3. closed-form MLEs -------------------------------------------------------

def test_criterion_3_closed_form_mles():
    t0 = time.perf_counter()
    traj = births_fixture(n_births=40, T=20.0)
    fit = fit_mle(traj, model_from_config(one_label_config()), ["beta"], {"beta": 0.5, "delta": 0.1})
    e1 = abs(fit.theta_hat["beta"] / (40 / 20.0) - 1)
    line = drift_line_fixture(4.0, 2.6)
    fit = fit_mle(line, drift_model(), ["v"], {"v": 0.0, "beta": 0, "delta": 0})
    e2 = abs(fit.theta_hat["v"] / (2.6 / 4.0) - 1)
    ok = e1 < 1e-6 and e2 < 1e-6
    assert record(3, ok, f"rel errors beta {e1:.1e}, v {e2:.1e}", time.perf_counter() - t0, 5)


# ---- 4. score vs finite differences --------------------------------------------

def family_configs():
    """Models that together cover every built-in intensity, kernel and move family."""
    coloc = load_config("builtin")
    coloc["x0"] = {"uniform": {k: 3 for k in coloc["labels"]}}

    gm = base_config(params={"beta": 1.5, "delta": 0.2, "q": {"value": 0.6, "bounds": [0, 1]},
                             "p": {"value": 0.5, "bounds": [0, 1]}, "ls": 0.0,
                             "vx": 0.3, "vy": -0.2, "kappa": 0.5, "tau": 0.4}, n_max=8)
    gm["labels"] = ["a", "b", "c"]
    gm["intensities"]["beta"] = {"family": "capped_constant", "rate": "beta", "n_max": 8}
    gm["kernels"]["birth"] = {"family": "gaussian_mixture", "p": "p", "logsigma": "ls"}
    gm["kernels"]["mutation"] = {"family": "transition_matrix", "matrix": [[0, "q", None], [1, 0, 0], [1, 0, 0]]}
    gm["move"] = {"family": "independent_per_label",
                  "regimes": [{"type": "drifted", "sigma": 0.5, "velocity": ["vx", "vy"]},
                              {"type": "ou", "sigma": 0.6, "kappa": "kappa"},
                              {"type": "brownian", "sigma": 0.4}]}
    gm["x0"] = {"uniform": {"a": 2, "b": 2, "c": 1}}

    pot = base_config(params={"beta": 1.0, "delta": 0.2, "tau": 0.3, "w00": 0.5, "w01": -0.4,
                              "u00": 0.3, "u01": -0.2, "u11": 0.4})
    pot["kernels"]["birth"] = {"family": "potential", "weights": [["w00", "w01"], ["w01", 0.5]],
                               "bump_weight": 1.0, "bump_scale": 1.5}
    pot["move"] = {"family": "langevin", "weights": [["u00", "u01"], ["u01", "u11"]], "sigma": [0.6, 0.5],
                   "bump_weight": 1.0, "bump_scale": 1.5}
    pot["x0"] = {"uniform": {"a": 2, "b": 2}}

    uni = base_config(params={"beta": 0.8, "delta": 0.15, "tau": 0.25})
    uni["intensities"]["tau"] = {"family": "per_capita", "rate": "tau"}
    uni["x0"] = {"uniform": {"a": 3, "b": 2}}
    return {"colocalization": coloc, "gaussian_mixture": gm, "potential": pot, "uniform": uni}


def perturb(model, rng):
    out = {}
    for n, v in model.theta().items():
        if n in ("p", "q"):
            out[n] = float(rng.uniform(0.15, 0.85))
        else:
            out[n] = float(v * rng.uniform(0.7, 1.3) + (0.0 if v else rng.uniform(-0.3, 0.3)))
    return out


def fd_score(traj, model, th):
    out = []
    for n in model.param_names:
        h = 1e-5 * max(1.0, abs(th[n]))
        up, dn = dict(th), dict(th)
        up[n] += h
        dn[n] -= h
        out.append((loglik_total(traj, model, up).total - loglik_total(traj, model, dn).total) / (2 * h))
    return np.array(out)


def test_criterion_4_score_matches_finite_differences():
    t0 = time.perf_counter()
    worst, pairs = 0.0, 0
    rng = np.random.default_rng(104)
    configs = family_configs()
    reps = {"colocalization": 11, "gaussian_mixture": 13, "potential": 13, "uniform": 13}
    for name, cfg in configs.items():
        model = model_from_config(cfg)
        T = 5.0 if name == "colocalization" else 8.0
        for r in range(reps[name]):
            x0 = initial_configuration(cfg["x0"], model, rng)
            traj = simulate(model, None, x0, SimOptions(horizon=T, grid_dt=0.05, seed=int(rng.integers(2**32))))
            th = perturb(model, rng)
            s, fd = score(traj, model, th), fd_score(traj, model, th)
            worst = max(worst, float(np.linalg.norm(s - fd) / max(np.linalg.norm(fd), 1e-12)))
            pairs += 1
    ok = pairs == 50 and worst < 1e-4
    assert record(4, ok, f"{pairs} pairs, worst relative error {worst:.1e} < 1e-4",
                  time.perf_counter() - t0, 120)


# ---- 5. martingale property ----------------------------------------------------

def half_box_mass(model, th, labels, Z, pts, cell, left):
    k = model.k_beta
    return sum(k.label_probs[m] * k.location_density(th, m, labels, Z, pts)[left].sum() * cell
               for m in range(k.n_labels))


def test_criterion_5_martingale_compensator():
    t0 = time.perf_counter()
    cfg = base_config(params={"beta": 1.5, "delta": 0.15, "tau": 0.4, "p": 0.8, "ls": 0.0})
    cfg["kernels"]["birth"] = {"family": "colocalization", "p": "p", "logsigma": "ls",
                               "anchor_labels": ["b"], "target_labels": ["a"]}
    cfg["x0"] = {"uniform": {"a": 2, "b": 3}}
    model = model_from_config(cfg)
    th = model.theta()
    pts, cell = midpoint_grid(100)
    left = pts[:, 0] < 5.0
    rng = np.random.default_rng(105)
    counts, comps = [], []
    for r in range(200):
        x0 = initial_configuration(cfg["x0"], model, rng)
        traj = simulate(model, th, x0, SimOptions(horizon=10.0, grid_dt=0.1, seed=int(rng.integers(2**32))))
        segs = traj.segments
        n_death = n_mut = n_birth = 0
        for j, e in enumerate(traj.events):
            if e.kind == "death":
                n_death += int(e.label == 0)
            elif e.kind == "mutation":
                n_mut += int(e.label_to == 1)
            else:
                n_birth += int(e.location[0] < 5.0)
        c_death = c_mut = c_birth = 0.0
        for s in segs:
            if s.n == 0:
                c_birth += th["beta"] * (s.t1 - s.t0) * 0.5
                continue
            na = int(np.sum(s.labels == 0))
            c_death += th["delta"] * na * (s.t1 - s.t0)
            c_mut += th["tau"] * na / s.n * (s.t1 - s.t0)
            mass = np.array([half_box_mass(model, th, s.labels, Zk, pts, cell, left) for Zk in s.Z])
            c_birth += th["beta"] * np.trapezoid(mass, s.times)
        counts.append((n_death, n_mut, n_birth))
        comps.append((c_death, c_mut, c_birth))
    counts, comps = np.array(counts, dtype=float), np.array(comps)
    se = np.sqrt(counts.var(axis=0, ddof=1) / len(counts) + comps.var(axis=0, ddof=1) / len(comps))
    z = np.abs(counts.mean(axis=0) - comps.mean(axis=0)) / se
    ok = bool(np.all(z < 3))
    detail = "|mean diff| / SE: " + ", ".join(f"{k} {v:.2f}" for k, v in zip(("death", "mutation", "birth"), z))
    assert record(5, ok, detail + " < 3", time.perf_counter() - t0, 120)


# ---- 6. information closed forms -----------------------------------------------

def test_criterion_6_information_closed_forms():
    t0 = time.perf_counter()
    traj = births_fixture(n_births=40, T=20.0)
    jb = observed_information(traj, model_from_config(one_label_config()), {"beta": 2.0, "delta": 0.1})
    e1 = abs(jb.restrict(["beta"])[0, 0] - 20.0 / 2.0)
    line = drift_line_fixture(5.0, 1.7)
    jv = observed_information(line, drift_model(sigma=2.0), {"v": 0.3, "beta": 0, "delta": 0})
    e2 = abs(jv.restrict(["v"])[0, 0] - 5.0 / 4.0)
    ok = e1 < 1e-10 and e2 < 1e-10
    assert record(6, ok, f"abs errors T/beta {e1:.1e}, T/sigma^2 {e2:.1e}", time.perf_counter() - t0, 1)


# ---- 7. covariance calibration -----------------------------------------------

def test_criterion_7_covariance_calibration():
    t0 = time.perf_counter()
    cfg = base_config(params={"beta": 2.0, "delta": 0.2, "tau": 0.5}, n_max=1000)
    cfg["x0"] = {"uniform": {"a": 5, "b": 5}}
    study = StudyConfig(model=cfg, free=("beta", "delta", "tau"),
                        truth={"beta": 2.0, "delta": 0.2, "tau": 0.5},
                        theta0={"beta": 1.0, "delta": 0.4, "tau": 1.0},
                        horizon=50.0, grid_dt=0.5, replicates=200, seed=107)
    rep = replicate_study(study)
    est = np.array([r["estimate"] for r in rep.rows if r["ok"]])
    ratio = np.diagonal(np.cov(est, rowvar=False)) / np.diagonal(rep.mean_covariance)
    ok = rep.valid and bool(np.all((ratio >= 0.7) & (ratio <= 1.4)))
    detail = "variance ratios " + ", ".join(f"{n} {v:.3f}" for n, v in zip(rep.free, ratio)) + " in [0.7, 1.4]"
    assert record(7, ok, detail, time.perf_counter() - t0, 300)


# ---- 8. colocalization study at desk scale --------------------------------------

def test_criterion_8_colocalization_study():
    t0 = time.perf_counter()
    study = load_study_config("builtin", replicates=100)
    assert study.truth == {"p": 0.2, "logsigma": 1.34}
    rep = replicate_study(study)
    dev = np.abs(rep.mean - np.array([0.2, 1.34]))
    ok = rep.valid and dev[0] < 0.05 and dev[1] < 0.15 and 0.88 <= rep.coverage <= 0.99
    detail = (f"mean (p, logsigma) = ({rep.mean[0]:.4f}, {rep.mean[1]:.4f}), "
              f"coverage {rep.coverage:.2f}, failed {rep.n_failed}")
    assert record(8, ok, detail, time.perf_counter() - t0, 1800)


# ---- 9. kernel normalization ---------------------------------------------------

def test_criterion_9_kernel_normalization():
    t0 = time.perf_counter()
    rng = np.random.default_rng(109)
    pts, cell = midpoint_grid(128)
    kernels = dict(kernel_models(), uniform=make_birth_kernel("uniform", [0.5, 0.5], BOX))
    worst = 0.0
    for k in kernels.values():
        for _ in range(10):
            labels, Z = random_xz(rng, int(rng.integers(0, 6)))
            th = random_theta(rng, k.param_names)
            total = sum(k.label_probs[m] * k.location_density(th, m, labels, Z, pts).sum() * cell
                        for m in range(2))
            worst = max(worst, abs(total - 1.0))
    model = model_from_config(base_config())
    discrete = 0.0
    for n in range(1, 30):
        labels = rng.integers(0, 2, n)
        Z = np.zeros((n, 2))
        d = math.fsum(model.k_delta.density({}, labels, Z, i) for i in range(n))
        m = math.fsum(model.k_tau.density({}, labels, Z, i, j) for i in range(n) for j in range(2))
        discrete = max(discrete, abs(d - 1.0), abs(m - 1.0))
    ok = worst < 1e-3 and discrete <= 1e-15
    assert record(9, ok, f"birth quadrature error {worst:.1e} < 1e-3, death/mutation sums error {discrete:.0e}",
                  time.perf_counter() - t0, 30)


# ---- 10. d1 oracle -------------------------------------------------------------

def test_criterion_10_d1_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(110)
    mismatches = 0
    for _ in range(500):
        x = random_config(rng, int(rng.integers(0, 9)), n_labels=3)
        y = random_config(rng, int(rng.integers(0, 9)), n_labels=3)
        mismatches += d1_distance(x, y, "brute") != d1_distance(x, y, "assignment")
    assert record(10, mismatches == 0, f"{mismatches} mismatches over 500 pairs", time.perf_counter() - t0, 30)


# ---- 11. ergodicity verdicts ---------------------------------------------------

def test_criterion_11_ergodicity_verdicts():
    t0 = time.perf_counter()
    cases = [RateSequences(lambda n: 2.0 * (n < 100), lambda n: float(n)),
             RateSequences(lambda n: 1.0, lambda n: float(n)),
             RateSequences(lambda n: 2.0 * n, lambda n: float(n))]
    got = [check_ergodicity(c).verdict for c in cases]
    ok = got == ["satisfied", "satisfied", "not-satisfied"]
    assert record(11, ok, "verdicts " + " / ".join(got), time.perf_counter() - t0, 1)
