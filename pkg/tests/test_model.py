import math

import numpy as np
import pytest
from scipy import integrate, stats

from bdmm.core import DomainBox
from bdmm.model import model_from_config
from bdmm.model.intensities import make_intensity
from bdmm.model.kernels import make_birth_kernel
from bdmm.model.moves import IndependentPerLabel, Langevin

from conftest import base_config, make_model

BOX = DomainBox([0.0, 0.0], [10.0, 10.0], "reflective")
H = 1e-5


def fd_grad(f, theta, names, h=H):
    out = []
    for n in names:
        up, dn = dict(theta), dict(theta)
        up[n] += h
        dn[n] -= h
        out.append((f(up) - f(dn)) / (2 * h))
    return np.moveaxis(np.array(out), 0, -1)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def kernel_models():
    """Birth kernel families with parameters, keyed by name; labels a (target), b (anchor)."""
    return {
        "gaussian_mixture": make_birth_kernel("gaussian_mixture", [0.5, 0.5], BOX, logsigma="ls", p="p"),
        "colocalization": make_birth_kernel("colocalization", [0.3, 0.7], BOX, p="p", logsigma="ls",
                                            anchor_labels=[1], target_labels=[0]),
        "potential": make_birth_kernel("potential", [0.5, 0.5], BOX,
                                       weights=[["w00", "w01"], ["w01", 0.5]], bump_weight=1.0,
                                       bump_scale=1.5),
    }


def random_theta(rng, names):
    th = {}
    for n in names:
        if n == "p":
            th[n] = float(rng.uniform(0.1, 0.9))
        elif n == "ls":
            th[n] = float(rng.uniform(-0.3, 1.0))
        else:
            th[n] = float(rng.uniform(-1.0, 1.0))
    return th


def random_xz(rng, n):
    return rng.integers(0, 2, n), rng.random((n, 2)) * 10.0


# ---- intensities -------------------------------------------------------------

def test_intensity_examples():
    Z1 = np.zeros((1, 2))
    c = make_intensity("constant", "g")
    assert c.eval({"g": 2.0}, [0], Z1) == 2.0
    assert c.grad({"g": 2.0}, [0], Z1).tolist() == [1.0]
    assert c.bound_given_n({"g": 2.0}, 7) == 2.0
    pc = make_intensity("per_capita", "g")
    Z4 = np.zeros((4, 2))
    assert pc.eval({"g": 0.5}, [0] * 4, Z4) == 2.0
    assert pc.grad({"g": 0.5}, [0] * 4, Z4).tolist() == [4.0]
    cap = make_intensity("capped_constant", "g", n_max=3)
    assert cap.eval({"g": 2.0}, [0] * 3, np.zeros((3, 2))) == 0.0
    assert cap.eval({"g": 2.0}, [0] * 2, np.zeros((2, 2))) == 2.0
    with pytest.raises(ValueError):
        make_intensity("constant", -1.0)
    with pytest.raises(ValueError):
        c.eval({"g": -1.0}, [0], Z1)


def test_intensity_grad_matches_fd():
    rng = np.random.default_rng(0)
    for fam in ("constant", "per_capita", "capped_constant"):
        g = make_intensity(fam, "g", n_max=5)
        for _ in range(100):
            n = int(rng.integers(0, 8))
            labels, Z = random_xz(rng, n)
            th = {"g": float(rng.uniform(0.1, 3.0))}
            fd = fd_grad(lambda t: g.eval(t, labels, Z), th, ["g"])
            assert np.allclose(g.grad(th, labels, Z), fd, rtol=1e-6, atol=1e-9)


def test_bound_dominates_eval():
    model = model_from_config(base_config(n_max=6))
    rng = np.random.default_rng(1)
    th = model.theta()
    for n in (0, 1, 3, 6):
        bounds = [model.bound_given_n(k, th, n) for k in ("birth", "death", "mutation")]
        lows = [model.lower_given_n(k, th, n) for k in ("birth", "death", "mutation")]
        for _ in range(10_000):
            labels, Z = random_xz(rng, n)
            r = model.rates(th, labels, Z)
            assert np.all(r <= bounds) and np.all(r >= lows)


def test_no_death_or_mutation_from_empty():
    model = make_model()
    th = model.theta()
    empty = np.zeros((0, 2))
    assert model.rate("death", th, [], empty) == 0.0
    assert model.rate("mutation", th, [], empty) == 0.0
    assert model.rate("birth", th, [], empty) == 1.0


# ---- birth kernels -----------------------------------------------------------

def test_uniform_birth_density():
    k = make_birth_kernel("uniform", [0.5, 0.5], BOX)
    assert k.density({}, [], np.zeros((0, 2)), [3.0, 4.0], 1) == pytest.approx(0.005, abs=1e-18)


def test_colocalization_at_anchor_matches_quadrature():
    p, ls = 0.2, 0.5
    sigma = math.exp(ls)
    z0 = np.array([3.0, 1.0])
    k = kernel_models()["colocalization"]
    # truncation factor: mass of N(z0, sigma^2 I) inside the box, by adaptive quadrature per axis
    pdf = lambda u, c: math.exp(-0.5 * ((u - c) / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi))
    F = np.prod([integrate.quad(pdf, 0.0, 10.0, args=(c,), epsabs=1e-14)[0] for c in z0])
    expected = p / (2 * math.pi * sigma ** 2 * F) + (1 - p) / 100.0
    got = k.location_density({"p": p, "ls": ls}, 0, np.array([1]), z0[None, :], z0[None, :])[0]
    assert got == pytest.approx(expected, rel=1e-10)
    assert F < 0.9  # the edge truncation actually matters here


def test_colocalization_without_anchor_is_uniform():
    k = kernel_models()["colocalization"]
    th = {"p": 0.6, "ls": 0.0}
    Z = np.array([[2.0, 2.0], [5.0, 5.0]])
    for labels in (np.array([0, 0]), np.zeros(0, dtype=int)):
        Zl = Z[:len(labels)]
        assert k.location_density(th, 0, labels, Zl, np.array([[2.0, 2.0]]))[0] == pytest.approx(0.01)
        assert np.all(k.grad_density(th, labels, Zl, [2.0, 2.0], 0) == 0.0)


@pytest.mark.parametrize("family", ["gaussian_mixture", "colocalization", "potential"])
def test_birth_grad_matches_fd(family):
    k = kernel_models()[family]
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        labels, Z = random_xz(rng, int(rng.integers(1, 5)))
        labels[0] = 1  # at least one anchor
        th = random_theta(rng, k.param_names)
        z, m = rng.random(2) * 10.0, int(rng.integers(0, 2))
        g = k.grad_density(th, labels, Z, z, m)
        fd = fd_grad(lambda t: k.density(t, labels, Z, z, m), th, k.param_names)
        if np.linalg.norm(fd) < 1e-12:
            assert np.linalg.norm(g) < 1e-9
            continue
        worst = max(worst, rel_err(g, fd))
    assert worst < 1e-6


def midpoint_grid(n, lo=0.0, hi=10.0):
    h = (hi - lo) / n
    ax = lo + h * (np.arange(n) + 0.5)
    return np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1).reshape(-1, 2), h * h


@pytest.mark.parametrize("family", ["uniform", "gaussian_mixture", "colocalization", "potential"])
def test_birth_normalization_by_quadrature(family):
    k = make_birth_kernel("uniform", [0.5, 0.5], BOX) if family == "uniform" else kernel_models()[family]
    rng = np.random.default_rng(3)
    pts, cell = midpoint_grid(128)
    for _ in range(5):
        labels, Z = random_xz(rng, 4)
        labels[0] = 1
        th = random_theta(rng, k.param_names)
        total = sum(k.label_probs[m] * k.location_density(th, m, labels, Z, pts).sum() * cell
                    for m in range(2))
        assert abs(total - 1.0) < 1e-3


def binned_probs(k, th, m, labels, Z, nb=8, sub=16):
    pts, cell = midpoint_grid(nb * sub)
    dens = k.location_density(th, m, labels, Z, pts) * cell
    ij = (pts // (10.0 / nb)).astype(int)
    probs = np.zeros((nb, nb))
    np.add.at(probs, (ij[:, 0], ij[:, 1]), dens)
    return probs.ravel() / probs.sum()


@pytest.mark.parametrize("family", ["uniform", "gaussian_mixture", "colocalization", "potential"])
def test_birth_sampling_chi_square(family):
    k = make_birth_kernel("uniform", [0.5, 0.5], BOX) if family == "uniform" else kernel_models()[family]
    rng = np.random.default_rng(4)
    labels, Z = np.array([1, 0, 1]), np.array([[2.0, 3.0], [7.0, 7.0], [5.0, 1.0]])
    th = {n: {"p": 0.5, "ls": 0.3}.get(n, -0.8) for n in k.param_names}
    n = 20_000
    draws = [k.sample(th, labels, Z, rng) for _ in range(n)]
    ms = np.array([m for _, m in draws])
    assert stats.binomtest(int((ms == 0).sum()), n, k.label_probs[0]).pvalue > 0.01
    for m in (0, 1):
        z = np.array([zz for zz, mm in draws if mm == m])
        probs = binned_probs(k, th, m, labels, Z)
        ij = np.clip((z // 1.25).astype(int), 0, 7)
        obs = np.bincount(ij[:, 0] * 8 + ij[:, 1], minlength=64)
        keep = probs * len(z) >= 5
        exp = probs[keep] * len(z)
        obs_k = obs[keep]
        chi2 = (((obs_k - exp) ** 2) / exp).sum() + 0.0
        pval = stats.chi2.sf(chi2, keep.sum() - 1)
        assert pval > 0.01, (family, m, pval)


# ---- death / mutation kernels -------------------------------------------------

def test_death_kernel():
    k = make_model().k_delta
    Z = np.zeros((4, 2))
    assert k.density({}, [0] * 4, Z, 2) == 0.25
    assert k.density({}, [0], Z[:1], 0) == 1.0
    for n in range(1, 12):
        assert math.fsum(k.density({}, [0] * n, np.zeros((n, 2)), i) for i in range(n)) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        k.density({}, [], np.zeros((0, 2)), 0)
    assert np.all(k.bracket_integral({}, [0, 1], Z[:2]) == 0)


def three_label_mutation():
    cfg = base_config(labels=["a", "b", "c"],
                      move={"family": "independent_per_label",
                            "regimes": [{"type": "brownian", "sigma": 1.0}] * 3})
    cfg["params"].update({"q": {"value": 0.7, "bounds": [0, 1]}, "r": {"value": 0.4, "bounds": [0, 1]}})
    cfg["kernels"]["mutation"] = {"family": "transition_matrix",
                                  "matrix": [[0, "q", None], [None, 0, "r"], [0.5, 0.5, 0]]}
    return model_from_config(cfg)


def test_mutation_density_examples():
    model = three_label_mutation()
    k, th = model.k_tau, model.theta()
    Z = np.zeros((4, 2))
    assert k.density(th, [0, 1, 2, 0], Z, 0, 1) == pytest.approx(0.175)
    total = math.fsum(k.density(th, [0, 1, 2, 0], Z, i, m) for i in range(4) for m in range(3))
    assert total == pytest.approx(1.0, abs=1e-15)
    binary = make_model().k_tau
    assert np.array_equal(binary.matrix({}), [[0, 1], [1, 0]])
    assert binary.density({}, [0, 1, 1], Z[:3], 1, 0) == pytest.approx(1 / 3)


def test_mutation_grad_matches_fd():
    model = three_label_mutation()
    k = model.k_tau
    rng = np.random.default_rng(5)
    for _ in range(100):
        th = {"q": float(rng.uniform(0.1, 0.9)), "r": float(rng.uniform(0.1, 0.9))}
        labels = rng.integers(0, 3, 4)
        i, to = int(rng.integers(0, 4)), int(rng.integers(0, 3))
        fd = fd_grad(lambda t: k.density(t, labels, None, i, to), th, ["q", "r"])
        assert np.allclose(k.grad_density(th, labels, None, i, to), fd, rtol=1e-6, atol=1e-10)


def test_mutation_bracket_hand_enumeration():
    model = three_label_mutation()
    k = model.k_tau
    th = {"q": 0.7, "r": 0.4}
    labels = np.array([0, 1])
    # rows: P[0] = (0, q, 1-q), P[1] = (1-r, 0, r); d/d(q, r) of each entry
    P = {(0, 0): 0.0, (0, 1): 0.7, (0, 2): 0.3, (1, 0): 0.6, (1, 1): 0.0, (1, 2): 0.4}
    dP = {(0, 0): (0, 0), (0, 1): (1, 0), (0, 2): (-1, 0),
          (1, 0): (0, -1), (1, 1): (0, 0), (1, 2): (0, 1)}
    expected = np.zeros((2, 2))
    for i in range(2):  # six (particle, destination) terms
        for m in range(3):
            kk = P[(labels[i], m)] / 2
            if kk > 0:
                g = np.array(dP[(labels[i], m)]) / 2
                expected += np.outer(g, g) / kk
    assert np.allclose(k.bracket_integral(th, labels, None), expected, rtol=0, atol=1e-15)


def test_mutation_bracket_matches_monte_carlo():
    model = three_label_mutation()
    k = model.k_tau
    th = {"q": 0.7, "r": 0.4}
    labels = np.array([0, 1, 2, 0])
    rng = np.random.default_rng(6)
    S = np.array([np.outer(s, s).ravel() for s in
                  (k.grad_log_density(th, labels, None, *k.sample(th, labels, None, rng)) for _ in range(100_000))])
    mean, se = S.mean(axis=0), S.std(axis=0, ddof=1) / math.sqrt(len(S))
    exact = k.bracket_integral(th, labels, None).ravel()
    assert np.all(np.abs(mean - exact) <= 3 * se + 1e-12)


def test_kernel_config_errors():
    with pytest.raises(ValueError):
        make_birth_kernel("gaussian_mixture", [1.0], BOX, logsigma=0.0, p=1.5)
    with pytest.raises(ValueError):
        make_birth_kernel("uniform", [0.7, 0.7], BOX)
    cfg = base_config()
    cfg["kernels"]["mutation"]["matrix"] = [[0, 0.5], [1, 0]]
    with pytest.raises(ValueError):
        model_from_config(cfg).k_tau.matrix({})
    cfg["kernels"]["mutation"]["matrix"] = [[1, 0], [1, 0]]
    with pytest.raises(ValueError):
        model_from_config(cfg)
    with pytest.raises(ValueError):
        model_from_config(base_config(labels=[]))


# ---- moves -------------------------------------------------------------------

def independent_move():
    return IndependentPerLabel([{"type": "brownian", "sigma": 1.0},
                                {"type": "drifted", "sigma": 0.5, "velocity": ["vx", "vy"]},
                                {"type": "ou", "sigma": 0.7, "kappa": "kappa"}], 2)


def langevin_move():
    return Langevin([["w00", "w01"], ["w01", "w11"]], [1.0, 0.8], bump_weight=1.0, bump_scale=1.5)


def test_move_examples():
    mv = IndependentPerLabel([{"type": "brownian", "sigma": 1.0},
                              {"type": "drifted", "sigma": 1.0, "velocity": [1.0, 0.0]}], 2)
    Z = np.array([[1.0, 2.0], [3.0, 4.0]])
    d = mv.drift({}, Z, np.array([0, 1]), Z)
    assert d[0].tolist() == [0.0, 0.0] and d[1].tolist() == [1.0, 0.0]
    with pytest.raises(ValueError):
        IndependentPerLabel([{"type": "brownian", "sigma": 0.0}], 2)
    with pytest.raises(ValueError):
        IndependentPerLabel([{"type": "ou", "sigma": 1.0, "kappa": -1.0}], 2)


def test_langevin_drift_matches_potential_fd():
    w, s, th = 1.3, 1.5, 0.8
    mv = Langevin([["t"]], [1.0], bump_weight=w, bump_scale=s)
    z1, z2 = np.array([1.0, 2.0]), np.array([2.2, 1.1])
    phi = lambda r: w * math.exp(-float(r @ r) / (2 * s * s))
    h = 1e-6
    grad = np.array([(phi(z1 - z2 + h * e) - phi(z1 - z2 - h * e)) / (2 * h) for e in np.eye(2)])
    d = mv.drift({"t": th}, np.stack([z1, z2]), np.array([0, 0]))
    assert np.allclose(d[0], -th * grad, rtol=1e-8, atol=1e-12)
    assert np.allclose(d[1], th * grad, rtol=1e-8, atol=1e-12)


@pytest.mark.parametrize("which", ["independent", "langevin"])
def test_drift_grad_matches_fd(which):
    mv = independent_move() if which == "independent" else langevin_move()
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(1, 6))
        labels = rng.integers(0, 2 if which == "langevin" else 3, n)
        Z, A = rng.random((n, 2)) * 4, rng.random((n, 2)) * 4
        th = {name: float(rng.uniform(0.2, 2.0)) for name in mv.param_names}
        fd = fd_grad(lambda t: mv.drift(t, Z, labels, A), th, mv.param_names)
        g = mv.drift_grad(th, Z, labels, A)
        assert np.allclose(g, fd, rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("which", ["independent", "langevin"])
def test_drift_permutation_equivariance(which):
    mv = independent_move() if which == "independent" else langevin_move()
    rng = np.random.default_rng(8)
    for _ in range(50):
        n = int(rng.integers(2, 7))
        labels = rng.integers(0, 2, n)
        Z, A = rng.random((n, 2)) * 4, rng.random((n, 2)) * 4
        th = {name: float(rng.uniform(0.2, 2.0)) for name in mv.param_names}
        perm = rng.permutation(n)
        d = mv.drift(th, Z, labels, A)
        dp = mv.drift(th, Z[perm], labels[perm], A[perm])
        assert np.allclose(dp, d[perm], rtol=1e-14, atol=1e-15)
        if which == "independent":
            assert np.array_equal(dp, d[perm])
        assert np.all(mv.sigma(labels) > 0)


def test_builtin_model_loads():
    from bdmm.cli import load_config
    model = model_from_config(load_config("builtin"))
    assert model.labels[0] == "L_brownian" and model.n_max == 200
    assert set(model.component_params("birth")) == {"beta", "p", "logsigma"}
