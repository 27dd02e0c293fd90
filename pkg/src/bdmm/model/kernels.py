"""Transition kernels for births, deaths and mutations.

Each kernel has a density against its reference measure: Lebesgue on the box
times counting on labels for births, counting over particles for deaths and
over (particle, new label) pairs for mutations.  Gradients are with respect to
the kernel's ``param_names``.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtr, ndtri

from ..core import DomainBox
from .refs import Ref, collect_names

LOG_2PI = math.log(2.0 * math.pi)


def _check_probs(probs, n_labels):
    probs = np.asarray(probs, dtype=float)
    if n_labels < 1:
        raise ValueError("empty label alphabet")
    if probs.shape != (n_labels,):
        raise ValueError(f"label_probs must have length {n_labels}")
    if np.any(probs < 0) or np.any(probs > 1) or abs(probs.sum() - 1.0) > 1e-12:
        raise ValueError("label_probs must lie in [0, 1] and sum to 1")
    return probs


def _rng(rng):
    return np.random.default_rng(0) if rng is None else rng


class BirthKernel:
    """k_beta(x, x u (z, m)) = label_probs[m] * k^m(x, z)."""

    kind = "birth"
    family = "abstract"
    param_names: tuple = ()

    def __init__(self, label_probs, domain: DomainBox):
        self.domain = domain
        self.n_labels = len(label_probs)
        self.label_probs = _check_probs(label_probs, self.n_labels)

    # per-label location law, vectorised over z of shape (N, d)
    def location_density(self, theta, m, labels, Z, z) -> np.ndarray:
        raise NotImplementedError

    def location_grad(self, theta, m, labels, Z, z) -> np.ndarray:
        raise NotImplementedError

    def sample_location(self, theta, m, labels, Z, rng, size) -> np.ndarray:
        raise NotImplementedError

    def label_depends(self, m) -> bool:
        return bool(self.param_names)

    def location_score(self, theta, m, labels, Z, z) -> np.ndarray:
        """grad log k^m at each row of z, shape (N, p)."""
        return self.location_grad(theta, m, labels, Z, z) / self.location_density(theta, m, labels, Z, z)[:, None]

    def density(self, theta, labels, Z, z, m) -> float:
        z = np.asarray(z, dtype=float).reshape(1, -1)
        return float(self.label_probs[m] * self.location_density(theta, m, labels, Z, z)[0])

    def grad_density(self, theta, labels, Z, z, m) -> np.ndarray:
        z = np.asarray(z, dtype=float).reshape(1, -1)
        if not self.label_depends(m):
            return np.zeros(len(self.param_names))
        return self.label_probs[m] * self.location_grad(theta, m, labels, Z, z)[0]

    def grad_log_density(self, theta, labels, Z, z, m) -> np.ndarray:
        z = np.asarray(z, dtype=float).reshape(1, -1)
        if not self.label_depends(m):
            return np.zeros(len(self.param_names))
        return (self.location_grad(theta, m, labels, Z, z)[0]
                / self.location_density(theta, m, labels, Z, z)[0])

    def sample(self, theta, labels, Z, rng):
        m = int(rng.choice(self.n_labels, p=self.label_probs))
        z = self.sample_location(theta, m, labels, Z, rng, 1)[0]
        return z, m

    def bracket_integral(self, theta, labels, Z, rng=None, n_draws: int = 4096) -> np.ndarray:
        """Monte Carlo estimate of E_{y~k}[grad log k grad log k^T] (self-importance)."""
        p = len(self.param_names)
        out = np.zeros((p, p))
        if p == 0:
            return out
        rng = _rng(rng)
        counts = rng.multinomial(n_draws, self.label_probs)
        for m, c in enumerate(counts):
            if c == 0 or not self.label_depends(m):
                continue
            z = self.sample_location(theta, m, labels, Z, rng, c)
            s = self.location_score(theta, m, labels, Z, z)
            out += s.T @ s
        return out / n_draws


def _require_bounded(domain):
    if not domain.bounded:
        raise ValueError("births need a bounded domain")


class UniformBirth(BirthKernel):
    family = "uniform"

    def location_density(self, theta, m, labels, Z, z):
        _require_bounded(self.domain)
        return np.full(len(z), 1.0 / self.domain.volume)

    def location_grad(self, theta, m, labels, Z, z):
        return np.zeros((len(z), 0))

    def sample_location(self, theta, m, labels, Z, rng, size):
        _require_bounded(self.domain)
        lo, hi = self.domain.lower, self.domain.upper
        return lo + (hi - lo) * rng.random((size, self.domain.dim))

    def to_config(self):
        return {"family": self.family, "label_probs": self.label_probs.tolist()}


class GaussianMixtureBirth(UniformBirth):
    """Mixture of box-truncated isotropic Gaussians around anchor particles.

    For target labels, k^m(x, z) = p * mean_i g_i(z) + (1 - p) / |Lambda|,
    where g_i is the normal density centred at anchor particle i with scale
    sigma = exp(logsigma), renormalised on the box.  Anchors are the particles
    carrying an ``anchor_labels`` label (all particles when None).  With no
    anchor present the law falls back to uniform.  Non-target labels are
    born uniformly.
    """

    family = "gaussian_mixture"

    def __init__(self, label_probs, domain, logsigma, p=1.0, anchor_labels=None, target_labels=None):
        _require_bounded(domain)
        super().__init__(label_probs, domain)
        self.logsigma = Ref(logsigma)
        self.p = Ref(p)
        if not self.p.is_param and not 0.0 <= self.p.const <= 1.0:
            raise ValueError(f"mixing weight p={self.p.const} outside [0, 1]")
        self.anchor_labels = None if anchor_labels is None else np.array(sorted(anchor_labels), dtype=np.int64)
        self.target_labels = (np.arange(self.n_labels) if target_labels is None
                              else np.array(sorted(target_labels), dtype=np.int64))
        self.param_names = collect_names(self.p, self.logsigma)
        self._ip = [i for i, n in enumerate(self.param_names) if n == self.p.name]
        self._is = [i for i, n in enumerate(self.param_names) if n == self.logsigma.name]

    def label_depends(self, m):
        return bool(self.param_names) and m in self.target_labels

    def _params(self, theta):
        p = self.p(theta)
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"mixing weight p={p} outside [0, 1]")
        ls = self.logsigma(theta)
        if not math.isfinite(ls):
            raise ValueError("sigma must be positive and finite")
        return p, ls

    def _anchors(self, labels, Z):
        if self.anchor_labels is None:
            return np.asarray(Z, dtype=float).reshape(len(labels), -1)
        return np.asarray(Z, dtype=float)[np.isin(labels, self.anchor_labels)]

    def _components(self, ls, A, z):
        """Per-anchor truncated densities (N, nA) and d log g / d logsigma (N, nA)."""
        sigma = math.exp(ls)
        d = A.shape[1]
        a = (self.domain.lower - A) / sigma
        b = (self.domain.upper - A) / sigma
        F = ndtr(b) - ndtr(a)
        pdf_a = np.exp(-0.5 * a * a) / math.sqrt(2 * math.pi)
        pdf_b = np.exp(-0.5 * b * b) / math.sqrt(2 * math.pi)
        logv = 0.5 * d * LOG_2PI + d * ls + np.log(F).sum(axis=1)
        dlogv = d + ((a * pdf_a - b * pdf_b) / F).sum(axis=1)
        diff = z[:, None, :] - A[None, :, :]
        r2 = np.einsum("nkd,nkd->nk", diff, diff)
        g = np.exp(-0.5 * r2 / sigma ** 2 - logv[None, :])
        return g, r2 / sigma ** 2 - dlogv[None, :]

    def location_density(self, theta, m, labels, Z, z):
        z = np.asarray(z, dtype=float)
        unif = 1.0 / self.domain.volume
        if m not in self.target_labels:
            return np.full(len(z), unif)
        p, ls = self._params(theta)
        A = self._anchors(labels, Z)
        if len(A) == 0:
            return np.full(len(z), unif)
        g, _ = self._components(ls, A, z)
        return p * g.mean(axis=1) + (1.0 - p) * unif

    def location_grad(self, theta, m, labels, Z, z):
        z = np.asarray(z, dtype=float)
        out = np.zeros((len(z), len(self.param_names)))
        if m not in self.target_labels:
            return out
        p, ls = self._params(theta)
        A = self._anchors(labels, Z)
        if len(A) == 0:
            return out
        g, dlog = self._components(ls, A, z)
        mix = g.mean(axis=1)
        for i in self._ip:
            out[:, i] += mix - 1.0 / self.domain.volume
        for i in self._is:
            out[:, i] += p * (g * dlog).mean(axis=1)
        return out

    def location_score(self, theta, m, labels, Z, z):
        z = np.asarray(z, dtype=float)
        out = np.zeros((len(z), len(self.param_names)))
        if m not in self.target_labels:
            return out
        p, ls = self._params(theta)
        A = self._anchors(labels, Z)
        if len(A) == 0:
            return out
        g, dlog = self._components(ls, A, z)
        mix = g.mean(axis=1)
        unif = 1.0 / self.domain.volume
        dens = p * mix + (1.0 - p) * unif
        for i in self._ip:
            out[:, i] += (mix - unif) / dens
        for i in self._is:
            out[:, i] += p * (g * dlog).mean(axis=1) / dens
        return out

    def sample_location(self, theta, m, labels, Z, rng, size):
        A = self._anchors(labels, Z) if m in self.target_labels else np.zeros((0, self.domain.dim))
        if len(A) == 0:
            return super().sample_location(theta, m, labels, Z, rng, size)
        p, ls = self._params(theta)
        sigma = math.exp(ls)
        out = super().sample_location(theta, m, labels, Z, rng, size)
        gauss = rng.random(size) < p
        k = int(gauss.sum())
        if k:
            centres = A[rng.integers(len(A), size=k)]
            lo, hi = self.domain.lower, self.domain.upper
            ua, ub = ndtr((lo - centres) / sigma), ndtr((hi - centres) / sigma)
            u = ua + (ub - ua) * rng.random(centres.shape)
            out[gauss] = np.clip(centres + sigma * ndtri(u), lo, hi)
        return out

    def to_config(self):
        cfg = {"family": self.family, "label_probs": self.label_probs.tolist(),
               "logsigma": self.logsigma.to_json(), "p": self.p.to_json(),
               "target_labels": self.target_labels.tolist()}
        if self.anchor_labels is not None:
            cfg["anchor_labels"] = self.anchor_labels.tolist()
        return cfg


class ColocalizationBirth(GaussianMixtureBirth):
    """Target labels are born near anchor-label particles with weight p, uniformly otherwise."""

    family = "colocalization"

    def __init__(self, label_probs, domain, p, logsigma, anchor_labels, target_labels):
        if anchor_labels is None or len(anchor_labels) == 0:
            raise ValueError("colocalization needs at least one anchor label")
        super().__init__(label_probs, domain, logsigma, p, anchor_labels, target_labels)


def gaussian_bump(r2, weight, scale):
    return weight * np.exp(-0.5 * r2 / scale ** 2)


class PotentialBirth(BirthKernel):
    """k^m(x, z) proportional to exp(-sum_j w[m, m_j] phi(z - z_j)).

    phi is a Gaussian bump ``bump_weight * exp(-|r|^2 / (2 bump_scale^2))``;
    the normaliser is a midpoint rule on ``quad_points`` cells per axis.
    """

    family = "potential"

    def __init__(self, label_probs, domain, weights, bump_weight=1.0, bump_scale=1.0, quad_points=64):
        _require_bounded(domain)
        super().__init__(label_probs, domain)
        M = self.n_labels
        self.weights = [[Ref(w) for w in row] for row in weights]
        if len(self.weights) != M or any(len(r) != M for r in self.weights):
            raise ValueError(f"weights must be {M}x{M}")
        if bump_scale <= 0 or bump_weight < 0:
            raise ValueError("bump_scale must be > 0 and bump_weight >= 0")
        self.bump_weight, self.bump_scale = float(bump_weight), float(bump_scale)
        self.param_names = collect_names(*[w for row in self.weights for w in row])
        self._masks = np.array([[[1.0 if w.name == n else 0.0 for w in row] for row in self.weights]
                                for n in self.param_names]).reshape(len(self.param_names), M, M)
        self.quad_points = int(quad_points)
        lo, hi = domain.lower, domain.upper
        h = (hi - lo) / self.quad_points
        axes = [lo[k] + h[k] * (np.arange(self.quad_points) + 0.5) for k in range(domain.dim)]
        self._quad = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, domain.dim)
        self._cell = float(np.prod(h))

    def _wmat(self, theta):
        return np.array([[w(theta) for w in row] for row in self.weights])

    def _bumps(self, Z, z):
        diff = z[:, None, :] - np.asarray(Z, dtype=float)[None, :, :]
        return gaussian_bump(np.einsum("nkd,nkd->nk", diff, diff), self.bump_weight, self.bump_scale)

    def _energy(self, theta, m, labels, Z, z):
        return self._bumps(Z, z) @ self._wmat(theta)[m, labels]

    def _log_norm(self, theta, m, labels, Z):
        U = self._energy(theta, m, labels, Z, self._quad)
        c = -U.min() if len(U) else 0.0
        w = np.exp(-U - c)
        return math.log(w.sum() * self._cell) + c, w / w.sum()

    def location_density(self, theta, m, labels, Z, z):
        z = np.asarray(z, dtype=float)
        logn, _ = self._log_norm(theta, m, labels, Z)
        return np.exp(-self._energy(theta, m, labels, Z, z) - logn)

    def location_grad(self, theta, m, labels, Z, z):
        z = np.asarray(z, dtype=float)
        logn, pi = self._log_norm(theta, m, labels, Z)
        dens = np.exp(-self._energy(theta, m, labels, Z, z) - logn)
        Bz, Bq = self._bumps(Z, z), self._bumps(Z, self._quad)
        out = np.empty((len(z), len(self.param_names)))
        for i, mask in enumerate(self._masks):
            sel = mask[m, labels]
            out[:, i] = dens * (-(Bz @ sel) + pi @ (Bq @ sel))
        return out

    def sample_location(self, theta, m, labels, Z, rng, size):
        wrow = self._wmat(theta)[m, labels]
        log_env = float(np.maximum(-wrow, 0.0).sum() * self.bump_weight)
        lo, hi = self.domain.lower, self.domain.upper
        out = np.empty((0, self.domain.dim))
        while len(out) < size:
            need = size - len(out)
            batch = max(16, 2 * need)
            z = lo + (hi - lo) * rng.random((batch, self.domain.dim))
            acc = np.log(rng.random(batch)) < -self._energy(theta, m, labels, Z, z) - log_env
            out = np.concatenate([out, z[acc][:need]])
        return out

    def to_config(self):
        return {"family": self.family, "label_probs": self.label_probs.tolist(),
                "weights": [[w.to_json() for w in row] for row in self.weights],
                "bump_weight": self.bump_weight, "bump_scale": self.bump_scale,
                "quad_points": self.quad_points}


class UniformDeath:
    """Each alive particle is equally likely to die."""

    kind = "death"
    family = "uniform"
    param_names = ()

    def density(self, theta, labels, Z, index) -> float:
        n = len(labels)
        if n == 0:
            raise ValueError("death kernel evaluated on the empty configuration")
        if not 0 <= index < n:
            raise IndexError(index)
        return 1.0 / n

    def grad_density(self, theta, labels, Z, index):
        return np.zeros(0)

    def grad_log_density(self, theta, labels, Z, index):
        return np.zeros(0)

    def sample(self, theta, labels, Z, rng) -> int:
        if len(labels) == 0:
            raise ValueError("death from the empty configuration")
        return int(rng.integers(len(labels)))

    def bracket_integral(self, theta, labels, Z, rng=None, n_draws=None):
        return np.zeros((0, 0))

    def to_config(self):
        return {"family": self.family}


class TransitionMatrixMutation:
    """A uniformly chosen particle switches label according to a transition matrix.

    Entries are numbers, parameter names, or None.  A None entry (at most one
    per row) is the remainder that makes its row sum to one, so named entries
    can vary freely while the matrix stays row-stochastic.
    """

    kind = "mutation"
    family = "transition_matrix"

    def __init__(self, matrix):
        M = len(matrix)
        if M < 2:
            raise ValueError("mutations need at least two labels")
        if any(len(r) != M for r in matrix):
            raise ValueError("transition matrix must be square")
        self.n_labels = M
        self.entries = [[None if e is None else Ref(e) for e in row] for row in matrix]
        for i, row in enumerate(self.entries):
            if row[i] is None or row[i].is_param or row[i].const != 0.0:
                raise ValueError("transition matrix must have a zero diagonal")
            if sum(e is None for e in row) > 1:
                raise ValueError(f"row {i}: at most one remainder entry")
        self.param_names = collect_names(*[e for row in self.entries for e in row])
        D = np.zeros((len(self.param_names), M, M))
        for q, name in enumerate(self.param_names):
            for i, row in enumerate(self.entries):
                hits = [j for j, e in enumerate(row) if e is not None and e.name == name]
                for j in hits:
                    D[q, i, j] += 1.0
                rem = [j for j, e in enumerate(row) if e is None]
                if hits and rem:
                    D[q, i, rem[0]] -= len(hits)
        self._D = D

    def matrix(self, theta) -> np.ndarray:
        P = np.zeros((self.n_labels, self.n_labels))
        for i, row in enumerate(self.entries):
            rem = None
            for j, e in enumerate(row):
                if e is None:
                    rem = j
                else:
                    P[i, j] = e(theta)
            if rem is not None:
                P[i, rem] = 1.0 - P[i].sum()
        if np.any(P < -1e-12) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("transition matrix is not row-stochastic")
        return np.maximum(P, 0.0)

    def density(self, theta, labels, Z, index, to) -> float:
        n = len(labels)
        if n == 0:
            raise ValueError("mutation kernel evaluated on the empty configuration")
        return float(self.matrix(theta)[labels[index], to] / n)

    def grad_density(self, theta, labels, Z, index, to):
        return self._D[:, labels[index], to] / len(labels)

    def grad_log_density(self, theta, labels, Z, index, to):
        P = self.matrix(theta)
        return self._D[:, labels[index], to] / P[labels[index], to]

    def sample(self, theta, labels, Z, rng):
        n = len(labels)
        if n == 0:
            raise ValueError("mutation from the empty configuration")
        P = self.matrix(theta)
        i = int(rng.integers(n))
        to = int(rng.choice(self.n_labels, p=P[labels[i]]))
        return i, to

    def bracket_integral(self, theta, labels, Z, rng=None, n_draws=None):
        p = len(self.param_names)
        out = np.zeros((p, p))
        n = len(labels)
        if p == 0 or n == 0:
            return out
        P = self.matrix(theta)
        # sum over particles of (1/n) sum_m D D^T / P; group particles by label
        for lab, cnt in zip(*np.unique(labels, return_counts=True)):
            for to in range(self.n_labels):
                if P[lab, to] > 0:
                    g = self._D[:, lab, to]
                    out += (cnt / n) * np.outer(g, g) / P[lab, to]
        return out

    def to_config(self):
        return {"family": self.family,
                "matrix": [[None if e is None else e.to_json() for e in row] for row in self.entries]}


def make_birth_kernel(family, label_probs, domain, **params) -> BirthKernel:
    if family == "uniform":
        return UniformBirth(label_probs, domain)
    if family == "gaussian_mixture":
        return GaussianMixtureBirth(label_probs, domain, **params)
    if family == "colocalization":
        return ColocalizationBirth(label_probs, domain, **params)
    if family == "potential":
        return PotentialBirth(label_probs, domain, **params)
    raise ValueError(f"unknown birth kernel family {family!r}")


def make_death_kernel(family="uniform"):
    if family != "uniform":
        raise ValueError(f"unknown death kernel family {family!r}")
    return UniformDeath()


def make_mutation_kernel(family, matrix):
    if family != "transition_matrix":
        raise ValueError(f"unknown mutation kernel family {family!r}")
    return TransitionMatrixMutation(matrix)
