"""Inter-jump motion: drift and (isotropic, known) diffusion of each particle.

Drifts act on stacked positions ``Z`` of shape (..., n, d) so that a whole
sampled segment (K, n, d) can be evaluated at once.  Every particle diffuses
with ``sigma[label] * I``.
"""
from __future__ import annotations

import numpy as np

from .refs import Ref, collect_names

REGIMES = ("brownian", "drifted", "ou")


class Move:
    family = "abstract"
    param_names: tuple = ()
    sigmas: np.ndarray

    @property
    def zero_drift(self) -> bool:
        return False

    def drift(self, theta, Z, labels, anchors) -> np.ndarray:
        raise NotImplementedError

    def drift_grad(self, theta, Z, labels, anchors) -> np.ndarray:
        """Jacobian of the drift w.r.t. param_names, shape (..., n, d, p)."""
        raise NotImplementedError

    def sigma(self, labels) -> np.ndarray:
        return self.sigmas[np.asarray(labels, dtype=np.int64)]


def _check_sigmas(sigmas):
    s = np.asarray(sigmas, dtype=float)
    if np.any(~(s > 0)):
        raise ValueError("diffusion coefficients must be positive")
    return s


class IndependentPerLabel(Move):
    """Non-interacting particles; each label follows its own motion regime.

    regimes[m] is a dict with ``type`` in {brownian, drifted, ou} and
    ``sigma``; drifted adds ``velocity`` (d entries), ou adds ``kappa`` and
    pulls the particle towards its anchor (birth location).
    """

    family = "independent_per_label"

    def __init__(self, regimes, dim: int):
        self.dim = dim
        self.regimes = []
        for m, r in enumerate(regimes):
            kind = r.get("type", "brownian")
            if kind not in REGIMES:
                raise ValueError(f"label {m}: unknown regime {kind!r}")
            entry = {"type": kind, "sigma": float(r["sigma"])}
            if kind == "drifted":
                v = r["velocity"]
                if len(v) != dim:
                    raise ValueError(f"label {m}: velocity must have {dim} entries")
                entry["velocity"] = [Ref(x) for x in v]
            elif kind == "ou":
                entry["kappa"] = Ref(r["kappa"])
                if not entry["kappa"].is_param and entry["kappa"].const <= 0:
                    raise ValueError(f"label {m}: kappa must be positive")
            self.regimes.append(entry)
        self.sigmas = _check_sigmas([r["sigma"] for r in self.regimes])
        refs = []
        for r in self.regimes:
            refs += r.get("velocity", []) + ([r["kappa"]] if "kappa" in r else [])
        self.param_names = collect_names(*refs)
        self._pidx = {n: i for i, n in enumerate(self.param_names)}

    @property
    def zero_drift(self):
        return all(r["type"] == "brownian" for r in self.regimes)

    def _kappa(self, r, theta):
        k = r["kappa"](theta)
        if not k > 0:
            raise ValueError(f"kappa={k} must be positive")
        return k

    def drift(self, theta, Z, labels, anchors):
        Z = np.asarray(Z, dtype=float)
        out = np.zeros_like(Z)
        labels = np.asarray(labels)
        for m, r in enumerate(self.regimes):
            sel = labels == m
            if not sel.any() or r["type"] == "brownian":
                continue
            if r["type"] == "drifted":
                out[..., sel, :] = np.array([v(theta) for v in r["velocity"]])
            else:
                out[..., sel, :] = -self._kappa(r, theta) * (Z[..., sel, :] - anchors[sel])
        return out

    def drift_grad(self, theta, Z, labels, anchors):
        Z = np.asarray(Z, dtype=float)
        out = np.zeros(Z.shape + (len(self.param_names),))
        labels = np.asarray(labels)
        for m, r in enumerate(self.regimes):
            sel = labels == m
            if not sel.any() or r["type"] == "brownian":
                continue
            if r["type"] == "drifted":
                for k, v in enumerate(r["velocity"]):
                    if v.is_param:
                        g = out[..., k, self._pidx[v.name]]
                        g[..., sel] += 1.0
            elif r["kappa"].is_param:
                g = out[..., self._pidx[r["kappa"].name]]
                g[..., sel, :] -= Z[..., sel, :] - anchors[sel]
        return out

    def to_config(self, label_names=None):
        regs = []
        for r in self.regimes:
            c = {"type": r["type"], "sigma": r["sigma"]}
            if "velocity" in r:
                c["velocity"] = [v.to_json() for v in r["velocity"]]
            if "kappa" in r:
                c["kappa"] = r["kappa"].to_json()
            regs.append(c)
        if label_names is not None:
            return {"family": self.family, "regimes": dict(zip(label_names, regs))}
        return {"family": self.family, "regimes": regs}


class Langevin(Move):
    """Pairwise interaction drift -sum_j w[m_i, m_j] grad phi(z_i - z_j), Gaussian-bump phi."""

    family = "langevin"

    def __init__(self, weights, sigmas, bump_weight=1.0, bump_scale=1.0):
        M = len(sigmas)
        self.weights = [[Ref(w) for w in row] for row in weights]
        if len(self.weights) != M or any(len(r) != M for r in self.weights):
            raise ValueError(f"weights must be {M}x{M}")
        self.sigmas = _check_sigmas(sigmas)
        if bump_scale <= 0:
            raise ValueError("bump_scale must be positive")
        self.bump_weight, self.bump_scale = float(bump_weight), float(bump_scale)
        self.param_names = collect_names(*[w for row in self.weights for w in row])
        self._masks = np.array([[[1.0 if w.name == n else 0.0 for w in row] for row in self.weights]
                                for n in self.param_names]).reshape(len(self.param_names), M, M)

    def grad_phi(self, r):
        """Spatial gradient of the bump at displacement r (..., d)."""
        r2 = np.sum(r * r, axis=-1, keepdims=True)
        return -(self.bump_weight / self.bump_scale ** 2) * r * np.exp(-0.5 * r2 / self.bump_scale ** 2)

    def _pair_grads(self, Z):
        Z = np.asarray(Z, dtype=float)
        return self.grad_phi(Z[..., :, None, :] - Z[..., None, :, :])  # (..., n, n, d); diagonal is 0

    def drift(self, theta, Z, labels, anchors=None):
        labels = np.asarray(labels, dtype=np.int64)
        W = np.array([[w(theta) for w in row] for row in self.weights])[labels[:, None], labels[None, :]]
        return -np.einsum("ij,...ijd->...id", W, self._pair_grads(Z))

    def drift_grad(self, theta, Z, labels, anchors=None):
        labels = np.asarray(labels, dtype=np.int64)
        G = self._pair_grads(Z)
        masks = self._masks[:, labels[:, None], labels[None, :]]  # (p, n, n)
        return -np.einsum("qij,...ijd->...idq", masks, G)

    def to_config(self, label_names=None):
        return {"family": self.family, "weights": [[w.to_json() for w in row] for row in self.weights],
                "sigma": self.sigmas.tolist(), "bump_weight": self.bump_weight,
                "bump_scale": self.bump_scale}


def make_move(family, **params) -> Move:
    if family == "independent_per_label":
        return IndependentPerLabel(params["regimes"], params["dim"])
    if family == "langevin":
        return Langevin(params["weights"], params["sigma"], params.get("bump_weight", 1.0),
                        params.get("bump_scale", 1.0))
    raise ValueError(f"unknown move family {family!r}")
