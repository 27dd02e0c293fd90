"""Jump intensity functions (birth, death and mutation rates)."""
from __future__ import annotations

import numpy as np

from .refs import Ref, collect_names


class Intensity:
    """Base class for a configuration-dependent jump rate.

    Subclasses implement ``eval``/``grad`` on a single configuration given as
    ``labels`` (n,) and locations ``Z`` (n, d), plus the exact supremum and
    infimum of the rate over configurations of cardinality n.  ``grad`` is
    aligned with ``param_names``.
    """

    family = "abstract"
    location_free = True
    param_names: tuple = ()

    def eval(self, theta, labels, Z) -> float:
        raise NotImplementedError

    def grad(self, theta, labels, Z) -> np.ndarray:
        raise NotImplementedError

    def bound_given_n(self, theta, n: int) -> float:
        raise NotImplementedError

    def lower_given_n(self, theta, n: int) -> float:
        raise NotImplementedError

    def eval_path(self, theta, labels, Zs) -> np.ndarray:
        """Rate along a sampled path Zs of shape (K, n, d)."""
        return np.array([self.eval(theta, labels, Z) for Z in Zs])

    def grad_path(self, theta, labels, Zs) -> np.ndarray:
        return np.array([self.grad(theta, labels, Z) for Z in Zs]).reshape(len(Zs), len(self.param_names))

    def to_config(self) -> dict:
        raise NotImplementedError


class _RateIntensity(Intensity):
    def __init__(self, rate):
        self.rate = Ref(rate)
        if not self.rate.is_param and self.rate.const < 0:
            raise ValueError(f"negative rate {self.rate.const}")
        self.param_names = collect_names(self.rate)

    def _rate(self, theta) -> float:
        g = self.rate(theta)
        if g < 0:
            raise ValueError(f"negative rate {g}")
        return g

    def _factor(self, n: int) -> float:
        raise NotImplementedError

    def eval(self, theta, labels, Z):
        return self._rate(theta) * self._factor(len(labels))

    def grad(self, theta, labels, Z):
        return np.full(len(self.param_names), self._factor(len(labels)))

    def bound_given_n(self, theta, n):
        return self._rate(theta) * self._factor(n)

    lower_given_n = bound_given_n

    def eval_path(self, theta, labels, Zs):
        return np.full(len(Zs), self.eval(theta, labels, None))

    def grad_path(self, theta, labels, Zs):
        return np.tile(self.grad(theta, labels, None), (len(Zs), 1))


class Constant(_RateIntensity):
    family = "constant"

    def _factor(self, n):
        return 1.0

    def to_config(self):
        return {"family": self.family, "rate": self.rate.to_json()}


class PerCapita(_RateIntensity):
    family = "per_capita"

    def _factor(self, n):
        return float(n)

    def to_config(self):
        return {"family": self.family, "rate": self.rate.to_json()}


class CappedConstant(_RateIntensity):
    """Constant rate switched off once the cardinality reaches ``n_max``."""

    family = "capped_constant"

    def __init__(self, rate, n_max: int):
        super().__init__(rate)
        if n_max < 1:
            raise ValueError("n_max must be >= 1")
        self.n_max = int(n_max)

    def _factor(self, n):
        return 1.0 if n < self.n_max else 0.0

    def to_config(self):
        return {"family": self.family, "rate": self.rate.to_json(), "n_max": self.n_max}


FAMILIES = {"constant": Constant, "per_capita": PerCapita, "capped_constant": CappedConstant}


def make_intensity(family: str, rate, n_max: int = None) -> Intensity:
    if family not in FAMILIES:
        raise ValueError(f"unknown intensity family {family!r}")
    if family == "capped_constant":
        if n_max is None:
            raise ValueError("capped_constant requires n_max")
        return CappedConstant(rate, n_max)
    return FAMILIES[family](rate)


def intensity_from_config(cfg: dict) -> Intensity:
    cfg = dict(cfg)
    return make_intensity(cfg.pop("family"), cfg.pop("rate", 0.0), cfg.pop("n_max", None))

