"""ModelSpec: the full bundle of intensities, kernels and motion, plus config I/O."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from ..core import Configuration, DomainBox, ParameterVector
from .intensities import Constant, Intensity, intensity_from_config
from .kernels import (BirthKernel, TransitionMatrixMutation, UniformDeath, make_birth_kernel,
                      make_death_kernel, make_mutation_kernel)
from .moves import IndependentPerLabel, Langevin, Move

KINDS = ("birth", "death", "mutation")
COMPONENTS = ("birth", "death", "mutation", "move")


@dataclass(frozen=True, eq=False)
class ModelSpec:
    labels: tuple
    domain: DomainBox
    params: ParameterVector
    beta: Intensity
    delta: Intensity
    tau: Intensity
    k_beta: BirthKernel
    k_delta: UniformDeath
    k_tau: Optional[TransitionMatrixMutation]
    move: Move
    n_max: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        known = set(self.params.names)
        for comp in COMPONENTS:
            missing = set(self.component_params(comp)) - known
            if missing:
                raise ValueError(f"{comp}: parameters {sorted(missing)} not declared in params")
        if self.k_tau is None and not (isinstance(self.tau, Constant) and self.tau.rate.const == 0.0):
            raise ValueError("a mutation kernel is required when the mutation rate is not zero")
        if self.k_beta.n_labels != len(self.labels):
            raise ValueError("birth kernel label count differs from the alphabet")
        if len(self.move.sigmas) != len(self.labels):
            raise ValueError("move needs one diffusion coefficient per label")
        # domain errors on the default parameters surface at construction
        th = self.params.as_dict()
        if self.k_tau is not None:
            self.k_tau.matrix(th)
        for g in (self.beta, self.delta, self.tau):
            g.bound_given_n(th, 1)

    # ---- parameters -------------------------------------------------------
    @property
    def param_names(self) -> tuple:
        return self.params.names

    def theta(self, theta=None) -> dict:
        """Normalise a ParameterVector / mapping / array / None into a full name->value dict."""
        base = self.params.as_dict()
        if theta is None:
            return base
        if isinstance(theta, ParameterVector):
            base.update(theta.as_dict())
        elif isinstance(theta, Mapping):
            unknown = set(theta) - set(base)
            if unknown:
                raise KeyError(f"unknown parameters {sorted(unknown)}")
            base.update({k: float(v) for k, v in theta.items()})
        else:
            arr = np.asarray(theta, dtype=float).reshape(-1)
            if len(arr) != len(self.param_names):
                raise ValueError(f"expected {len(self.param_names)} parameter values")
            base = dict(zip(self.param_names, map(float, arr)))
        return base

    def index(self, names) -> np.ndarray:
        idx = {n: i for i, n in enumerate(self.param_names)}
        return np.array([idx[n] for n in names], dtype=np.int64)

    def scatter(self, names, local: np.ndarray) -> np.ndarray:
        """Place a gradient aligned with ``names`` into a full-length vector."""
        out = np.zeros(len(self.param_names))
        if len(names):
            np.add.at(out, self.index(names), local)
        return out

    def component_params(self, comp: str) -> tuple:
        if comp == "move":
            return tuple(self.move.param_names)
        g, k = self.intensity(comp), self.kernel(comp)
        names = list(g.param_names)
        if k is not None:
            names += [n for n in k.param_names if n not in names]
        return tuple(names)

    def components_for(self, free) -> tuple:
        free = set(free)
        return tuple(c for c in COMPONENTS if free & set(self.component_params(c)))

    # ---- intensities with the cardinality rules applied ------------------
    def intensity(self, kind: str) -> Intensity:
        return {"birth": self.beta, "death": self.delta, "mutation": self.tau}[kind]

    def kernel(self, kind: str):
        return {"birth": self.k_beta, "death": self.k_delta, "mutation": self.k_tau}[kind]

    def _active(self, kind, n) -> bool:
        if kind == "birth":
            return n < self.n_max
        return n > 0

    def rate(self, kind, theta, labels, Z) -> float:
        if not self._active(kind, len(labels)):
            return 0.0
        return self.intensity(kind).eval(theta, labels, Z)

    def rate_grad(self, kind, theta, labels, Z) -> np.ndarray:
        g = self.intensity(kind)
        if not self._active(kind, len(labels)):
            return np.zeros(len(g.param_names))
        return g.grad(theta, labels, Z)

    def rate_path(self, kind, theta, labels, Zs) -> np.ndarray:
        if not self._active(kind, len(labels)):
            return np.zeros(len(Zs))
        return self.intensity(kind).eval_path(theta, labels, Zs)

    def rate_grad_path(self, kind, theta, labels, Zs) -> np.ndarray:
        g = self.intensity(kind)
        if not self._active(kind, len(labels)):
            return np.zeros((len(Zs), len(g.param_names)))
        return g.grad_path(theta, labels, Zs)

    def bound_given_n(self, kind, theta, n) -> float:
        return self.intensity(kind).bound_given_n(theta, n) if self._active(kind, n) else 0.0

    def lower_given_n(self, kind, theta, n) -> float:
        return self.intensity(kind).lower_given_n(theta, n) if self._active(kind, n) else 0.0

    def rates(self, theta, labels, Z) -> np.ndarray:
        return np.array([self.rate(k, theta, labels, Z) for k in KINDS])

    @property
    def location_free(self) -> bool:
        return all(g.location_free for g in (self.beta, self.delta, self.tau))

    # ---- identity ---------------------------------------------------------
    @property
    def fingerprint(self) -> str:
        blob = json.dumps(self.config, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_params(self, params: ParameterVector) -> "ModelSpec":
        cfg = dict(self.config)
        cfg["params"] = params_to_config(params)
        return model_from_config(cfg)


# --------------------------------------------------------------------------
# Config documents
# --------------------------------------------------------------------------

def _label_index(labels, ref) -> int:
    if isinstance(ref, str):
        try:
            return labels.index(ref)
        except ValueError:
            raise ValueError(f"unknown label {ref!r}") from None
    i = int(ref)
    if not 0 <= i < len(labels):
        raise ValueError(f"label index {i} out of range")
    return i


def _per_label(labels, spec, what):
    """Accept either a list aligned with labels or a {label: value} mapping."""
    if isinstance(spec, Mapping):
        out = [None] * len(labels)
        for k, v in spec.items():
            out[_label_index(labels, k)] = v
        if any(v is None for v in out):
            missing = [labels[i] for i, v in enumerate(out) if v is None]
            raise ValueError(f"{what}: missing entries for labels {missing}")
        return out
    if len(spec) != len(labels):
        raise ValueError(f"{what}: expected {len(labels)} entries")
    return list(spec)


def _matrix(labels, spec, what, default=0.0):
    if isinstance(spec, Mapping):
        M = len(labels)
        out = [[default] * M for _ in range(M)]
        for a, row in spec.items():
            i = _label_index(labels, a)
            for b, v in row.items():
                out[i][_label_index(labels, b)] = v
        return out
    return [list(r) for r in spec]


def params_from_config(spec: Mapping) -> ParameterVector:
    names, values, bounds = [], [], []
    for name, v in spec.items():
        names.append(name)
        if isinstance(v, Mapping):
            values.append(float(v["value"]))
            lo, hi = v.get("bounds", [None, None])
            bounds.append((lo, hi))
        else:
            values.append(float(v))
            bounds.append((None, None))
    return ParameterVector(values, names, bounds)


def params_to_config(pv: ParameterVector) -> dict:
    def b(x):
        return None if math.isinf(x) else x
    return {n: {"value": float(v), "bounds": [b(lo), b(hi)]}
            for n, v, (lo, hi) in zip(pv.names, pv.values, pv.bounds)}


def model_from_config(cfg: Mapping) -> ModelSpec:
    cfg = json.loads(json.dumps(cfg))  # deep copy, JSON-compatible
    labels = tuple(cfg["labels"])
    if not labels:
        raise ValueError("empty label alphabet")
    domain = DomainBox.from_dict(cfg["domain"])
    params = params_from_config(cfg.get("params", {}))
    n_max = int(cfg.get("n_max") or 10 * len(cfg.get("x0", {}).get("particles", [])) + 50)
    cfg["n_max"] = n_max

    ints = cfg.get("intensities", {})
    zero = {"family": "constant", "rate": 0.0}
    beta = intensity_from_config(ints.get("beta", zero))
    delta = intensity_from_config(ints.get("delta", zero))
    tau = intensity_from_config(ints.get("tau", zero))

    kern = cfg.get("kernels", {})
    b = dict(kern.get("birth", {"family": "uniform"}))
    fam = b.pop("family")
    probs = b.pop("label_probs", None)
    probs = [1.0 / len(labels)] * len(labels) if probs is None else _per_label(labels, probs, "label_probs")
    for key in ("anchor_labels", "target_labels"):
        if b.get(key) is not None:
            b[key] = [_label_index(labels, x) for x in b[key]]
    if "weights" in b:
        b["weights"] = _matrix(labels, b["weights"], "birth weights")
    k_beta = make_birth_kernel(fam, probs, domain, **b)
    k_delta = make_death_kernel(kern.get("death", {"family": "uniform"})["family"])
    k_tau = None
    if "mutation" in kern:
        mcfg = kern["mutation"]
        k_tau = make_mutation_kernel(mcfg["family"], _matrix(labels, mcfg["matrix"], "mutation matrix"))

    mv = dict(cfg.get("move", {"family": "independent_per_label",
                               "regimes": [{"type": "brownian", "sigma": 1.0}] * len(labels)}))
    fam = mv.pop("family")
    if fam == "independent_per_label":
        move = IndependentPerLabel(_per_label(labels, mv["regimes"], "move regimes"), domain.dim)
    elif fam == "langevin":
        move = Langevin(_matrix(labels, mv["weights"], "langevin weights"),
                        _per_label(labels, mv["sigma"], "langevin sigma"),
                        mv.get("bump_weight", 1.0), mv.get("bump_scale", 1.0))
    else:
        raise ValueError(f"unknown move family {fam!r}")

    return ModelSpec(labels, domain, params, beta, delta, tau, k_beta, k_delta, k_tau, move, n_max, cfg)


def load_model(path) -> ModelSpec:
    with open(path) as fh:
        return model_from_config(json.load(fh))


def initial_configuration(spec, model: ModelSpec, rng=None) -> Configuration:
    """Build x0 from a config entry.

    ``{"particles": [{"id", "location", "label"}, ...]}`` lists particles
    explicitly; ``{"uniform": {"label": n, ...}}`` scatters n particles of each
    label uniformly over the box (needs ``rng`` or a ``seed`` key).
    """
    d = model.domain.dim
    if spec is None:
        return Configuration.empty(d)
    if "particles" in spec:
        ps = spec["particles"]
        return Configuration([p.get("id", i) for i, p in enumerate(ps)],
                             [p["location"] for p in ps],
                             [_label_index(list(model.labels), p["label"]) for p in ps], dim=d)
    if "uniform" in spec:
        rng = np.random.default_rng(spec.get("seed", 0)) if rng is None else rng
        labels = []
        for lab, cnt in spec["uniform"].items():
            labels += [_label_index(list(model.labels), lab)] * int(cnt)
        lo, hi = model.domain.lower, model.domain.upper
        Z = lo + (hi - lo) * rng.random((len(labels), d))
        return Configuration(np.arange(len(labels)), Z, labels, dim=d)
    raise ValueError("x0 must have 'particles' or 'uniform'")
