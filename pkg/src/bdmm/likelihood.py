"""Log-likelihood of a fully observed trajectory, its score and observed information.

The log-likelihood factorises into birth, death, mutation and move parts.
Each jump part is

    -int_0^T gamma(X_s) ds + sum_{gamma-events} [log gamma(X_{T_i-}) + log k_gamma(X_{T_i-}, X_{T_i})]

and the move part is the discretised Girsanov exponent of the drifted
diffusion against the driftless one, summed with left-point (Ito) increments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import BIRTH, DEATH, MUTATION, Trajectory
from .model.spec import COMPONENTS, KINDS, ModelSpec

_EVENT_KIND = {BIRTH: "birth", DEATH: "death", MUTATION: "mutation"}

DEFAULT_BRACKET_STRIDE = 10
DEFAULT_BRACKET_DRAWS = 4096
DEFAULT_BRACKET_SEED = 20240611


@dataclass(frozen=True)
class LogLikBreakdown:
    birth: float
    death: float
    mutation: float
    move: float
    total: float
    components: tuple = COMPONENTS
    diagnostics: tuple = ()

    @classmethod
    def from_parts(cls, parts: dict, diagnostics=()):
        b, d, m, mv = (float(parts.get(c, 0.0)) for c in COMPONENTS)
        return cls(b, d, m, mv, b + d + m + mv, tuple(c for c in COMPONENTS if c in parts),
                   tuple(diagnostics))

    def as_dict(self) -> dict:
        return {c: getattr(self, c) for c in COMPONENTS} | {"total": self.total}


@dataclass(frozen=True)
class InformationMatrix:
    matrix: np.ndarray
    horizon: float
    names: tuple = field(default=())

    def restrict(self, names) -> np.ndarray:
        idx = [self.names.index(n) for n in names]
        return self.matrix[np.ix_(idx, idx)]


def _theta(model, theta):
    return theta if isinstance(theta, dict) else model.theta(theta)


def _trapezoid_weights(times: np.ndarray) -> np.ndarray:
    w = np.zeros(len(times))
    if len(times) > 1:
        h = np.diff(times)
        w[:-1] += 0.5 * h
        w[1:] += 0.5 * h
    return w


def _events_of(traj: Trajectory, kind: str):
    """(event, segment) pairs for events of a kind; segment j ends at event j."""
    segs = traj.segments
    return [(e, segs[j]) for j, e in enumerate(traj.events) if _EVENT_KIND[e.kind] == kind]


def _event_index(seg, pid) -> int:
    hit = np.flatnonzero(seg.ids == pid)
    if len(hit) != 1:
        raise ValueError(f"particle {pid} not alive before its event at t={seg.t1}")
    return int(hit[0])


def _kernel_density(model, kind, theta, seg, e):
    labels, Z = seg.labels, seg.Z[-1]
    if kind == "birth":
        return model.k_beta.density(theta, labels, Z, e.location, e.label)
    i = _event_index(seg, e.particle_id)
    if kind == "death":
        return model.k_delta.density(theta, labels, Z, i)
    return model.k_tau.density(theta, labels, Z, i, e.label_to)


def _kernel_grad_log(model, kind, theta, seg, e):
    labels, Z = seg.labels, seg.Z[-1]
    if kind == "birth":
        return model.k_beta.grad_log_density(theta, labels, Z, e.location, e.label)
    i = _event_index(seg, e.particle_id)
    if kind == "death":
        return model.k_delta.grad_log_density(theta, labels, Z, i)
    return model.k_tau.grad_log_density(theta, labels, Z, i, e.label_to)


def _compensator(model, kind, theta, traj) -> float:
    g = model.intensity(kind)
    parts = []
    for seg in traj.segments:
        if seg.t1 <= seg.t0:
            continue
        if g.location_free:
            parts.append(model.rate(kind, theta, seg.labels, seg.Z[0]) * (seg.t1 - seg.t0))
        else:
            r = model.rate_path(kind, theta, seg.labels, seg.Z)
            parts.append(float(_trapezoid_weights(seg.times) @ r))
    return math.fsum(parts)


def _jump_component(traj, model, kind, theta):
    diags = []
    terms = [-_compensator(model, kind, theta, traj)]
    for e, seg in _events_of(traj, kind):
        rate = model.rate(kind, theta, seg.labels, seg.Z[-1])
        dens = _kernel_density(model, kind, theta, seg, e)
        if not rate > 0:
            diags.append(f"{kind} event at t={e.time} (id {e.particle_id}): intensity is {rate}")
        if not dens > 0:
            diags.append(f"{kind} event at t={e.time} (id {e.particle_id}): kernel density is {dens}")
        if rate > 0 and dens > 0:
            terms.append(math.log(rate) + math.log(dens))
    if diags:
        return -math.inf, diags
    return math.fsum(terms), diags


def loglik_jump_component(traj: Trajectory, model: ModelSpec, kind: str, theta=None) -> float:
    """Log-likelihood contribution of one jump kind (-inf outside the support)."""
    if kind not in KINDS:
        raise ValueError(f"unknown jump kind {kind!r}")
    return _jump_component(traj, model, kind, _theta(model, theta))[0]


def _increments(traj, seg):
    dZ = np.diff(seg.Z, axis=0)
    if traj.domain.boundary == "periodic":
        span = traj.domain.upper - traj.domain.lower
        dZ = dZ - span * np.round(dZ / span)
    return dZ


def loglik_move(traj: Trajectory, model: ModelSpec, theta=None) -> float:
    """Discretised Girsanov log-density of the inter-jump motion."""
    theta = _theta(model, theta)
    move = model.move
    if move.zero_drift:
        return 0.0
    parts = []
    for seg in traj.segments:
        if seg.n == 0 or len(seg.times) < 2:
            continue
        dt = np.diff(seg.times)
        inv_a = 1.0 / move.sigma(seg.labels) ** 2  # (n,)
        v = move.drift(theta, seg.Z[:-1], seg.labels, seg.anchors)  # (K-1, n, d)
        dZ = _increments(traj, seg)
        vv = np.einsum("knd,knd->kn", v, v)
        vz = np.einsum("knd,knd->kn", v, dZ)
        parts.append(float(np.sum((vz - 0.5 * vv * dt[:, None]) * inv_a)))
    return math.fsum(parts)


def loglik_total(traj: Trajectory, model: ModelSpec, theta=None, components=None) -> LogLikBreakdown:
    """Sum of the four components; ``components`` restricts which ones are evaluated."""
    theta = _theta(model, theta)
    comps = COMPONENTS if components is None else tuple(c for c in COMPONENTS if c in set(components))
    parts, diags = {}, []
    for c in comps:
        if c == "move":
            parts[c] = loglik_move(traj, model, theta)
        else:
            parts[c], d = _jump_component(traj, model, c, theta)
            diags += d
    return LogLikBreakdown.from_parts(parts, diags)


# --------------------------------------------------------------------------
# Score
# --------------------------------------------------------------------------

def _jump_score(traj, model, kind, theta) -> np.ndarray:
    g, k = model.intensity(kind), model.kernel(kind)
    gi = model.index(g.param_names)
    ki = model.index(k.param_names) if k is not None else np.zeros(0, np.int64)
    out = np.zeros(len(model.param_names))
    if len(gi):
        acc = np.zeros(len(gi))
        for seg in traj.segments:
            if seg.t1 <= seg.t0:
                continue
            if g.location_free:
                acc -= model.rate_grad(kind, theta, seg.labels, seg.Z[0]) * (seg.t1 - seg.t0)
            else:
                acc -= _trapezoid_weights(seg.times) @ model.rate_grad_path(kind, theta, seg.labels, seg.Z)
        np.add.at(out, gi, acc)
    for e, seg in _events_of(traj, kind):
        if len(gi):
            rate = model.rate(kind, theta, seg.labels, seg.Z[-1])
            np.add.at(out, gi, model.rate_grad(kind, theta, seg.labels, seg.Z[-1]) / rate)
        if len(ki):
            np.add.at(out, ki, _kernel_grad_log(model, kind, theta, seg, e))
    return out


def _move_score(traj, model, theta) -> np.ndarray:
    move = model.move
    out = np.zeros(len(model.param_names))
    if not move.param_names:
        return out
    acc = np.zeros(len(move.param_names))
    for seg in traj.segments:
        if seg.n == 0 or len(seg.times) < 2:
            continue
        dt = np.diff(seg.times)
        inv_a = 1.0 / move.sigma(seg.labels) ** 2
        Zl = seg.Z[:-1]
        v = move.drift(theta, Zl, seg.labels, seg.anchors)
        G = move.drift_grad(theta, Zl, seg.labels, seg.anchors)  # (K-1, n, d, p)
        resid = (_increments(traj, seg) - v * dt[:, None, None]) * inv_a[None, :, None]
        acc += np.einsum("kndp,knd->p", G, resid)
    np.add.at(out, model.index(move.param_names), acc)
    return out


def score(traj: Trajectory, model: ModelSpec, theta=None, components=None) -> np.ndarray:
    """Analytic gradient of loglik_total w.r.t. every model parameter."""
    theta = _theta(model, theta)
    comps = COMPONENTS if components is None else tuple(components)
    out = np.zeros(len(model.param_names))
    for c in comps:
        out += _move_score(traj, model, theta) if c == "move" else _jump_score(traj, model, c, theta)
    return out


# --------------------------------------------------------------------------
# Observed information (predictable brackets)
# --------------------------------------------------------------------------

def _kernel_bracket(model, kind, theta, labels, Z, rng, n_draws):
    k = model.kernel(kind)
    if kind == "birth":
        return k.bracket_integral(theta, labels, Z, rng=rng, n_draws=n_draws)
    return k.bracket_integral(theta, labels, Z)


def _coarse_nodes(traj, stride):
    """Trapezoid nodes every ``stride`` grid steps over [0, T] as (segment, sample, weight).

    A node at a jump time uses the post-jump configuration.  With stride 1 and
    no events this is the plain trapezoid rule on the grid.
    """
    T, h = traj.horizon, stride * traj.grid_dt
    nodes = np.arange(0.0, T, h)
    if T - nodes[-1] <= 1e-9 * traj.grid_dt:
        nodes[-1] = T
    else:
        nodes = np.append(nodes, T)
    weights = _trapezoid_weights(nodes)
    segs = traj.segments
    starts = np.array([s.t0 for s in segs])
    out = []
    for t, w in zip(nodes, weights):
        j = min(int(np.searchsorted(starts, t, side="right")) - 1, len(segs) - 1)
        seg = segs[j]
        k = int(np.searchsorted(seg.times, t + 1e-9 * traj.grid_dt, side="right")) - 1
        out.append((j, max(k, 0), float(w)))
    return out


def _jump_information(traj, model, kind, theta, stride, n_draws, seed) -> np.ndarray:
    g, k = model.intensity(kind), model.kernel(kind)
    L = len(model.param_names)
    out = np.zeros((L, L))
    gi = model.index(g.param_names)
    ki = model.index(k.param_names) if k is not None else np.zeros(0, np.int64)
    # kernels other than parametric births depend on labels only
    kernel_moves = kind == "birth" and len(ki) > 0
    for j, seg in enumerate(traj.segments):
        if seg.t1 <= seg.t0:
            continue
        if len(gi):
            if g.location_free:
                r = model.rate(kind, theta, seg.labels, seg.Z[0])
                if r > 0:
                    gr = model.rate_grad(kind, theta, seg.labels, seg.Z[0])
                    out[np.ix_(gi, gi)] += np.outer(gr, gr) / r * (seg.t1 - seg.t0)
            else:
                w = _trapezoid_weights(seg.times)
                r = model.rate_path(kind, theta, seg.labels, seg.Z)
                G = model.rate_grad_path(kind, theta, seg.labels, seg.Z)
                pos = r > 0
                out[np.ix_(gi, gi)] += np.einsum("k,ki,kj->ij", w[pos] / r[pos], G[pos], G[pos])
        if len(ki) == 0 or kernel_moves or seg.n == 0:
            continue
        r = model.rate(kind, theta, seg.labels, seg.Z[0])
        if r > 0:
            B = _kernel_bracket(model, kind, theta, seg.labels, seg.Z[0], None, n_draws)
            out[np.ix_(ki, ki)] += (seg.t1 - seg.t0) * r * B
    if kernel_moves:
        for j, kk, w in _coarse_nodes(traj, stride):
            seg = traj.segments[j]
            Z = seg.Z[kk]
            r = model.rate(kind, theta, seg.labels, Z)
            if r == 0 or w == 0:
                continue
            rng = np.random.default_rng([seed, j, kk])
            B = _kernel_bracket(model, kind, theta, seg.labels, Z, rng, n_draws)
            out[np.ix_(ki, ki)] += w * r * B
    return out


def _move_information(traj, model, theta) -> np.ndarray:
    move = model.move
    L = len(model.param_names)
    out = np.zeros((L, L))
    if not move.param_names:
        return out
    mi = model.index(move.param_names)
    acc = np.zeros((len(mi), len(mi)))
    for seg in traj.segments:
        if seg.n == 0 or len(seg.times) < 2:
            continue
        w = _trapezoid_weights(seg.times)
        inv_a = 1.0 / move.sigma(seg.labels) ** 2
        G = move.drift_grad(theta, seg.Z, seg.labels, seg.anchors)  # (K, n, d, p)
        acc += np.einsum("k,n,kndp,kndq->pq", w, inv_a, G, G)
    out[np.ix_(mi, mi)] += acc
    return out


def observed_information(traj: Trajectory, model: ModelSpec, theta=None, components=None,
                         stride: int = DEFAULT_BRACKET_STRIDE, n_draws: int = DEFAULT_BRACKET_DRAWS,
                         seed: int = DEFAULT_BRACKET_SEED) -> InformationMatrix:
    """Un-normalised empirical Fisher information over [0, T].

    The birth-kernel bracket is a Monte-Carlo integral evaluated every
    ``stride`` grid points with fixed seeds, so repeated calls agree exactly.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    theta = _theta(model, theta)
    comps = COMPONENTS if components is None else tuple(components)
    L = len(model.param_names)
    J = np.zeros((L, L))
    for c in comps:
        if c == "move":
            J += _move_information(traj, model, theta)
        else:
            J += _jump_information(traj, model, c, theta, stride, n_draws, seed)
    J = 0.5 * (J + J.T)
    return InformationMatrix(J, traj.horizon, tuple(model.param_names))


def kernel_compensator_term(model: ModelSpec, kind: str, theta, labels, Z, rng=None,
                            n_draws: int = 100_000) -> np.ndarray:
    """Estimate of int grad k d(nu) at one configuration (zero for normalised kernels).

    Uses E_{y~k}[grad log k]; intended as a debugging check of the assumption
    that the kernel-score compensator vanishes.
    """
    theta = _theta(model, theta)
    k = model.kernel(kind)
    rng = np.random.default_rng(0) if rng is None else rng
    labels = np.asarray(labels, dtype=np.int64)
    Z = np.asarray(Z, dtype=float)
    if kind == "birth":
        acc = np.zeros(len(k.param_names))
        counts = rng.multinomial(n_draws, k.label_probs)
        for m, c in enumerate(counts):
            if c == 0 or not k.label_depends(m):
                continue
            z = k.sample_location(theta, m, labels, Z, rng, c)
            acc += (k.location_grad(theta, m, labels, Z, z)
                    / k.location_density(theta, m, labels, Z, z)[:, None]).sum(axis=0)
        return acc / n_draws
    # finite reference measures: exact sum of gradients
    n = len(labels)
    if kind == "death" or n == 0:
        return np.zeros(len(k.param_names))
    return sum(k.grad_density(theta, labels, Z, i, to) for i in range(n) for to in range(k.n_labels))
