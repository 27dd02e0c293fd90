"""Trajectory simulation by the iterative jump/move construction.

Between jumps the particles follow an Euler-Maruyama discretisation of their
SDE on the global grid ``k * grid_dt``.  Waiting times are drawn exactly
(exponential) when every intensity ignores locations, and by per-segment
thinning against the cardinality bound otherwise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (BIRTH, DEATH, MUTATION, SNAP_TOL, Configuration, JumpEvent, Track, Trajectory,
                   time_axis)
from .model.spec import KINDS, ModelSpec


@dataclass(frozen=True)
class SimOptions:
    horizon: float
    grid_dt: float
    seed: int = 0
    max_events: int = 1_000_000

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if not 0 < self.grid_dt <= self.horizon:
            raise ValueError("need 0 < grid_dt <= horizon")
        if self.max_events < 1:
            raise ValueError("max_events must be >= 1")


class TruncatedTrajectoryError(RuntimeError):
    """Raised when max_events is hit; ``partial`` holds the trajectory so far."""

    def __init__(self, msg, partial: Trajectory):
        super().__init__(msg)
        self.partial = partial


def _euler_step(move, theta, Z, labels, anchors, h, rng, domain):
    n, d = Z.shape
    if n == 0 or h <= 0:
        return Z
    noise = rng.standard_normal((n, d)) * (move.sigma(labels) * math.sqrt(h))[:, None]
    if move.zero_drift:
        Znew = Z + noise
    else:
        Znew = Z + move.drift(theta, Z, labels, anchors) * h + noise
    return domain.apply(Znew) if domain is not None else Znew


def euler_maruyama_segment(move, theta, Z0, labels, anchors, duration, grid_dt, rng,
                           domain=None, t0: float = 0.0):
    """Simulate the inter-jump SDE from ``t0`` for ``duration``.

    Returns (times, Z) with Z of shape (K, n, d); times are t0, every grid
    multiple of ``grid_dt`` inside, and t0 + duration.
    """
    if duration < 0:
        raise ValueError("duration must be >= 0")
    Z0 = np.asarray(Z0, dtype=float)
    times = time_axis(t0, t0 + duration, grid_dt)
    out = np.empty((len(times),) + Z0.shape)
    out[0] = Z0
    Z = Z0
    for k in range(1, len(times)):
        Z = _euler_step(move, theta, Z, labels, anchors, times[k] - times[k - 1], rng, domain)
        out[k] = Z
    return times, out


def _alpha(model, theta, labels, Z):
    return float(sum(model.rate(k, theta, labels, Z) for k in KINDS))


def _alpha_bar(model, theta, n):
    return float(sum(model.bound_given_n(k, theta, n) for k in KINDS))


def sample_interjump(model: ModelSpec, theta, x: Configuration, rng, grid_dt: float,
                     t0: float = 0.0, t_max: float = math.inf):
    """Draw the next jump time and the moved paths up to it.

    Returns (waiting_time, times, Z).  The path ends at the jump time, or at
    ``t_max`` when no jump happens before it (waiting_time is then > t_max - t0,
    possibly inf).  With zero total intensity and no ``t_max`` the waiting
    time is inf and the path is the start point alone.
    """
    theta = model.theta(theta) if not isinstance(theta, dict) else theta
    labels, anchors, dom = x.labels, x.anchors, model.domain
    if model.location_free:
        a = _alpha(model, theta, labels, x.locations)
        w = rng.exponential(1.0 / a) if a > 0 else math.inf
        end = min(t0 + w, t_max)
        if math.isinf(end):
            return math.inf, np.array([t0]), np.asarray(x.locations, dtype=float)[None]
        times, Z = euler_maruyama_segment(model.move, theta, x.locations, labels, anchors,
                                          end - t0, grid_dt, rng, dom, t0)
        return w, times, Z

    abar = _alpha_bar(model, theta, x.n)
    if abar == 0.0:
        if math.isinf(t_max):
            return math.inf, np.array([t0]), np.asarray(x.locations, dtype=float)[None]
        times, Z = euler_maruyama_segment(model.move, theta, x.locations, labels, anchors,
                                          t_max - t0, grid_dt, rng, dom, t0)
        return math.inf, times, Z

    tol = SNAP_TOL * grid_dt
    kept_t, kept_Z = [t0], [x.locations]
    c, Zc = t0, np.asarray(x.locations, dtype=float)
    while True:
        cand = c + rng.exponential(1.0 / abar)
        stop = cand >= t_max
        target = t_max if stop else cand
        k0 = math.floor(c / grid_dt + SNAP_TOL) + 1
        k1 = math.ceil(target / grid_dt - SNAP_TOL) - 1
        for k in range(k0, k1 + 1):
            g = k * grid_dt
            if g - c <= tol or target - g <= tol:
                continue
            Zc = _euler_step(model.move, theta, Zc, labels, anchors, g - c, rng, dom)
            c = g
            kept_t.append(g)
            kept_Z.append(Zc)
        Zc = _euler_step(model.move, theta, Zc, labels, anchors, target - c, rng, dom)
        c = target
        if stop:
            kept_t.append(t_max)
            kept_Z.append(Zc)
            return math.inf, np.array(kept_t), np.stack(kept_Z)
        if rng.random() * abar <= _alpha(model, theta, labels, Zc):
            kept_t.append(cand)
            kept_Z.append(Zc)
            return cand - t0, np.array(kept_t), np.stack(kept_Z)
        # rejected candidate: keep it only if it stands in for a grid point
        k = round(cand / grid_dt)
        if abs(k * grid_dt - cand) <= tol and k * grid_dt > kept_t[-1]:
            kept_t.append(k * grid_dt)
            kept_Z.append(Zc)


def sample_jump(model: ModelSpec, theta, x_pre: Configuration, rng, time: float = 0.0,
                next_id: int = None) -> JumpEvent:
    """Choose the jump kind with probabilities rate/total and draw it from its kernel."""
    theta = model.theta(theta) if not isinstance(theta, dict) else theta
    labels, Z = x_pre.labels, x_pre.locations
    r = model.rates(theta, labels, Z)
    a = r.sum()
    if not a > 0:
        raise RuntimeError("sample_jump called with zero total intensity")
    kind = KINDS[int(np.searchsorted(np.cumsum(r) / a, rng.random(), side="right").clip(0, 2))]
    if kind == "birth":
        z, m = model.k_beta.sample(theta, labels, Z, rng)
        pid = (int(x_pre.ids.max()) + 1 if x_pre.n else 0) if next_id is None else next_id
        return JumpEvent(time, BIRTH, pid, location=tuple(map(float, z)), label=m)
    if kind == "death":
        i = model.k_delta.sample(theta, labels, Z, rng)
        return JumpEvent(time, DEATH, int(x_pre.ids[i]), label=int(labels[i]))
    i, to = model.k_tau.sample(theta, labels, Z, rng)
    return JumpEvent(time, MUTATION, int(x_pre.ids[i]), label_from=int(labels[i]), label_to=to)


class _Recorder:
    """Accumulates per-particle samples and label intervals during a run."""

    def __init__(self):
        self.times, self.locs, self.intervals, self.anchor = {}, {}, {}, {}

    def start(self, pid, t, z, label, anchor):
        self.times[pid] = [np.array([t])]
        self.locs[pid] = [np.asarray(z, dtype=float)[None, :]]
        self.intervals[pid] = [[t, int(label)]]
        self.anchor[pid] = np.asarray(anchor, dtype=float)

    def extend(self, ids, times, Z):
        for j, pid in enumerate(ids):
            self.times[pid].append(times)
            self.locs[pid].append(Z[:, j, :])

    def relabel(self, pid, t, label):
        self.intervals[pid].append([t, int(label)])

    def tracks(self):
        out = []
        for pid in self.times:
            ts = np.concatenate(self.times[pid])
            zs = np.concatenate(self.locs[pid])
            iv = self.intervals[pid]
            ends = [s for s, _ in iv[1:]] + [float(ts[-1])]
            out.append(Track(pid, tuple((s, e, m) for (s, m), e in zip(iv, ends)), ts, zs,
                             self.anchor[pid]))
        return out


def simulate(model: ModelSpec, theta, x0: Configuration, opts: SimOptions) -> Trajectory:
    """Simulate a trajectory on [0, opts.horizon]; deterministic given opts.seed."""
    theta = model.theta(theta)
    if x0.dim != model.domain.dim:
        raise ValueError("x0 dimension differs from the domain")
    if x0.n and (np.any(x0.labels >= len(model.labels)) or not np.all(model.domain.contains(x0.locations))):
        raise ValueError("x0 has labels outside the alphabet or particles outside the domain")
    if x0.n > model.n_max:
        raise ValueError("x0 exceeds n_max")
    rng = np.random.default_rng(opts.seed)
    T, dt = opts.horizon, opts.grid_dt
    rec = _Recorder()
    for pid, z, m, anc in zip(x0.ids, x0.locations, x0.labels, x0.anchors):
        rec.start(int(pid), 0.0, z, m, anc)
    ids, Z, labels, anchors = (x0.ids.copy(), x0.locations.copy(), x0.labels.copy(), x0.anchors.copy())
    next_id = int(ids.max()) + 1 if len(ids) else 0
    events, t = [], 0.0

    def build(horizon):
        return Trajectory(horizon, dt, tuple(rec.tracks()), tuple(events), model.domain,
                          model.labels, model.fingerprint)

    while True:
        x = Configuration(ids, Z, labels, anchors, dim=model.domain.dim)
        w, times, path = sample_interjump(model, theta, x, rng, dt, t0=t, t_max=T)
        rec.extend(x.ids, times[1:], path[1:])
        if math.isinf(w) or t + w >= T or times[-1] >= T:
            break
        t = float(times[-1])
        Z = path[-1]
        x_pre = Configuration(ids, Z, labels, anchors, dim=model.domain.dim)
        ev = sample_jump(model, theta, x_pre, rng, time=t, next_id=next_id)
        ids, Z, labels, anchors = x_pre.ids.copy(), x_pre.locations.copy(), x_pre.labels.copy(), x_pre.anchors.copy()
        if ev.kind == BIRTH:
            z = np.array(ev.location)
            rec.start(ev.particle_id, t, z, ev.label, z)
            ids = np.append(ids, ev.particle_id)
            Z = np.vstack([Z, z])
            labels = np.append(labels, ev.label)
            anchors = np.vstack([anchors, z])
            next_id += 1
        elif ev.kind == DEATH:
            keep = ids != ev.particle_id
            ids, Z, labels, anchors = ids[keep], Z[keep], labels[keep], anchors[keep]
        else:
            labels[ids == ev.particle_id] = ev.label_to
            rec.relabel(ev.particle_id, t, ev.label_to)
        events.append(ev)
        if len(events) >= opts.max_events:
            raise TruncatedTrajectoryError(f"max_events={opts.max_events} reached at t={t}", build(t))
    return build(T)
