"""Value types for configurations and trajectories of a birth-death-move process.

A configuration is a finite set of labelled particles living in an axis-aligned
box.  A trajectory stores every particle's sampled path on a common time axis
(the uniform grid plus all jump times) together with the ordered jump events.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

BIRTH, DEATH, MUTATION = "birth", "death", "mutation"
EVENT_KINDS = (BIRTH, DEATH, MUTATION)
BOUNDARIES = ("reflective", "periodic", "free")

# Grid points closer than this fraction of grid_dt to a jump time are dropped.
SNAP_TOL = 1e-9


def _frozen(a, dtype=float, ndim=None):
    a = np.array(a, dtype=dtype)
    if ndim is not None and a.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DomainBox:
    """Axis-aligned box Lambda with a boundary policy."""

    lower: np.ndarray
    upper: np.ndarray
    boundary: str = "reflective"

    def __post_init__(self):
        lo = _frozen(self.lower, ndim=1)
        hi = _frozen(self.upper, ndim=1)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape:
            raise ValueError("lower and upper must have the same dimension")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"unknown boundary {self.boundary!r}")
        if self.boundary != "free" and not np.all(lo < hi):
            raise ValueError("lower < upper required componentwise")

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def bounded(self) -> bool:
        return self.boundary != "free"

    @property
    def volume(self) -> float:
        if not self.bounded:
            return math.inf
        return float(np.prod(self.upper - self.lower))

    def contains(self, z, tol: float = 1e-9) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if not self.bounded:
            return np.ones(z.shape[:-1], dtype=bool)
        span = self.upper - self.lower
        return np.all((z >= self.lower - tol * span) & (z <= self.upper + tol * span), axis=-1)

    def apply(self, z: np.ndarray) -> np.ndarray:
        """Map positions back into the box (fold for reflective, wrap for periodic)."""
        if self.boundary == "free":
            return z
        lo, span = self.lower, self.upper - self.lower
        if self.boundary == "periodic":
            return lo + np.mod(z - lo, span)
        y = np.mod(z - lo, 2.0 * span)
        return lo + np.minimum(y, 2.0 * span - y)

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist(), "boundary": self.boundary}

    @classmethod
    def from_dict(cls, d: dict) -> "DomainBox":
        return cls(d["lower"], d["upper"], d.get("boundary", "reflective"))

    def __eq__(self, other):
        return (isinstance(other, DomainBox) and self.boundary == other.boundary
                and np.array_equal(self.lower, other.lower) and np.array_equal(self.upper, other.upper))

    def __hash__(self):
        return hash((self.boundary, tuple(self.lower), tuple(self.upper)))


@dataclass(frozen=True)
class Particle:
    id: int
    location: tuple
    label: int


class Configuration:
    """Finite unordered set of particles, stored as arrays sorted by id.

    ``anchors`` holds each particle's attractor for mean-reverting motion
    (its birth location); it defaults to the current location.
    """

    __slots__ = ("ids", "locations", "labels", "anchors")

    def __init__(self, ids, locations, labels, anchors=None, dim: Optional[int] = None):
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        n = ids.shape[0]
        if dim is None:
            dim = np.asarray(locations, dtype=float).reshape(n, -1).shape[1] if n else 0
        locations = np.asarray(locations, dtype=float).reshape(n, dim)
        labels = np.asarray(labels, dtype=np.int64).reshape(n)
        anchors = locations if anchors is None else np.asarray(anchors, dtype=float).reshape(n, dim)
        if len(np.unique(ids)) != n:
            raise ValueError("particle ids must be unique")
        if np.any(labels < 0):
            raise ValueError("labels must be non-negative")
        order = np.argsort(ids, kind="stable")
        for name, arr in (("ids", ids[order]), ("locations", locations[order]),
                          ("labels", labels[order]), ("anchors", anchors[order])):
            arr = np.array(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __setattr__(self, name, value):
        raise AttributeError("Configuration is immutable")

    @classmethod
    def empty(cls, dim: int) -> "Configuration":
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, dim)), np.zeros(0, dtype=np.int64), dim=dim)

    @classmethod
    def from_particles(cls, particles: Iterable[Particle], dim: int) -> "Configuration":
        ps = list(particles)
        return cls([p.id for p in ps], [p.location for p in ps], [p.label for p in ps], dim=dim)

    @property
    def n(self) -> int:
        return int(self.ids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.locations.shape[1])

    def __len__(self):
        return self.n

    @property
    def particles(self) -> tuple:
        return tuple(Particle(int(i), tuple(map(float, z)), int(m))
                     for i, z, m in zip(self.ids, self.locations, self.labels))

    def __eq__(self, other):
        return (isinstance(other, Configuration) and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.locations, other.locations))

    def __repr__(self):
        return f"Configuration(n={self.n}, ids={self.ids.tolist()}, labels={self.labels.tolist()})"


@dataclass(frozen=True, eq=False)
class JumpEvent:
    time: float
    kind: str
    particle_id: int
    location: Optional[tuple] = None  # birth only
    label: Optional[int] = None  # birth and death
    label_from: Optional[int] = None  # mutation only
    label_to: Optional[int] = None  # mutation only

    def field_errors(self) -> list:
        errs = []
        if self.kind not in EVENT_KINDS:
            return [f"unknown event kind {self.kind!r}"]
        has = {"location": self.location is not None, "label": self.label is not None,
               "label_from": self.label_from is not None, "label_to": self.label_to is not None}
        want = {BIRTH: {"location", "label"}, DEATH: {"label"},
                MUTATION: {"label_from", "label_to"}}[self.kind]
        for name, present in has.items():
            if present != (name in want):
                errs.append(f"{self.kind} event {'missing' if not present else 'has unexpected'} field {name}")
        if self.kind == MUTATION and self.label_from is not None and self.label_from == self.label_to:
            errs.append("mutation with label_from == label_to")
        return errs

    def __eq__(self, other):
        if not isinstance(other, JumpEvent):
            return NotImplemented
        loc_eq = ((self.location is None and other.location is None)
                  or (self.location is not None and other.location is not None
                      and tuple(self.location) == tuple(other.location)))
        return (self.time == other.time and self.kind == other.kind
                and self.particle_id == other.particle_id and loc_eq and self.label == other.label
                and self.label_from == other.label_from and self.label_to == other.label_to)


@dataclass(frozen=True, eq=False)
class Track:
    """Sampled path of one particle over its lifetime [times[0], times[-1]]."""

    id: int
    label_intervals: tuple  # ((t_start, t_end, label), ...), contiguous
    times: np.ndarray
    locations: np.ndarray
    anchor: Optional[np.ndarray] = None

    def __post_init__(self):
        times = _frozen(self.times, ndim=1)
        locs = np.array(self.locations, dtype=float).reshape(times.shape[0], -1)
        locs.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "locations", locs)
        object.__setattr__(self, "label_intervals",
                           tuple((float(a), float(b), int(m)) for a, b, m in self.label_intervals))
        anchor = locs[0] if self.anchor is None and len(locs) else self.anchor
        if anchor is not None:
            object.__setattr__(self, "anchor", _frozen(anchor, ndim=1))

    @property
    def start(self) -> float:
        return float(self.times[0])

    @property
    def end(self) -> float:
        return float(self.times[-1])

    def label_at(self, t: float) -> int:
        for a, b, m in self.label_intervals:
            if a <= t < b:
                return m
        return self.label_intervals[-1][2]

    def location_at(self, t: float) -> np.ndarray:
        return np.array([np.interp(t, self.times, self.locations[:, k])
                         for k in range(self.locations.shape[1])])

    def __eq__(self, other):
        return (isinstance(other, Track) and self.id == other.id
                and self.label_intervals == other.label_intervals
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.locations, other.locations)
                and np.array_equal(self.anchor, other.anchor))


@dataclass(frozen=True)
class Segment:
    """Inter-jump stretch [t0, t1] with a fixed set of alive particles."""

    t0: float
    t1: float
    times: np.ndarray  # (K,)
    ids: np.ndarray  # (n,)
    labels: np.ndarray  # (n,)
    anchors: np.ndarray  # (n, d)
    Z: np.ndarray  # (K, n, d)

    @property
    def n(self) -> int:
        return int(self.ids.shape[0])

    def config(self, k: int = 0) -> Configuration:
        return Configuration(self.ids, self.Z[k], self.labels, self.anchors, dim=self.Z.shape[2])


@dataclass(frozen=True, eq=False)
class Trajectory:
    horizon: float
    grid_dt: float
    tracks: tuple
    events: tuple
    domain: DomainBox
    label_names: tuple = ()
    model_fingerprint: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tracks", tuple(sorted(self.tracks, key=lambda tr: tr.id)))
        object.__setattr__(self, "events", tuple(self.events))
        object.__setattr__(self, "label_names", tuple(self.label_names))

    @property
    def dim(self) -> int:
        return self.domain.dim

    @cached_property
    def track_map(self) -> dict:
        return {tr.id: tr for tr in self.tracks}

    @cached_property
    def _born(self) -> set:
        return {e.particle_id for e in self.events if e.kind == BIRTH}

    @cached_property
    def _killed(self) -> set:
        return {e.particle_id for e in self.events if e.kind == DEATH}

    @property
    def initial_config(self) -> Configuration:
        return configuration_at(self, 0.0)

    def counts(self) -> dict:
        out = {k: 0 for k in EVENT_KINDS}
        for e in self.events:
            out[e.kind] += 1
        return out

    def final_config(self) -> Configuration:
        return configuration_at(self, self.horizon)

    @cached_property
    def segments(self) -> tuple:
        """Inter-jump segments; segment j ends at event j (0-based) when j < len(events)."""
        return _build_segments(self)

    def __eq__(self, other):
        return (isinstance(other, Trajectory) and self.horizon == other.horizon
                and self.grid_dt == other.grid_dt and self.domain == other.domain
                and self.label_names == other.label_names
                and self.model_fingerprint == other.model_fingerprint
                and self.tracks == other.tracks and self.events == other.events)


@dataclass
class ParameterVector:
    values: np.ndarray
    names: tuple
    bounds: tuple = None

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float).reshape(-1)
        self.names = tuple(self.names)
        if self.bounds is None:
            self.bounds = tuple((-math.inf, math.inf) for _ in self.names)
        self.bounds = tuple((-math.inf if lo is None else float(lo), math.inf if hi is None else float(hi))
                            for lo, hi in self.bounds)
        if len(set(self.names)) != len(self.names):
            raise ValueError("parameter names must be unique")
        if not (len(self.names) == len(self.values) == len(self.bounds)):
            raise ValueError("values, names and bounds must have equal length")
        for name, v, (lo, hi) in zip(self.names, self.values, self.bounds):
            if not lo <= v <= hi:
                raise ValueError(f"parameter {name}={v} outside bounds [{lo}, {hi}]")

    def __len__(self):
        return len(self.names)

    def as_dict(self) -> dict:
        return dict(zip(self.names, map(float, self.values)))

    def index(self, name: str) -> int:
        return self.names.index(name)

    def with_values(self, updates) -> "ParameterVector":
        vals = self.values.copy()
        for k, v in dict(updates).items():
            vals[self.index(k)] = v
        return ParameterVector(vals, self.names, self.bounds)

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.index(name)])


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------

def configuration_at(traj: Trajectory, t: float) -> Configuration:
    """Alive particles at time t (post-jump at event times), linearly interpolated."""
    if not (0.0 <= t <= traj.horizon):
        raise ValueError(f"t={t} outside [0, {traj.horizon}]")
    ids, locs, labels, anchors = [], [], [], []
    for tr in traj.tracks:
        if tr.start > t or t > tr.end:
            continue
        if t == tr.end and tr.id in traj._killed:
            continue
        ids.append(tr.id)
        locs.append(tr.location_at(t))
        labels.append(tr.label_at(t))
        anchors.append(tr.anchor)
    if not ids:
        return Configuration.empty(traj.dim)
    return Configuration(ids, locs, labels, anchors, dim=traj.dim)


def _pair_costs(x: Configuration, y: Configuration) -> np.ndarray:
    diff = x.locations[:, None, :] - y.locations[None, :, :]
    dist = np.minimum(np.sqrt(np.sum(diff * diff, axis=-1)), 1.0)
    return np.where(x.labels[:, None] == y.labels[None, :], dist, 1.0)


def d1_distance(x: Configuration, y: Configuration, method: str = "auto") -> float:
    """Optimal-matching distance between configurations, in [0, 1].

    Particle cost is the Euclidean distance capped at 1, and 1 for differing labels.
    ``method`` is "auto", "brute" (all injections) or "assignment" (Hungarian).
    """
    if x.n > y.n:
        x, y = y, x
    if y.n == 0:
        return 0.0
    if x.n == 0:
        return 1.0
    C = _pair_costs(x, y)
    if method == "auto":
        method = "brute" if y.n <= 8 else "assignment"
    if method == "brute":
        perms = np.array(list(itertools.permutations(range(y.n), x.n)))
        totals = C[np.arange(x.n)[None, :], perms].sum(axis=1)
        best = perms[int(np.argmin(totals))]
        cost = math.fsum(C[np.arange(x.n), best])
    elif method == "assignment":
        rows, cols = linear_sum_assignment(C)
        cost = math.fsum(C[rows, cols])
    else:
        raise ValueError(f"unknown method {method!r}")
    return (cost + (y.n - x.n)) / y.n


def _expected_times(start: float, end: float, dt: float, event_times: np.ndarray) -> np.ndarray:
    k0 = math.ceil(start / dt - SNAP_TOL)
    k1 = math.floor(end / dt + SNAP_TOL)
    grid = np.arange(k0, k1 + 1) * dt
    ev = event_times[(event_times >= start) & (event_times <= end)]
    fixed = np.unique(np.concatenate([[start, end], ev]))
    if grid.size and fixed.size:
        near = np.min(np.abs(grid[:, None] - fixed[None, :]), axis=1) <= SNAP_TOL * dt
        grid = grid[~near]
    grid = grid[(grid > start) & (grid < end)]
    return np.unique(np.concatenate([fixed, grid]))


def time_axis(start: float, end: float, dt: float, event_times=()) -> np.ndarray:
    """Sample times on [start, end]: grid multiples of dt plus the given jump times."""
    return _expected_times(start, end, dt, np.asarray(event_times, dtype=float))


def validate_trajectory(traj: Trajectory) -> list:
    """Return a list of human-readable invariant violations (empty when valid)."""
    report = []
    T, dt = traj.horizon, traj.grid_dt
    if not dt > 0:
        report.append(f"grid_dt must be positive, got {dt}")
        return report
    tracks = traj.track_map
    if len(tracks) != len(traj.tracks):
        report.append("duplicate track ids")
    etimes = np.array([e.time for e in traj.events], dtype=float)

    for i, e in enumerate(traj.events):
        for msg in e.field_errors():
            report.append(f"event {i} (t={e.time}): {msg}")
        if not (0.0 < e.time <= T):
            report.append(f"event {i} (t={e.time}): time outside (0, T]")
        if i and not e.time > traj.events[i - 1].time:
            report.append(f"event {i} (t={e.time}): non-increasing event times")
        if e.particle_id not in tracks:
            report.append(f"event {i} (t={e.time}): references unknown track id {e.particle_id}")

    by_id: dict = {}
    for i, e in enumerate(traj.events):
        by_id.setdefault(e.particle_id, []).append((i, e))

    n_labels = len(traj.label_names) if traj.label_names else None
    for tr in traj.tracks:
        if len(tr.times) == 0:
            report.append(f"track {tr.id}: no samples")
            continue
        if np.any(np.diff(tr.times) <= 0):
            report.append(f"track {tr.id}: sample times not strictly increasing")
        if tr.locations.shape[1] != traj.dim:
            report.append(f"track {tr.id}: location dimension {tr.locations.shape[1]} != {traj.dim}")
            continue
        if not np.all(traj.domain.contains(tr.locations)):
            report.append(f"track {tr.id}: samples outside the domain box")
        if tr.start < 0 or tr.end > T + SNAP_TOL * dt:
            report.append(f"track {tr.id}: lifetime [{tr.start}, {tr.end}] outside [0, T]")
        evs = by_id.get(tr.id, [])
        births = [e for _, e in evs if e.kind == BIRTH]
        deaths = [e for _, e in evs if e.kind == DEATH]
        muts = [(i, e) for i, e in evs if e.kind == MUTATION]
        if births:
            if len(births) > 1 or births[0].time != tr.start:
                report.append(f"track {tr.id}: birth event does not match track start")
            elif not np.allclose(births[0].location, tr.locations[0], rtol=0, atol=1e-12):
                report.append(f"track {tr.id}: birth location differs from first sample")
        elif tr.start != 0.0:
            report.append(f"track {tr.id}: starts at {tr.start} without a birth event")
        if deaths:
            if len(deaths) > 1 or deaths[0].time != tr.end:
                report.append(f"track {tr.id}: death event does not match track end")
        elif abs(tr.end - T) > SNAP_TOL * dt:
            report.append(f"track {tr.id}: ends at {tr.end} before T without a death event")

        iv = tr.label_intervals
        if not iv:
            report.append(f"track {tr.id}: no label intervals")
            continue
        if iv[0][0] != tr.start or iv[-1][1] != tr.end:
            report.append(f"track {tr.id}: label intervals do not span the lifetime")
        for (a0, b0, m0), (a1, b1, m1) in zip(iv[:-1], iv[1:]):
            if b0 != a1:
                report.append(f"track {tr.id}: label intervals not contiguous at t={b0}")
        if n_labels is not None and any(not 0 <= m < n_labels for _, _, m in iv):
            report.append(f"track {tr.id}: label index outside the alphabet")
        changes = [(a1, m0, m1) for (_, _, m0), (a1, _, m1) in zip(iv[:-1], iv[1:])]
        mut_times = {e.time: (i, e) for i, e in muts}
        for t, m0, m1 in changes:
            hit = mut_times.get(t)
            if hit is None:
                report.append(f"track {tr.id}: label changes at t={t} without a mutation event")
        for i, e in muts:
            if not (tr.start < e.time <= tr.end):
                report.append(f"event {i} (t={e.time}): mutation outside lifetime of track {tr.id}")
                continue
            before = tr.label_at(np.nextafter(e.time, -np.inf))
            after = tr.label_at(e.time)
            if (before, after) != (e.label_from, e.label_to):
                report.append(f"event {i} (t={e.time}): mutation {e.label_from}->{e.label_to} "
                              f"disagrees with label_intervals ({before}->{after}) of track {tr.id}")
        for _, e in evs:
            if e.kind == BIRTH and e.label is not None and e.label != iv[0][2]:
                report.append(f"track {tr.id}: birth label {e.label} != first label {iv[0][2]}")
            if e.kind == DEATH and e.label is not None and e.label != iv[-1][2]:
                report.append(f"track {tr.id}: death label {e.label} != last label {iv[-1][2]}")

        expected = _expected_times(tr.start, tr.end, dt, etimes)
        if len(expected) != len(tr.times) or not np.allclose(expected, tr.times, rtol=0, atol=SNAP_TOL * dt):
            report.append(f"track {tr.id}: samples do not cover every grid point and event time "
                          f"of its lifetime ({len(tr.times)} samples, expected {len(expected)})")

    if not report:
        try:
            traj.segments
        except ValueError as exc:
            report.append(str(exc))
    return report


def _build_segments(traj: Trajectory) -> tuple:
    bounds = [0.0] + [e.time for e in traj.events] + [traj.horizon]
    d = traj.dim
    out = []
    for j in range(len(bounds) - 1):
        a, b = bounds[j], bounds[j + 1]
        alive = [tr for tr in traj.tracks
                 if tr.start <= a < tr.end or (tr.start <= a == tr.end == b and tr.id not in traj._killed)]
        if not alive:
            times = np.array([a, b]) if b > a else np.array([a])
            out.append(Segment(a, b, times, np.zeros(0, np.int64), np.zeros(0, np.int64),
                               np.zeros((0, d)), np.zeros((len(times), 0, d))))
            continue
        cols, times = [], None
        for tr in alive:
            i0 = int(np.searchsorted(tr.times, a, side="left"))
            i1 = int(np.searchsorted(tr.times, b, side="right"))
            ts = tr.times[i0:i1]
            if len(ts) == 0 or ts[0] != a or ts[-1] != b:
                raise ValueError(f"track {tr.id}: missing samples at segment bounds [{a}, {b}]")
            if times is None:
                times = ts
            elif len(ts) != len(times) or np.any(np.abs(ts - times) > SNAP_TOL * traj.grid_dt):
                raise ValueError(f"track {tr.id}: sample times differ from other particles on [{a}, {b}]")
            cols.append(tr.locations[i0:i1])
        labels = np.array([tr.label_at(a) for tr in alive], dtype=np.int64)
        ids = np.array([tr.id for tr in alive], dtype=np.int64)
        anchors = np.array([tr.anchor for tr in alive], dtype=float)
        out.append(Segment(a, b, np.array(times), ids, labels, anchors, np.stack(cols, axis=1)))
    return tuple(out)
