"""Trajectory files (JSON Lines), tracked-particle CSV ingestion and CSV export."""
from __future__ import annotations

import csv
import json
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .core import (BIRTH, DEATH, MUTATION, DomainBox, JumpEvent, Track, Trajectory,
                   time_axis, validate_trajectory)

SCHEMA_VERSION = 1


class TrajectoryFormatError(ValueError):
    """Malformed or unsupported trajectory file."""


class TrajectoryValidationError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid trajectory:\n  " + "\n  ".join(self.problems))


class IngestError(ValueError):
    pass


# --------------------------------------------------------------------------
# JSON Lines trajectory files
# --------------------------------------------------------------------------

def _event_record(e: JumpEvent) -> dict:
    rec = {"type": "event", "t": e.time, "kind": e.kind, "id": e.particle_id}
    if e.location is not None:
        rec["location"] = list(e.location)
    for k in ("label", "label_from", "label_to"):
        v = getattr(e, k)
        if v is not None:
            rec[k] = v
    return rec


def write_trajectory(traj: Trajectory, path) -> None:
    """Write a trajectory; floats are stored with full round-trip precision."""
    header = {"type": "header", "schema_version": SCHEMA_VERSION, "domain": traj.domain.to_dict(),
              "label_names": list(traj.label_names), "grid_dt": traj.grid_dt,
              "horizon": traj.horizon, "model_fingerprint": traj.model_fingerprint}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for tr in traj.tracks:
            rec = {"type": "track", "id": tr.id,
                   "labels": [list(iv) for iv in tr.label_intervals],
                   "anchor": None if tr.anchor is None else tr.anchor.tolist(),
                   "samples": [[t, *z] for t, z in zip(tr.times.tolist(), tr.locations.tolist())]}
            fh.write(json.dumps(rec) + "\n")
        for e in traj.events:
            fh.write(json.dumps(_event_record(e)) + "\n")


def _parse_track(rec, dim):
    samples = np.asarray(rec["samples"], dtype=float).reshape(-1, dim + 1)
    return Track(int(rec["id"]), tuple(tuple(iv) for iv in rec["labels"]), samples[:, 0], samples[:, 1:],
                 None if rec.get("anchor") is None else np.asarray(rec["anchor"], dtype=float))


def _parse_event(rec):
    loc = rec.get("location")
    return JumpEvent(float(rec["t"]), rec["kind"], int(rec["id"]),
                     location=None if loc is None else tuple(float(x) for x in loc),
                     label=rec.get("label"), label_from=rec.get("label_from"), label_to=rec.get("label_to"))


def read_trajectory(path, validate: bool = True) -> Trajectory:
    """Read a trajectory file; raises TrajectoryFormatError / TrajectoryValidationError."""
    tracks, events, header = [], [], None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                kind = rec.get("type")
                if lineno == 1 or header is None:
                    if kind != "header":
                        raise TrajectoryFormatError(f"line {lineno}: first record must be the header")
                    if rec.get("schema_version") != SCHEMA_VERSION:
                        raise TrajectoryFormatError(
                            f"line {lineno}: unsupported schema_version {rec.get('schema_version')!r} "
                            f"(expected {SCHEMA_VERSION})")
                    header = rec
                    domain = DomainBox.from_dict(rec["domain"])
                elif kind == "track":
                    tracks.append(_parse_track(rec, domain.dim))
                elif kind == "event":
                    events.append(_parse_event(rec))
                else:
                    raise TrajectoryFormatError(f"line {lineno}: unknown record type {kind!r}")
            except TrajectoryFormatError:
                raise
            except (ValueError, KeyError, TypeError) as exc:
                raise TrajectoryFormatError(f"line {lineno}: {type(exc).__name__}: {exc}") from None
    if header is None:
        raise TrajectoryFormatError("empty file: missing header")
    traj = Trajectory(float(header["horizon"]), float(header["grid_dt"]), tuple(tracks), tuple(events),
                      domain, tuple(header.get("label_names", ())), header.get("model_fingerprint", ""))
    if validate:
        problems = validate_trajectory(traj)
        if problems:
            raise TrajectoryValidationError(problems)
    return traj


# --------------------------------------------------------------------------
# CSV ingestion
# --------------------------------------------------------------------------

# events sharing a frame are spread backwards by this fraction of dt_frame
JITTER = 1e-6
_ORDER = {DEATH: 0, MUTATION: 1, BIRTH: 2}


def ingest_tracks_csv(path, dt_frame: float, domain: Optional[DomainBox] = None,
                      label_names: Optional[Sequence[str]] = None,
                      label_map: Optional[Mapping] = None,
                      coords: Sequence[str] = ("x", "y"),
                      columns: Optional[Mapping[str, str]] = None,
                      bridge_gaps: bool = False) -> Trajectory:
    """Turn a table of tracked particles into a Trajectory.

    Expected columns: ``frame`` (integer), ``track_id``, the coordinate
    columns, and ``label``.  ``columns`` renames input columns to these.
    Time is (frame - first frame) * dt_frame.  Tracks present in the first
    frame form the initial configuration; later first appearances are births.
    A track that ends before the last frame dies one frame after its last
    observation; label changes are mutations.  Several events in one frame
    are spread over a few millionths of a frame (deaths, then mutations, then
    births, each by id) so that event times are strictly increasing.
    """
    if not dt_frame > 0:
        raise IngestError("dt_frame must be positive")
    df = pd.read_csv(path)
    if columns:
        df = df.rename(columns=dict(columns))
    needed = ["frame", "track_id", "label", *coords]
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise IngestError(f"missing columns {missing}")
    if df[needed].isna().any().any():
        raise IngestError("missing values in required columns")
    if not np.all(np.equal(np.mod(df["frame"], 1), 0)):
        raise IngestError("frame must be integer")
    df = df.assign(frame=df["frame"].astype(np.int64))
    dup = df.duplicated(["frame", "track_id"])
    if dup.any():
        row = df[dup].iloc[0]
        raise IngestError(f"duplicate row for frame {row['frame']}, track {row['track_id']}")

    # labels
    raw = df["label"]
    if label_map is not None:
        raw = raw.map(lambda v: label_map.get(v, label_map.get(str(v), v)))
    if label_names is None:
        label_names = [str(v) for v in sorted(raw.unique(), key=lambda v: (str(type(v)), v))]
    label_names = [str(n) for n in label_names]
    index = {n: i for i, n in enumerate(label_names)}

    def lab(v):
        if isinstance(v, (int, np.integer)) and str(v) not in index:
            if 0 <= int(v) < len(label_names):
                return int(v)
        if str(v) in index:
            return index[str(v)]
        raise IngestError(f"unknown label {v!r}")

    df = df.assign(_lab=[lab(v) for v in raw])

    F0, F1 = int(df["frame"].min()), int(df["frame"].max())
    T = (F1 - F0) * dt_frame
    if T <= 0:
        raise IngestError("need at least two frames")
    if domain is None:
        xy = df[list(coords)].to_numpy(float)
        lo, hi = np.floor(xy.min(axis=0)), np.ceil(xy.max(axis=0))
        hi = np.where(hi > lo, hi, lo + 1.0)
        domain = DomainBox(lo, hi, "reflective")

    # raw events per frame
    per_track = {}
    pending = []  # (frame, kind, id, payload)
    for tid, g in df.sort_values("frame").groupby("track_id", sort=True):
        try:
            pid = int(tid)
        except (TypeError, ValueError):
            raise IngestError(f"track_id must be integer, got {tid!r}") from None
        frames = g["frame"].to_numpy()
        if np.any(np.diff(frames) != 1) and not bridge_gaps:
            gap = int(frames[np.flatnonzero(np.diff(frames) != 1)[0]])
            raise IngestError(f"track {pid} has a gap after frame {gap} (set bridge_gaps to interpolate)")
        locs = g[list(coords)].to_numpy(float)
        labs = g["_lab"].to_numpy()
        per_track[pid] = (frames, locs, labs)
        if frames[0] > F0:
            pending.append((int(frames[0]), BIRTH, pid, (tuple(map(float, locs[0])), int(labs[0]))))
        for k in np.flatnonzero(labs[1:] != labs[:-1]) + 1:
            pending.append((int(frames[k]), MUTATION, pid, (int(labs[k - 1]), int(labs[k]))))
        if frames[-1] < F1:
            pending.append((int(frames[-1]) + 1, DEATH, pid, int(labs[-1])))

    pending.sort(key=lambda p: (p[0], _ORDER[p[1]], p[2]))
    events, ev_time = [], {}
    i = 0
    while i < len(pending):
        j = i
        while j < len(pending) and pending[j][0] == pending[i][0]:
            j += 1
        K = j - i
        for k in range(i, j):
            f, kind, pid, payload = pending[k]
            t = (f - F0) * dt_frame - (K - 1 - (k - i)) * JITTER * dt_frame
            ev_time[(kind, pid, f)] = t
            if kind == BIRTH:
                events.append(JumpEvent(t, BIRTH, pid, location=payload[0], label=payload[1]))
            elif kind == DEATH:
                events.append(JumpEvent(t, DEATH, pid, label=payload))
            else:
                events.append(JumpEvent(t, MUTATION, pid, label_from=payload[0], label_to=payload[1]))
        i = j
    etimes = np.array([e.time for e in events])

    tracks = []
    for pid, (frames, locs, labs) in per_track.items():
        tf = (frames - F0) * dt_frame
        start = ev_time.get((BIRTH, pid, int(frames[0])), 0.0)
        end = ev_time.get((DEATH, pid, int(frames[-1]) + 1), T)
        # the birth sample sits at the (possibly jittered) birth time
        tf = tf.copy()
        tf[0] = start
        times = time_axis(start, end, dt_frame, etimes)
        Z = np.stack([np.interp(times, tf, locs[:, k]) for k in range(locs.shape[1])], axis=1)
        cuts = [start]
        intervals = []
        cur = int(labs[0])
        for k in np.flatnonzero(labs[1:] != labs[:-1]) + 1:
            t = ev_time[(MUTATION, pid, int(frames[k]))]
            intervals.append((cuts[-1], t, cur))
            cuts.append(t)
            cur = int(labs[k])
        intervals.append((cuts[-1], end, cur))
        tracks.append(Track(pid, tuple(intervals), times, Z, Z[0]))

    traj = Trajectory(T, dt_frame, tuple(tracks), tuple(events), domain, tuple(label_names))
    problems = validate_trajectory(traj)
    if problems:
        raise IngestError("ingested trajectory is inconsistent:\n  " + "\n  ".join(problems))
    return traj


# --------------------------------------------------------------------------
# CSV export
# --------------------------------------------------------------------------

def export_csv(table, path, columns: Optional[Sequence[str]] = None) -> None:
    """Write a table with a header row (RFC 4180 quoting, CRLF line ends).

    ``table`` is a DataFrame, a list of dicts, or a list of rows (then
    ``columns`` is required).
    """
    if isinstance(table, pd.DataFrame):
        columns = list(table.columns) if columns is None else list(columns)
        rows = table[columns].itertuples(index=False, name=None)
    else:
        table = list(table)
        if table and isinstance(table[0], Mapping):
            columns = list(table[0].keys()) if columns is None else list(columns)
            rows = ([r.get(c, "") for c in columns] for r in table)
        else:
            if columns is None:
                raise ValueError("columns are required for a list of rows")
            rows = table
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (bool, np.bool_)):
        return int(bool(v))
    return v
