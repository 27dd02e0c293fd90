import csv
import json
import math

import numpy as np
import pandas as pd
import pytest

from bdmm.core import Configuration, validate_trajectory
from bdmm.io import (IngestError, TrajectoryFormatError, TrajectoryValidationError, export_csv,
                     ingest_tracks_csv, read_trajectory, write_trajectory)
from bdmm.likelihood import loglik_total
from bdmm.model import model_from_config
from bdmm.simulate import SimOptions, simulate

from conftest import make_model


def sim_traj(seed, T=5.0):
    model = make_model()
    x0 = Configuration([0, 1], [[1.0, 1.0], [5.0, 5.0]], [0, 1])
    return simulate(model, {"beta": 2.0}, x0, SimOptions(horizon=T, grid_dt=0.1, seed=seed))


def test_round_trip_many(tmp_path):
    for seed in range(100):
        traj = sim_traj(seed)
        p = tmp_path / f"t{seed}.jsonl"
        write_trajectory(traj, p)
        back = read_trajectory(p)
        assert back == traj
        assert back.model_fingerprint == traj.model_fingerprint
        assert back.label_names == traj.label_names


def test_header_only(tmp_path):
    p = tmp_path / "h.jsonl"
    p.write_text(json.dumps({"type": "header", "schema_version": 1, "grid_dt": 0.1, "horizon": 7.5,
                             "domain": {"lower": [0, 0], "upper": [1, 1], "boundary": "reflective"}}) + "\n")
    traj = read_trajectory(p)
    assert traj.horizon == 7.5 and traj.tracks == () and traj.events == ()


def test_unknown_track_id(tmp_path):
    traj = sim_traj(1)
    p = tmp_path / "c.jsonl"
    write_trajectory(traj, p)
    with open(p, "a") as fh:
        fh.write(json.dumps({"type": "event", "t": 4.95, "kind": "death", "id": 987, "label": 0}) + "\n")
    with pytest.raises(TrajectoryValidationError) as info:
        read_trajectory(p)
    assert "987" in str(info.value)
    assert read_trajectory(p, validate=False).events[-1].particle_id == 987


def test_malformed_line_and_version(tmp_path):
    traj = sim_traj(2)
    p = tmp_path / "m.jsonl"
    write_trajectory(traj, p)
    lines = p.read_text().splitlines()
    lines.insert(2, "{not json")
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(TrajectoryFormatError, match="line 3"):
        read_trajectory(p)
    header = json.loads(lines[0])
    header["schema_version"] = 99
    p.write_text(json.dumps(header) + "\n")
    with pytest.raises(TrajectoryFormatError, match="schema_version"):
        read_trajectory(p)
    p.write_text("")
    with pytest.raises(TrajectoryFormatError):
        read_trajectory(p)


def write_tracks(path, rows):
    pd.DataFrame(rows, columns=["frame", "track_id", "x", "y", "label"]).to_csv(path, index=False)


def test_ingest_single_immortal_track(tmp_path):
    p = tmp_path / "a.csv"
    write_tracks(p, [(f, 1, 1.0 + 0.1 * f, 2.0, "A") for f in range(21)])
    traj = ingest_tracks_csv(p, dt_frame=0.5)
    assert traj.events == () and len(traj.tracks) == 1
    assert traj.horizon == 10.0 and traj.tracks[0].end == 10.0
    assert traj.label_names == ("A",)


def test_ingest_birth_and_death_times(tmp_path):
    p = tmp_path / "b.csv"
    rows = [(f, 1, 3.0, 3.0, "A") for f in range(21)]
    rows += [(f, 2, 5.0 + f, 4.0, "B") for f in range(5, 10)]
    write_tracks(p, rows)
    dt = 0.25
    traj = ingest_tracks_csv(p, dt_frame=dt)
    assert [(e.kind, e.particle_id) for e in traj.events] == [("birth", 2), ("death", 2)]
    assert traj.events[0].time == 5 * dt and traj.events[1].time == 10 * dt
    tr = traj.track_map[2]
    assert tr.locations[-1, 0] == 14.0  # carried forward from frame 9
    assert validate_trajectory(traj) == []


def test_ingest_mutation(tmp_path):
    p = tmp_path / "c.csv"
    rows = [(f, 7, 1.0, 1.0, "A" if f < 4 else "B") for f in range(10)]
    write_tracks(p, rows)
    traj = ingest_tracks_csv(p, dt_frame=1.0, label_names=["A", "B"])
    (e,) = traj.events
    assert e.kind == "mutation" and e.time == 4.0 and (e.label_from, e.label_to) == (0, 1)


def test_ingest_same_frame_events_are_ordered(tmp_path):
    p = tmp_path / "d.csv"
    rows = [(f, 1, 1.0, 1.0, "A") for f in range(10)]
    rows += [(f, 2, 2.0, 2.0, "A") for f in range(0, 5)]
    rows += [(f, 3, 3.0, 3.0, "A") for f in range(5, 10)]
    write_tracks(p, rows)
    traj = ingest_tracks_csv(p, dt_frame=1.0)
    kinds = [e.kind for e in traj.events]
    assert kinds == ["death", "birth"]
    assert traj.events[0].time < traj.events[1].time == 5.0


def test_ingest_errors(tmp_path):
    p = tmp_path / "e.csv"
    write_tracks(p, [(0, 1, 1.0, 1.0, "A"), (0, 1, 1.0, 1.0, "A"), (1, 1, 1.0, 1.0, "A")])
    with pytest.raises(IngestError, match="duplicate"):
        ingest_tracks_csv(p, dt_frame=1.0)
    rows = [(f, 1, 1.0, 1.0, "A") for f in range(6)] + [(0, 2, 2.0, 2.0, "A"), (3, 2, 5.0, 2.0, "A")]
    write_tracks(p, rows)
    with pytest.raises(IngestError, match="gap"):
        ingest_tracks_csv(p, dt_frame=1.0)
    traj = ingest_tracks_csv(p, dt_frame=1.0, bridge_gaps=True)
    assert traj.track_map[2].location_at(1.0)[0] == pytest.approx(3.0)
    with pytest.raises(IngestError):
        ingest_tracks_csv(p, dt_frame=0.0)


def test_ingest_idempotent_and_finite_builtin_loglik(tmp_path):
    from bdmm.cli import load_config
    model = model_from_config(load_config("builtin"))
    names = list(model.labels)
    rng = np.random.default_rng(0)
    rows = []
    for tid in range(12):
        f0 = int(rng.integers(0, 10))
        f1 = int(rng.integers(f0 + 3, 40))
        lab = int(rng.integers(0, 6))
        z = rng.uniform(20, 200, 2)
        for f in range(f0, f1 + 1):
            if f == (f0 + f1) // 2 and lab % 3 == 0:
                lab += 1  # brownian -> ou mutation, allowed by the builtin matrix
            z = z + rng.normal(0, 1.0, 2)
            rows.append((f, tid, z[0], z[1], names[lab]))
    p = tmp_path / "f.csv"
    write_tracks(p, rows)
    traj = ingest_tracks_csv(p, dt_frame=0.1, domain=model.domain, label_names=names)
    assert any(e.kind == "mutation" for e in traj.events)
    out = tmp_path / "f.jsonl"
    write_trajectory(traj, out)
    assert read_trajectory(out) == traj
    for p_, ls in ((0.2, 1.34), (0.5, 0.5), (0.05, 2.0)):
        bd = loglik_total(traj, model, dict(model.theta(), p=p_, logsigma=ls))
        assert math.isfinite(bd.total), bd.diagnostics


def read_csv_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_export_csv(tmp_path):
    p = tmp_path / "x.csv"
    export_csv([], p, columns=["a", "b"])
    assert read_csv_rows(p) == [["a", "b"]]
    rows = [(a, b, a * b) for a in (0.1, 0.2, 0.3) for b in (1.0, 2.0, 3.0)]
    export_csv(rows, p, columns=["p", "logsigma", "loglik"])
    back = read_csv_rows(p)
    assert len(back) == 10 and float(back[1][2]) == 0.1 * 1.0
    export_csv([{"name": 'a,"b"', "v": 1}], p)
    assert read_csv_rows(p)[1] == ['a,"b"', "1"]
    from bdmm.inference import Ellipsoid
    pts = Ellipsoid(np.zeros(2), np.eye(2), 1.0).boundary()
    export_csv(pts.tolist(), p, columns=["x", "y"])
    back = read_csv_rows(p)
    assert len(back) == 362 and back[1] == back[-1]
    with pytest.raises(OSError):
        export_csv([], tmp_path / "missing" / "x.csv", columns=["a"])
