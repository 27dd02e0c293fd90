import copy

import numpy as np
import pytest

from bdmm.core import DomainBox, JumpEvent, Track, Trajectory, time_axis
from bdmm.model import model_from_config

ACCEPTANCE_LINES = []


def base_config(**overrides) -> dict:
    """Small two-label model on a 10x10 reflective box."""
    cfg = {
        "labels": ["a", "b"],
        "domain": {"lower": [0.0, 0.0], "upper": [10.0, 10.0], "boundary": "reflective"},
        "params": {
            "beta": {"value": 1.0, "bounds": [0.0, None]},
            "delta": {"value": 0.1, "bounds": [0.0, None]},
            "tau": {"value": 0.2, "bounds": [0.0, None]},
        },
        "n_max": 100,
        "intensities": {
            "beta": {"family": "constant", "rate": "beta"},
            "delta": {"family": "per_capita", "rate": "delta"},
            "tau": {"family": "constant", "rate": "tau"},
        },
        "kernels": {
            "birth": {"family": "uniform"},
            "death": {"family": "uniform"},
            "mutation": {"family": "transition_matrix", "matrix": [[0, 1], [1, 0]]},
        },
        "move": {"family": "independent_per_label",
                 "regimes": [{"type": "brownian", "sigma": 0.5}, {"type": "brownian", "sigma": 0.5}]},
    }
    cfg = copy.deepcopy(cfg)
    for k, v in overrides.items():
        cfg[k] = v
    return cfg


def make_model(**overrides):
    return model_from_config(base_config(**overrides))


def make_track(pid, start, end, dt, event_times, loc, label_intervals, anchor=None):
    """Track sampled on the common time axis; ``loc`` maps times (K,) to locations (K, d)."""
    t = time_axis(start, end, dt, event_times)
    return Track(pid, tuple(label_intervals), t, np.asarray(loc(t), dtype=float), anchor)


def constant_loc(z):
    z = np.asarray(z, dtype=float)
    return lambda t: np.tile(z, (len(t), 1))


def hand_trajectory(horizon, dt, specs, events, domain=None):
    """specs: list of (id, start, end, loc_fn, label_intervals)."""
    domain = domain or DomainBox([0.0, 0.0], [10.0, 10.0], "reflective")
    et = [e.time for e in events]
    tracks = [make_track(pid, a, b, dt, et, loc, li) for pid, a, b, loc, li in specs]
    return Trajectory(horizon, dt, tuple(tracks), tuple(events), domain)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


__all__ = ["base_config", "make_model", "make_track", "constant_loc", "hand_trajectory", "JumpEvent"]
