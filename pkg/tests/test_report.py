import json

import numpy as np
import pytest

from symcon.model import loads_model
from symcon.report import (
    plot_log_series, plot_time_series, write_json_report, write_trajectory_csv,
)
from symcon.sim import SolverConfig, integrate

DECAY2 = """
system pair
states
  a b
dynamics
  d/dt a = -a
  d/dt b = -2*b
"""


@pytest.fixture()
def traj():
    m = loads_model(DECAY2)
    return integrate(m, np.array([1.0, -1.0]),
                     SolverConfig(method="rk4-fixed", horizon=2.0, dt=0.1))


def test_csv_header_and_roundtrip(tmp_path, traj):
    path = write_trajectory_csv(traj, tmp_path / "out.csv")
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "t,a,b"
    assert len(lines) == 1 + len(traj.t)
    # 17 significant digits round-trip exactly
    parsed = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    assert np.array_equal(parsed[:, 0], traj.t)
    assert np.array_equal(parsed[:, 1:], traj.x)


def test_json_report_is_deterministic_and_typed(tmp_path):
    report = {"b": np.float64(1.5), "a": np.arange(3), "flag": np.bool_(True),
              "n": np.int64(7)}
    p1 = write_json_report(report, tmp_path / "r1.json")
    p2 = write_json_report(report, tmp_path / "r2.json")
    assert p1.read_bytes() == p2.read_bytes()
    data = json.loads(p1.read_text())
    assert data == {"a": [0, 1, 2], "b": 1.5, "flag": True, "n": 7}
    # keys are sorted in the serialized bytes
    text = p1.read_text()
    assert text.index('"a"') < text.index('"b"') < text.index('"flag"')


def test_plots_are_svg_and_reproducible(tmp_path, traj):
    p1 = plot_time_series(traj, tmp_path / "ts1.svg", title="pair")
    p2 = plot_time_series(traj, tmp_path / "ts2.svg", title="pair")
    assert p1.read_bytes().startswith(b"<?xml")
    assert p1.read_bytes() == p2.read_bytes()
    t = np.linspace(0.0, 5.0, 50)
    y = np.exp(-t)
    p3 = plot_log_series(t, y, tmp_path / "log.svg", ylabel="gap")
    assert p3.exists() and p3.stat().st_size > 0


def test_log_plot_floors_nonpositive_values(tmp_path):
    t = np.linspace(0.0, 1.0, 10)
    y = np.zeros(10)  # would break a log axis without the floor
    p = plot_log_series(t, y, tmp_path / "zeros.svg")
    assert p.exists()
