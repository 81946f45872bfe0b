"""Deterministic run artifacts: trajectory CSVs, JSON reports, SVG plots.

Everything written here is byte-reproducible for a fixed (scenario, seed):
JSON keys are sorted, floats are emitted at full round-trip precision, and
matplotlib is pinned to the SVG backend with hashed-salt metadata disabled.
"""

from __future__ import annotations

import json
import pathlib

import numpy as np

__all__ = ["write_trajectory_csv", "write_json_report", "plot_time_series",
           "plot_log_series"]


def _fmt(v):
    return f"{float(v):.17g}"


def write_trajectory_csv(traj, path):
    """``t, x_1, ..., x_n`` at 17 significant digits."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("t," + ",".join(traj.states) + "\n")
        for t, row in zip(traj.t, traj.x):
            fh.write(_fmt(t) + "," + ",".join(_fmt(v) for v in row) + "\n")
    return path


class _Encoder(json.JSONEncoder):
    def default(self, o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating,)):
            return float(o)
        if isinstance(o, (np.integer,)):
            return int(o)
        if isinstance(o, (np.bool_,)):
            return bool(o)
        return super().default(o)


def write_json_report(report, path):
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True, cls=_Encoder)
                    + "\n")
    return path


def _figure():
    import matplotlib
    matplotlib.use("svg", force=False)
    import matplotlib.pyplot as plt
    # fixed hash salt so element ids (and hence the SVG bytes) are reproducible
    plt.rcParams["svg.hashsalt"] = "symcon"
    return plt


def _save(fig, path):
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    import matplotlib.pyplot as plt
    plt.close(fig)
    return path


def plot_time_series(traj, path, title="", components=None):
    """Line plot of selected (default: all) trajectory components."""
    plt = _figure()
    fig, ax = plt.subplots(figsize=(7, 4))
    names = components if components is not None else traj.states
    for name in names:
        ax.plot(traj.t, traj.component(name), lw=1.0, label=name)
    ax.set_xlabel("t")
    ax.set_ylabel("state")
    if title:
        ax.set_title(title)
    if len(names) <= 16:
        ax.legend(loc="best", fontsize=7, ncol=2)
    fig.tight_layout()
    return _save(fig, path)


def plot_log_series(t, y, path, title="", ylabel="error", floor=1e-16):
    """Semilog plot (e.g. sync error decay); values are floored for display."""
    plt = _figure()
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.semilogy(np.asarray(t), np.maximum(np.asarray(y), floor), lw=1.2)
    ax.set_xlabel("t")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)
