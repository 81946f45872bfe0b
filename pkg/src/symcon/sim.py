"""Trajectory integration (ODE and delayed), signal plumbing, and the
synchronization / periodicity / input-scaling metrics computed on
trajectories.

Two integrators are provided: an adaptive RK45 (embedded error control,
dense output) for smooth ODE work, and a fixed-step classical RK4 whose
cubic-Hermite dense output doubles as the history buffer for the
method-of-steps delay integrator.
"""

from __future__ import annotations

import bisect
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from . import expr as ex
from . import model as md
from .errors import SimulationError

__all__ = [
    "Trajectory", "SolverConfig", "DelayBuffer", "integrate", "integrate_dde",
    "sync_error", "periodicity_check", "fcd_experiment", "convergence_rate",
]


def thread_count():
    """Worker pool width for independent trajectories (SYMCON_THREADS)."""
    raw = os.environ.get("SYMCON_THREADS", "").strip()
    if raw:
        try:
            k = int(raw)
        except ValueError:
            raise SimulationError(f"SYMCON_THREADS must be an integer, got '{raw}'")
        if k < 1:
            raise SimulationError("SYMCON_THREADS must be >= 1")
        return k
    return min(4, os.cpu_count() or 1)


def parallel_map(fns):
    """Evaluate independent thunks concurrently, preserving order."""
    fns = list(fns)
    if len(fns) <= 1 or thread_count() == 1:
        return [fn() for fn in fns]
    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        futures = [pool.submit(fn) for fn in fns]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# dense output
# ---------------------------------------------------------------------------

class _HermiteDense:
    """Piecewise-cubic Hermite interpolant from grid states and slopes."""

    def __init__(self, t, x, f):
        self.t = np.asarray(t, dtype=float)
        self.x = np.asarray(x, dtype=float)
        self.f = np.asarray(f, dtype=float)

    def _point(self, tq):
        t = self.t
        if tq <= t[0]:
            return self.x[0].copy()
        if tq >= t[-1]:
            return self.x[-1].copy()
        k = int(np.searchsorted(t, tq, side="right") - 1)
        k = min(max(k, 0), len(t) - 2)
        h = t[k + 1] - t[k]
        s = (tq - t[k]) / h
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)
        return (h00 * self.x[k] + h10 * h * self.f[k]
                + h01 * self.x[k + 1] + h11 * h * self.f[k + 1])

    def __call__(self, tq):
        if np.ndim(tq) == 0:
            return self._point(float(tq))
        return np.array([self._point(float(v)) for v in np.asarray(tq)])


class _IvpDense:
    """Adapter around a solver-provided dense-output callable."""

    def __init__(self, sol):
        self.sol = sol

    def __call__(self, tq):
        if np.ndim(tq) == 0:
            return self.sol(float(tq))
        return self.sol(np.asarray(tq, dtype=float)).T


@dataclass(frozen=True)
class Trajectory:
    """Immutable solution record: time grid, states at the grid, component
    names, and a dense-output interpolant for off-grid queries."""

    t: object                 # (m,) strictly increasing
    x: object                 # (m, n)
    states: tuple             # component keys, fixes column order
    model_hash: str = ""
    dense: object = None      # callable t -> state (vectorized over t)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if t.ndim != 1 or x.ndim != 2 or x.shape[0] != t.shape[0]:
            raise SimulationError(
                f"trajectory shapes do not agree: t {t.shape}, x {x.shape}")
        if len(t) > 1 and np.min(np.diff(t)) <= 0:
            raise SimulationError("trajectory times must be strictly increasing")
        if x.shape[1] != len(self.states):
            raise SimulationError("state matrix width does not match component names")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "states", tuple(self.states))

    @property
    def n(self):
        return self.x.shape[1]

    @property
    def horizon(self):
        return float(self.t[-1])

    def at(self, tq):
        """Dense-output state at time(s) ``tq``."""
        if self.dense is None:
            raise SimulationError("trajectory has no dense output")
        return self.dense(tq)

    def component(self, key):
        """Column of one named component."""
        try:
            j = self.states.index(key)
        except ValueError:
            raise SimulationError(f"trajectory has no component '{key}'")
        return self.x[:, j]

    def resample(self, times):
        times = np.asarray(times, dtype=float)
        return Trajectory(times, self.at(times), self.states,
                          model_hash=self.model_hash, dense=self.dense)


@dataclass(frozen=True)
class SolverConfig:
    """Integration settings: method, tolerances/step, horizon, and C1
    parameter ramp schedules applied during the run."""

    method: str = "rk45-adaptive"
    horizon: float = 50.0
    dt: float = 0.01
    rtol: float = 1e-9
    atol: float = 1e-12
    dt_max: float = np.inf
    ramps: tuple = ()          # ParamRamp instances

    def __post_init__(self):
        if self.method not in ("rk4-fixed", "rk45-adaptive"):
            raise SimulationError(
                f"unknown method '{self.method}'; use rk4-fixed or rk45-adaptive")
        if self.dt <= 0 or self.rtol <= 0 or self.atol <= 0:
            raise SimulationError("dt, rtol and atol must be positive")
        if self.horizon <= 0:
            raise SimulationError("horizon must be positive")
        object.__setattr__(self, "ramps", tuple(self.ramps))


def _check_finite(t, x):
    if not np.all(np.isfinite(x)):
        raise SimulationError(
            f"non-finite state encountered at t={t:.6g}; last good state recorded")


# ---------------------------------------------------------------------------
# ODE integration
# ---------------------------------------------------------------------------

def _rk4_path(f, x0, t0, tf, dt):
    steps = max(1, int(np.ceil((tf - t0) / dt - 1e-12)))
    dt = (tf - t0) / steps
    t = t0 + dt * np.arange(steps + 1)
    n = len(x0)
    x = np.empty((steps + 1, n))
    fs = np.empty((steps + 1, n))
    x[0] = x0
    fs[0] = f(t[0], x[0])
    # overflow is detected via the explicit finiteness check, not a warning
    with np.errstate(all="ignore"):
        for k in range(steps):
            tk, xk = t[k], x[k]
            k1 = fs[k]
            k2 = f(tk + dt / 2, xk + dt / 2 * k1)
            k3 = f(tk + dt / 2, xk + dt / 2 * k2)
            k4 = f(tk + dt, xk + dt * k3)
            x[k + 1] = xk + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            _check_finite(t[k + 1], x[k + 1])
            fs[k + 1] = f(t[k + 1], x[k + 1])
    return t, x, fs


def integrate(m, x0, cfg, externals=None):
    """Integrate a non-delayed model from ``x0`` over ``[0, horizon]``."""
    if m.is_delayed:
        raise SimulationError(
            f"model '{m.name}' has delayed terms; use integrate_dde")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (m.n,):
        raise SimulationError(f"x0 shape {x0.shape} does not match dimension {m.n}")
    f = md.compile_field(m, ramps=cfg.ramps, externals=externals)
    if cfg.method == "rk4-fixed":
        t, x, fs = _rk4_path(f, x0, 0.0, cfg.horizon, cfg.dt)
        dense = _HermiteDense(t, x, fs)
        return Trajectory(t, x, tuple(m.states), model_hash=m.model_hash(),
                          dense=dense)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sol = solve_ivp(f, (0.0, cfg.horizon), x0, method="RK45",
                        rtol=cfg.rtol, atol=cfg.atol, max_step=cfg.dt_max,
                        dense_output=True)
    if not sol.success:
        raise SimulationError(f"integration failed: {sol.message}")
    _check_finite(sol.t[-1], sol.y)
    return Trajectory(sol.t, sol.y.T, tuple(m.states),
                      model_hash=m.model_hash(), dense=_IvpDense(sol.sol))


# ---------------------------------------------------------------------------
# delayed integration (method of steps)
# ---------------------------------------------------------------------------

class DelayBuffer:
    """History lookup for delayed terms: an initial history function on
    ``t <= t0`` plus Hermite dense-output segments appended step by step.
    Queried as ``buffer(component_index, time)``."""

    def __init__(self, history, t0=0.0):
        self.history = history
        self.t0 = float(t0)
        self.t = [self.t0]
        self.x = [np.asarray(history(t0), dtype=float)]
        self.f = [None]  # slope at t0 filled by the first append

    @property
    def t_end(self):
        return self.t[-1]

    def append(self, t1, x1, f0, f1):
        if t1 <= self.t[-1]:
            raise SimulationError("delay buffer segments must advance in time")
        if self.f[-1] is None:
            self.f[-1] = np.asarray(f0, dtype=float)
        self.t.append(float(t1))
        self.x.append(np.asarray(x1, dtype=float))
        self.f.append(np.asarray(f1, dtype=float))

    def __call__(self, i, tq):
        if tq <= self.t0:
            return float(np.asarray(self.history(tq))[i])
        if tq > self.t[-1] + 1e-9:
            raise SimulationError(
                f"delay lookup at t={tq:.6g} beyond buffered horizon {self.t[-1]:.6g}")
        k = bisect.bisect_right(self.t, tq) - 1
        k = min(max(k, 0), len(self.t) - 2)
        h = self.t[k + 1] - self.t[k]
        s = min(max((tq - self.t[k]) / h, 0.0), 1.0)
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)
        return float(h00 * self.x[k][i] + h10 * h * self.f[k][i]
                     + h01 * self.x[k + 1][i] + h11 * h * self.f[k + 1][i])


def _strip_zero_delays(e, zero_names):
    if isinstance(e, ex.Delayed) and e.delay in zero_names:
        return ex.Var(e.name)
    if isinstance(e, ex.Unary):
        return ex.Unary(e.op, _strip_zero_delays(e.child, zero_names))
    if isinstance(e, ex.Bin):
        return ex.Bin(e.op, _strip_zero_delays(e.left, zero_names),
                      _strip_zero_delays(e.right, zero_names))
    if isinstance(e, ex.Call):
        return ex.Call(e.fn, tuple(_strip_zero_delays(a, zero_names) for a in e.args))
    return e


def _without_zero_delays(m):
    zero = {k for k, v in m.delays.items() if v == 0.0}
    if not zero:
        return m
    field2 = [_strip_zero_delays(e, zero) for e in m.field]
    delays2 = {k: v for k, v in m.delays.items() if v > 0.0}
    return md.SystemModel(m.name, list(m.states), dict(m.params), dict(m.inputs),
                          delays2, dict(m.domain), field2,
                          actions=dict(m.actions), source=m.source)


def _commensurate_dt(dt, taus):
    """Largest step <= dt that divides every delay (within 1e-9)."""
    adjusted = min(dt, min(taus))
    for tau in sorted(taus):
        k = int(np.ceil(tau / adjusted - 1e-9))
        adjusted = tau / k
    for tau in taus:
        k = tau / adjusted
        if abs(k - round(k)) > 1e-9:
            raise SimulationError(
                f"delays {sorted(taus)} are not commensurate; no common step exists")
    return adjusted


def integrate_dde(m, history, cfg, externals=None):
    """Method-of-steps integration of a delayed model with fixed-step RK4.

    ``history`` supplies the state for ``t <= 0``: a constant vector or a
    callable of t.  The step is adjusted down if it does not divide every
    delay, with a warning.
    """
    m = _without_zero_delays(m)
    if not m.is_delayed:
        hist = history if callable(history) else (lambda _t: np.asarray(history, dtype=float))
        cfg0 = SolverConfig(method="rk4-fixed", horizon=cfg.horizon, dt=cfg.dt,
                            rtol=cfg.rtol, atol=cfg.atol, ramps=cfg.ramps)
        return integrate(m, hist(0.0), cfg0, externals=externals)
    if cfg.method != "rk4-fixed":
        raise SimulationError("delayed integration supports only rk4-fixed")
    hist = history if callable(history) else (lambda _t: np.asarray(history, dtype=float))
    x0 = np.asarray(hist(0.0), dtype=float)
    if x0.shape != (m.n,):
        raise SimulationError(f"history shape {x0.shape} does not match dimension {m.n}")

    taus = [v for v in m.delays.values() if v > 0.0]
    dt = _commensurate_dt(cfg.dt, taus)
    if abs(dt - cfg.dt) > 1e-12:
        warnings.warn(
            f"step {cfg.dt} does not divide the delays; adjusted to {dt:.6g}",
            stacklevel=2)

    f = md.compile_field(m, ramps=cfg.ramps, externals=externals)
    buf = DelayBuffer(hist)
    steps = max(1, int(np.ceil(cfg.horizon / dt - 1e-9)))
    t = dt * np.arange(steps + 1)
    x = np.empty((steps + 1, m.n))
    fs = np.empty((steps + 1, m.n))
    x[0] = x0
    fs[0] = f(0.0, x0, buf)
    for k in range(steps):
        tk, xk = t[k], x[k]
        k1 = fs[k]
        k2 = f(tk + dt / 2, xk + dt / 2 * k1, buf)
        k3 = f(tk + dt / 2, xk + dt / 2 * k2, buf)
        k4 = f(tk + dt, xk + dt * k3, buf)
        x[k + 1] = xk + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        _check_finite(t[k + 1], x[k + 1])
        fs[k + 1] = f(t[k + 1], x[k + 1], buf)
        buf.append(t[k + 1], x[k + 1], fs[k], fs[k + 1])
    dense = _HermiteDense(t, x, fs)
    return Trajectory(t, x, tuple(m.states), model_hash=m.model_hash(), dense=dense)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _cluster_columns(traj, cluster):
    cols = []
    for node in cluster:
        pref = f"{node}."
        idxs = [j for j, s in enumerate(traj.states) if s.startswith(pref)]
        if not idxs and node in traj.states:
            idxs = [traj.states.index(node)]
        if not idxs:
            raise SimulationError(f"trajectory has no components for node '{node}'")
        cols.append(idxs)
    return cols


def sync_error(traj, p):
    """e(t) = max over clusters and node pairs of ||x_i(t) - x_j(t)||_inf,
    evaluated on the trajectory grid.  Singleton clusters contribute 0."""
    e = np.zeros(len(traj.t))
    for cl in p.clusters:
        cols = _cluster_columns(traj, cl)
        for a in range(len(cols)):
            for b in range(a + 1, len(cols)):
                gap = np.max(np.abs(traj.x[:, cols[a]] - traj.x[:, cols[b]]), axis=1)
                e = np.maximum(e, gap)
    return traj.t.copy(), e


def periodicity_check(traj, T, tail, samples=400):
    """sup over the tail window of ||x(t + T) - x(t)||_inf via dense output.
    The window is the last ``tail`` seconds of shift-comparable times."""
    if T <= 0 or tail <= 0:
        raise SimulationError("period and tail window must be positive")
    span = traj.t[-1] - traj.t[0]
    if span < 2 * T + tail - 1e-9:
        raise SimulationError(
            f"horizon {span:.6g} is shorter than 2*T + tail = {2 * T + tail:.6g}")
    t_hi = traj.t[-1] - T
    grid = np.linspace(t_hi - tail, t_hi, samples)
    gaps = np.max(np.abs(traj.at(grid + T) - traj.at(grid)), axis=1)
    return float(np.max(gaps))


def convergence_rate(t, y, window=None, floor=1e-13):
    """Exponential decay rate from a least-squares fit of log y over the
    window; positive for decaying series (y ~ C exp(-rate * t))."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if window is not None:
        lo, hi = window
        keep = (t >= lo) & (t <= hi)
        t, y = t[keep], y[keep]
    keep = y > floor
    t, y = t[keep], y[keep]
    if len(t) < 2:
        raise SimulationError("too few points above the floor to fit a rate")
    slope = np.polyfit(t, np.log(y), 1)[0]
    return float(-slope)


# ---------------------------------------------------------------------------
# matched-input scaling experiments
# ---------------------------------------------------------------------------

def fcd_experiment(m, pair_i, pair_j, input_i, input_j, shared, x0_i, x0_j,
                   cfg, require_matched_inputs=True, grid_count=800,
                   input_tol=1e-10):
    """Simulate two arms of a model driven by differently scaled inputs and
    report how closely the shared components and the transformed states
    agree.

    ``pair_i``/``pair_j`` are the scaling actions of each arm; the
    precondition rho_i(u_i) == rho_j(u_j) is verified on the comparison
    grid.  ``shared`` lists components expected to coincide; their initial
    values must match across arms.
    """
    names_i = [name for name, _ in pair_i.input_map]
    names_j = [name for name, _ in pair_j.input_map]
    if names_i != names_j or len(names_i) != 1:
        raise SimulationError("scaling actions must map the same single input")
    uname = names_i[0]
    x0_i = np.asarray(x0_i, dtype=float)
    x0_j = np.asarray(x0_j, dtype=float)

    grid = np.linspace(0.0, cfg.horizon, grid_count)
    ui = np.array([float(input_i(t)) for t in grid])
    uj = np.array([float(input_j(t)) for t in grid])
    rho_i = np.array([pair_i.apply_input({uname: v}, t=t)[uname]
                      for v, t in zip(ui, grid)])
    rho_j = np.array([pair_j.apply_input({uname: v}, t=t)[uname]
                      for v, t in zip(uj, grid)])
    input_residual = float(np.max(np.abs(rho_i - rho_j)))
    if require_matched_inputs and input_residual > input_tol:
        raise SimulationError(
            f"scaled inputs differ: max |rho_i(u_i) - rho_j(u_j)| = "
            f"{input_residual:.3e} > {input_tol:g}")

    for comp in shared:
        k = m.index(comp)
        if abs(x0_i[k] - x0_j[k]) > 1e-12:
            raise SimulationError(
                f"shared component '{comp}' starts at different values")

    traj_i, traj_j = parallel_map([
        lambda: integrate(m, x0_i, cfg, externals={uname: input_i}),
        lambda: integrate(m, x0_j, cfg, externals={uname: input_j}),
    ])

    xi = traj_i.at(grid)
    xj = traj_j.at(grid)
    shared_idx = [m.index(c) for c in shared]
    shared_gap = (np.max(np.abs(xi[:, shared_idx] - xj[:, shared_idx]), axis=1)
                  if shared_idx else np.zeros(len(grid)))
    gi = np.array([pair_i.apply_state(row, t) for row, t in zip(xi, grid)])
    gj = np.array([pair_j.apply_state(row, t) for row, t in zip(xj, grid)])
    transformed_gap = np.max(np.abs(gi - gj), axis=1)

    return {
        "input": uname,
        "shared": list(shared),
        "input_residual": input_residual,
        "max_shared_gap": float(np.max(shared_gap)) if len(grid) else 0.0,
        "max_transformed_gap": float(np.max(transformed_gap)),
        "grid": grid,
        "shared_gap": shared_gap,
        "transformed_gap": transformed_gap,
        "traj_i": traj_i,
        "traj_j": traj_j,
    }
