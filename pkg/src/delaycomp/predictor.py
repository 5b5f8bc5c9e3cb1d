"""Exact predictor, sample-horizon flow and their composition.

The predictor solves the implicit integral equation

    P(theta) = x + int_{-D}^{theta} f(P(tau), U(tau)) dtau,  theta in [-D, 0]

by successive approximations on the input history's own grid, with the
integral evaluated by the cumulative trapezoid rule. The flow integrates
the closed loop ``z' = f(z, kappa(z))`` with classical RK4.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .delayline import InputHistory
from .dynamics import Plant

log = logging.getLogger(__name__)

MULTISTEP = "multistep"
PREDICTOR = "predictor"


class PredictorError(RuntimeError):
    pass


class ConvergenceError(PredictorError):
    """Successive approximations did not reach the tolerance."""

    def __init__(self, msg, residual):
        super().__init__(msg)
        self.residual = residual


class FiniteEscapeError(PredictorError):
    """An iterate or flow state became non-finite inside the horizon."""


@dataclass
class Trajectory:
    """Samples ``points[k]`` at times ``t0 + k * dt``."""

    t0: float
    dt: float
    points: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim == 1:
            self.points = self.points[:, None]
        if self.points.shape[0] == 0:
            raise ValueError("trajectory must be non-empty")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    def __len__(self):
        return self.points.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))

    @property
    def endpoint(self) -> np.ndarray:
        return self.points[-1]

    def at(self, t: float) -> np.ndarray:
        """Linear interpolation, clamped to the sampled range."""
        pos = (t - self.t0) / self.dt
        last = len(self) - 1
        if pos <= 0 or last == 0:
            return self.points[0]
        if pos >= last:
            return self.points[last]
        k = int(pos)
        w = pos - k
        if w < 1e-12:
            return self.points[k]
        return (1.0 - w) * self.points[k] + w * self.points[k + 1]

    def sup_distance(self, other: "Trajectory") -> float:
        return float(np.max(np.linalg.norm(self.points - other.points, axis=1)))


@dataclass(frozen=True)
class SolverConfig:
    """Solver knobs.

    ``grid_points`` sets the RK4 resolution of :func:`solve_flow`; the
    predictor always works on the grid of the history it is given.
    """

    tol: float = 1e-6
    max_iters: int = 200
    grid_points: int = 101
    stall_window: int = 5

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.grid_points < 2:
            raise ValueError("grid_points must be >= 2")


def rk4_step(fun, x, h):
    k1 = fun(x)
    k2 = fun(x + 0.5 * h * k1)
    k3 = fun(x + 0.5 * h * k2)
    k4 = fun(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def cumulative_trapezoid(values: np.ndarray, step: float) -> np.ndarray:
    """Running trapezoid integral along axis 0, starting at zero."""
    out = np.zeros_like(values)
    np.cumsum(0.5 * step * (values[1:] + values[:-1]), axis=0, out=out[1:])
    return out


def _running_integral(plant, p, left, right, step):
    """Trapezoid integral of ``f(P, U)`` from the first node; at a jump node the
    cell to its left uses the left limit and the cell to its right the right limit."""
    if right is left:
        return cumulative_trapezoid(plant.field(p, left), step)
    cells = 0.5 * step * (plant.field(p[:-1], right[:-1]) + plant.field(p[1:], left[1:]))
    out = np.zeros_like(p)
    np.cumsum(cells, axis=0, out=out[1:])
    return out


def _pointwise_norm(a):
    return np.sqrt(np.sum(a * a, axis=-1))


class _Stalled(Exception):
    pass


def _picard(plant, start, u_seg, step, tol, cfg, stats):
    """Successive approximations on one segment, starting from the constant ``start``."""
    left, right = u_seg
    p = np.broadcast_to(start, (left.shape[0], start.shape[0])).copy()
    history = []
    rising = 0
    for _ in range(cfg.max_iters):
        phi = start + _running_integral(plant, p, left, right, step)
        if not np.all(np.isfinite(phi)):
            raise _Stalled("non-finite iterate")
        r = float(np.max(_pointwise_norm(p - phi)))
        history.append(r)
        stats["iterations"] += 1
        if r <= tol:
            stats["residual_history"].append(history)
            return p
        rising = rising + 1 if len(history) > 1 and r >= history[-2] else 0
        if rising >= cfg.stall_window:
            raise _Stalled(f"residual non-decreasing for {rising} iterations")
        p = phi
    raise ConvergenceError(
        f"predictor did not reach tol={tol:g} in {cfg.max_iters} iterations "
        f"(last residual {history[-1]:.3e})", history[-1])


def _solve_segments(plant, start, u, step, tol, cfg, stats, depth=0):
    try:
        return _picard(plant, start, u, step, tol, cfg, stats)
    except _Stalled as exc:
        cells = u[0].shape[0] - 1
        if cells < 2 or depth > 12:
            raise FiniteEscapeError(
                f"predictor iteration failed on a segment of {cells} cells: {exc}") from None
        if depth == 0:
            c_f = plant.lipschitz[0]
            pieces = max(2, math.ceil(cells * step * c_f / 0.5))
        else:
            pieces = 2
        pieces = min(pieces, cells)
        log.debug("predictor stalled (%s); splitting into %d segments", exc, pieces)
        bounds = np.linspace(0, cells, pieces + 1).round().astype(int)
        out = [start[None, :]]
        p_start = start
        for a, b in zip(bounds[:-1], bounds[1:]):
            left = u[0][a:b + 1]
            right = left if u[1] is u[0] else u[1][a:b + 1]
            seg = _solve_segments(plant, p_start, (left, right), step, tol / pieces,
                                  cfg, stats, depth + 1)
            out.append(seg[1:])
            p_start = seg[-1]
        stats["segments"] = max(stats["segments"], pieces)
        return np.concatenate(out)


def solve_predictor(plant: Plant, x, history: InputHistory,
                    cfg: SolverConfig = SolverConfig()) -> Trajectory:
    """Predicted states ``P(theta)`` on the history grid over ``[-D, 0]``.

    The returned iterate is certified: its fixed-point residual under the
    trapezoid map is at most ``cfg.tol`` at every grid point, and
    ``P(-D) = x`` exactly. ``meta`` carries the iteration count, the
    certified residual and the per-segment residual histories.
    """
    x = np.asarray(x, dtype=float).reshape(plant.n)
    if not np.all(np.isfinite(x)):
        raise ValueError("state must be finite")
    if history.input_dim != plant.m:
        raise ValueError(f"history input_dim {history.input_dim} != plant input_dim {plant.m}")
    stats = {"iterations": 0, "residual_history": [], "segments": 1}
    u = (history.samples, history.right)
    p = _solve_segments(plant, x, u, history.step, cfg.tol, cfg, stats)
    traj = Trajectory(-history.delay, history.step, p)
    traj.meta.update(stats)
    traj.meta["residual"] = predictor_residual(plant, x, history, traj)
    return traj


def predictor_residual(plant: Plant, x, history: InputHistory, traj: Trajectory) -> float:
    """``max_k |P_k - x - trapz_{-D}^{theta_k} f(P, U)|`` on the history grid."""
    p = traj.points
    integral = _running_integral(plant, p, history.samples, history.right, history.step)
    return float(np.max(_pointwise_norm(p - np.asarray(x, dtype=float) - integral)))


def solve_flow(plant: Plant, p0, horizon: float,
               cfg: SolverConfig = SolverConfig()) -> Trajectory:
    """Closed-loop flow ``z' = f(z, kappa(z))`` from ``p0`` over ``[0, horizon]``.

    Uses ``cfg.grid_points`` RK4 nodes; the last one is the left limit at
    ``horizon``.
    """
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    z = np.asarray(p0, dtype=float).reshape(plant.n)
    h = horizon / (cfg.grid_points - 1)
    out = np.empty((cfg.grid_points, plant.n))
    out[0] = z
    fun = plant.closed_loop
    for k in range(1, cfg.grid_points):
        z = rk4_step(fun, z, h)
        if not np.all(np.isfinite(z)):
            raise FiniteEscapeError(f"flow left the finite range at s={k * h:g}")
        out[k] = z
    return Trajectory(0.0, h, out)


def solve_multistep(plant: Plant, x, history: InputHistory, horizon: float,
                    cfg: SolverConfig = SolverConfig()) -> Trajectory:
    """The flow started at the predictor endpoint, i.e. ``Z(P(x, U)(0))``."""
    pred = solve_predictor(plant, x, history, cfg)
    traj = solve_flow(plant, pred.endpoint, horizon, cfg)
    traj.meta["predictor"] = {k: pred.meta[k] for k in ("iterations", "residual", "segments")}
    return traj


class ExactPredictor:
    """Numerical predictor operator, interchangeable with a trained surrogate."""

    kind = PREDICTOR

    def __init__(self, plant: Plant, cfg: SolverConfig = SolverConfig()):
        self.plant, self.cfg = plant, cfg

    def predict(self, x, history: InputHistory) -> Trajectory:
        return solve_predictor(self.plant, x, history, self.cfg)


class ExactMultiStep:
    """Numerical sampling-horizon operator on ``[0, h]``.

    ``grid_points`` defaults to one node per ``dt`` when the simulator
    builds it.
    """

    kind = MULTISTEP

    def __init__(self, plant: Plant, horizon: float, cfg: SolverConfig = SolverConfig()):
        self.plant, self.horizon, self.cfg = plant, float(horizon), cfg

    def predict(self, x, history: InputHistory) -> Trajectory:
        return solve_multistep(self.plant, x, history, self.horizon, self.cfg)
