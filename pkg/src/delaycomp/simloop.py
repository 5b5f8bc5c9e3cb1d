"""Closed-loop simulation of a delayed plant under hybrid predictor feedback.

Time runs on the grid ``t_k = k * dt``. The delay line stores one input
per grid node and the plant sees the piecewise-linear interpolant of the
samples ``D`` seconds old. At a sampling instant ``T_i`` the controller
receives the noisy measurement and the input history over
``[T_i - D, T_i]`` and resets the prediction ``Zhat``:

* ``baseline``: numerical predictor endpoint, then live closed-loop flow;
* ``case1``: a sampling-horizon operator gives ``Zhat`` on ``[T_i, T_i + h]``;
* ``case2``: a predictor operator gives the endpoint, then live flow.

Between samples the controller outputs ``kappa(Zhat(t))``. A reset node
of the delay line keeps both limits of the input: the left limit
``kappa(Zhat(T_i-))`` closes the history handed to the predictor, the right
limit ``kappa(Zhat(T_i+))`` starts the next cell. The plant therefore
receives the jump exactly, and the predictor's quadrature sees the same
signal the plant will.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .delayline import InputHistory
from .dynamics import Plant
from .predictor import (MULTISTEP, PREDICTOR, ExactMultiStep, ExactPredictor,
                        SolverConfig, Trajectory, rk4_step)

log = logging.getLogger(__name__)

BASELINE, CASE1, CASE2 = "baseline", "case1", "case2"
MODES = (BASELINE, CASE1, CASE2)
DIVERGENCE_FACTOR = 1e3


class ConfigError(ValueError):
    pass


class KindMismatchError(ConfigError):
    pass


class SimulationDiverged(RuntimeError):
    def __init__(self, msg, log_prefix):
        super().__init__(msg)
        self.log = log_prefix


def _steps(value: float, dt: float, what: str) -> int:
    k = int(round(value / dt))
    if k < 1 or abs(k * dt - value) > 1e-9 * max(1.0, value):
        raise ConfigError(f"{what}={value} is not a whole multiple of dt={dt}")
    return k


@dataclass(frozen=True)
class SamplingSchedule:
    """``uniform`` with period ``h`` or ``random`` gaps in ``[min_gap, max_gap]``."""

    mode: str = "uniform"
    h: float = 0.05
    min_gap: float = 0.0
    max_gap: float = 0.0
    seed: int = 0

    @classmethod
    def uniform(cls, h: float) -> "SamplingSchedule":
        return cls("uniform", h=h)

    @classmethod
    def random_bounded(cls, min_gap: float, max_gap: float, seed: int = 0) -> "SamplingSchedule":
        return cls("random", h=max_gap, min_gap=min_gap, max_gap=max_gap, seed=seed)

    def __post_init__(self):
        if self.mode not in ("uniform", "random"):
            raise ConfigError(f"unknown schedule mode {self.mode!r}")
        if self.mode == "uniform" and not self.h > 0:
            raise ConfigError("uniform schedule needs h > 0")
        if self.mode == "random" and not 0 < self.min_gap <= self.max_gap:
            raise ConfigError("random schedule needs 0 < min_gap <= max_gap")

    @property
    def bound(self) -> float:
        """Largest possible gap between consecutive instants."""
        return self.h if self.mode == "uniform" else self.max_gap

    def step_indices(self, t_final: float, dt: float) -> np.ndarray:
        """Grid indices of the sampling instants in ``[0, t_final]``, starting at 0."""
        n_steps = int(round(t_final / dt))
        if self.mode == "uniform":
            return np.arange(0, n_steps + 1, _steps(self.h, dt, "h"))
        lo = int(np.ceil(self.min_gap / dt - 1e-9))
        hi = int(np.floor(self.max_gap / dt + 1e-9))
        if hi < max(lo, 1):
            raise ConfigError(f"no grid-aligned gap in [{self.min_gap}, {self.max_gap}] at dt={dt}")
        lo = max(lo, 1)
        rng = np.random.default_rng(self.seed)
        out, k = [0], 0
        while True:
            gap = int(np.clip(round(rng.uniform(self.min_gap, self.max_gap) / dt), lo, hi))
            k += gap
            if k > n_steps:
                return np.asarray(out)
            out.append(k)

    def instants(self, t_final: float, dt: float) -> np.ndarray:
        return self.step_indices(t_final, dt) * dt

    def to_dict(self) -> dict:
        if self.mode == "uniform":
            return {"mode": "uniform", "h": self.h}
        return {"mode": "random", "min_gap": self.min_gap, "max_gap": self.max_gap,
                "seed": self.seed}


@dataclass
class SimConfig:
    plant: Plant
    controller_mode: str = BASELINE
    operator: object = None
    schedule: SamplingSchedule = field(default_factory=lambda: SamplingSchedule.uniform(0.05))
    noise_std: float = 0.0
    dt: float = 1e-3
    t_final: float = 10.0
    initial_state: np.ndarray | None = None
    # None -> zero history, "hold" -> kappa(x0) held constant, or an InputHistory
    initial_history: object = None
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)
    corruption_eps: float = 0.0
    corruption_policy: str = "flow"
    record_timing: bool = True

    def summary(self) -> dict:
        x0 = self.initial_state if self.initial_state is not None else np.zeros(self.plant.n)
        hist = self.initial_history
        return {
            "plant": self.plant.name,
            "plant_params": self.plant.params(),
            "delay": self.plant.delay,
            "controller_mode": self.controller_mode,
            "operator": type(self.operator).__name__ if self.operator is not None else None,
            "schedule": self.schedule.to_dict(),
            "noise_std": self.noise_std,
            "dt": self.dt,
            "t_final": self.t_final,
            "initial_state": [float(v) for v in np.asarray(x0, dtype=float)],
            "initial_history": hist if isinstance(hist, str) or hist is None else "custom",
            "seed": self.seed,
            "solver": {"tol": self.solver.tol, "max_iters": self.solver.max_iters},
            "corruption_eps": self.corruption_eps,
            "corruption_policy": self.corruption_policy,
        }


@dataclass
class SimLog:
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray  # controller output from t_k on (right limit)
    u_delayed: np.ndarray  # input reaching the plant from t_k on
    u_history: np.ndarray  # all delay-line right limits, row j at time (j - N) * dt
    u_left: np.ndarray  # left limits, differ from u_history only at resets
    zhat: np.ndarray  # prediction after any reset at t_k
    sample_idx: np.ndarray
    measured: np.ndarray
    zhat_pre: np.ndarray  # Zhat(T_i-) for every sampling instant after the first
    wallclock_ns: np.ndarray
    dt: float
    delay: float
    plant: Plant
    config: dict

    @property
    def sample_flag(self) -> np.ndarray:
        flag = np.zeros(len(self.t), dtype=int)
        flag[self.sample_idx] = 1
        return flag

    @property
    def delay_steps(self) -> int:
        return int(round(self.delay / self.dt))

    def truncated(self, k: int) -> "SimLog":
        """Prefix with grid nodes ``0..k``."""
        n_s = int(np.searchsorted(self.sample_idx, k, side="right"))
        j = self.delay_steps + k + 1
        return SimLog(self.t[:k + 1], self.x[:k + 1], self.u[:k + 1], self.u_delayed[:k + 1],
                      self.u_history[:j], self.u_left[:j], self.zhat[:k + 1],
                      self.sample_idx[:n_s], self.measured[:n_s],
                      self.zhat_pre[:max(n_s - 1, 0)], self.wallclock_ns[:k + 1],
                      self.dt, self.delay, self.plant, self.config)

    def write_csv(self, path, timing: bool = True) -> None:
        n, m = self.x.shape[1], self.u.shape[1]
        header = (["t"] + [f"x_{i}" for i in range(n)] + [f"u_{i}" for i in range(m)]
                  + [f"zhat_{i}" for i in range(n)] + ["sample_flag", "eval_wallclock_ns"])
        flag = self.sample_flag
        wall = self.wallclock_ns if timing else np.zeros_like(self.wallclock_ns)
        floats = np.hstack([self.t[:, None], self.x, self.u, self.zhat])
        with open(path, "w", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for k in range(len(self.t)):
                row = ",".join(repr(float(v)) for v in floats[k])
                fh.write(f"{row},{flag[k]},{int(wall[k])}\n")


def _unit(v):
    nrm = np.linalg.norm(v)
    return v / nrm if nrm > 1e-12 else None


def _corruption(plant, anchor, eps, policy, rng):
    """Offset of norm ``eps`` along the closed-loop flow at ``anchor`` with a
    random sign, or along a uniformly random direction."""
    sign = 1.0 if rng.random() < 0.5 else -1.0
    rand = _unit(rng.normal(size=plant.n))
    if eps == 0:
        return np.zeros(plant.n)
    d = None
    if policy == "flow":
        d = _unit(plant.closed_loop(anchor))
    elif policy != "random":
        raise ConfigError(f"unknown corruption policy {policy!r}")
    if d is None:
        d = rand
    return eps * sign * d


def _initial_history(cfg: SimConfig, x0, n_points):
    plant, hist = cfg.plant, cfg.initial_history
    if hist is None or (isinstance(hist, str) and hist == "zero"):
        return np.zeros((n_points, plant.m))
    if isinstance(hist, str) and hist == "hold":
        return np.tile(plant.kappa(x0), (n_points, 1))
    if isinstance(hist, InputHistory):
        if hist.delay != plant.delay or hist.input_dim != plant.m:
            raise ConfigError("initial_history does not match the plant delay/input dim")
        return hist.resample(n_points).samples
    raise ConfigError(f"unsupported initial_history {hist!r}")


def _resolve_operator(cfg: SimConfig, n_delay):
    mode, op = cfg.controller_mode, cfg.operator
    if mode not in MODES:
        raise ConfigError(f"unknown controller_mode {mode!r}")
    if mode == CASE1 and cfg.schedule.mode != "uniform":
        raise ConfigError(
            "controller_mode=case1 requires schedule.mode=uniform "
            f"(got schedule.mode={cfg.schedule.mode})")
    if mode == BASELINE:
        if op is not None:
            raise ConfigError("baseline mode uses the numerical predictor; operator must be None")
        return ExactPredictor(cfg.plant, cfg.solver)
    if op is None:
        if mode == CASE1:
            h_steps = _steps(cfg.schedule.h, cfg.dt, "schedule.h")
            flow_cfg = SolverConfig(cfg.solver.tol, cfg.solver.max_iters, h_steps + 1)
            return ExactMultiStep(cfg.plant, cfg.schedule.h, flow_cfg)
        return ExactPredictor(cfg.plant, cfg.solver)
    want = MULTISTEP if mode == CASE1 else PREDICTOR
    kind = getattr(op, "kind", None)
    if kind != want:
        raise KindMismatchError(f"controller_mode={mode} needs a {want} operator, got kind={kind}")
    return op


def validate(cfg: SimConfig) -> None:
    if not cfg.dt > 0 or not cfg.t_final > 0:
        raise ConfigError("dt and t_final must be positive")
    if cfg.noise_std < 0:
        raise ConfigError("noise_std must be non-negative")
    _steps(cfg.plant.delay, cfg.dt, "delay")
    _steps(cfg.t_final, cfg.dt, "t_final")
    if cfg.schedule.mode == "uniform":
        _steps(cfg.schedule.h, cfg.dt, "schedule.h")
    _resolve_operator(cfg, None)


def run(cfg: SimConfig, on_sample: Callable | None = None) -> SimLog:
    """Simulate the closed loop; deterministic given ``cfg.seed``.

    ``on_sample(t, measured_state, history)`` is called at every sampling
    instant before the controller reset.
    """
    validate(cfg)
    plant, dt = cfg.plant, cfg.dt
    n, m = plant.n, plant.m
    N = _steps(plant.delay, dt, "delay")
    K = _steps(cfg.t_final, dt, "t_final")
    op = _resolve_operator(cfg, N)
    case1 = cfg.controller_mode == CASE1
    op_points = getattr(op, "history_points", None)

    x0 = (np.zeros(n) if cfg.initial_state is None
          else np.asarray(cfg.initial_state, dtype=float).reshape(n))
    noise_rng, corr_rng = (np.random.default_rng(s)
                           for s in np.random.SeedSequence(cfg.seed).spawn(2))
    samples = cfg.schedule.step_indices(cfg.t_final, dt)
    is_sample = np.zeros(K + 1, dtype=bool)
    is_sample[samples] = True

    X = np.zeros((K + 1, n))
    Zh = np.zeros((K + 1, n))
    UL = np.zeros((N + K + 1, m))
    UL[:N + 1] = _initial_history(cfg, x0, N + 1)
    U = UL.copy()
    wall = np.zeros(K + 1, dtype=np.int64)
    measured = np.zeros((len(samples), n))
    zpre = np.zeros((max(len(samples) - 1, 0), n))
    X[0] = x0
    limit = DIVERGENCE_FACTOR * plant.box.state_bound
    summary = cfg.summary()

    def make_log():
        return SimLog(np.arange(K + 1) * dt, X, U[N:], U[:K + 1], U, UL, Zh, samples,
                      measured, zpre, wall, dt, plant.delay, plant, summary)

    field, loop = plant.field, plant.closed_loop
    z = None
    traj, t_reset = None, 0
    i_s = 0
    for k in range(K + 1):
        if k > 0:
            U[N + k] = UL[N + k] = plant.kappa(z)
        if is_sample[k]:
            y = X[k] + (noise_rng.normal(0.0, cfg.noise_std, n) if cfg.noise_std > 0 else 0.0)
            hist = InputHistory(UL[k:k + N + 1], plant.delay, U[k:k + N + 1])
            if on_sample is not None:
                on_sample(k * dt, y, hist)
            if op_points is not None:
                hist = hist.resample(op_points)
            t0 = time.perf_counter_ns()
            out = op.predict(y, hist)
            wall[k] = time.perf_counter_ns() - t0
            if case1:
                off = _corruption(plant, out.points[0], cfg.corruption_eps,
                                  cfg.corruption_policy, corr_rng)
                traj = Trajectory(out.t0, out.dt, out.points + off)
                t_reset = k
                z_new = traj.points[0]
            else:
                p0 = out.endpoint
                z_new = p0 + _corruption(plant, p0, cfg.corruption_eps,
                                         cfg.corruption_policy, corr_rng)
            measured[i_s] = y
            if i_s > 0:
                zpre[i_s - 1] = z
            i_s += 1
            z = np.array(z_new, dtype=float)
            U[N + k] = plant.kappa(z)
        Zh[k] = z
        if not (np.all(np.isfinite(X[k])) and np.linalg.norm(X[k]) <= limit
                and np.all(np.isfinite(z))):
            raise SimulationDiverged(
                f"state norm exceeded {limit:g} at t={k * dt:.4f}", make_log().truncated(k))
        if k == K:
            break
        u0, u1 = U[k], UL[k + 1]
        um = 0.5 * (u0 + u1)
        xk = X[k]
        k1 = field(xk, u0)
        k2 = field(xk + 0.5 * dt * k1, um)
        k3 = field(xk + 0.5 * dt * k2, um)
        k4 = field(xk + dt * k3, u1)
        X[k + 1] = xk + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if case1:
            z = traj.at((k + 1 - t_reset) * dt)
        else:
            z = rk4_step(loop, z, dt)
    return make_log()


class Series(NamedTuple):
    t: np.ndarray
    values: np.ndarray
    truncated: bool


def _aligned(log: SimLog, D: float):
    N = int(round(D / log.dt))
    count = len(log.t) - N
    if count <= 0:
        log_ = logging.getLogger(__name__)
        log_.warning("log shorter than the delay; series is empty")
        return N, 0, True
    return N, count, False


def prediction_error_series(log: SimLog, D: float | None = None) -> Series:
    """``|Zhat(t) - X(t + D)|`` on every node that has a realized future."""
    D = log.delay if D is None else D
    N, count, trunc = _aligned(log, D)
    vals = np.linalg.norm(log.zhat[:count] - log.x[N:N + count], axis=1) if count else np.zeros(0)
    return Series(log.t[:count], vals, trunc)


def transport_residual(log: SimLog, D: float | None = None) -> Series:
    """Boundary value ``|kappa(Zhat(t)) - kappa(X(t + D))|`` of the transformed input."""
    D = log.delay if D is None else D
    N, count, trunc = _aligned(log, D)
    if not count:
        return Series(log.t[:0], np.zeros(0), True)
    kz = log.plant.kappa(log.zhat[:count])
    kx = log.plant.kappa(log.x[N:N + count])
    return Series(log.t[:count], np.linalg.norm(kz - kx, axis=1), trunc)


def tracking_error_series(log: SimLog, reference=None, window: float = 0.25,
                          dims=None) -> Series:
    """Trailing moving root-mean-square of ``|X(t) - X_des(t)|``.

    ``reference`` is None (zero), an array aligned with ``log.t`` or a
    callable of time. ``dims`` selects the compared state components and
    defaults to the plant's tracking dims. The first ``window`` seconds
    average over the nodes available so far.
    """
    if dims is None:
        dims = log.plant.tracking_dims or tuple(range(log.x.shape[1]))
    dims = list(dims)
    w = int(round(window / log.dt))
    if w < 1 or w > len(log.t):
        raise ValueError(f"window {window}s does not fit a log of {len(log.t)} nodes")
    if reference is None:
        ref = 0.0
    elif callable(reference):
        ref = np.asarray(reference(log.t), dtype=float).reshape(len(log.t), len(dims))
    else:
        ref = np.asarray(reference, dtype=float).reshape(len(log.t), len(dims))
    err2 = np.sum((log.x[:, dims] - ref) ** 2, axis=1)
    c = np.concatenate([[0.0], np.cumsum(err2)])
    idx = np.arange(len(err2))
    lo = np.maximum(idx + 1 - w, 0)
    rms = np.sqrt(np.maximum((c[idx + 1] - c[lo]) / (idx + 1 - lo), 0.0))
    return Series(log.t, rms, False)


def state_input_residual(log: SimLog) -> np.ndarray:
    """``|X(t)| + sup_{t-D <= s <= t} |U(s)|`` on every node.

    Only the plant's regulated coordinates enter ``|X(t)|``.
    """
    N = log.delay_steps
    dims = list(log.plant.regulated_dims)
    unorm = np.maximum(np.linalg.norm(log.u_history, axis=1), np.linalg.norm(log.u_left, axis=1))
    windows = np.lib.stride_tricks.sliding_window_view(unorm, N + 1)
    return np.linalg.norm(log.x[:, dims], axis=1) + windows.max(axis=1)[:len(log.t)]


def steady_state(values: np.ndarray, fraction: float = 0.2) -> float:
    """Median over the last ``fraction`` of the series."""
    k = max(1, int(round(len(values) * fraction)))
    return float(np.median(values[-k:]))


@dataclass
class ScalingRow:
    eps: float
    median: float
    mean: float
    std: float
    divergent: int
    residuals: list


def _scaling_trial(args):
    plant, mode, eps, x0, seed, kw = args
    cfg = SimConfig(plant, controller_mode=mode, initial_state=x0, seed=seed,
                    corruption_eps=eps, record_timing=False, **kw)
    try:
        return steady_state(state_input_residual(run(cfg)))
    except SimulationDiverged:
        return float("nan")


def residual_scaling_experiment(plant: Plant, mode: str, eps_list, trials: int, seed: int = 0,
                                *, dt: float = 5e-3, t_final: float = 15.0, h: float = 0.05,
                                schedule: SamplingSchedule | None = None,
                                ic_scale: float = 0.5, noise_std: float = 0.0,
                                policy: str = "flow", solver: SolverConfig | None = None,
                                workers: int = 1) -> list[ScalingRow]:
    """Steady-state ``|X| + sup|U|`` under exact operators corrupted by exactly ``eps``.

    Trial ``j`` uses the same initial state and random streams for every
    ``eps``, so rows are paired. Divergent runs are counted and excluded
    from the statistics.
    """
    eps_list = [float(e) for e in eps_list]
    if eps_list != sorted(eps_list) or 0.0 not in eps_list:
        raise ValueError("eps_list must be sorted ascending and contain 0")
    if mode not in (CASE1, CASE2):
        raise ValueError("mode must be case1 or case2")
    schedule = schedule or SamplingSchedule.uniform(h)
    kw = {"schedule": schedule, "dt": dt, "t_final": t_final, "noise_std": noise_std,
          "corruption_policy": policy, "solver": solver or SolverConfig()}
    seeds = np.random.SeedSequence(seed).spawn(trials)
    jobs = []
    for eps in eps_list:
        for j, ss in enumerate(seeds):
            rng = np.random.default_rng(ss)
            x0 = rng.uniform(-1, 1, plant.n) * ic_scale * plant.box.state_bound
            trial_seed = int(rng.integers(2**31))
            jobs.append((plant, mode, eps, x0, trial_seed, kw))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_scaling_trial, jobs))
    else:
        results = [_scaling_trial(j) for j in jobs]
    rows = []
    for i, eps in enumerate(eps_list):
        r = np.asarray(results[i * trials:(i + 1) * trials])
        ok = r[np.isfinite(r)]
        rows.append(ScalingRow(eps, float(np.median(ok)) if ok.size else float("nan"),
                               float(np.mean(ok)) if ok.size else float("nan"),
                               float(np.std(ok)) if ok.size else float("nan"),
                               int(np.sum(~np.isfinite(r))), [float(v) for v in r]))
    return rows
