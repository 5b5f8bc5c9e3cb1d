"""Wall-clock comparison of a trained surrogate against the numerical predictor."""

from __future__ import annotations

import json
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .delayline import InputHistory
from .dynamics import Plant
from .predictor import SolverConfig, Trajectory, solve_predictor
from .surrogate import SurrogateModel

REFERENCE_TOL = 1e-9
SPEEDUP_TOL = 1e-6
MIN_EVALS = 100


class BenchError(ValueError):
    pass


@dataclass
class MethodStats:
    name: str
    n_evals: int
    mean_ns: float
    p50_ns: float
    p95_ns: float
    accuracy: float  # mean sup-gap to the reference over the input set
    accuracy_max: float
    certified_residual: float | None = None


@dataclass
class BenchReport:
    plant: str
    methods: list
    speedup_ratio: float
    speedup_tol: float
    timer_resolution_ns: float
    unreliable: bool
    fingerprint: dict = field(default_factory=dict)
    seed: int = 0

    def method(self, name: str) -> MethodStats:
        for m in self.methods:
            if m.name == name:
                return m
        raise KeyError(name)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = [asdict(m) for m in self.methods]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        head = f"{'method':<22}{'n':>6}{'mean_us':>12}{'p50_us':>12}{'p95_us':>12}{'acc_mean':>12}{'acc_max':>12}"
        rows = [head, "-" * len(head)]
        for m in self.methods:
            rows.append(f"{m.name:<22}{m.n_evals:>6}{m.mean_ns / 1e3:>12.1f}{m.p50_ns / 1e3:>12.1f}"
                        f"{m.p95_ns / 1e3:>12.1f}{m.accuracy:>12.3e}{m.accuracy_max:>12.3e}")
        rows.append(f"speedup (solver tol={self.speedup_tol:g} / surrogate): {self.speedup_ratio:.1f}x"
                    + ("  [UNRELIABLE TIMER]" if self.unreliable else ""))
        return "\n".join(rows)


def fingerprint() -> dict:
    cpu = platform.processor() or platform.machine()
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("model name"):
                    cpu = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return {
        "cpu": cpu,
        "machine": platform.machine(),
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
        "blas_threads": os.environ.get("OMP_NUM_THREADS", "unset"),
    }


def sample_inputs(plant: Plant, n: int, seed: int, dt: float = 1e-3,
                  rollout_time: float = 0.6, ic_scale: float = 0.5, noise_std: float = 0.0):
    """``n`` state/history pairs taken at sampling instants of short baseline rollouts.

    Histories are on the full simulation grid and made continuous so that
    both methods see exactly the same signal.
    """
    from .simloop import BASELINE, SamplingSchedule, SimConfig, run

    seq = np.random.SeedSequence(seed)
    out = []
    while len(out) < n:
        rng = np.random.default_rng(seq.spawn(1)[0])
        x0 = rng.uniform(-1, 1, plant.n) * ic_scale * plant.box.state_bound
        cfg = SimConfig(plant, BASELINE,
                        schedule=SamplingSchedule.random_bounded(0.02, 0.1, int(rng.integers(2**31))),
                        noise_std=noise_std, dt=dt, t_final=rollout_time, initial_state=x0,
                        seed=int(rng.integers(2**31)), record_timing=False)
        run(cfg, on_sample=lambda t, y, h: out.append((y.copy(), h.continuous())))
    return out[:n]


def _trajectory_gap(traj: Trajectory, ref: Trajectory) -> float:
    return float(max(np.linalg.norm(traj.points[k] - ref.at(t))
                     for k, t in enumerate(traj.times)))


def _stats(name, times_ns, gaps, residual=None) -> MethodStats:
    t = np.asarray(times_ns, dtype=float)
    g = np.asarray(gaps)
    return MethodStats(name, len(t), float(t.mean()), float(np.percentile(t, 50)),
                       float(np.percentile(t, 95)), float(g.mean()), float(g.max()), residual)


def timer_unreliable(resolution_ns: float, mean_ns) -> bool:
    """True when the clock resolution exceeds 1% of any measured mean."""
    return any(resolution_ns > 0.01 * m for m in mean_ns)


def _timed(fn, inputs, warmup):
    for x, h in inputs[:warmup]:
        fn(x, h)
    times, outs = [], []
    clock = time.perf_counter_ns
    for x, h in inputs[warmup:]:
        t0 = clock()
        y = fn(x, h)
        times.append(clock() - t0)
        outs.append(y)
    return times, outs


def run_bench(plant: Plant, model: SurrogateModel, n_evals: int = 200,
              tol_list=(1e-3, 1e-6), seed: int = 0, inputs=None) -> BenchReport:
    """Time the surrogate and the numerical predictor on one shared input set.

    ``n_evals`` timed calls per method follow a warmup of 10% of
    ``n_evals`` calls that are discarded. Accuracy of every method is the
    sup-gap to the predictor solved at ``tol=1e-9``, read off the
    method's own output grid. The speedup is the ratio of mean times of
    the solver at ``tol=1e-6`` (or the tightest tolerance in the sweep)
    and the surrogate.
    """
    if n_evals < MIN_EVALS:
        raise BenchError(f"n_evals must be >= {MIN_EVALS}")
    if not tol_list:
        raise BenchError("tol_list must not be empty")
    if model.state_dim != plant.n or model.input_dim != plant.m:
        raise BenchError("model layout does not match the plant")
    if abs(model.delay - plant.delay) > 1e-12:
        raise BenchError(f"model delay {model.delay} != plant delay {plant.delay}")
    warmup = max(1, n_evals // 10)
    if inputs is None:
        inputs = sample_inputs(plant, n_evals + warmup, seed)
    elif len(inputs) < n_evals + warmup:
        raise BenchError(f"need {n_evals + warmup} inputs, got {len(inputs)}")
    inputs = list(inputs[:n_evals + warmup])
    timed_inputs = inputs[warmup:]

    ref_cfg = SolverConfig(tol=REFERENCE_TOL, max_iters=2000)
    refs = [solve_predictor(plant, x, h, ref_cfg) for x, h in timed_inputs]

    methods = []
    for tol in sorted(tol_list, reverse=True):
        cfg = SolverConfig(tol=tol, max_iters=2000)
        times, outs = _timed(lambda x, h: solve_predictor(plant, x, h, cfg), inputs, warmup)
        gaps = [o.sup_distance(r) for o, r in zip(outs, refs)]
        resid = max(o.meta["residual"] for o in outs)
        methods.append(_stats(f"solver tol={tol:g}", times, gaps, resid))

    g = model.history_points
    times, outs = _timed(lambda x, h: model.predict(x, h.resample(g)), inputs, warmup)
    gaps = [_trajectory_gap(o, r) for o, r in zip(outs, refs)]
    methods.append(_stats("surrogate", times, gaps))

    tols = sorted(tol_list)
    speed_tol = SPEEDUP_TOL if SPEEDUP_TOL in tols else tols[0]
    solver = next(m for m in methods if m.name == f"solver tol={speed_tol:g}")
    surrogate = methods[-1]
    resolution = time.get_clock_info("perf_counter").resolution * 1e9
    unreliable = timer_unreliable(resolution, [m.mean_ns for m in methods])
    return BenchReport(plant.name, methods, solver.mean_ns / surrogate.mean_ns, speed_tol,
                       resolution, unreliable, fingerprint(), seed)
