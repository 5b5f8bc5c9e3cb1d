"""Command-line experiment runner.

Every subcommand reads one JSON config (``--config``), applies flag
overrides, writes its primary outputs plus ``manifest.json`` into
``--out`` and returns an exit code: 0 success, 2 config or validation
error, 3 runtime failure (divergence, non-finite loss), 4 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import BenchError, run_bench
from .bounds import build_bounds, corollary_bound
from .delayline import GridAlignmentError
from .dynamics import PLANTS, make_plant
from .predictor import PREDICTOR, PredictorError, SolverConfig
from .simloop import (BASELINE, CASE1, CASE2, MODES, ConfigError, SamplingSchedule, SimConfig,
                      SimulationDiverged, prediction_error_series, residual_scaling_experiment,
                      run, state_input_residual, steady_state, tracking_error_series)
from .surrogate import (KINDS, DatasetGenerationError, FileFormatError, LayoutError, SurrogateError,
                        TrainingError, generate_dataset, load_dataset, load_model, save_dataset,
                        save_model, train)

log = logging.getLogger("delaycomp")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4
PREDICTION_FLOOR = 1e-4

DEFAULTS = {
    "plant": {"name": "scalar", "params": {}},
    "sim": {
        "controller_mode": BASELINE,
        "schedule": {"mode": "uniform", "h": 0.05},
        "noise_std": 0.0,
        "dt": 1e-3,
        "t_final": 10.0,
        "initial_state": None,
        "initial_history": "zero",
        "model": None,
        "corruption_eps": 0.0,
        "corruption_policy": "flow",
        "record_timing": True,
    },
    "solver": {"tol": 1e-6, "max_iters": 200},
    "data": {
        "kind": PREDICTOR,
        "n_pairs": 2000,
        "noise_std": 0.1,
        "horizon": 0.05,
        "dt": 1e-3,
        "rollout_time": 0.6,
        "ic_scale": 0.5,
        "history_points": 11,
        "output_points": 21,
        "split": 0.2,
        "schedule": None,
    },
    "train": {
        "dataset": None,
        "arch": [128, 128],
        "epochs": 3000,
        "learning_rate": 2e-3,
        "batch": 64,
        "optimizer": "adam",
    },
    "scaling": {
        "mode": CASE2,
        "compare": False,
        "eps_list": [0.0, 0.01, 0.05, 0.1],
        "trials": 20,
        "dt": 5e-3,
        "t_final": 15.0,
        "h": 0.05,
        "ic_scale": 0.5,
        "policy": "flow",
    },
    "bench": {"model": None, "n_evals": 200, "tol_list": [1e-3, 1e-6]},
}


# sections whose keys are not fixed in advance
FREE_FORM = ("params", "schedule")


class CliConfigError(Exception):
    """Config problem, reported with the offending line when it can be found."""


def _line_of(text: str, key: str) -> int | None:
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


class Config:
    def __init__(self, data: dict, path: str | None = None, text: str = ""):
        self.data, self.path, self.text = data, path, text

    def error(self, section: str, key: str, msg: str) -> CliConfigError:
        where = self.path or "<defaults>"
        line = _line_of(self.text, key) if self.text else None
        loc = f"{where}:{line}" if line else where
        return CliConfigError(f"{loc}: {section}.{key}: {msg}")

    def section(self, name: str) -> dict:
        return self.data[name]

    def canonical(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def _merge(base: dict, over: dict, text: str, path: str, prefix=""):
    for key, val in over.items():
        if key not in base:
            line = _line_of(text, key)
            raise CliConfigError(f"{path}:{line or '?'}: unknown key {prefix}{key!r}")
        if isinstance(base[key], dict) and key not in FREE_FORM:
            if not isinstance(val, dict):
                raise CliConfigError(f"{path}:{_line_of(text, key) or '?'}: "
                                     f"{prefix}{key} must be an object")
            _merge(base[key], val, text, path, f"{prefix}{key}.")
        else:
            base[key] = val


def load_config(path: str | None) -> Config:
    data = copy.deepcopy(DEFAULTS)
    if path is None:
        return Config(data)
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise CliConfigError(f"{path}:1: top level must be a JSON object")
    _merge(data, raw, text, path)
    return Config(data, path, text)


# -- config to objects --------------------------------------------------------

def _plant(cfg: Config):
    sec = cfg.section("plant")
    if sec["name"] not in PLANTS:
        raise cfg.error("plant", "name", f"unknown plant {sec['name']!r}; "
                        f"choose from {sorted(PLANTS)}")
    try:
        return make_plant(sec["name"], **sec["params"])
    except (TypeError, ValueError) as exc:
        raise cfg.error("plant", "params", str(exc)) from None


def _solver(cfg: Config) -> SolverConfig:
    sec = cfg.section("solver")
    try:
        return SolverConfig(tol=float(sec["tol"]), max_iters=int(sec["max_iters"]))
    except (TypeError, ValueError) as exc:
        raise cfg.error("solver", "tol", str(exc)) from None


def _schedule(cfg: Config, seed: int, section: str = "sim") -> SamplingSchedule:
    sec = cfg.section(section)["schedule"]
    if not isinstance(sec, dict):
        raise cfg.error(section, "schedule", "must be an object")
    mode = sec.get("mode", "uniform")
    try:
        if mode == "uniform":
            return SamplingSchedule.uniform(float(sec.get("h", 0.05)))
        if mode == "random":
            return SamplingSchedule.random_bounded(float(sec["min_gap"]), float(sec["max_gap"]),
                                                   int(sec.get("seed", seed)))
    except KeyError as exc:
        raise cfg.error("sim.schedule", exc.args[0], "required for random schedules") from None
    except (ConfigError, TypeError, ValueError) as exc:
        raise cfg.error("sim", "schedule", str(exc)) from None
    raise cfg.error("sim.schedule", "mode", f"unknown schedule mode {mode!r}")


def _sim_config(cfg: Config, seed: int, plant) -> SimConfig:
    sec = cfg.section("sim")
    mode = sec["controller_mode"]
    if mode not in MODES:
        raise cfg.error("sim", "controller_mode", f"must be one of {MODES}")
    schedule = _schedule(cfg, seed)
    if mode == CASE1 and schedule.mode != "uniform":
        raise cfg.error("sim", "controller_mode",
                        f"controller_mode={mode} conflicts with schedule.mode={schedule.mode}; "
                        "case1 requires a uniform schedule")
    operator = None
    if sec["model"] is not None:
        if mode == BASELINE:
            raise cfg.error("sim", "model", "baseline mode does not take a model")
        model_path = Path(sec["model"])
        if not model_path.is_file():
            raise cfg.error("sim", "model", f"model file {str(model_path)!r} not found")
        try:
            operator = load_model(model_path)
        except FileFormatError as exc:
            raise cfg.error("sim", "model", str(exc)) from None
    x0 = sec["initial_state"]
    if x0 is None:
        x0 = np.zeros(plant.n)
        x0[0] = 1.0
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (plant.n,):
        raise cfg.error("sim", "initial_state", f"needs {plant.n} entries")
    if sec["initial_history"] not in ("zero", "hold"):
        raise cfg.error("sim", "initial_history", "must be 'zero' or 'hold'")
    sim = SimConfig(plant, mode, operator, schedule, float(sec["noise_std"]), float(sec["dt"]),
                    float(sec["t_final"]), x0, sec["initial_history"], seed, _solver(cfg),
                    float(sec["corruption_eps"]), sec["corruption_policy"],
                    bool(sec["record_timing"]))
    from .simloop import validate
    try:
        validate(sim)
    except ConfigError as exc:
        key = "model" if "operator" in str(exc) else "controller_mode"
        raise cfg.error("sim", key, str(exc)) from None
    return sim


def _bounds(plant, h: float):
    c_f, c_k = plant.lipschitz
    return build_bounds(c_f, c_k, plant.delay, h)


# -- output helpers -----------------------------------------------------------

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


def _manifest(out: Path, command: str, cfg: Config, seed: int, inputs, outputs, started,
              extra=None) -> None:
    m = {
        "subcommand": command,
        "config_path": cfg.path,
        "config_hash": cfg.digest,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "started": started,
        "finished": _now(),
    }
    if extra:
        m.update(extra)
    _write_json(out / "manifest.json", m)


# -- subcommands --------------------------------------------------------------

def cmd_simulate(args, cfg: Config, out: Path) -> int:
    started = _now()
    plant = _plant(cfg)
    sim = _sim_config(cfg, args.seed, plant)
    if args.no_timing:
        sim.record_timing = False
    bounds = _bounds(plant, sim.schedule.bound)
    csv_path, side_path = out / "sim.csv", out / "sim.json"
    try:
        slog = run(sim)
        code = EXIT_OK
        err = None
    except SimulationDiverged as exc:
        slog, code, err = exc.log, EXIT_RUNTIME, str(exc)
    except PredictorError as exc:
        print(f"error: predictor failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    slog.write_csv(csv_path, timing=sim.record_timing)
    summary = _sim_summary(slog, sim, bounds)
    side = {"config": sim.summary(), "bounds": bounds.to_dict(), "summary": summary,
            "diverged": err}
    _write_json(side_path, side)
    timing = slog.wallclock_ns[slog.sample_idx]
    _manifest(out, "simulate", cfg, args.seed, [cfg.path] if cfg.path else [],
              [csv_path, side_path], started,
              {"mean_eval_ns": float(timing.mean()) if len(timing) else None})
    if err:
        print(f"error: {err}; partial log written to {csv_path}", file=sys.stderr)
        return code
    print(f"rows: {len(slog.t)}")
    for key, val in summary.items():
        if key != "checks":
            print(f"{key}: {val:.6g}" if isinstance(val, float) else f"{key}: {val}")
    for line in summary["checks"]:
        print(line)
    return code


def _sim_summary(slog, sim: SimConfig, bounds) -> dict:
    plant = slog.plant
    err = prediction_error_series(slog)
    final = float(np.linalg.norm(slog.x[-1][list(plant.regulated_dims)]))
    out = {"final_state_norm": final, "prediction_error_sup": float(np.max(err.values))
           if len(err.values) else float("nan")}
    out["max_state_norm"] = float(np.max(np.linalg.norm(slog.x[:, list(plant.regulated_dims)],
                                                        axis=1)))
    window = min(0.25, slog.t[-1])
    if window > 0:
        track = tracking_error_series(slog, window=window).values
        out["final_tracking_error"] = float(track[-1])
        out["steady_tracking_error"] = float(steady_state(track))
    checks = []
    if sim.controller_mode == BASELINE:
        ok = out["prediction_error_sup"] <= PREDICTION_FLOOR
        checks.append(f"prediction_error_sup <= {PREDICTION_FLOOR:g}: {'PASS' if ok else 'FAIL'}")
    else:
        eps = sim.corruption_eps
        model_eps = getattr(sim.operator, "epsilon", None)
        if model_eps is not None:
            eps += model_eps
        limit = (eps if sim.controller_mode == CASE1 else corollary_bound(bounds, eps))
        limit += PREDICTION_FLOOR
        frac = _interval_fraction(slog, err, limit)
        ok = frac >= 0.95
        out["interval_fraction_within_bound"] = frac
        checks.append(f"prediction error <= {limit:.3g} on {frac:.1%} of intervals (>=95%): "
                      f"{'PASS' if ok else 'FAIL'}")
    out["checks"] = checks
    return out


def _interval_fraction(slog, err, limit: float) -> float:
    """Share of inter-sample intervals whose sup prediction error is within ``limit``."""
    n_valid = len(err.values)
    edges = [int(i) for i in slog.sample_idx if i < n_valid] + [n_valid]
    sups = [np.max(err.values[a:b]) for a, b in zip(edges[:-1], edges[1:]) if b > a]
    if not sups:
        return float("nan")
    return float(np.mean(np.asarray(sups) <= limit))


def cmd_gen_data(args, cfg: Config, out: Path) -> int:
    started = _now()
    plant = _plant(cfg)
    sec = cfg.section("data")
    if args.n_pairs is not None:
        sec["n_pairs"] = args.n_pairs
    if args.kind is not None:
        sec["kind"] = args.kind
    if sec["kind"] not in KINDS:
        raise cfg.error("data", "kind", f"must be one of {KINDS}")
    schedule = _schedule(cfg, args.seed, "data") if sec["schedule"] is not None else None
    try:
        ds = generate_dataset(plant, sec["kind"], int(sec["n_pairs"]), float(sec["noise_std"]),
                              args.seed, horizon=float(sec["horizon"]), dt=float(sec["dt"]),
                              schedule=schedule, rollout_time=float(sec["rollout_time"]),
                              ic_scale=float(sec["ic_scale"]),
                              history_points=sec["history_points"],
                              output_points=int(sec["output_points"]),
                              split=float(sec["split"]), tol=_solver(cfg).tol)
    except DatasetGenerationError as exc:
        print(f"error: {exc}; skip statistics: {json.dumps(exc.stats)}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, ConfigError) as exc:
        raise CliConfigError(f"{cfg.path or '<defaults>'}: data: {exc}") from None
    path = out / "dataset.dcop"
    save_dataset(ds, path)
    _manifest(out, "gen-data", cfg, args.seed, [cfg.path] if cfg.path else [], [path], started,
              {"dataset_id": ds.dataset_id, "entries": len(ds)})
    print(f"wrote {len(ds)} entries to {path} (dataset_id {ds.dataset_id}, "
          f"{ds.meta['skipped']} of {ds.meta['rollouts']} rollouts skipped)")
    return EXIT_OK


def cmd_train(args, cfg: Config, out: Path) -> int:
    started = _now()
    sec = cfg.section("train")
    for key in ("arch", "epochs", "learning_rate", "batch", "optimizer", "dataset"):
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            sec[key] = val
    if sec["dataset"] is None:
        raise cfg.error("train", "dataset", "no dataset given (use --dataset)")
    ds = load_dataset(sec["dataset"])
    try:
        model = train(ds, arch=tuple(int(a) for a in sec["arch"]), epochs=int(sec["epochs"]),
                      learning_rate=float(sec["learning_rate"]), batch=int(sec["batch"]),
                      seed=args.seed, optimizer=sec["optimizer"])
    except TrainingError as exc:
        print(f"error: {exc} (epoch {exc.epoch})", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, LayoutError) as exc:
        raise cfg.error("train", "arch", str(exc)) from None
    except SurrogateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    path = out / "model.dcop"
    save_model(model, path)
    _write_json(out / "train.json", model.meta)
    _manifest(out, "train", cfg, args.seed, [sec["dataset"]], [path, out / "train.json"],
              started)
    print(f"eps_mean (mean sup-error): {model.meta['eps_mean']:.6g}")
    print(f"eps_max  (max sup-error):  {model.meta['eps_max']:.6g}")
    print(f"validation mean-square error over grid points and entries: "
          f"{model.meta['val_mse']:.6g}")
    return EXIT_OK


def _scaling_rows(plant, mode, sec, seed, workers, cfg):
    return residual_scaling_experiment(
        plant, mode, sec["eps_list"], int(sec["trials"]), seed, dt=float(sec["dt"]),
        t_final=float(sec["t_final"]), h=float(sec["h"]), ic_scale=float(sec["ic_scale"]),
        policy=sec["policy"], solver=_solver(cfg), workers=workers)


def _monotone(rows) -> bool:
    med = [r.median for r in rows]
    return all(b >= a for a, b in zip(med[:-1], med[1:]))


def cmd_scaling(args, cfg: Config, out: Path) -> int:
    started = _now()
    plant = _plant(cfg)
    sec = cfg.section("scaling")
    if args.eps is not None:
        sec["eps_list"] = args.eps
    if args.trials is not None:
        sec["trials"] = args.trials
    if args.compare:
        sec["compare"] = True
    modes = [CASE1, CASE2] if sec["compare"] else [sec["mode"]]
    for mode in modes:
        if mode not in (CASE1, CASE2):
            raise cfg.error("scaling", "mode", "must be case1 or case2")
    tables, outputs = {}, []
    try:
        for mode in modes:
            tables[mode] = _scaling_rows(plant, mode, sec, args.seed, args.threads, cfg)
    except ValueError as exc:
        raise cfg.error("scaling", "eps_list", str(exc)) from None
    for mode, rows in tables.items():
        path = out / f"scaling_{mode}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eps", "median", "mean", "std", "divergent"])
            for r in rows:
                w.writerow([repr(r.eps), repr(r.median), repr(r.mean), repr(r.std), r.divergent])
        outputs.append(path)
    _manifest(out, "scaling", cfg, args.seed, [cfg.path] if cfg.path else [], outputs, started)
    print(_scaling_table(tables))
    for mode, rows in tables.items():
        print(f"{mode}: medians non-decreasing: {'PASS' if _monotone(rows) else 'FAIL'}")
    return EXIT_OK


def _scaling_table(tables) -> str:
    modes = list(tables)
    head = f"{'eps':>8}" + "".join(f"{m + ' median':>16}{m + ' std':>14}{'div':>5}" for m in modes)
    lines = [head]
    for i, r0 in enumerate(tables[modes[0]]):
        line = f"{r0.eps:>8g}"
        for m in modes:
            r = tables[m][i]
            line += f"{r.median:>16.4e}{r.std:>14.3e}{r.divergent:>5d}"
        lines.append(line)
    return "\n".join(lines)


def cmd_bench(args, cfg: Config, out: Path) -> int:
    started = _now()
    plant = _plant(cfg)
    sec = cfg.section("bench")
    if args.model is not None:
        sec["model"] = args.model
    if args.tol is not None:
        sec["tol_list"] = args.tol
    if args.n_evals is not None:
        sec["n_evals"] = args.n_evals
    if sec["model"] is None:
        raise cfg.error("bench", "model", "no model given (use --model)")
    if not Path(sec["model"]).is_file():
        raise cfg.error("bench", "model", f"model file {sec['model']!r} not found")
    try:
        model = load_model(sec["model"])
        report = run_bench(plant, model, int(sec["n_evals"]),
                           [float(t) for t in sec["tol_list"]], args.seed)
    except (BenchError, FileFormatError) as exc:
        raise cfg.error("bench", "model", str(exc)) from None
    path = out / "bench.json"
    path.write_text(report.to_json() + "\n")
    _manifest(out, "bench", cfg, args.seed, [sec["model"]], [path], started)
    print(report.table())
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "scaling": cmd_scaling,
    "bench": cmd_bench,
}


def _floats(text: str):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str):
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="random seed (default 0)")
    common.add_argument("--out", default=argparse.SUPPRESS,
                        help="output directory (default ./out)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker processes for ensembles (default 1)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="delaycomp", parents=[common],
                                description="Predictor-feedback delay compensation experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="run one closed-loop simulation")
    s.add_argument("--no-timing", action="store_true",
                   help="write zeros in the eval_wallclock_ns column")

    g = sub.add_parser("gen-data", parents=[common], help="generate an operator dataset")
    g.add_argument("--n-pairs", type=int)
    g.add_argument("--kind", choices=KINDS)

    t = sub.add_parser("train", parents=[common], help="train a surrogate on a dataset")
    t.add_argument("--dataset")
    t.add_argument("--arch", type=_ints, help="hidden widths, e.g. 128,128")
    t.add_argument("--epochs", type=int)
    t.add_argument("--learning-rate", dest="learning_rate", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--optimizer", choices=("momentum", "adam"))

    c = sub.add_parser("scaling", parents=[common], help="controlled-eps residual scaling")
    c.add_argument("--eps", type=_floats, help="comma-separated eps list, must include 0")
    c.add_argument("--trials", type=int)
    c.add_argument("--compare", action="store_true", help="run case1 and case2 side by side")

    b = sub.add_parser("bench", parents=[common], help="time surrogate vs numerical predictor")
    b.add_argument("--model")
    b.add_argument("--tol", type=_floats, help="comma-separated solver tolerances")
    b.add_argument("--n-evals", dest="n_evals", type=int)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for key, default in (("seed", 0), ("out", "out"), ("threads", 1), ("config", None),
                         ("verbose", False)):
        if not hasattr(args, key):
            setattr(args, key, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.json", cfg.data)
        return COMMANDS[args.command](args, cfg, out)
    except CliConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, GridAlignmentError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (PredictorError, SurrogateError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
