"""Dense-network surrogate for the predictor and sampling-horizon operators.

The network maps the flattened pair ``(x, U on its grid)`` to the
flattened output trajectory. Inputs and outputs are standardized with
statistics of the training split, which are stored with the weights.
Training is minibatch SGD with momentum and a cosine learning-rate decay,
written against numpy so that every run is reproducible from its seed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .delayline import InputHistory
from .dynamics import Plant
from .predictor import (MULTISTEP, PREDICTOR, SolverConfig, Trajectory, solve_flow,
                        solve_predictor)

log = logging.getLogger(__name__)

KINDS = (MULTISTEP, PREDICTOR)
IDENTITY, TANH = 0, 1


class SurrogateError(RuntimeError):
    pass


class LayoutError(ValueError):
    pass


class TrainingError(SurrogateError):
    def __init__(self, msg, epoch=None):
        super().__init__(msg)
        self.epoch = epoch


class DatasetGenerationError(SurrogateError):
    def __init__(self, msg, stats):
        super().__init__(msg)
        self.stats = stats


class FileFormatError(ValueError):
    pass


@dataclass
class Layer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray
    activation: int = TANH

    def copy(self) -> "Layer":
        return Layer(self.weight.copy(), self.bias.copy(), self.activation)


def forward(layers, z):
    for layer in layers:
        z = z @ layer.weight + layer.bias
        if layer.activation == TANH:
            z = np.tanh(z)
    return z


def loss_and_grads(layers, inputs, targets):
    """Mean squared error over all output entries and its parameter gradients."""
    acts = [inputs]
    z = inputs
    for layer in layers:
        z = z @ layer.weight + layer.bias
        if layer.activation == TANH:
            z = np.tanh(z)
        acts.append(z)
    diff = z - targets
    loss = float(np.mean(diff * diff))
    delta = 2.0 * diff / diff.size
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        if layer.activation == TANH:
            delta = delta * (1.0 - acts[i + 1] ** 2)
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i:
            delta = delta @ layer.weight.T
    return loss, grads


def init_layers(sizes, rng) -> list[Layer]:
    """Glorot-normal weights, zero biases, tanh on every layer but the last."""
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = rng.normal(0.0, math.sqrt(2.0 / (a + b)), (a, b))
        act = IDENTITY if i == len(sizes) - 2 else TANH
        layers.append(Layer(w, np.zeros(b), act))
    return layers


@dataclass
class OperatorDataset:
    """Training pairs ``(x, U) -> target`` sharing one plant and grid layout.

    ``histories`` has shape ``(N, G, m)`` on a uniform grid over
    ``[-D, 0]``; ``targets`` has shape ``(N, P, n)`` with node ``k`` at
    ``target_t0 + k * target_dt``. The last ``split`` fraction of entries
    is the validation set.
    """

    kind: str
    plant_name: str
    delay: float
    horizon: float
    target_t0: float
    target_dt: float
    states: np.ndarray
    histories: np.ndarray
    targets: np.ndarray
    split: float = 0.2
    solver_tol: float = 1e-6
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}")
        n = len(self.states)
        if not (len(self.histories) == n == len(self.targets)):
            raise ValueError("states, histories and targets must have equal length")

    def __len__(self):
        return len(self.states)

    @property
    def n_val(self) -> int:
        return int(round(len(self) * self.split))

    @property
    def train_slice(self) -> slice:
        return slice(0, len(self) - self.n_val)

    @property
    def val_slice(self) -> slice:
        return slice(len(self) - self.n_val, len(self))

    @property
    def dataset_id(self) -> str:
        h = hashlib.sha256()
        for a in (self.states, self.histories, self.targets):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        h.update(f"{self.kind}|{self.plant_name}|{self.delay!r}|{self.horizon!r}".encode())
        return h.hexdigest()[:16]

    def history(self, i: int) -> InputHistory:
        return InputHistory(self.histories[i], self.delay)

    def target(self, i: int) -> Trajectory:
        return Trajectory(self.target_t0, self.target_dt, self.targets[i])

    def entry(self, i: int):
        return self.states[i], self.history(i), self.target(i)


def _flatten(states, histories):
    return np.concatenate([states, histories.reshape(len(states), -1)], axis=1)


@dataclass
class SurrogateModel:
    kind: str
    state_dim: int
    history_points: int
    input_dim: int
    output_points: int
    delay: float
    horizon: float
    out_t0: float
    out_dt: float
    in_mean: np.ndarray
    in_scale: np.ndarray
    out_mean: np.ndarray
    out_scale: np.ndarray
    layers: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        width = self.state_dim + self.history_points * self.input_dim
        if self.layers[0].weight.shape[0] != width:
            raise LayoutError("first layer does not match the input layout")
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise LayoutError("layer dimensions do not chain")
        if self.layers[-1].weight.shape[1] != self.output_points * self.state_dim:
            raise LayoutError("last layer does not match the output layout")
        for layer in self.layers:
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise SurrogateError("non-finite weights")

    @property
    def epsilon(self) -> float | None:
        return self.meta.get("eps_max")

    def raw(self, features: np.ndarray) -> np.ndarray:
        """Batched forward pass on flattened ``(x, U)`` rows, in physical units."""
        z = (features - self.in_mean) / self.in_scale
        return forward(self.layers, z) * self.out_scale + self.out_mean

    def predict(self, x, history: InputHistory) -> Trajectory:
        return predict(self, x, history)

    def copy(self) -> "SurrogateModel":
        return replace(self, layers=[layer.copy() for layer in self.layers],
                       meta=json.loads(json.dumps(self.meta)))


def predict(model: SurrogateModel, x, history: InputHistory) -> Trajectory:
    """One forward pass; the output lives on the model's own grid."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != model.state_dim:
        raise LayoutError(f"state has {x.shape[0]} entries, model expects {model.state_dim}")
    if history.grid_points != model.history_points or history.input_dim != model.input_dim:
        raise LayoutError(
            f"history layout ({history.grid_points}, {history.input_dim}) != model "
            f"({model.history_points}, {model.input_dim})")
    feat = np.concatenate([x, history.samples.reshape(-1)])
    out = model.raw(feat[None, :])[0]
    return Trajectory(model.out_t0, model.out_dt, out.reshape(model.output_points, model.state_dim))


def measure_epsilon(model: SurrogateModel, dataset: OperatorDataset) -> tuple[float, float]:
    """Mean and max over the validation split of the per-entry sup-grid error."""
    sl = dataset.val_slice
    if dataset.n_val == 0:
        raise SurrogateError("dataset has an empty validation split")
    return _sup_errors(model, dataset, sl)


def _sup_errors(model, dataset, sl):
    _check_layout(model, dataset)
    states, hist, targ = dataset.states[sl], dataset.histories[sl], dataset.targets[sl]
    pred = model.raw(_flatten(states, hist)).reshape(targ.shape)
    err = np.max(np.linalg.norm(pred - targ, axis=2), axis=1)
    return float(np.mean(err)), float(np.max(err))


def _check_layout(model, dataset):
    g, m = dataset.histories.shape[1:]
    p, n = dataset.targets.shape[1:]
    if (dataset.kind != model.kind or g != model.history_points or m != model.input_dim
            or p != model.output_points or n != model.state_dim):
        raise LayoutError("dataset layout does not match the model")


def _standardize(a):
    mean = a.mean(axis=0)
    scale = a.std(axis=0)
    # constant features (e.g. a pinned grid node) are only centered
    scale = np.where(scale > 1e-12, scale, 1.0)
    return mean, scale


OPTIMIZERS = ("momentum", "adam")


class _Momentum:
    def __init__(self, layers, momentum):
        self.mu = momentum
        self.vel = [[np.zeros_like(l.weight), np.zeros_like(l.bias)] for l in layers]

    def step(self, layers, grads, lr):
        for layer, vel, (gw, gb) in zip(layers, self.vel, grads):
            vel[0] *= self.mu
            vel[0] -= lr * gw
            vel[1] *= self.mu
            vel[1] -= lr * gb
            layer.weight += vel[0]
            layer.bias += vel[1]


class _Adam:
    def __init__(self, layers, beta1=0.9, beta2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps, self.t = beta1, beta2, eps, 0
        self.m = [[np.zeros_like(l.weight), np.zeros_like(l.bias)] for l in layers]
        self.v = [[np.zeros_like(l.weight), np.zeros_like(l.bias)] for l in layers]

    def step(self, layers, grads, lr):
        self.t += 1
        c1, c2 = 1.0 - self.b1 ** self.t, 1.0 - self.b2 ** self.t
        for layer, m, v, g in zip(layers, self.m, self.v, grads):
            for j, param in enumerate((layer.weight, layer.bias)):
                m[j] *= self.b1
                m[j] += (1.0 - self.b1) * g[j]
                v[j] *= self.b2
                v[j] += (1.0 - self.b2) * g[j] * g[j]
                param -= lr * (m[j] / c1) / (np.sqrt(v[j] / c2) + self.eps)


def _fit(layers, opt, zin, zout, epochs, batch, learning_rate, rng):
    n_train = len(zin)
    steps_per_epoch = max(1, math.ceil(n_train / batch))
    total = epochs * steps_per_epoch
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n_train)
        for b in range(steps_per_epoch):
            idx = order[b * batch:(b + 1) * batch]
            loss, grads = loss_and_grads(layers, zin[idx], zout[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"loss became {loss} in epoch {epoch}", epoch)
            lr = 0.5 * learning_rate * (1.0 + math.cos(math.pi * step / total))
            opt.step(layers, grads, lr)
            step += 1
        if not all(np.all(np.isfinite(l.weight)) for l in layers):
            raise TrainingError(f"weights became non-finite in epoch {epoch}", epoch)


def train(dataset: OperatorDataset, arch=(128, 128), epochs: int = 200,
          learning_rate: float = 0.05, batch: int = 32, seed: int = 0,
          momentum: float = 0.9, optimizer: str = "momentum") -> SurrogateModel:
    """Fit a tanh network to the training split and record its validation error.

    ``optimizer`` is ``"momentum"`` (SGD with heavy-ball momentum) or
    ``"adam"``; both follow a cosine learning-rate decay to zero.
    ``epochs=0`` returns the initialization untouched.
    """
    if optimizer not in OPTIMIZERS:
        raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
    if epochs < 0 or batch < 1 or not learning_rate > 0:
        raise ValueError("epochs >= 0, batch >= 1 and learning_rate > 0 are required")
    if len(dataset) == 0:
        raise SurrogateError("empty dataset")
    if dataset.n_val == 0:
        raise SurrogateError("dataset has an empty validation split")
    tr = dataset.train_slice
    if tr.stop - tr.start == 0:
        raise SurrogateError("dataset has an empty training split")
    rng = np.random.default_rng(seed)
    inputs = _flatten(dataset.states[tr], dataset.histories[tr])
    outputs = dataset.targets[tr].reshape(len(inputs), -1)
    in_mean, in_scale = _standardize(inputs)
    out_mean, out_scale = _standardize(outputs)
    zin = (inputs - in_mean) / in_scale
    zout = (outputs - out_mean) / out_scale

    sizes = [zin.shape[1], *arch, zout.shape[1]]
    layers = init_layers(sizes, rng)
    opt = _Adam(layers) if optimizer == "adam" else _Momentum(layers, momentum)
    initial_loss = loss_and_grads(layers, zin, zout)[0]
    # overflow is caught below as a non-finite loss
    with np.errstate(over="ignore", invalid="ignore"):
        _fit(layers, opt, zin, zout, epochs, batch, learning_rate, rng)

    g, m_dim = dataset.histories.shape[1:]
    p, n = dataset.targets.shape[1:]
    model = SurrogateModel(dataset.kind, n, g, m_dim, p, dataset.delay, dataset.horizon,
                           dataset.target_t0, dataset.target_dt, in_mean, in_scale,
                           out_mean, out_scale, layers)
    final_loss = loss_and_grads(layers, zin, zout)[0]
    eps_mean, eps_max = measure_epsilon(model, dataset)
    val = dataset.val_slice
    pred = model.raw(_flatten(dataset.states[val], dataset.histories[val]))
    mse = float(np.mean((pred - dataset.targets[val].reshape(len(pred), -1)) ** 2))
    model.meta = {
        "dataset_id": dataset.dataset_id,
        "plant": dataset.plant_name,
        "arch": list(arch),
        "epochs": epochs,
        "learning_rate": learning_rate,
        "batch": batch,
        "momentum": momentum,
        "optimizer": optimizer,
        "seed": seed,
        "initial_train_loss": initial_loss,
        "final_train_loss": final_loss,
        "eps_mean": eps_mean,
        "eps_max": eps_max,
        "val_mse": mse,
    }
    log.info("trained %s surrogate: eps_mean=%.3e eps_max=%.3e", dataset.kind, eps_mean, eps_max)
    return model


def lipschitz_bound(model: SurrogateModel) -> float:
    """Upper bound on the Lipschitz constant of ``predict`` w.r.t. the
    flattened input, in Euclidean norms.

    Product of the layer spectral norms (tanh is 1-Lipschitz) times the
    largest input and output standardization factors.
    """
    bound = float(np.max(1.0 / model.in_scale) * np.max(model.out_scale))
    for layer in model.layers:
        bound *= float(np.linalg.norm(layer.weight, 2))
    return bound


def _grid_indices(n_fine: int, n_coarse: int):
    pos = np.linspace(0.0, n_fine - 1.0, n_coarse)
    return pos


def _subsample(traj: Trajectory, n_points: int) -> np.ndarray:
    t = np.linspace(traj.t0, traj.t0 + traj.dt * (len(traj) - 1), n_points)
    return np.stack([traj.at(s) for s in t])


def exact_target(plant: Plant, kind: str, x, history: InputHistory, horizon: float,
                 output_points: int, solver: SolverConfig, flow_points: int) -> np.ndarray:
    """The exact operator output for one pair, on ``output_points`` uniform nodes."""
    pred = solve_predictor(plant, x, history, solver)
    if pred.meta["residual"] > solver.tol:
        raise SurrogateError("predictor residual above tolerance")
    if kind == PREDICTOR:
        traj = pred
    else:
        traj = solve_flow(plant, pred.endpoint, horizon,
                          SolverConfig(solver.tol, solver.max_iters, flow_points))
    return _subsample(traj, output_points)


def generate_dataset(plant: Plant, kind: str, n_pairs: int, noise_std: float, seed: int, *,
                     horizon: float = 0.05, dt: float = 1e-3, schedule=None,
                     rollout_time: float = 4.0, ic_scale: float = 0.5,
                     history_points: int | None = None, output_points: int = 21,
                     split: float = 0.2, tol: float = 1e-6) -> OperatorDataset:
    """Roll out the numerical-predictor closed loop and record operator pairs.

    Each rollout starts from a random state in ``ic_scale`` times the
    domain box with a zero input history. At every sampling instant the
    noisy measurement and the input history (resampled to
    ``history_points`` and made continuous) are stored together with the
    exact operator output for that very pair. Rollouts that diverge are
    skipped; more than half skipped is an error.
    """
    from .simloop import (BASELINE, SamplingSchedule, SimConfig, SimulationDiverged, run,
                          _steps)
    from .predictor import PredictorError

    if kind not in KINDS:
        raise ValueError(f"unknown operator kind {kind!r}")
    if n_pairs < 10:
        raise ValueError("n_pairs must be >= 10")
    n_grid = _steps(plant.delay, dt, "delay") + 1
    history_points = history_points or n_grid
    flow_points = _steps(horizon, dt, "horizon") + 1
    schedule = schedule or (SamplingSchedule.uniform(horizon) if kind == MULTISTEP
                            else SamplingSchedule.random_bounded(0.02, 0.1))
    solver = SolverConfig(tol=tol)
    seq = np.random.SeedSequence(seed)
    states, hists, targets = [], [], []
    attempts = skipped = 0
    while len(states) < n_pairs:
        (child,) = seq.spawn(1)
        rng = np.random.default_rng(child)
        x0 = rng.uniform(-1, 1, plant.n) * ic_scale * plant.box.state_bound
        sched = replace(schedule, seed=int(rng.integers(2**31)))
        cfg = SimConfig(plant, BASELINE, schedule=sched, noise_std=noise_std, dt=dt,
                        t_final=rollout_time, initial_state=x0, seed=int(rng.integers(2**31)),
                        solver=solver, record_timing=False)
        rec = []

        def on_sample(t, y, hist):
            rec.append((y.copy(), hist.resample(history_points).continuous()))

        attempts += 1
        try:
            run(cfg, on_sample=on_sample)
            rows = [(y, h.samples,
                     exact_target(plant, kind, y, h, horizon, output_points, solver, flow_points))
                    for y, h in rec]
        except (SimulationDiverged, PredictorError) as exc:
            skipped += 1
            log.warning("rollout %d skipped: %s", attempts, exc)
            if attempts >= 4 and skipped / attempts > 0.5:
                raise DatasetGenerationError(
                    f"{skipped} of {attempts} rollouts diverged",
                    {"attempts": attempts, "skipped": skipped}) from None
            continue
        for y, h, tg in rows[:n_pairs - len(states)]:
            states.append(y)
            hists.append(h)
            targets.append(tg)
    if skipped / attempts > 0.5:
        raise DatasetGenerationError(f"{skipped} of {attempts} rollouts diverged",
                                     {"attempts": attempts, "skipped": skipped})
    if kind == PREDICTOR:
        t0, tdt = -plant.delay, plant.delay / (output_points - 1)
    else:
        t0, tdt = 0.0, horizon / (output_points - 1)
    return OperatorDataset(kind, plant.name, plant.delay, horizon, t0, tdt,
                           np.asarray(states), np.asarray(hists), np.asarray(targets),
                           split=split, solver_tol=tol,
                           meta={"noise_std": noise_std, "seed": seed, "dt": dt,
                                 "rollouts": attempts, "skipped": skipped,
                                 "schedule": schedule.to_dict(),
                                 "plant_params": plant.params()})


# -- binary files -----------------------------------------------------------
#
# Both files start with b"DCOP", a little-endian u32 format version and a
# u32 file type (1 model, 2 dataset), and end with a u32 CRC32 of all
# preceding bytes. Arrays are row-major little-endian float64.

MAGIC = b"DCOP"
VERSION = 1
FILE_MODEL, FILE_DATASET = 1, 2
_KIND_TAG = {MULTISTEP: 0, PREDICTOR: 1}
_TAG_KIND = {v: k for k, v in _KIND_TAG.items()}


class _Writer:
    def __init__(self):
        self.parts = []

    def u32(self, *vals):
        self.parts.append(struct.pack(f"<{len(vals)}I", *vals))

    def f64(self, *vals):
        self.parts.append(struct.pack(f"<{len(vals)}d", *vals))

    def array(self, a):
        self.parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())

    def text(self, s):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.parts.append(b)

    def finish(self) -> bytes:
        body = b"".join(self.parts)
        return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes, file_type: int):
        if len(data) < 16 or data[:4] != MAGIC:
            raise FileFormatError("not a DCOP file (bad magic bytes)")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise FileFormatError("checksum mismatch; file is corrupt")
        self.data, self.pos = body, 4
        version, ftype = self.u32(2)
        if version != VERSION:
            raise FileFormatError(f"unsupported format version {version}")
        if ftype != file_type:
            raise FileFormatError(f"file type {ftype} where {file_type} was expected")

    def _take(self, n):
        if self.pos + n > len(self.data):
            raise FileFormatError("truncated file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count=1):
        return struct.unpack(f"<{count}I", self._take(4 * count))

    def f64(self, count=1):
        return struct.unpack(f"<{count}d", self._take(8 * count))

    def array(self, shape):
        count = int(np.prod(shape))
        return np.frombuffer(self._take(8 * count), dtype="<f8").astype(float).reshape(shape)

    def text(self):
        (n,) = self.u32()
        return self._take(n).decode("utf-8")

    def done(self):
        if self.pos != len(self.data):
            raise FileFormatError("trailing bytes in file")


def model_to_bytes(model: SurrogateModel) -> bytes:
    w = _Writer()
    w.parts.append(MAGIC)
    w.u32(VERSION, FILE_MODEL, _KIND_TAG[model.kind])
    w.u32(model.state_dim, model.history_points, model.input_dim, model.output_points)
    w.f64(model.delay, model.horizon, model.out_t0, model.out_dt)
    w.u32(len(model.in_mean))
    w.array(model.in_mean)
    w.array(model.in_scale)
    w.u32(len(model.out_mean))
    w.array(model.out_mean)
    w.array(model.out_scale)
    w.u32(len(model.layers))
    for layer in model.layers:
        rows, cols = layer.weight.shape
        w.u32(rows, cols, layer.activation)
        w.array(layer.weight)
        w.array(layer.bias)
    w.text(json.dumps(model.meta, sort_keys=True))
    return w.finish()


def model_from_bytes(data: bytes) -> SurrogateModel:
    r = _Reader(data, FILE_MODEL)
    (tag,) = r.u32()
    if tag not in _TAG_KIND:
        raise FileFormatError(f"unknown kind tag {tag}")
    n, g, m, p = r.u32(4)
    delay, horizon, t0, tdt = r.f64(4)
    (n_in,) = r.u32()
    in_mean, in_scale = r.array((n_in,)), r.array((n_in,))
    (n_out,) = r.u32()
    out_mean, out_scale = r.array((n_out,)), r.array((n_out,))
    (n_layers,) = r.u32()
    layers = []
    for _ in range(n_layers):
        rows, cols, act = r.u32(3)
        layers.append(Layer(r.array((rows, cols)), r.array((cols,)), act))
    meta = json.loads(r.text())
    r.done()
    try:
        return SurrogateModel(_TAG_KIND[tag], n, g, m, p, delay, horizon, t0, tdt,
                              in_mean, in_scale, out_mean, out_scale, layers, meta)
    except (LayoutError, SurrogateError) as exc:
        raise FileFormatError(f"inconsistent model file: {exc}") from None


def save_model(model: SurrogateModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> SurrogateModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def dataset_to_bytes(ds: OperatorDataset) -> bytes:
    w = _Writer()
    w.parts.append(MAGIC)
    w.u32(VERSION, FILE_DATASET, _KIND_TAG[ds.kind])
    n_e, g, m = ds.histories.shape
    p, n = ds.targets.shape[1:]
    w.u32(n_e, n, g, m, p)
    w.f64(ds.delay, ds.horizon, ds.target_t0, ds.target_dt, ds.split, ds.solver_tol)
    w.text(ds.plant_name)
    w.text(json.dumps(ds.meta, sort_keys=True))
    w.array(ds.states)
    w.array(ds.histories)
    w.array(ds.targets)
    return w.finish()


def dataset_from_bytes(data: bytes) -> OperatorDataset:
    r = _Reader(data, FILE_DATASET)
    (tag,) = r.u32()
    if tag not in _TAG_KIND:
        raise FileFormatError(f"unknown kind tag {tag}")
    n_e, n, g, m, p = r.u32(5)
    delay, horizon, t0, tdt, split, tol = r.f64(6)
    name = r.text()
    meta = json.loads(r.text())
    states = r.array((n_e, n))
    hists = r.array((n_e, g, m))
    targets = r.array((n_e, p, n))
    r.done()
    return OperatorDataset(_TAG_KIND[tag], name, delay, horizon, t0, tdt, states, hists,
                           targets, split, tol, meta)


def save_dataset(ds: OperatorDataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(ds))


def load_dataset(path) -> OperatorDataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())
