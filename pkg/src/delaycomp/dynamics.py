"""Plants with delayed input and their nominal stabilizing feedback laws.

Every plant is an autonomous vector field ``f(x, u)`` plus a feedback
``kappa(x)`` that stabilizes the delay-free loop ``x' = f(x, kappa(x))``
at the origin. Fields broadcast over leading axes, so the predictor can
evaluate a whole grid of states in one call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class DimensionError(ValueError):
    """Raised when a state or input vector has the wrong length."""


class NonFiniteError(ValueError):
    """Raised when a non-finite value enters or leaves a plant evaluation."""


@dataclass(frozen=True)
class PlantSpec:
    state_dim: int
    input_dim: int
    delay: float
    name: str

    def __post_init__(self):
        if self.state_dim < 1 or self.input_dim < 1:
            raise ValueError("state_dim and input_dim must be >= 1")
        if not self.delay > 0:
            raise ValueError(f"delay must be positive, got {self.delay}")


@dataclass(frozen=True)
class DomainBox:
    """Sup-norm radii of the compact state and input domains."""

    state_bound: float
    input_bound: float

    def __post_init__(self):
        if not (self.state_bound > 0 and self.input_bound > 0):
            raise ValueError("domain bounds must be strictly positive")

    def scaled(self, factor: float) -> "DomainBox":
        return DomainBox(self.state_bound * factor, self.input_bound * factor)


def _as_vector(v, dim: int, what: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.ndim != 1 or arr.shape[0] != dim:
        raise DimensionError(f"{what} must have shape ({dim},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains non-finite entries: {arr}")
    return arr


class Plant:
    """Base class for a delayed-input plant.

    Subclasses implement :meth:`field` and :meth:`kappa` on arrays whose
    last axis is the state (resp. input) dimension.
    """

    spec: PlantSpec
    box: DomainBox
    # indices of state components that the nominal loop drives to zero
    regulated: tuple[int, ...] | None = None
    # components compared against the reference in tracking-error plots
    tracking_dims: tuple[int, ...] | None = None

    def field(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def kappa(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def closed_loop(self, x: np.ndarray) -> np.ndarray:
        return self.field(x, self.kappa(x))

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def n(self) -> int:
        return self.spec.state_dim

    @property
    def m(self) -> int:
        return self.spec.input_dim

    @property
    def delay(self) -> float:
        return self.spec.delay

    @property
    def regulated_dims(self) -> tuple[int, ...]:
        return self.regulated if self.regulated is not None else tuple(range(self.n))

    @cached_property
    def lipschitz(self) -> tuple[float, float]:
        """Cached ``(C_f, C_kappa)`` from :func:`estimate_lipschitz`."""
        return estimate_lipschitz(self, self.box, samples=2000, seed=0)

    def params(self) -> dict:
        return {}


def eval_f(plant: Plant, x, u) -> np.ndarray:
    """Checked evaluation of the plant vector field at a single point."""
    x = _as_vector(x, plant.n, "state")
    u = _as_vector(u, plant.m, "input")
    out = plant.field(x, u)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"f({x}, {u}) is not finite")
    return out


def eval_kappa(plant: Plant, x) -> np.ndarray:
    """Checked evaluation of the nominal feedback at a single point."""
    x = _as_vector(x, plant.n, "state")
    return np.asarray(plant.kappa(x), dtype=float)


SAFETY_FACTOR = 1.5


def estimate_lipschitz(
    plant: Plant, box: DomainBox, samples: int = 1000, seed: int = 0
) -> tuple[float, float]:
    """Sampled Lipschitz constants of ``f`` on the box and ``kappa`` on its state part.

    The quotient for ``f`` uses the sum metric ``|dx| + |du|``. Besides
    ``samples`` pairs drawn uniformly in the box, the same number of pairs
    at separation ``1e-4 * radius`` probe the local gradient norm. The
    maxima are inflated by :data:`SAFETY_FACTOR`.
    """
    if samples < 100:
        raise ValueError("samples must be >= 100")
    rng = np.random.default_rng(seed)
    n, m = plant.n, plant.m
    sx, su = box.state_bound, box.input_bound

    def draw(k):
        return rng.uniform(-sx, sx, (k, n)), rng.uniform(-su, su, (k, m))

    x1, u1 = draw(samples)
    x2, u2 = draw(samples)
    xa, ua = draw(samples)
    direction = rng.normal(size=(samples, n + m))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    xb = xa + 1e-4 * sx * direction[:, :n]
    ub = ua + 1e-4 * su * direction[:, n:]
    x1, x2 = np.vstack([x1, xa]), np.vstack([x2, xb])
    u1, u2 = np.vstack([u1, ua]), np.vstack([u2, ub])

    f1, f2 = plant.field(x1, u1), plant.field(x2, u2)
    k1, k2 = plant.kappa(x1), plant.kappa(x2)
    for vals, pts in ((f1, (x1, u1)), (f2, (x2, u2)), (k1, (x1,)), (k2, (x2,))):
        bad = ~np.all(np.isfinite(vals), axis=-1)
        if bad.any():
            i = int(np.argmax(bad))
            where = ", ".join(str(p[i]) for p in pts)
            raise NonFiniteError(f"{plant.name}: non-finite evaluation at ({where})")

    dx = np.linalg.norm(x1 - x2, axis=1)
    du = np.linalg.norm(u1 - u2, axis=1)
    c_f = np.max(np.linalg.norm(f1 - f2, axis=1) / (dx + du))
    c_k = np.max(np.linalg.norm(k1 - k2, axis=1) / dx)
    return float(SAFETY_FACTOR * c_f), float(SAFETY_FACTOR * c_k)


class ScalarLinear(Plant):
    """Unstable scalar plant ``x' = a x + b u`` with ``kappa(x) = -k x``."""

    def __init__(self, a=1.0, b=1.0, gain=2.0, delay=1.0, state_bound=2.0, input_bound=5.0):
        self.a, self.b, self.gain = float(a), float(b), float(gain)
        self.spec = PlantSpec(1, 1, float(delay), "scalar")
        self.box = DomainBox(state_bound, input_bound)

    def field(self, x, u):
        return self.a * x + self.b * u

    def kappa(self, x):
        return -self.gain * x

    def params(self):
        return {"a": self.a, "b": self.b, "gain": self.gain}


class Integrator(Plant):
    """``x' = u`` with ``kappa(x) = -k x``."""

    def __init__(self, gain=1.0, delay=1.0, state_bound=2.0, input_bound=5.0):
        self.gain = float(gain)
        self.spec = PlantSpec(1, 1, float(delay), "integrator")
        self.box = DomainBox(state_bound, input_bound)

    def field(self, x, u):
        return np.array(u, dtype=float, copy=True)

    def kappa(self, x):
        return -self.gain * x

    def params(self):
        return {"gain": self.gain}


class Pendulum(Plant):
    """Damped pendulum ``th'' = -(g/L) sin th - c th' + u``.

    The feedback cancels gravity and damping and places both closed-loop
    poles at ``-1`` with the default gains.
    """

    def __init__(self, g_over_l=1.0, damping=0.1, k1=1.0, k2=2.0, delay=0.5,
                 state_bound=2.0, input_bound=5.0):
        self.g_over_l, self.damping = float(g_over_l), float(damping)
        self.k1, self.k2 = float(k1), float(k2)
        self.spec = PlantSpec(2, 1, float(delay), "pendulum")
        self.box = DomainBox(state_bound, input_bound)

    def field(self, x, u):
        th, om = x[..., 0], x[..., 1]
        acc = -self.g_over_l * np.sin(th) - self.damping * om + u[..., 0]
        return np.stack([om, acc], axis=-1)

    def kappa(self, x):
        th, om = x[..., 0], x[..., 1]
        u = (self.g_over_l * np.sin(th) + self.damping * om
             - self.k1 * th - self.k2 * om)
        return u[..., None]

    def params(self):
        return {"g_over_l": self.g_over_l, "damping": self.damping,
                "k1": self.k1, "k2": self.k2}


@dataclass(frozen=True)
class ManipulatorParams:
    m1: float = 1.0
    m2: float = 1.0
    l1: float = 1.0
    l2: float = 1.0
    g: float = 9.81
    kp: float = 25.0
    kd: float = 10.0
    # hanging configuration, so gravity vanishes at the origin
    q0: tuple[float, float] = (-np.pi / 2, 0.0)
    amplitude: tuple[float, float] = (0.5, 0.3)
    omega: float = 1.0
    phase: tuple[float, float] = (0.0, np.pi / 2)


class TwoLinkManipulator(Plant):
    """Planar two-link arm with point masses, tracking a sinusoid.

    State is ``(e1, e2, de1, de2, c, s)``: joint tracking errors, their
    rates, and a harmonic oscillator ``(cos wt, sin wt)`` that generates the
    reference ``q_des = q0 + A * sin(wt + phi)``. Carrying the oscillator
    keeps the field autonomous. The input is the joint torque and
    ``kappa`` is the computed-torque law.
    """

    regulated = (0, 1, 2, 3)
    tracking_dims = (0, 1)

    def __init__(self, params: ManipulatorParams | None = None, delay=0.2,
                 state_bound=1.0, input_bound=40.0, **overrides):
        p = params or ManipulatorParams()
        if overrides:
            p = ManipulatorParams(**{**p.__dict__, **overrides})
        self.p = p
        self._q0 = np.asarray(p.q0, dtype=float)
        self._amp = np.asarray(p.amplitude, dtype=float)
        self._cphi = np.cos(np.asarray(p.phase, dtype=float))
        self._sphi = np.sin(np.asarray(p.phase, dtype=float))
        self.spec = PlantSpec(6, 2, float(delay), "manipulator")
        self.box = DomainBox(state_bound, input_bound)

    def reference(self, c, s):
        """``(q_des, dq_des, ddq_des)`` from oscillator states (broadcasting)."""
        c, s = np.asarray(c)[..., None], np.asarray(s)[..., None]
        w = self.p.omega
        wave = s * self._cphi + c * self._sphi
        q = self._q0 + self._amp * wave
        dq = w * self._amp * (c * self._cphi - s * self._sphi)
        ddq = -w * w * self._amp * wave
        return q, dq, ddq

    def mass_matrix(self, q):
        p = self.p
        c2 = np.cos(q[..., 1])
        m11 = (p.m1 + p.m2) * p.l1**2 + p.m2 * p.l2**2 + 2 * p.m2 * p.l1 * p.l2 * c2
        m12 = p.m2 * p.l2**2 + p.m2 * p.l1 * p.l2 * c2
        m22 = np.full_like(c2, p.m2 * p.l2**2)
        return m11, m12, m22

    def coriolis(self, q, dq):
        p = self.p
        h = p.m2 * p.l1 * p.l2 * np.sin(q[..., 1])
        d1, d2 = dq[..., 0], dq[..., 1]
        return np.stack([-h * (2 * d1 * d2 + d2 * d2), h * d1 * d1], axis=-1)

    def gravity(self, q):
        p = self.p
        c1 = np.cos(q[..., 0])
        c12 = np.cos(q[..., 0] + q[..., 1])
        g1 = (p.m1 + p.m2) * p.g * p.l1 * c1 + p.m2 * p.g * p.l2 * c12
        g2 = p.m2 * p.g * p.l2 * c12
        return np.stack([g1, g2], axis=-1)

    def _joint(self, x):
        q_des, dq_des, ddq_des = self.reference(x[..., 4], x[..., 5])
        return q_des + x[..., 0:2], dq_des + x[..., 2:4], ddq_des

    def _point(self, x, u):
        # scalar-math path for single states; the simulator calls this per RK4 stage
        p = self.p
        w = p.omega
        c, s = x[4], x[5]
        a1, a2 = self._amp
        wave1 = s * self._cphi[0] + c * self._sphi[0]
        wave2 = s * self._cphi[1] + c * self._sphi[1]
        q1 = self._q0[0] + a1 * wave1 + x[0]
        q2 = self._q0[1] + a2 * wave2 + x[1]
        d1 = w * a1 * (c * self._cphi[0] - s * self._sphi[0]) + x[2]
        d2 = w * a2 * (c * self._cphi[1] - s * self._sphi[1]) + x[3]
        ddq1, ddq2 = -w * w * a1 * wave1, -w * w * a2 * wave2
        c2 = math.cos(q2)
        l12 = p.m2 * p.l1 * p.l2
        m11 = (p.m1 + p.m2) * p.l1**2 + p.m2 * p.l2**2 + 2 * l12 * c2
        m12 = p.m2 * p.l2**2 + l12 * c2
        m22 = p.m2 * p.l2**2
        h = l12 * math.sin(q2)
        cor1, cor2 = -h * (2 * d1 * d2 + d2 * d2), h * d1 * d1
        c12 = math.cos(q1 + q2)
        g2 = p.m2 * p.g * p.l2 * c12
        g1 = (p.m1 + p.m2) * p.g * p.l1 * math.cos(q1) + g2
        if u is None:
            v1 = ddq1 - p.kp * x[0] - p.kd * x[2]
            v2 = ddq2 - p.kp * x[1] - p.kd * x[3]
            return np.array([m11 * v1 + m12 * v2 + cor1 + g1,
                             m12 * v1 + m22 * v2 + cor2 + g2])
        r1, r2 = u[0] - cor1 - g1, u[1] - cor2 - g2
        det = m11 * m22 - m12 * m12
        return np.array([x[2], x[3],
                         (m22 * r1 - m12 * r2) / det - ddq1,
                         (m11 * r2 - m12 * r1) / det - ddq2,
                         -w * s, w * c])

    def field(self, x, u):
        if x.ndim == 1:
            return self._point(x, u)
        q, dq, ddq_des = self._joint(x)
        m11, m12, m22 = self.mass_matrix(q)
        rhs = u - self.coriolis(q, dq) - self.gravity(q)
        det = m11 * m22 - m12 * m12
        a1 = (m22 * rhs[..., 0] - m12 * rhs[..., 1]) / det
        a2 = (m11 * rhs[..., 1] - m12 * rhs[..., 0]) / det
        dde = np.stack([a1, a2], axis=-1) - ddq_des
        w = self.p.omega
        dc = -w * x[..., 5]
        ds = w * x[..., 4]
        return np.concatenate([x[..., 2:4], dde, dc[..., None], ds[..., None]], axis=-1)

    def kappa(self, x):
        if x.ndim == 1:
            return self._point(x, None)
        q, dq, ddq_des = self._joint(x)
        v = ddq_des - self.p.kp * x[..., 0:2] - self.p.kd * x[..., 2:4]
        m11, m12, m22 = self.mass_matrix(q)
        mv = np.stack([m11 * v[..., 0] + m12 * v[..., 1],
                       m12 * v[..., 0] + m22 * v[..., 1]], axis=-1)
        return mv + self.coriolis(q, dq) + self.gravity(q)

    def params(self):
        d = dict(self.p.__dict__)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


PLANTS = {
    "scalar": ScalarLinear,
    "integrator": Integrator,
    "pendulum": Pendulum,
    "manipulator": TwoLinkManipulator,
}


def make_plant(name: str, **params) -> Plant:
    """Construct a shipped plant by name; keyword arguments override defaults."""
    try:
        cls = PLANTS[name]
    except KeyError:
        raise ValueError(f"unknown plant {name!r}; choose from {sorted(PLANTS)}") from None
    return cls(**params)
