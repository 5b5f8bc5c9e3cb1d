"""Uniform-grid buffer of past inputs over the delay window ``[-D, 0]``."""

from __future__ import annotations

import numpy as np


class GridAlignmentError(ValueError):
    pass


def _as_samples(a):
    a = np.array(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    return a


class InputHistory:
    """Input samples at offsets ``theta_k = -D + k * D / (N - 1)``.

    Row 0 is the oldest input (offset ``-D``), the last row the newest
    (offset ``0-``). Between nodes the signal is linear. A node where the
    input jumps (a prediction reset) carries its left limit in ``samples``
    and its right limit in ``right``; for continuous histories the two
    arrays are the same object. Instances are immutable: :meth:`push`
    returns a new history.
    """

    __slots__ = ("delay", "samples", "right")

    def __init__(self, samples, delay: float, right=None):
        samples = _as_samples(samples)
        if samples.ndim != 2 or samples.shape[0] < 2:
            raise ValueError("history needs at least two grid points, shape (N, m)")
        if not np.all(np.isfinite(samples)):
            raise ValueError("history samples must be finite")
        if not delay > 0:
            raise ValueError("delay must be positive")
        samples.setflags(write=False)
        if right is None:
            right = samples
        else:
            right = _as_samples(right)
            if right.shape != samples.shape or not np.all(np.isfinite(right)):
                raise ValueError("right limits must be finite and match samples")
            right.setflags(write=False)
        self.samples = samples
        self.right = right
        self.delay = float(delay)

    @classmethod
    def constant(cls, value, delay: float, grid_points: int) -> "InputHistory":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(np.tile(value, (grid_points, 1)), delay)

    @classmethod
    def zeros(cls, input_dim: int, delay: float, grid_points: int) -> "InputHistory":
        return cls(np.zeros((grid_points, input_dim)), delay)

    @classmethod
    def from_function(cls, fn, delay: float, grid_points: int) -> "InputHistory":
        """Sample ``fn(theta)`` (vectorized over theta) on the grid."""
        theta = np.linspace(-delay, 0.0, grid_points)
        return cls(np.asarray(fn(theta), dtype=float), delay)

    @property
    def grid_points(self) -> int:
        return self.samples.shape[0]

    @property
    def input_dim(self) -> int:
        return self.samples.shape[1]

    @property
    def step(self) -> float:
        return self.delay / (self.grid_points - 1)

    @property
    def theta(self) -> np.ndarray:
        return np.linspace(-self.delay, 0.0, self.grid_points)

    @property
    def has_jumps(self) -> bool:
        return self.right is not self.samples and not np.array_equal(self.right, self.samples)

    def continuous(self) -> "InputHistory":
        """Drop the right limits; jumps become one-cell ramps."""
        return InputHistory(self.samples, self.delay) if self.has_jumps else self

    def __len__(self):
        return self.grid_points

    def __eq__(self, other):
        return (isinstance(other, InputHistory) and self.delay == other.delay
                and np.array_equal(self.samples, other.samples)
                and np.array_equal(self.right, other.right))

    def __repr__(self):
        return f"InputHistory(N={self.grid_points}, m={self.input_dim}, D={self.delay})"

    def sup_norm(self) -> float:
        return float(max(np.max(np.linalg.norm(self.samples, axis=1)),
                         np.max(np.linalg.norm(self.right, axis=1))))

    def shift_steps(self, dt: float) -> int:
        """Number of grid cells covered by ``dt``; it must be a whole multiple."""
        ratio = dt / self.step
        k = int(round(ratio))
        if k < 1 or abs(ratio - k) > 1e-9 * max(1.0, ratio):
            raise GridAlignmentError(
                f"dt={dt} is not a whole multiple of the grid step {self.step}")
        return k

    def push(self, u, dt: float) -> "InputHistory":
        """Advance the window by ``dt`` and append ``u`` as the newest sample.

        When ``dt`` spans several grid cells the new cells are filled with ``u``.
        """
        k = min(self.shift_steps(dt), self.grid_points)
        u = np.asarray(u, dtype=float).reshape(self.input_dim)
        fill = np.tile(u, (k, 1))
        left = np.concatenate([self.samples[k:], fill])
        if self.right is self.samples:
            return InputHistory(left, self.delay)
        return InputHistory(left, self.delay, np.concatenate([self.right[k:], fill]))

    def sample_at(self, theta: float) -> np.ndarray:
        """Linear interpolation at offset ``theta`` in ``[-D, 0]``.

        At a jump node the right limit is returned, except at ``theta = 0``
        where the newest (left-limit) sample is.
        """
        if not (-self.delay - 1e-12 <= theta <= 1e-12):
            raise ValueError(f"theta={theta} outside [-{self.delay}, 0]")
        pos = (theta + self.delay) / self.step
        pos = min(max(pos, 0.0), self.grid_points - 1.0)
        node = round(pos)
        if abs(pos - node) <= 1e-9:
            # grid offsets return the stored value bit for bit
            if node == self.grid_points - 1:
                return self.samples[node].copy()
            return self.right[node].copy()
        k = min(int(np.floor(pos)), self.grid_points - 2)
        w = pos - k
        return (1.0 - w) * self.right[k] + w * self.samples[k + 1]

    def resample(self, grid_points: int) -> "InputHistory":
        """The same signal read off a different uniform grid.

        Jumps that land on a new node are kept; the others turn into ramps.
        """
        if grid_points == self.grid_points:
            return self
        pos = np.linspace(0.0, self.grid_points - 1.0, grid_points)
        k = np.minimum(np.floor(pos).astype(int), self.grid_points - 2)
        w = (pos - k)[:, None]
        interp = (1.0 - w) * self.right[k] + w * self.samples[k + 1]
        on_node = np.isclose(pos, np.round(pos), rtol=0, atol=1e-9)
        j = np.round(pos).astype(int)
        left, right = interp.copy(), interp.copy()
        left[on_node] = self.samples[j[on_node]]
        right[on_node] = self.right[j[on_node]]
        if np.array_equal(left, right):
            return InputHistory(left, self.delay)
        return InputHistory(left, self.delay, right)
