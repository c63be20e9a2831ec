"""Uniform time grids, trajectory containers and fixed-step RK4."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Literal

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ContractError, IntegrationError, RangeError, SingularityError

JITTER_EPS = 1e-9
JITTER_GROWTH = 100.0
JITTER_ESCALATIONS = 3


@dataclass(frozen=True)
class TimeGrid:
    """Nodes ``t_k = k * T / n_steps``; the last node is exactly ``T``."""

    T: float
    n_steps: int

    def __post_init__(self):
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "n_steps", int(self.n_steps))
        if self.n_steps < 1:
            raise ContractError(f"n_steps must be >= 1, got {self.n_steps}")
        if not (np.isfinite(self.T) and self.T > 0):
            raise ContractError(f"horizon must be positive, got {self.T}")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @cached_property
    def times(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.T
        t.setflags(write=False)
        return t

    def prefix(self, m: int) -> TimeGrid:
        """Grid of the first ``m`` steps (same step size up to rounding)."""
        if m == self.n_steps:
            return self
        return TimeGrid(m * self.dt, m)


def default_grid(T: float, dt: float = 1e-3) -> TimeGrid:
    return TimeGrid(T, max(1, int(round(T / dt))))


@dataclass(frozen=True, eq=False)
class MatrixTrajectory:
    """One ``r x c`` matrix per grid node.

    ``derivs`` optionally holds the time derivative at each node, which lets
    stage lookups use cubic Hermite interpolation between nodes.
    """

    grid: TimeGrid
    values: np.ndarray
    derivs: np.ndarray | None = None
    symmetric: bool = False

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None, None]
        elif vals.ndim == 2:
            vals = vals[:, :, None]
        if vals.shape[0] != self.grid.n_steps + 1:
            raise ContractError(f"{vals.shape[0]} values for {self.grid.n_steps + 1} grid nodes")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        if self.derivs is not None:
            d = np.array(self.derivs, dtype=float).reshape(vals.shape)
            d.setflags(write=False)
            object.__setattr__(self, "derivs", d)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1:]

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, k):
        return self.values[k]

    def at(self, t: float) -> np.ndarray:
        return sample_at(self, t)

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    def vectors(self) -> np.ndarray:
        """Values of a column-vector trajectory as an ``(n+1, r)`` array."""
        return self.values[:, :, 0]

    def max_asymmetry(self) -> float:
        """Largest node-wise ``|M - M^T|_max / |M|_max``."""
        v = self.values
        num = np.abs(v - np.swapaxes(v, 1, 2)).max(axis=(1, 2))
        den = np.abs(v).max(axis=(1, 2))
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(den > 0, num / den, num)
        return float(rel.max())

    def midpoints(self) -> np.ndarray:
        """Values at ``t_k + dt/2`` for ``k = 0..n-1`` (Hermite if derivatives are known)."""
        v = self.values
        mid = 0.5 * (v[:-1] + v[1:])
        if self.derivs is not None:
            mid = mid + (self.grid.dt / 8.0) * (self.derivs[:-1] - self.derivs[1:])
        return mid

    def to_csv(self, path: str | Path) -> None:
        write_csv(self, path)


def sample_at(traj: MatrixTrajectory, t: float) -> np.ndarray:
    """Linear interpolation between the bracketing nodes; exact at nodes."""
    k, w = _locate(traj.grid, t)
    v = traj.values
    if w == 0.0:
        return v[k].copy()
    if w == 1.0:
        return v[k + 1].copy()
    return v[k] + w * (v[k + 1] - v[k])


def sample_hermite(traj: MatrixTrajectory, t: float) -> np.ndarray:
    """Cubic Hermite interpolation using node derivatives (linear if absent)."""
    if traj.derivs is None:
        return sample_at(traj, t)
    k, w = _locate(traj.grid, t)
    v, d, h = traj.values, traj.derivs, traj.grid.dt
    if w == 0.0:
        return v[k].copy()
    w2, w3 = w * w, w * w * w
    h00 = 2 * w3 - 3 * w2 + 1
    h10 = w3 - 2 * w2 + w
    h01 = -2 * w3 + 3 * w2
    h11 = w3 - w2
    return h00 * v[k] + h10 * h * d[k] + h01 * v[k + 1] + h11 * h * d[k + 1]


def sample_many(traj: MatrixTrajectory, times, hermite: bool = False) -> np.ndarray:
    """Vectorized :func:`sample_at` (or :func:`sample_hermite`) over an array of times."""
    grid = traj.grid
    t = np.asarray(times, dtype=float)
    slack = 1e-12 * max(1.0, grid.T)
    if t.size and (t.min() < -slack or t.max() > grid.T + slack):
        raise RangeError(f"times outside [0, {grid.T}]")
    t = np.clip(t, 0.0, grid.T)
    k = np.minimum((t / grid.dt).astype(np.int64), grid.n_steps - 1)
    k -= t < grid.times[k]
    w = ((t - grid.times[k]) / grid.dt)[:, None, None]
    v = traj.values
    if not hermite or traj.derivs is None:
        return np.where(w == 1.0, v[k + 1], v[k] + w * (v[k + 1] - v[k]))
    d, h = traj.derivs, grid.dt
    w2, w3 = w * w, w * w * w
    return (
        (2 * w3 - 3 * w2 + 1) * v[k]
        + (w3 - 2 * w2 + w) * h * d[k]
        + (-2 * w3 + 3 * w2) * v[k + 1]
        + (w3 - w2) * h * d[k + 1]
    )


def _locate(grid: TimeGrid, t: float) -> tuple[int, float]:
    T = grid.T
    slack = 1e-12 * max(1.0, T)
    if not (-slack <= t <= T + slack):
        raise RangeError(f"t = {t} outside [0, {T}]")
    t = min(max(t, 0.0), T)
    n = grid.n_steps
    k = min(int(t / grid.dt), n - 1)
    times = grid.times
    if t < times[k]:
        k -= 1
    if t == times[k]:
        return k, 0.0
    if k + 1 <= n and t == times[k + 1]:
        return (k + 1, 0.0) if k + 1 < n else (k, 1.0)
    return k, (t - times[k]) / grid.dt


class StageTable:
    """Constant-time lookup of a trajectory at RK4 stage times
    ``t_k`` and ``t_k +- dt/2``; any other time falls back to interpolation."""

    def __init__(self, traj: MatrixTrajectory, mids: np.ndarray | None = None):
        self.traj = traj
        self.nodes = traj.values
        self.mids = traj.midpoints() if mids is None else mids
        self._scale = 2.0 / traj.grid.dt

    def __call__(self, t: float) -> np.ndarray:
        h = t * self._scale
        j = int(round(h))
        if abs(h - j) < 1e-6 and 0 <= j <= 2 * self.traj.grid.n_steps:
            if j % 2 == 0:
                return self.nodes[j // 2]
            return self.mids[j // 2]
        return sample_hermite(self.traj, t)


def symmetrize(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ContractError(f"symmetrize needs a square matrix, got shape {M.shape}")
    return 0.5 * (M + M.T)


def spd_solve(S, RHS, name: str = "matrix") -> np.ndarray:
    """Solve ``S X = RHS`` by Cholesky, adding diagonal jitter if ``S`` is not
    numerically positive definite."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    RHS = np.asarray(RHS, dtype=float)
    if S.shape[0] != S.shape[1]:
        raise ContractError(f"{name}: spd_solve needs a square matrix, got {S.shape}")
    if not np.all(np.isfinite(S)):
        raise SingularityError(f"{name}: non-finite entries")
    try:
        return cho_solve(cho_factor(S, check_finite=False), RHS, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    n = S.shape[0]
    scale = np.trace(S) / n
    if scale > 0:
        eps = JITTER_EPS
        for _ in range(JITTER_ESCALATIONS):
            try:
                c = cho_factor(S + eps * scale * np.eye(n), check_finite=False)
                return cho_solve(c, RHS, check_finite=False)
            except np.linalg.LinAlgError:
                eps *= JITTER_GROWTH
    raise SingularityError(f"{name}: singular after {JITTER_ESCALATIONS} jitter escalations")


Direction = Literal["forward", "backward"]


def integrate_ode(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    boundary,
    grid: TimeGrid,
    direction: Direction = "forward",
    symmetric: bool = False,
) -> MatrixTrajectory:
    """Classic RK4 on ``grid``.

    ``rhs(t, M)`` returns ``dM/dt`` in physical time for either direction.
    Forward starts from ``boundary`` at ``t=0``; backward starts from it at
    ``t=T`` and steps with ``-dt``. With ``symmetric`` the state is replaced by
    ``(M + M^T)/2`` after every step.
    """
    X = np.array(boundary, dtype=float)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        X = X[:, None]
    n = grid.n_steps
    times = grid.times
    vals = np.empty((n + 1,) + X.shape)
    ders = np.empty_like(vals)
    if direction == "forward":
        k, step = 0, 1
    elif direction == "backward":
        k, step = n, -1
    else:
        raise ContractError(f"direction must be 'forward' or 'backward', got {direction!r}")
    h = step * grid.dt

    def f(t, Y):
        d = np.asarray(rhs(t, Y), dtype=float)
        return d.reshape(Y.shape) if d.shape != Y.shape else d

    vals[k] = X
    with np.errstate(over="ignore", invalid="ignore"):
        _march(f, X, vals, ders, times, k, step, h, n, symmetric)
    return MatrixTrajectory(grid, vals, ders, symmetric=symmetric)


def _march(f, X, vals, ders, times, k, step, h, n, symmetric):
    half = 0.5 * h
    for j in range(n):
        t = times[k]
        kn = k + step
        k1 = f(t, X)
        ders[k] = k1
        k2 = f(t + half, X + half * k1)
        k3 = f(t + half, X + half * k2)
        k4 = f(times[kn], X + h * k3)
        X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if symmetric:
            X = 0.5 * (X + X.T)
        if not np.all(np.isfinite(X)):
            raise IntegrationError(
                f"non-finite value at node {kn} (t = {times[kn]:.6g}) on step {j + 1}", node=kn, step=j + 1
            )
        vals[kn] = X
        k = kn
    last = f(times[k], X)
    if not np.all(np.isfinite(last)):
        raise IntegrationError(f"non-finite derivative at node {k}", node=k, step=n)
    ders[k] = last


def write_csv(traj: MatrixTrajectory, path: str | Path) -> None:
    """Header ``t,m_0_0,m_0_1,...``; row-major entries; 17 significant digits."""
    r, c = traj.shape
    header = ",".join(["t"] + [f"m_{i}_{j}" for i in range(r) for j in range(c)])
    data = np.column_stack([traj.grid.times, traj.values.reshape(len(traj), r * c)])
    np.savetxt(path, data, fmt="%.17g", delimiter=",", header=header, comments="")


def read_csv(path: str | Path) -> MatrixTrajectory:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    last = header[-1].split("_")
    r, c = int(last[1]) + 1, int(last[2]) + 1
    t = data[:, 0]
    grid = TimeGrid(t[-1], len(t) - 1)
    return MatrixTrajectory(grid, data[:, 1:].reshape(len(t), r, c))
