"""Forward-backward fixed-point iteration between the covariance flow and the
decentralized (or joint-memory) Riccati equation.

The plain iteration started from ``Psi`` can blow up on long horizons: the
first forward pass under a poor gain lets the covariance grow so much that
the next backward pass escapes to infinity in finite time. The default
``"continuation"`` mode therefore solves a shorter terminal segment first
and grows the horizon, warm-starting each stage with the previous solution
shifted to align at the terminal time. Problems are time-invariant, so a
shorter horizon is the same problem restricted to the last nodes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from .errors import ContractError, IntegrationError, SingularityError
from .model import LqgProblem, require_valid
from .moments import Engine, GainRule, MomentTrajectory, propagate_covariance, propagate_mean
from .numerics import MatrixTrajectory, TimeGrid, default_grid
from .riccati import AffineValueTerms, GainTrajectories, solve_affine_terms, solve_coupled_riccati, solve_riccati

log = logging.getLogger(__name__)

InitMode = Literal["continuation", "psi", "terminal"]

# intermediate continuation stages only supply a warm start
WARM_STAGE_TOL = 1e-4


@dataclass(frozen=True)
class SweepOptions:
    max_iters: int = 200
    tol: float = 1e-8
    damping: float = 1.0
    init_mode: InitMode = "continuation"
    engine: Engine = "compiled"

    def __post_init__(self):
        if not (0.0 < self.damping <= 1.0):
            raise ContractError(f"damping must lie in (0, 1], got {self.damping}")
        if not self.tol > 0:
            raise ContractError(f"tol must be positive, got {self.tol}")
        if self.max_iters < 1:
            raise ContractError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.init_mode not in ("continuation", "psi", "terminal"):
            raise ContractError(f"unknown init_mode {self.init_mode!r}")


@dataclass(frozen=True)
class StageRecord:
    horizon: float
    n_steps: int
    iterations: int
    outcome: str  # "converged", "max-iters" or "diverged: ..."


@dataclass
class SweepReport:
    iterations: int = 0
    residual_history: list[float] = field(default_factory=list)
    converged: bool = False
    psd_monitor: list[tuple[float, float]] = field(default_factory=list)  # (min eig Phi, min eig Sigma)
    stages: list[StageRecord] = field(default_factory=list)

    @property
    def total_iterations(self) -> int:
        return sum(s.iterations for s in self.stages)

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "residual_history": list(self.residual_history),
            "psd_monitor": [{"min_eig_gain": a, "min_eig_sigma": b} for a, b in self.psd_monitor],
            "stages": [vars(s) for s in self.stages],
            "total_iterations": self.total_iterations,
        }


@dataclass(frozen=True)
class Solution:
    problem: LqgProblem
    gains: GainTrajectories
    affine: AffineValueTerms
    moments: MomentTrajectory
    gain_rule: GainRule
    report: SweepReport

    @property
    def grid(self) -> TimeGrid:
        return self.gains.Psi.grid

    @property
    def feedback(self) -> MatrixTrajectory:
        """The coupled gain: ``Phi`` for ML-DSC, ``Pi`` for the joint-memory problem."""
        return self.gains.Phi if self.gains.Phi is not None else self.gains.Pi


def residual(prev: MatrixTrajectory, next: MatrixTrajectory) -> float:
    """``max_k |next_k - prev_k|_max / (1 + |prev_k|_max)``."""
    a = prev.values if isinstance(prev, MatrixTrajectory) else np.asarray(prev, dtype=float)
    b = next.values if isinstance(next, MatrixTrajectory) else np.asarray(next, dtype=float)
    if a.shape != b.shape:
        raise ContractError(f"trajectory shapes differ: {a.shape} vs {b.shape}")
    diff = np.abs(b - a).max(axis=(1, 2))
    scale = 1.0 + np.abs(a).max(axis=(1, 2))
    return float((diff / scale).max())


def _min_eig(traj: MatrixTrajectory) -> float:
    return float(np.linalg.eigvalsh(traj.values).min())


def _blend(new: MatrixTrajectory, old: MatrixTrajectory, theta: float) -> MatrixTrajectory:
    vals = theta * new.values + (1.0 - theta) * old.values
    ders = theta * new.derivs + (1.0 - theta) * old.derivs
    return MatrixTrajectory(new.grid, vals, ders, symmetric=True)


class _Diverged(Exception):
    pass


def _iterate(
    p: LqgProblem, Phi0: MatrixTrajectory, rule: GainRule, opts: SweepOptions, report: SweepReport
) -> tuple[MatrixTrajectory, bool]:
    """Run the fixed-point loop from ``Phi0``; fills ``report`` with this stage's history."""
    Phi = Phi0
    Sigma_prev = None
    report.residual_history = []
    report.psd_monitor = []
    for k in range(1, opts.max_iters + 1):
        Sigma = propagate_covariance(p, Phi, rule, opts.engine)
        if Sigma_prev is not None and opts.damping < 1.0:
            Sigma = _blend(Sigma, Sigma_prev, opts.damping)
        Phi_next = solve_coupled_riccati(p, Sigma, rule, opts.engine)
        r = residual(Phi, Phi_next)
        if not np.isfinite(r):
            raise _Diverged(f"non-finite residual at iteration {k}")
        report.residual_history.append(r)
        report.psd_monitor.append((_min_eig(Phi_next), _min_eig(Sigma)))
        report.iterations = k
        Phi, Sigma_prev = Phi_next, Sigma
        if r <= opts.tol:
            return Phi, True
    return Phi, False


def _shifted(prev: MatrixTrajectory, grid: TimeGrid) -> MatrixTrajectory:
    """Align ``prev`` at the terminal time of the longer ``grid``; hold ``prev(0)`` before that."""
    m, n = prev.grid.n_steps, grid.n_steps
    d = prev.shape[0]
    vals = np.empty((n + 1, d, d))
    ders = np.zeros((n + 1, d, d))
    vals[: n - m] = prev.values[0]
    vals[n - m :] = prev.values
    ders[n - m :] = prev.derivs
    return MatrixTrajectory(grid, vals, ders, symmetric=True)


def _suffix(traj: MatrixTrajectory, m: int) -> MatrixTrajectory:
    """Last ``m`` steps of a backward trajectory, as a solution on horizon ``m * dt``."""
    n = traj.grid.n_steps
    return MatrixTrajectory(traj.grid.prefix(m), traj.values[n - m :], traj.derivs[n - m :], symmetric=True)


def _stage(p: LqgProblem, Phi0: MatrixTrajectory, rule: GainRule, opts: SweepOptions):
    report = SweepReport()
    try:
        Phi, ok = _iterate(p, Phi0, rule, opts, report)
    except (IntegrationError, SingularityError, _Diverged, FloatingPointError) as exc:
        return None, report, f"diverged: {exc}"
    return Phi, report, "converged" if ok else "max-iters"


def _run_sweep(p: LqgProblem, opts: SweepOptions, grid: TimeGrid, rule: GainRule, Psi: MatrixTrajectory):
    n = grid.n_steps
    if opts.init_mode != "continuation":
        if opts.init_mode == "psi":
            Phi0 = Psi
        else:
            Phi0 = MatrixTrajectory(grid, np.broadcast_to(p.P, (n + 1,) + p.P.shape), np.zeros((n + 1,) + p.P.shape))
        report = SweepReport()
        Phi, ok = _iterate(p, Phi0, rule, opts, report)
        report.converged = ok
        report.stages.append(StageRecord(grid.T, n, report.iterations, "converged" if ok else "max-iters"))
        return Phi, report

    stages: list[StageRecord] = []
    done_m, done_Phi = 0, None
    m = n
    while True:
        sub_grid = grid.prefix(m)
        Phi0 = _suffix(Psi, m) if done_Phi is None else _shifted(done_Phi, sub_grid)
        sub = p if m == n else p.with_changes(T=sub_grid.T)
        stage_opts = opts if m == n else replace(opts, tol=max(opts.tol, WARM_STAGE_TOL))
        Phi, report, outcome = _stage(sub, Phi0, rule, stage_opts)
        stages.append(StageRecord(sub_grid.T, m, report.iterations, outcome))
        log.debug("sweep stage T=%.6g n=%d: %s after %d iterations", sub_grid.T, m, outcome, report.iterations)
        if Phi is not None:
            if m == n:
                report.converged = outcome == "converged"
                report.stages = stages
                return Phi, report
            done_m, done_Phi = m, Phi
            m = min(n, 2 * m)
            continue
        # diverged: retreat towards the last good horizon
        m = m // 2 if done_Phi is None else done_m + (m - done_m) // 2
        if m <= done_m or m < 1:
            raise IntegrationError(f"sweep diverged on every horizon tried: {stages[-1].outcome}")


def _solve(p: LqgProblem, opts: SweepOptions | None, grid: TimeGrid | None, rule: GainRule) -> Solution:
    require_valid(p)
    opts = opts or SweepOptions()
    grid = grid or default_grid(p.T)
    if abs(grid.T - p.T) > 1e-12 * max(1.0, p.T):
        raise ContractError(f"grid horizon {grid.T} does not match problem horizon {p.T}")
    Psi = solve_riccati(p, grid)
    Phi, report = _run_sweep(p, opts, grid, rule, Psi)
    moments = MomentTrajectory(propagate_mean(p, Psi), propagate_covariance(p, Phi, rule, opts.engine))
    affine = solve_affine_terms(p, Phi, moments.mu, moments.Sigma, rule)
    gains = GainTrajectories(Psi, Pi=Phi) if rule is GainRule.JOINT else GainTrajectories(Psi, Phi=Phi)
    return Solution(p, gains, affine, moments, rule, report)


def solve_mldsc(
    p: LqgProblem,
    opts: SweepOptions | None = None,
    grid: TimeGrid | None = None,
    gain_rule: GainRule = GainRule.PER_CONTROLLER,
) -> Solution:
    """Decentralized gain ``Phi`` with per-controller memory gains (``gain_rule`` is a test hook)."""
    return _solve(p, opts, grid, GainRule(gain_rule))


def solve_mlposc(
    p: LqgProblem,
    opts: SweepOptions | None = None,
    grid: TimeGrid | None = None,
    identity_override: bool = False,
) -> Solution:
    """Joint-memory gain ``Pi``."""
    rule = GainRule.IDENTITY if identity_override else GainRule.JOINT
    sol = _solve(p, opts, grid, rule)
    if identity_override:
        g = sol.gains
        sol = Solution(sol.problem, GainTrajectories(g.Psi, Pi=g.Phi), sol.affine, sol.moments, rule, sol.report)
    return sol
