"""Euler-Maruyama simulation of the closed loop and cost estimation.

Each sample draws from its own Philox stream keyed by
``(seed, stream_domain, sample index)``. Samples are processed in fixed-size
chunks whose results land at fixed positions, so the output does not depend
on the number of worker threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, EstimationError
from .model import LqgProblem
from .numerics import MatrixTrajectory, StageTable, TimeGrid, integrate_ode, symmetrize
from .policy import Policy, control_schedule

CHUNK = 1024  # samples per vectorized batch
NOISE_BLOCK = 250  # time steps of noise drawn at once per sample


@dataclass(frozen=True)
class SimConfig:
    n_samples: int = 10_000
    sim_dt: float | None = None  # defaults to the policy grid step
    seed: int = 0
    parallel_width: int = 1
    record_stride: int | None = None  # default: about 100 recorded times
    stream_domain: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ContractError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.sim_dt is not None and not self.sim_dt > 0:
            raise ContractError(f"sim_dt must be positive, got {self.sim_dt}")
        if self.parallel_width < 1:
            raise ContractError(f"parallel_width must be >= 1, got {self.parallel_width}")
        if not 0 <= self.seed < 2**64:
            raise ContractError(f"seed must be an unsigned 64-bit integer, got {self.seed}")


@dataclass(frozen=True, eq=False)
class PathBatch:
    times: np.ndarray  # recorded times
    paths: np.ndarray  # (n_samples, len(times), d_s)
    costs: np.ndarray  # (n_samples,), NaN where diverged
    diverged: np.ndarray  # (n_samples,) bool
    config: SimConfig

    @property
    def n_diverged(self) -> int:
        return int(self.diverged.sum())

    def state_at(self, t: float) -> np.ndarray:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ContractError(f"t = {t} is not a recorded time")
        return self.paths[:, k, :]


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    stderr: float
    n: int
    n_diverged: int = 0

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n": self.n, "n_diverged": self.n_diverged}


def sim_steps(T: float, sim_dt: float) -> int:
    n = int(round(T / sim_dt))
    if n < 1 or abs(T / sim_dt - n) > 1e-12 * max(1, n):
        raise ContractError(f"sim_dt = {sim_dt} does not divide the horizon T = {T}")
    return n


def sample_stream(seed: int, domain: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(domain, index))))


def _initial_factor(Sigma0: np.ndarray) -> np.ndarray:
    # eigen-factor tolerates singular initial covariances
    w, V = np.linalg.eigh(symmetrize(Sigma0))
    return V * np.sqrt(np.clip(w, 0.0, None))


def simulate_paths(p: LqgProblem, pol: Policy, cfg: SimConfig | None = None) -> PathBatch:
    """Simulate ``cfg.n_samples`` closed-loop paths; cost uses left-endpoint quadrature."""
    cfg = cfg or SimConfig()
    sim_dt = cfg.sim_dt if cfg.sim_dt is not None else pol.grid.dt
    if abs(pol.grid.T - p.T) > 1e-9 * max(1.0, p.T):
        raise ContractError(f"policy horizon {pol.grid.T} does not cover problem horizon {p.T}")
    n = sim_steps(p.T, sim_dt)
    dt = p.T / n
    times = TimeGrid(p.T, n).times
    sched = control_schedule(pol, times[:-1])
    stride = cfg.record_stride or max(1, n // 100)
    rec_steps = np.arange(0, n + 1, stride)
    d, d_w = p.d_s, p.sigma.shape[1]
    L0 = _initial_factor(p.Sigma0)
    A_T, sig_T, Q, P = p.A.T, p.sigma.T * math.sqrt(dt), p.Q, p.P
    BT = [b.T for b in p.B]
    costs = np.empty(cfg.n_samples)
    paths = np.empty((cfg.n_samples, rec_steps.size, d))
    diverged = np.zeros(cfg.n_samples, dtype=bool)

    def run_chunk(lo: int) -> None:
        hi = min(lo + CHUNK, cfg.n_samples)
        m = hi - lo
        streams = [sample_stream(cfg.seed, cfg.stream_domain, lo + j) for j in range(m)]
        z0 = np.stack([g.standard_normal(d) for g in streams])
        xi = np.empty((m, NOISE_BLOCK, d_w))
        s = p.mu0 + z0 @ L0.T
        cost = np.zeros(m)
        rec = np.empty((m, rec_steps.size, d))
        r = 0
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(n):
                kb = k % NOISE_BLOCK
                if kb == 0:
                    width = min(NOISE_BLOCK, n - k)
                    for j, g in enumerate(streams):
                        xi[j, :width] = g.standard_normal((width, d_w))
                if r < rec_steps.size and rec_steps[r] == k:
                    rec[:, r] = s
                    r += 1
                drift = s @ A_T
                running = np.einsum("bi,ij,bj->b", s, Q, s)
                for i in range(p.N):
                    u = s[:, sched.info[i]] @ sched.gains[i][k].T + sched.offsets[i][k]
                    drift += u @ BT[i]
                    running += np.einsum("bi,ij,bj->b", u, p.R[i], u)
                cost += running * dt
                s = s + drift * dt + xi[:, kb] @ sig_T
            cost += np.einsum("bi,ij,bj->b", s, P, s)
        if r < rec_steps.size:
            rec[:, r] = s
        bad = ~(np.isfinite(cost) & np.all(np.isfinite(s), axis=1))
        cost[bad] = np.nan
        costs[lo:hi] = cost
        paths[lo:hi] = rec
        diverged[lo:hi] = bad

    starts = range(0, cfg.n_samples, CHUNK)
    if cfg.parallel_width == 1:
        for lo in starts:
            run_chunk(lo)
    else:
        with ThreadPoolExecutor(max_workers=cfg.parallel_width) as pool:
            list(pool.map(run_chunk, starts))
    return PathBatch(times[rec_steps], paths, costs, diverged, cfg)


def estimate_cost(batch: PathBatch) -> CostEstimate:
    """Mean and standard error of the per-sample costs, excluding diverged samples."""
    c = batch.costs[~batch.diverged]
    if c.size == 0:
        raise EstimationError(f"all {batch.costs.size} samples diverged")
    mean = float(np.mean(c))
    stderr = float(np.std(c, ddof=1) / math.sqrt(c.size)) if c.size > 1 else 0.0
    return CostEstimate(mean, stderr, int(c.size), batch.n_diverged)


def analytic_optimal_cost(sol) -> float:
    """``E[w(0, s0)] = tr(Phi(0) Sigma0) + mu0' Phi(0) mu0 + alpha(0)' mu0 + beta(0)``."""
    if sol.affine is None:
        raise ContractError("solution carries no affine value terms")
    p = sol.problem
    Phi0 = sol.feedback.initial
    mu0 = p.mu0
    alpha0 = sol.affine.alpha.initial[:, 0]
    beta0 = sol.affine.beta.initial[0, 0]
    return float(np.trace(Phi0 @ p.Sigma0) + mu0 @ Phi0 @ mu0 + alpha0 @ mu0 + beta0)


def moment_cost(pol: Policy) -> float:
    """Expected cost of ``pol`` from the closed-loop mean and covariance ODEs.

    Independent of the simulator: the closed-loop covariance is integrated
    with the policy's own feedback matrices and the running cost is
    integrated with Simpson's rule on nodes and midpoints.
    """
    p = pol.problem
    grid = pol.grid
    times = grid.times
    mids = times[:-1] + 0.5 * grid.dt
    at_nodes = control_schedule(pol, times, hermite=True)
    at_mids = control_schedule(pol, mids, hermite=True)

    def closed_loop(sched):
        return p.A + sum(p.B[i] @ sched.full[i] for i in range(p.N))

    Acl = StageTable(MatrixTrajectory(grid, closed_loop(at_nodes)), closed_loop(at_mids))
    D = symmetrize(p.diffusion())

    def rhs(t, S):
        M = Acl(t)
        return D + M @ S + S @ M.T

    Sigma = integrate_ode(rhs, p.Sigma0, grid, "forward", symmetric=True)
    mu_n = pol.moments.mu.values[:, :, 0]
    mu_m = pol.moments.mu.midpoints()[:, :, 0]

    def rate(sched, S, mu):
        out = np.einsum("ij,tji->t", p.Q, S) + np.einsum("ti,ij,tj->t", mu, p.Q, mu)
        for i in range(p.N):
            F, ff, R = sched.full[i], sched.feedthrough[i], p.R[i]
            out += np.einsum("tki,kl,tlj,tji->t", F, R, F, S) + np.einsum("ti,ij,tj->t", ff, R, ff)
        return out

    f_n = rate(at_nodes, Sigma.values, mu_n)
    f_m = rate(at_mids, Sigma.midpoints(), mu_m)
    running = grid.dt / 6.0 * float(np.sum(f_n[:-1] + 4.0 * f_m + f_n[1:]))
    ST, muT = Sigma.terminal, mu_n[-1]
    return running + float(np.trace(p.P @ ST) + muT @ p.P @ muT)
