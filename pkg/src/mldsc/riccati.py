"""Backward Riccati-type solvers and the affine terms of the quadratic value function."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ContractError
from .model import LqgProblem, require_valid
from .moments import (
    Engine,
    GainBlock,
    GainRule,
    gain_from_indices,
    gain_structure,
    gains_from_indices,
    pack_blocks,
    raise_kernel_status,
)
from .numerics import MatrixTrajectory, StageTable, TimeGrid, default_grid, integrate_ode, symmetrize


@dataclass(frozen=True)
class GainTrajectories:
    Psi: MatrixTrajectory
    Phi: MatrixTrajectory | None = None
    Pi: MatrixTrajectory | None = None


@dataclass(frozen=True)
class AffineValueTerms:
    alpha: MatrixTrajectory
    beta: MatrixTrajectory


def solve_riccati(p: LqgProblem, grid: TimeGrid | None = None, engine: Engine = "compiled") -> MatrixTrajectory:
    """Standard Riccati flow ``-Psi' = Q + A'Psi + Psi A - Psi B R^{-1} B' Psi``, ``Psi(T) = P``."""
    require_valid(p)
    grid = grid or default_grid(p.T)
    A, Q, brb = p.A, p.Q, symmetrize(p.total_control_weight())
    if engine == "compiled":
        # the coupled kernel with no gain blocks is the plain Riccati flow; the covariance is never read
        d, n = p.d_s, grid.n_steps
        vals, ders, status, node = _kernels.backward_phi(
            np.ascontiguousarray(p.P), np.zeros((n + 1, d, d)), np.zeros((n, d, d)), grid.dt,
            np.ascontiguousarray(Q), np.ascontiguousarray(A), brb,
            np.zeros(0, dtype=np.int64), np.zeros(1, dtype=np.int64), np.zeros((0, d, d)),
        )
        raise_kernel_status(status, node, "Riccati backward pass", grid)
        return MatrixTrajectory(grid, vals, ders, symmetric=True)
    if engine != "python":
        raise ContractError(f"unknown engine {engine!r}")

    def rhs(t, X):
        XA = X @ A
        return -(Q + XA + XA.T - X @ brb @ X)

    return integrate_ode(rhs, p.P, grid, "backward", symmetric=True)


def coupling_term(Phi_t: np.ndarray, K_i: np.ndarray, B_i: np.ndarray, R_ii: np.ndarray) -> np.ndarray:
    """``(I - K_i)' Phi B_i R_ii^{-1} B_i' Phi (I - K_i)``."""
    Phi_t, K_i, B_i, R_ii = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (Phi_t, K_i, B_i, R_ii))
    d = Phi_t.shape[0]
    if Phi_t.shape != (d, d) or K_i.shape != (d, d) or B_i.shape[0] != d or R_ii.shape != (B_i.shape[1],) * 2:
        raise ContractError(
            f"inconsistent shapes: Phi {Phi_t.shape}, K {K_i.shape}, B {B_i.shape}, R {R_ii.shape}"
        )
    G = B_i.T @ Phi_t @ (np.eye(d) - K_i)
    return symmetrize(G.T @ np.linalg.solve(R_ii, G))


def _coupled_backward(
    p: LqgProblem, Sigma: MatrixTrajectory, blocks: list[GainBlock], engine: Engine
) -> MatrixTrajectory:
    grid = Sigma.grid
    A, Q, brb = p.A, p.Q, symmetrize(p.total_control_weight())
    if engine == "compiled":
        idx_flat, offsets, Ms = pack_blocks(blocks)
        nodes = np.ascontiguousarray(Sigma.values)
        mids = np.ascontiguousarray(Sigma.midpoints())
        vals, ders, status, node = _kernels.backward_phi(
            np.ascontiguousarray(p.P), nodes, mids, grid.dt, np.ascontiguousarray(Q), np.ascontiguousarray(A),
            brb, idx_flat, offsets, Ms,
        )
        raise_kernel_status(status, node, "gain backward pass", grid)
        return MatrixTrajectory(grid, vals, ders, symmetric=True)
    if engine != "python":
        raise ContractError(f"unknown engine {engine!r}")
    sig = StageTable(Sigma)
    d = p.d_s
    eye = np.eye(d)

    def rhs(t, X):
        XA = X @ A
        out = Q + XA + XA.T - X @ brb @ X
        S = sig(t)
        for b in blocks:
            if b.indices.size == d:
                continue
            E = eye - gain_from_indices(S, b.indices)
            out = out + E.T @ (X @ b.weight @ X) @ E
        return -out

    return integrate_ode(rhs, p.P, grid, "backward", symmetric=True)


def _check_sigma(p: LqgProblem, Sigma: MatrixTrajectory) -> None:
    if Sigma.shape != (p.d_s, p.d_s):
        raise ContractError(f"Sigma trajectory has shape {Sigma.shape}, expected {(p.d_s, p.d_s)}")


def solve_decentralized_riccati(
    p: LqgProblem, Sigma: MatrixTrajectory, identity_override: bool = False, engine: Engine = "compiled"
) -> MatrixTrajectory:
    """``Phi``: Riccati flow plus ``sum_i Q_i`` with per-controller gains built from ``Sigma``.

    ``identity_override`` forces every ``K_i = I`` (the coupling then vanishes).
    """
    _check_sigma(p, Sigma)
    rule = GainRule.IDENTITY if identity_override else GainRule.PER_CONTROLLER
    return _coupled_backward(p, Sigma, gain_structure(p, rule), engine)


def solve_po_riccati(
    p: LqgProblem, Sigma: MatrixTrajectory, identity_override: bool = False, engine: Engine = "compiled"
) -> MatrixTrajectory:
    """``Pi``: Riccati flow plus the joint-memory coupling term."""
    _check_sigma(p, Sigma)
    rule = GainRule.IDENTITY if identity_override else GainRule.JOINT
    return _coupled_backward(p, Sigma, gain_structure(p, rule), engine)


def solve_coupled_riccati(
    p: LqgProblem, Sigma: MatrixTrajectory, gain_rule: GainRule, engine: Engine = "compiled"
) -> MatrixTrajectory:
    _check_sigma(p, Sigma)
    return _coupled_backward(p, Sigma, gain_structure(p, gain_rule), engine)


def summed_coupling(p: LqgProblem, Phis: np.ndarray, Sigmas: np.ndarray, gain_rule: GainRule) -> np.ndarray:
    """``sum_i Q_i`` for stacks of ``Phi`` and ``Sigma`` values."""
    d = p.d_s
    out = np.zeros_like(Phis)
    for b in gain_structure(p, gain_rule):
        if b.indices.size == d:
            continue
        E = np.eye(d) - gains_from_indices(Sigmas, b.indices)
        W = Phis @ b.weight @ Phis
        out += np.swapaxes(E, 1, 2) @ W @ E
    return 0.5 * (out + np.swapaxes(out, 1, 2))


def solve_affine_terms(
    p: LqgProblem,
    Phi: MatrixTrajectory,
    mu: MatrixTrajectory,
    Sigma: MatrixTrajectory | None = None,
    gain_rule: GainRule = GainRule.PER_CONTROLLER,
) -> AffineValueTerms:
    """Linear and constant parts of the value function, integrated backward from zero.

    ``-alpha' = (A - B R^{-1} B' Phi)' alpha - 2 Qc mu`` and
    ``-beta' = tr(Phi sigma sigma') - alpha' B R^{-1} B' alpha / 4 + mu' Qc mu``,
    with ``Qc`` the summed coupling term built from ``Phi`` and the gains of
    ``Sigma``. ``Sigma`` may be omitted only under the identity rule.
    """
    grid = Phi.grid
    if mu.grid != grid or (Sigma is not None and Sigma.grid != grid):
        raise ContractError("Phi, mu and Sigma must share one grid")
    d = p.d_s
    A, D, brb = p.A, symmetrize(p.diffusion()), symmetrize(p.total_control_weight())
    rule = GainRule(gain_rule)
    phi_nodes, phi_mids = Phi.values, Phi.midpoints()
    if rule is GainRule.IDENTITY:
        qc_nodes = np.zeros_like(phi_nodes)
        qc_mids = np.zeros_like(phi_mids)
    else:
        if Sigma is None:
            raise ContractError("Sigma is required to build the coupling term")
        qc_nodes = summed_coupling(p, phi_nodes, Sigma.values, rule)
        qc_mids = summed_coupling(p, phi_mids, Sigma.midpoints(), rule)
    phi = StageTable(Phi)
    mus = StageTable(mu)
    qc = StageTable(MatrixTrajectory(grid, qc_nodes), qc_mids)

    def rhs(t, y):
        a = y[:d]
        Ph, m, Qc = phi(t), mus(t), qc(t)
        da = -((A - brb @ Ph).T @ a - 2.0 * Qc @ m)
        db = -(np.trace(Ph @ D) - 0.25 * (a.T @ brb @ a)[0, 0] + (m.T @ Qc @ m)[0, 0])
        return np.vstack([da, [[db]]])

    y = integrate_ode(rhs, np.zeros((d + 1, 1)), grid, "backward")
    alpha = MatrixTrajectory(grid, y.values[:, :d], y.derivs[:, :d])
    beta = MatrixTrajectory(grid, y.values[:, d:], y.derivs[:, d:])
    return AffineValueTerms(alpha, beta)


def value_function(Phi: MatrixTrajectory, terms: AffineValueTerms, t: float, s) -> float:
    """``s' Phi(t) s + alpha(t)' s + beta(t)``."""
    s = np.asarray(s, dtype=float).reshape(-1)
    Ph = Phi.at(t)
    a = terms.alpha.at(t)[:, 0]
    b = terms.beta.at(t)[0, 0]
    return float(s @ Ph @ s + a @ s + b)
